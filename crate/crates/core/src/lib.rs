//! Photographic visualization of weather forecasts: a conditional GAN that
//! transforms a present webcam image into future images given NWP
//! descriptors, together with regression and analog-retrieval baselines and
//! the human-evaluation protocols used to judge the results.

pub mod analog;
pub mod archive;
pub mod checkpoint;
pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod selftest;
pub mod synthesis;
pub mod train;

pub use error::{Error, Result};
