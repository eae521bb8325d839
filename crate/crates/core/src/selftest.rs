//! Fast built-in consistency checks run by `nowcast selftest`.

use std::path::PathBuf;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{array, Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analog::{AnalogArchive, AnalogEntry};
use crate::archive::{enumerate_tuples, FrameRef};
use crate::checkpoint::Checkpoint;
use crate::descriptor::{time_encoding, DescriptorSource, WeatherDescriptor, CYCLIC_DIM, DESCRIPTOR_DIM};
use crate::evaluation::ConfusionMatrix;
use crate::losses::{compose_with_mask, cutmix, l1_regression_loss};
use crate::models::{DiscriminatorConfig, GeneratorConfig, GeneratorInput, CONDITION_CHANNELS};
use crate::nn::spectral::{power_iteration, sigma_estimate};
use crate::nn::Mode;
use crate::train::{TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail: detail.into(),
    }
}

fn origin() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 6, 1, 0, 0, 0).unwrap()
}

fn plain_descriptor(t: DateTime<Utc>, first: f64) -> WeatherDescriptor {
    let mut vector = [0.0; DESCRIPTOR_DIM];
    vector[..CYCLIC_DIM].copy_from_slice(&time_encoding(t));
    vector[CYCLIC_DIM] = first;
    WeatherDescriptor {
        vector,
        valid_time: t,
        normalizer: Some("selftest".into()),
    }
}

struct Constant;

impl DescriptorSource for Constant {
    fn descriptor_at(&self, t: DateTime<Utc>) -> Option<WeatherDescriptor> {
        Some(plain_descriptor(t, 0.0))
    }
}

fn frame(minutes: i64) -> FrameRef {
    FrameRef {
        site_id: "selftest".into(),
        timestamp: origin() + Duration::minutes(minutes),
        path: PathBuf::from(format!("{minutes}.png")),
    }
}

fn check_cutmix() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let real = Array3::from_shape_fn((4, 6, 10), |(c, y, x)| (c + 2 * y + 3 * x) as f64);
    let fake = -&real;
    let ones = compose_with_mask(real.view(), fake.view(), &Array2::ones((6, 10))) == real;
    let zeros = compose_with_mask(real.view(), fake.view(), &Array2::zeros((6, 10))) == fake;
    let same = (0..50).all(|_| cutmix(real.view(), real.view(), &mut rng).composite == real);
    result("cutmix", ones && zeros && same, format!("M=1 {ones}, M=0 {zeros}, self {same}"))
}

fn check_spectral() -> CheckResult {
    let w: Array2<f64> = array![[2.0, 0.0], [0.0, 1.0]];
    let mut u = Array1::from_elem(2, 1.0 / 2f64.sqrt());
    let mut v = u.clone();
    let mut prev = 0.0;
    let mut monotone = true;
    for _ in 0..30 {
        (u, v) = power_iteration(w.view(), u.view(), v.view());
        let s = sigma_estimate(w.view(), u.view(), v.view());
        monotone &= s >= prev - 1e-15;
        prev = s;
    }
    let ok = monotone && (prev - 2.0).abs() < 1e-9;
    result("spectral", ok, format!("sigma estimate {prev:.12} (2), monotone {monotone}"))
}

fn check_tuples() -> CheckResult {
    let frames: Vec<FrameRef> = (0..100).map(|i| frame(10 * i)).collect();
    match enumerate_tuples(&frames, &Constant, 360, 10) {
        Ok(stream) => {
            let n = stream.count();
            result("tuples", n == 3034, format!("{n} tuples from 100 gapless frames (3034)"))
        }
        Err(e) => result("tuples", false, e.to_string()),
    }
}

fn check_analog() -> CheckResult {
    let entries = [0.0, 1.0, 3.0]
        .iter()
        .enumerate()
        .map(|(i, v)| AnalogEntry {
            frame: frame(10 * i as i64),
            descriptor: plain_descriptor(origin() + Duration::minutes(10 * i as i64), *v),
        })
        .collect();
    let outcome = AnalogArchive::new(entries, "selftest").and_then(|a| {
        let near = a.retrieve_individual(&plain_descriptor(origin(), 0.9))?;
        let exact = a.retrieve_individual(&plain_descriptor(origin() + Duration::minutes(20), 3.0))?;
        Ok((near.index, exact.index, exact.distance))
    });
    match outcome {
        Ok((near, exact, d)) => result(
            "analog",
            near == 1 && exact == 2 && d == 0.0,
            format!("nearest {near} (1), exact {exact} at distance {d}"),
        ),
        Err(e) => result("analog", false, e.to_string()),
    }
}

fn check_confusion() -> CheckResult {
    let acc = ConfusionMatrix::from_counts(57, 18, 43, 32).accuracy();
    result(
        "confusion",
        (acc - 89.0 / 150.0).abs() < 1e-12,
        format!("accuracy {:.2}% (59.33%)", 100.0 * acc),
    )
}

fn toy_state() -> crate::Result<TrainState> {
    let cfg = TrainConfig {
        generator: GeneratorConfig {
            stages: 1,
            base_channels: 4,
            latent_dim: 4,
            latent_channels: 2,
            input_h: 4,
            input_w: 8,
        },
        discriminator: DiscriminatorConfig {
            stages: 1,
            base_channels: 4,
            input_h: 4,
            input_w: 8,
        },
        ..Default::default()
    };
    TrainState::new(cfg, "selftest")
}

fn check_models() -> CheckResult {
    let run = || -> crate::Result<(bool, bool, f64)> {
        let state = toy_state()?;
        let input = GeneratorInput {
            image: Array4::from_elem((2, 3, 4, 8), 0.25),
            condition: Array2::from_elem((2, CONDITION_CHANNELS), 0.5),
            z: Array2::zeros((2, 4)),
        };
        let (out, _) = state.generator.forward(&input, Mode::Eval)?;
        let shape_ok = out.dim() == (2, 3, 4, 8) && out.iter().all(|v| (-1.0..=1.0).contains(v));
        let mut buf = Vec::new();
        state.to_checkpoint().write_to(&mut buf)?;
        let restored = TrainState::from_checkpoint(&Checkpoint::read_from(buf.as_slice())?)?;
        let (l1, _) = l1_regression_loss(&out, &out);
        Ok((shape_ok, restored.checkpoint_id() == state.checkpoint_id(), l1))
    };
    match run() {
        Ok((shape, ckpt, l1)) => result(
            "models",
            shape && ckpt && l1 == 0.0,
            format!("generator shape/range {shape}, checkpoint round trip {ckpt}, L1(x, x) = {l1}"),
        ),
        Err(e) => result("models", false, e.to_string()),
    }
}

/// Runs every check; each finishes well under a second.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_cutmix(),
        check_spectral(),
        check_tuples(),
        check_analog(),
        check_confusion(),
        check_models(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
