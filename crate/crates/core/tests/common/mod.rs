#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{Array2, Array4};
use nowcast_core::archive::{FrameRef, TupleRef};
use nowcast_core::descriptor::{time_encoding, DescriptorSource, WeatherDescriptor, CYCLIC_DIM, DESCRIPTOR_DIM};
use nowcast_core::models::{DiscriminatorConfig, GeneratorConfig, CONDITION_CHANNELS};
use nowcast_core::nn::TensorStore;
use nowcast_core::train::{Batch, OptimizerSettings, TrainConfig, TrainingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2019, 6, 1, 0, 0, 0).unwrap()
}

pub fn at_minutes(m: i64) -> DateTime<Utc> {
    epoch() + Duration::minutes(m)
}

pub fn frame(m: i64) -> FrameRef {
    FrameRef {
        site_id: "site".into(),
        timestamp: at_minutes(m),
        path: PathBuf::from(format!("f{m}.png")),
    }
}

/// Descriptor with the proper time encoding and given NWP values.
pub fn descriptor(t: DateTime<Utc>, nwp: &[f64], normalizer: Option<&str>) -> WeatherDescriptor {
    let mut vector = [0.0; DESCRIPTOR_DIM];
    vector[..CYCLIC_DIM].copy_from_slice(&time_encoding(t));
    for (v, x) in vector[CYCLIC_DIM..].iter_mut().zip(nwp) {
        *v = *x;
    }
    WeatherDescriptor {
        vector,
        valid_time: t,
        normalizer: normalizer.map(String::from),
    }
}

/// Descriptor source that covers every instant.
pub struct Everywhere;

impl DescriptorSource for Everywhere {
    fn descriptor_at(&self, t: DateTime<Utc>) -> Option<WeatherDescriptor> {
        Some(descriptor(t, &[], None))
    }
}

/// Exhaustive tuple enumeration: every ordered frame pair with admissible
/// lead, by `t₀` then lead.
pub fn brute_force_tuples(frames: &[FrameRef], max_lead: u32, step: u32) -> Vec<(DateTime<Utc>, DateTime<Utc>, u32)> {
    let mut out = Vec::new();
    for a in frames {
        let mut pairs: Vec<_> = frames
            .iter()
            .filter_map(|b| {
                let lead = (b.timestamp - a.timestamp).num_minutes();
                (lead >= 0 && lead <= max_lead as i64 && lead % step as i64 == 0).then_some((a.timestamp, b.timestamp, lead as u32))
            })
            .collect();
        pairs.sort_by_key(|p| p.2);
        out.extend(pairs);
    }
    out
}

pub fn tuple_key(t: &TupleRef) -> (DateTime<Utc>, DateTime<Utc>, u32) {
    (t.t0, t.t, t.lead_minutes)
}

/// Random archive on the 10-minute grid: each slot present with
/// probability `keep`.
pub fn random_frames(rng: &mut ChaCha8Rng, slots: usize, keep: f64) -> Vec<FrameRef> {
    (0..slots)
        .filter(|_| rng.random_bool(keep))
        .map(|i| frame(10 * i as i64))
        .collect()
}

pub fn toy_generator() -> GeneratorConfig {
    GeneratorConfig {
        stages: 1,
        base_channels: 4,
        latent_dim: 4,
        latent_channels: 2,
        input_h: 4,
        input_w: 8,
    }
}

pub fn toy_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        stages: 1,
        base_channels: 4,
        input_h: 4,
        input_w: 8,
    }
}

pub fn toy_config(mode: TrainingMode, steps: u64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        mode,
        seed: 11,
        optimizer: OptimizerSettings {
            batch_size,
            steps,
            ..Default::default()
        },
        generator: toy_generator(),
        discriminator: toy_discriminator(),
        ..Default::default()
    }
}

pub fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        i0: Array4::from_shape_simple_fn((n, 3, h, w), || rng.random_range(-0.9..0.9)),
        it: Array4::from_shape_simple_fn((n, 3, h, w), || rng.random_range(-0.9..0.9)),
        condition: Array2::from_shape_simple_fn((n, CONDITION_CHANNELS), || rng.random_range(-1.5..1.5)),
        manifest: (0..n).map(|i| format!("toy-{i}")).collect(),
    }
}

/// Central differences of `f` w.r.t. every scalar of the store selected by
/// `store`, flattened in store order.
pub fn finite_difference<M: Clone>(
    model: &M,
    store: impl Fn(&mut M) -> &mut TensorStore,
    f: impl Fn(&M) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut m = model.clone();
    let shapes: Vec<usize> = store(&mut m).values().iter().map(|v| v.len()).collect();
    let mut out = Vec::new();
    for (t, &n) in shapes.iter().enumerate() {
        for i in 0..n {
            let orig = *store(&mut m).scalar_mut(t, i);
            *store(&mut m).scalar_mut(t, i) = orig + h;
            let fp = f(&m);
            *store(&mut m).scalar_mut(t, i) = orig - h;
            let fm = f(&m);
            *store(&mut m).scalar_mut(t, i) = orig;
            out.push((fp - fm) / (2.0 * h));
        }
    }
    out
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

pub fn flatten(g: &nowcast_core::nn::Gradients) -> Vec<f64> {
    g.tensors.iter().flat_map(|t| t.iter().copied()).collect()
}

/// Brute-force nearest entry: full scan with the earliest index winning ties.
pub fn brute_individual(vectors: &[[f64; DESCRIPTOR_DIM]], q: &[f64; DESCRIPTOR_DIM]) -> usize {
    let d: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|x| *x == min).unwrap()
}
