//! Browser demo: cut-mix compositing, spectral-norm power iteration and
//! latent sampling on a small generator, exported through wasm-bindgen.

use ndarray::{Array1, Array2, Array3, Axis};
use nowcast_core::archive::ImageTensor;
use nowcast_core::losses::{compose_with_mask, sample_cut_mask};
use nowcast_core::models::{Generator, GeneratorConfig, GeneratorInput, LatentSpec, CONDITION_CHANNELS};
use nowcast_core::nn::spectral::{power_iteration, sigma_estimate};
use nowcast_core::nn::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn rgba(img: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(nowcast_core::archive::to_u8(img[[c, y, x]]));
            }
            out.push(255);
        }
    }
    out
}

/// A synthetic landscape in `[-1, 1]`, channel-first: sky gradient, a ridge
/// line and a green valley floor.
pub fn landscape(height: usize, width: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.08..0.2);
    Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let fy = y as f64 / height.max(1) as f64;
        let fx = x as f64 / width.max(1) as f64;
        let ridge = 0.55 + amp * (fx * 9.0 + phase).sin() + 0.05 * (fx * 23.0).cos();
        let v = if fy < ridge {
            [0.2 + 0.5 * fy, 0.45 + 0.4 * fy, 0.95][c]
        } else if fy < ridge + 0.08 {
            [0.35, 0.33, 0.3][c]
        } else {
            [0.2, 0.5 - 0.2 * fy, 0.15][c]
        };
        2.0 * v - 1.0
    })
}

/// A second scene: overcast sky with a darker palette and pixel noise.
pub fn overcast(height: usize, width: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let base = landscape(height, width, seed);
    base.mapv(|v| {
        let grey = 0.5 * v - 0.1;
        (grey + rng.random_range(-0.08..0.08)).clamp(-1.0, 1.0)
    })
}

/// Real and generated scenes, the cut mask, and their composite.
#[wasm_bindgen]
pub struct CutMixView {
    real: Vec<u8>,
    fake: Vec<u8>,
    mask: Vec<u8>,
    composite: Vec<u8>,
    real_fraction: f64,
}

#[wasm_bindgen]
impl CutMixView {
    pub fn real(&self) -> Vec<u8> {
        self.real.clone()
    }
    pub fn fake(&self) -> Vec<u8> {
        self.fake.clone()
    }
    /// White where the composite shows the real scene.
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
    pub fn composite(&self) -> Vec<u8> {
        self.composite.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn real_fraction(&self) -> f64 {
        self.real_fraction
    }
}

/// Draws one cut mask and composites the two demo scenes with it.
#[wasm_bindgen]
pub fn cutmix_demo(height: usize, width: usize, seed: u64) -> CutMixView {
    let (height, width) = (height.max(1), width.max(1));
    let real = landscape(height, width, 7);
    let fake = overcast(height, width, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = sample_cut_mask(height, width, &mut rng);
    let composite = compose_with_mask(real.view(), fake.view(), &mask);
    let mask_img = Array3::from_shape_fn((3, height, width), |(_, y, x)| 2.0 * mask[[y, x]] - 1.0);
    CutMixView {
        real: rgba(&real),
        fake: rgba(&fake),
        mask: rgba(&mask_img),
        composite: rgba(&composite),
        real_fraction: mask.mean().unwrap_or(0.0),
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows.max(1), cols.max(1)), || rng.sample(StandardNormal))
}

fn unit(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Singular-value estimates σ̂ₖ of a random Gaussian matrix after
/// k = 1..=steps power iterations from a random unit vector. The last
/// element is the estimate after 5000 iterations, used as the reference.
#[wasm_bindgen]
pub fn power_iteration_trace(rows: usize, cols: usize, steps: usize, seed: u64) -> Vec<f64> {
    let w = random_matrix(rows, cols, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut u = unit(w.nrows(), &mut rng);
    let mut v = Array1::from_elem(w.ncols(), 1.0 / (w.ncols() as f64).sqrt());
    let mut trace = Vec::with_capacity(steps + 1);
    for k in 0..steps.max(5000) {
        (u, v) = power_iteration(w.view(), u.view(), v.view());
        if k < steps {
            trace.push(sigma_estimate(w.view(), u.view(), v.view()));
        }
    }
    trace.push(sigma_estimate(w.view(), u.view(), v.view()));
    trace
}

/// Generator demo with untrained weights: all outputs come from the same
/// scene and forecast and differ only in the latent draw.
#[wasm_bindgen]
pub struct GeneratorDemo {
    generator: Generator,
    scene: ImageTensor,
}

pub const DEMO_HEIGHT: usize = 16;
pub const DEMO_WIDTH: usize = 32;

#[wasm_bindgen]
impl GeneratorDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<GeneratorDemo, JsError> {
        let config = GeneratorConfig {
            stages: 2,
            base_channels: 8,
            latent_dim: 8,
            latent_channels: 4,
            input_h: DEMO_HEIGHT,
            input_w: DEMO_WIDTH,
        };
        let generator = Generator::new(config, seed).map_err(|e| JsError::new(&e.to_string()))?;
        let data = landscape(DEMO_HEIGHT, DEMO_WIDTH, seed).permuted_axes([1, 2, 0]).to_owned();
        let scene = ImageTensor::new(data).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Self { generator, scene })
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        DEMO_HEIGHT
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        DEMO_WIDTH
    }

    /// The conditioning scene as RGBA.
    pub fn scene(&self) -> Vec<u8> {
        rgba(&self.scene.to_nchw().index_axis(Axis(0), 0).to_owned())
    }

    /// `count` samples at latent scale `sigma`, laid side by side as one
    /// RGBA image of width `count · width`.
    pub fn samples(&self, sigma: f64, count: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        let frames = self.sample_frames(sigma, count.max(1), seed).map_err(|e| JsError::new(&e.to_string()))?;
        let (h, w) = (DEMO_HEIGHT, DEMO_WIDTH);
        let strip = Array3::from_shape_fn((3, h, w * frames.len()), |(c, y, x)| frames[x / w][[c, y, x % w]]);
        Ok(rgba(&strip))
    }

    /// Mean absolute difference between pairs of samples at `sigma`.
    pub fn spread(&self, sigma: f64, pairs: usize, seed: u64) -> Result<f64, JsError> {
        let frames = self
            .sample_frames(sigma, 2 * pairs.max(1), seed)
            .map_err(|e| JsError::new(&e.to_string()))?;
        let total: f64 = frames
            .chunks(2)
            .map(|p| (&p[0] - &p[1]).mapv(f64::abs).mean().unwrap_or(0.0))
            .sum();
        Ok(total / pairs.max(1) as f64)
    }
}

impl GeneratorDemo {
    fn sample_frames(&self, sigma: f64, count: usize, seed: u64) -> nowcast_core::Result<Vec<Array3<f64>>> {
        let latent = LatentSpec::new(self.generator.config.latent_dim, sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = self.scene.to_nchw();
        let image = ndarray::Array4::from_shape_fn((count, 3, DEMO_HEIGHT, DEMO_WIDTH), |(_, c, y, x)| one[[0, c, y, x]]);
        let input = GeneratorInput {
            image,
            condition: Array2::from_elem((count, CONDITION_CHANNELS), 0.0),
            z: latent.sample(count, &mut rng),
        };
        let (out, _) = self.generator.forward(&input, Mode::Eval)?;
        Ok(out.axis_iter(Axis(0)).map(|a| a.to_owned()).collect())
    }
}
