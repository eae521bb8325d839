//! Adversarial objectives, cut-mix compositing and the L1 regression loss.
//!
//! All sums over patches, pixels and batch elements are means. Every term
//! returns its value together with the gradient w.r.t. its inputs.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::models::DiscriminatorOutput;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;
/// Largest fraction of the image covered by the cut rectangle.
pub const MAX_CUT_AREA: f64 = 0.5;

/// A composite of real and generated discriminator input stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixComposite {
    /// `(C, H, W)`
    pub composite: Array3<f64>,
    /// `(H, W)`; 1 where the pixel comes from the real stack.
    pub mask: Array2<f64>,
}

/// Selects `real` where `mask == 1` and `fake` elsewhere, identically on
/// every channel.
pub fn compose_with_mask(real: ArrayView3<f64>, fake: ArrayView3<f64>, mask: &Array2<f64>) -> Array3<f64> {
    assert_eq!(real.dim(), fake.dim(), "stacks must share a shape");
    let (c, h, w) = real.dim();
    assert_eq!(mask.dim(), (h, w), "mask must match spatial size");
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        if mask[[y, x]] >= 0.5 {
            real[[k, y, x]]
        } else {
            fake[[k, y, x]]
        }
    })
}

/// Draws one axis-aligned rectangle (uniform center, area fraction uniform in
/// `[0, 0.5]`, clipped at the borders) and decides at random whether the
/// rectangle holds real or generated pixels.
pub fn sample_cut_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Array2<f64> {
    let area: f64 = rng.random_range(0.0..=MAX_CUT_AREA);
    let side = area.sqrt();
    let rh = (h as f64 * side).floor() as i64;
    let rw = (w as f64 * side).floor() as i64;
    let cy = rng.random_range(0..h) as i64;
    let cx = rng.random_range(0..w) as i64;
    let rect_is_real: bool = rng.random();
    let (y0, x0) = (cy - rh / 2, cx - rw / 2);
    let (y1, x1) = (y0 + rh, x0 + rw);
    let (inside, outside) = if rect_is_real { (1.0, 0.0) } else { (0.0, 1.0) };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as i64, x as i64);
        if y >= y0 && y < y1 && x >= x0 && x < x1 {
            inside
        } else {
            outside
        }
    })
}

pub fn cutmix<R: Rng + ?Sized>(real: ArrayView3<f64>, fake: ArrayView3<f64>, rng: &mut R) -> CutMixComposite {
    let (_, h, w) = real.dim();
    let mask = sample_cut_mask(h, w, rng);
    CutMixComposite {
        composite: compose_with_mask(real, fake, &mask),
        mask,
    }
}

/// Batched cut-mix: one independent composite per batch element.
/// Returns the `(N, C, H, W)` composite and the `(N, 1, H, W)` mask.
pub fn cutmix_batch<R: Rng + ?Sized>(real: &Array4<f64>, fake: &Array4<f64>, rng: &mut R) -> (Array4<f64>, Array4<f64>) {
    let (n, _, h, w) = real.dim();
    let mut composite = Array4::zeros(real.dim());
    let mut masks = Array4::zeros((n, 1, h, w));
    for b in 0..n {
        let cm = cutmix(real.index_axis(Axis(0), b), fake.index_axis(Axis(0), b), rng);
        composite.index_axis_mut(Axis(0), b).assign(&cm.composite);
        masks.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), 0).assign(&cm.mask);
    }
    (composite, masks)
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `mean[t·log p + (1−t)·log(1−p)]` with its gradient w.r.t. `p`. The
/// gradient vanishes where clamping is active.
fn log_likelihood(p: &Array4<f64>, target: impl Fn(usize) -> f64) -> (f64, Array4<f64>) {
    let n = p.len() as f64;
    let mut grad = Array4::zeros(p.dim());
    let mut total = 0.0;
    for (i, (g, &pi)) in grad.iter_mut().zip(p.iter()).enumerate() {
        let t = target(i);
        let c = clamp(pi);
        total += t * c.ln() + (1.0 - t) * (1.0 - c).ln();
        if c == pi {
            *g = (t / c - (1.0 - t) / (1.0 - c)) / n;
        }
    }
    (total / n, grad)
}

/// Mean `log Dp(real)` over patches and batch.
pub fn real_patch_term(patch: &Array4<f64>) -> (f64, Array4<f64>) {
    log_likelihood(patch, |_| 1.0)
}

/// Mean `log(1 − Dp(fake))`.
pub fn fake_patch_term(patch: &Array4<f64>) -> (f64, Array4<f64>) {
    log_likelihood(patch, |_| 0.0)
}

/// Mean pixel-wise `M log D(C) + (1−M) log(1 − D(C))`.
pub fn cutmix_pixel_term(pixel: &Array4<f64>, mask: &Array4<f64>) -> (f64, Array4<f64>) {
    assert_eq!(pixel.dim(), mask.dim());
    let m = mask.as_standard_layout();
    let flat = m.as_slice().expect("standard layout");
    log_likelihood(pixel, |i| flat[i])
}

/// Discriminator objective components (to be maximized).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorTerms {
    pub real_patch: f64,
    pub fake_patch: f64,
    /// `None` when no composite was drawn this step.
    pub cutmix_pixel: Option<f64>,
}

impl DiscriminatorTerms {
    pub fn total(&self) -> f64 {
        self.real_patch + self.fake_patch + self.cutmix_pixel.unwrap_or(0.0)
    }
}

/// Mean `|a − b|` and its gradient w.r.t. `a` (the gradient w.r.t. `b` is
/// the negation).
pub fn mean_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> (f64, Array4<f64>) {
    assert_eq!(a.dim(), b.dim());
    let n = a.len() as f64;
    let mut grad = Array4::zeros(a.dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(a).and(b).for_each(|g, &x, &y| {
        let d = x - y;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    });
    (total / n, grad)
}

/// Generator loss components. `patch` and `pixel` are the mean fooling log
/// likelihoods averaged over both latent draws; `diversity` is the mean
/// absolute difference of the two generated images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub patch: f64,
    pub pixel: f64,
    pub diversity: f64,
    pub lambda: f64,
}

impl GeneratorTerms {
    /// The value minimized by the generator.
    pub fn loss(&self) -> f64 {
        -self.patch - self.pixel - self.lambda * self.diversity
    }

    pub fn adversarial(&self) -> f64 {
        -self.patch - self.pixel
    }
}

/// Gradients of the generator loss w.r.t. the discriminator outputs on both
/// fakes and w.r.t. both generated images (diversity part only).
#[derive(Debug, Clone)]
pub struct GeneratorLossGrads {
    pub patch: [Array4<f64>; 2],
    pub pixel: [Array4<f64>; 2],
    pub image: [Array4<f64>; 2],
}

pub fn generator_loss(
    d_fake: [&DiscriminatorOutput; 2],
    fakes: [&Array4<f64>; 2],
    lambda: f64,
) -> (GeneratorTerms, GeneratorLossGrads) {
    let mut patch = 0.0;
    let mut pixel = 0.0;
    let mut g_patch = Vec::with_capacity(2);
    let mut g_pixel = Vec::with_capacity(2);
    for out in d_fake {
        let (v, g) = log_likelihood(&out.patch, |_| 1.0);
        patch += 0.5 * v;
        g_patch.push(g.mapv(|x| -0.5 * x));
        let (v, g) = log_likelihood(&out.pixel, |_| 1.0);
        pixel += 0.5 * v;
        g_pixel.push(g.mapv(|x| -0.5 * x));
    }
    let (diversity, g_div) = mean_abs_diff(fakes[0], fakes[1]);
    let g1 = g_div.mapv(|x| -lambda * x);
    let g2 = -&g1;
    let [p1, p2]: [Array4<f64>; 2] = g_patch.try_into().expect("two fakes");
    let [x1, x2]: [Array4<f64>; 2] = g_pixel.try_into().expect("two fakes");
    (
        GeneratorTerms {
            patch,
            pixel,
            diversity,
            lambda,
        },
        GeneratorLossGrads {
            patch: [p1, p2],
            pixel: [x1, x2],
            image: [g1, g2],
        },
    )
}

/// Mean absolute difference over pixels and channels, with its gradient
/// w.r.t. `generated`.
pub fn l1_regression_loss(generated: &Array4<f64>, target: &Array4<f64>) -> (f64, Array4<f64>) {
    mean_abs_diff(generated, target)
}
