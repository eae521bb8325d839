use ndarray::{Array1, Array4, ArrayD, Axis, Ix1, IxDyn};

use super::params::{Gradients, TensorId, TensorStore};
use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub running_mean: TensorId,
    pub running_var: TensorId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    gamma: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    count: usize,
    mode: Mode,
}

fn vec1(t: &ArrayD<f64>) -> Array1<f64> {
    t.view().into_dimensionality::<Ix1>().expect("1-d tensor").to_owned()
}

impl BatchNorm2d {
    pub fn init(name: &str, channels: usize, params: &mut TensorStore, buffers: &mut TensorStore) -> Self {
        Self {
            gamma: params.push(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: params.push(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: buffers.push(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: buffers.push(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            channels,
        }
    }

    pub fn forward(
        &self,
        x: &Array4<f64>,
        mode: Mode,
        params: &TensorStore,
        buffers: &TensorStore,
    ) -> (Array4<f64>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channels");
        let count = n * h * w;
        let gamma = vec1(params.get(self.gamma));
        let beta = vec1(params.get(self.beta));
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let plane = x.index_axis(Axis(1), ch);
                    let m = plane.sum() / count as f64;
                    let v = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
            Mode::Eval => (
                vec1(buffers.get(self.running_mean)),
                vec1(buffers.get(self.running_var)),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * s);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                gamma,
                batch_mean: mean,
                batch_var: var,
                count,
                mode,
            },
        )
    }

    pub fn backward(&self, cache: &BatchNormCache, grad_out: &Array4<f64>, grads: &mut Gradients) -> Array4<f64> {
        let c = self.channels;
        let m = cache.count as f64;
        let mut gx = grad_out.clone();
        let mut g_gamma = Array1::zeros(c);
        let mut g_beta = Array1::zeros(c);
        for ch in 0..c {
            let gy = grad_out.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_gy = gy.sum();
            let sum_gy_xh: f64 = gy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            g_gamma[ch] = sum_gy_xh;
            g_beta[ch] = sum_gy;
            let scale = cache.gamma[ch] * cache.inv_std[ch];
            let mut out = gx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    ndarray::Zip::from(&mut out).and(&gy).and(&xh).for_each(|o, &g, &x| {
                        *o = scale / m * (m * g - sum_gy - x * sum_gy_xh);
                    });
                }
                Mode::Eval => out.mapv_inplace(|g| g * scale),
            }
        }
        grads.add_to(self.gamma, &g_gamma.into_dyn());
        grads.add_to(self.beta, &g_beta.into_dyn());
        gx
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates. Eval-mode caches are ignored.
    pub fn commit(&self, cache: &BatchNormCache, buffers: &mut TensorStore) {
        if cache.mode != Mode::Train {
            return;
        }
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        let rm = buffers.get_mut(self.running_mean);
        for (r, &b) in rm.iter_mut().zip(cache.batch_mean.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let rv = buffers.get_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(cache.batch_var.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut p = TensorStore::new();
        let mut b = TensorStore::new();
        let bn = BatchNorm2d::init("bn", 2, &mut p, &mut b);
        let x = Array4::from_shape_fn((2, 2, 2, 3), |(n, c, h, w)| (n * 7 + c * 3 + h * 2 + w) as f64 * (c + 1) as f64);
        let (y, cache) = bn.forward(&x, Mode::Train, &p, &b);
        for ch in 0..2 {
            let plane = y.index_axis(Axis(1), ch);
            let mean = plane.mean().unwrap();
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        bn.commit(&cache, &mut b);
        assert!(b.get(bn.running_mean).iter().all(|v| *v > 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = TensorStore::new();
        let mut b = TensorStore::new();
        let bn = BatchNorm2d::init("bn", 2, &mut p, &mut b);
        *p.get_mut(bn.gamma) = ndarray::arr1(&[1.5, -0.5]).into_dyn();
        *p.get_mut(bn.beta) = ndarray::arr1(&[0.2, 0.1]).into_dyn();
        let x = Array4::from_shape_fn((2, 2, 2, 2), |(n, c, h, w)| ((n * 13 + c * 5 + h * 3 + w * 7) % 11) as f64 * 0.3 - 1.0);
        let probe = Array4::from_shape_fn((2, 2, 2, 2), |(n, c, h, w)| ((n + 2 * c + 3 * h + 5 * w) % 7) as f64 - 3.0);
        let loss = |x: &Array4<f64>| {
            let (y, _) = bn.forward(x, Mode::Train, &p, &b);
            y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = bn.forward(&x, Mode::Train, &p, &b);
        let mut grads = p.zeros_like();
        let gx = bn.backward(&cache, &probe, &mut grads);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - gx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }
}
