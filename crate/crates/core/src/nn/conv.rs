//! Strided and transposed 2-D convolutions (NCHW) with spectrally normalized
//! kernels.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Gradients, TensorId, TensorStore};
use super::spectral::{power_iteration, sigma_estimate, spectral_backward};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfolds `x` into a `(C·k·k) × (N·Ho·Wo)` patch matrix.
pub fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let plane = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a patch matrix back into an `N×C×H×W` image,
/// summing overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let ncols = n * ho * wo;
    assert_eq!(cols.dim(), (c * k * k, ncols), "col2im shape");
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let s = &src[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let plane = &mut xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let s_row = &s[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let d_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in s_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                d_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(C, N·H·W)` matrix view of an NCHW tensor.
fn channels_first(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("contiguous")
}

/// Inverse of [`channels_first`].
fn from_channels_first(m: Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    m.into_shape_with_order((c, n, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// A kernel `[out, in, k, k]` with persistent power-iteration vectors.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    pub weight: TensorId,
    pub bias: TensorId,
    pub u: TensorId,
    pub v: TensorId,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

/// Normalized kernel together with what its backward pass needs.
#[derive(Debug, Clone)]
pub struct NormalizedKernel {
    /// `(out) × (in·k·k)`
    pub matrix: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub sigma: f64,
}

impl SpectralKernel {
    /// Allocates the kernel with fan-in scaled normal weights, zero bias, a
    /// random unit `u` and `v = normalize(Wᵀu)`.
    pub fn init<R: Rng>(
        name: &str,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        params: &mut TensorStore,
        buffers: &mut TensorStore,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        let mut u = Array1::from_shape_simple_fn(out_channels, || rng.sample::<f64, _>(StandardNormal));
        let norm = u.dot(&u).sqrt();
        u /= norm;
        let mat = w
            .view()
            .into_shape_with_order((out_channels, in_channels * kernel * kernel))
            .expect("contiguous");
        let mut v = mat.t().dot(&u);
        let vn = v.dot(&v).sqrt();
        if vn > 0.0 {
            v /= vn;
        }
        let weight = params.push(format!("{name}.weight"), w.into_dyn());
        let bias = params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        let u = buffers.push(format!("{name}.sn_u"), u.into_dyn());
        let v = buffers.push(format!("{name}.sn_v"), v.into_dyn());
        Self {
            weight,
            bias,
            u,
            v,
            out_channels,
            in_channels,
            kernel,
        }
    }

    fn cols(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn raw_matrix(&self, params: &TensorStore) -> Array2<f64> {
        params
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.cols()))
            .expect("contiguous kernel")
            .to_owned()
    }

    fn vec(buffers: &TensorStore, id: TensorId) -> Array1<f64> {
        buffers
            .get(id)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d buffer")
            .to_owned()
    }

    pub fn normalized(&self, params: &TensorStore, buffers: &TensorStore) -> NormalizedKernel {
        let raw = self.raw_matrix(params);
        let u = Self::vec(buffers, self.u);
        let v = Self::vec(buffers, self.v);
        let sigma = sigma_estimate(raw.view(), u.view(), v.view());
        NormalizedKernel {
            matrix: raw / sigma,
            u,
            v,
            sigma,
        }
    }

    /// One power-iteration step on the current raw weight.
    pub fn power_iterate(&self, params: &TensorStore, buffers: &mut TensorStore) {
        let raw = self.raw_matrix(params);
        let u = Self::vec(buffers, self.u);
        let v = Self::vec(buffers, self.v);
        let (u, v) = power_iteration(raw.view(), u.view(), v.view());
        *buffers.get_mut(self.u) = u.into_dyn();
        *buffers.get_mut(self.v) = v.into_dyn();
    }

    fn bias(&self, params: &TensorStore) -> Array1<f64> {
        params
            .get(self.bias)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d bias")
            .to_owned()
    }

    fn accumulate(&self, norm: &NormalizedKernel, grad_matrix: Array2<f64>, grad_bias: Array1<f64>, grads: &mut Gradients) {
        let gw = spectral_backward(
            grad_matrix.view(),
            norm.matrix.view(),
            norm.u.view(),
            norm.v.view(),
            norm.sigma,
        );
        let gw = gw
            .into_shape_with_order((self.out_channels, self.in_channels, self.kernel, self.kernel))
            .expect("kernel shape")
            .into_dyn();
        grads.add_to(self.weight, &gw);
        grads.add_to(self.bias, &grad_bias.into_dyn());
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    cols: Array2<f64>,
    kernel: NormalizedKernel,
}

/// Spectrally normalized 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: SpectralKernel,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Array4<f64>, params: &TensorStore, buffers: &TensorStore) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.kernel.in_channels, "conv input channels");
        let k = self.kernel.kernel;
        let ho = conv_out_len(h, k, self.stride, self.pad);
        let wo = conv_out_len(w, k, self.stride, self.pad);
        let norm = self.kernel.normalized(params, buffers);
        let cols = im2col(x, k, self.stride, self.pad, ho, wo);
        let mut y = norm.matrix.dot(&cols);
        let bias = self.kernel.bias(params);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *b;
        }
        let y = from_channels_first(y, n, ho, wo);
        (
            y,
            ConvCache {
                input_dim: (n, c, h, w),
                out_hw: (ho, wo),
                cols,
                kernel: norm,
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache, grad_out: &Array4<f64>, grads: &mut Gradients) -> Array4<f64> {
        let (n, c, h, w) = cache.input_dim;
        let (ho, wo) = cache.out_hw;
        let gy = channels_first(grad_out);
        let gw = gy.dot(&cache.cols.t());
        let gb = gy.sum_axis(Axis(1));
        let gcols = cache.kernel.matrix.t().dot(&gy);
        self.kernel.accumulate(&cache.kernel, gw, gb, grads);
        col2im(&gcols, n, c, h, w, self.kernel.kernel, self.stride, self.pad, ho, wo)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTransposeCache {
    input_dim: (usize, usize, usize, usize),
    x_mat: Array2<f64>,
    /// `(in) × (out·k·k)` layout of the normalized kernel.
    wt: Array2<f64>,
    kernel: NormalizedKernel,
}

/// Spectrally normalized transposed convolution. The kernel is stored as
/// `[out, in, k, k]` so its matrix view matches [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: SpectralKernel,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    fn in_major(&self, m: &Array2<f64>) -> Array2<f64> {
        let k = &self.kernel;
        m.view()
            .into_shape_with_order((k.out_channels, k.in_channels, k.kernel, k.kernel))
            .expect("kernel shape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k.in_channels, k.out_channels * k.kernel * k.kernel))
            .expect("contiguous")
    }

    fn out_major(&self, m: Array2<f64>) -> Array2<f64> {
        let k = &self.kernel;
        m.into_shape_with_order((k.in_channels, k.out_channels, k.kernel, k.kernel))
            .expect("kernel shape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k.out_channels, k.in_channels * k.kernel * k.kernel))
            .expect("contiguous")
    }

    pub fn forward(
        &self,
        x: &Array4<f64>,
        params: &TensorStore,
        buffers: &TensorStore,
    ) -> (Array4<f64>, ConvTransposeCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.kernel.in_channels, "transposed conv input channels");
        let k = self.kernel.kernel;
        let ho = conv_transpose_out_len(h, k, self.stride, self.pad);
        let wo = conv_transpose_out_len(w, k, self.stride, self.pad);
        let norm = self.kernel.normalized(params, buffers);
        let wt = self.in_major(&norm.matrix);
        let x_mat = channels_first(x);
        let cols = wt.t().dot(&x_mat);
        let mut y = col2im(&cols, n, self.kernel.out_channels, ho, wo, k, self.stride, self.pad, h, w);
        let bias = self.kernel.bias(params);
        for mut img in y.axis_iter_mut(Axis(0)) {
            for (mut plane, b) in img.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                plane += *b;
            }
        }
        (
            y,
            ConvTransposeCache {
                input_dim: (n, c, h, w),
                x_mat,
                wt,
                kernel: norm,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache,
        grad_out: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let (n, _c, h, w) = cache.input_dim;
        let k = self.kernel.kernel;
        let gcols = im2col(grad_out, k, self.stride, self.pad, h, w);
        let gx = cache.wt.dot(&gcols);
        let gwt = cache.x_mat.dot(&gcols.t());
        let gw = self.out_major(gwt);
        let gb = grad_out.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        self.kernel.accumulate(&cache.kernel, gw, gb, grads);
        from_channels_first(gx, n, h, w)
    }
}

/// Reinterprets a dynamic tensor as a matrix.
pub fn as_matrix(t: &ArrayD<f64>) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d tensor").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &Array4<f64>, w: &Array4<f64>, b: &[f64], stride: usize, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = conv_out_len(h, k, stride, pad);
        let wo = conv_out_len(wd, k, stride, pad);
        let mut y = Array4::zeros((n, o, ho, wo));
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[[oc, ic, ky, kx]] * x[[bi, ic, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn setup(out: usize, inp: usize, k: usize) -> (SpectralKernel, TensorStore, TensorStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = TensorStore::new();
        let mut b = TensorStore::new();
        let kernel = SpectralKernel::init("c", out, inp, k, &mut p, &mut b, &mut rng);
        *p.get_mut(kernel.bias) = ndarray::arr1(&(0..out).map(|i| 0.1 * i as f64).collect::<Vec<_>>()).into_dyn();
        (kernel, p, b)
    }

    fn random_input(dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (kernel, p, b) = setup(3, 2, 4);
        let conv = Conv2d { kernel: kernel.clone(), stride: 2, pad: 1 };
        let x = random_input((2, 2, 6, 8));
        let (y, _) = conv.forward(&x, &p, &b);
        let norm = kernel.normalized(&p, &b);
        let w4 = norm.matrix.clone().into_shape_with_order((3, 2, 4, 4)).unwrap();
        let expected = direct_conv(&x, &w4, &[0.0, 0.1, 0.2], 2, 1);
        assert_eq!(y.dim(), (2, 3, 3, 4));
        for (a, e) in y.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <convT(x), y> == <x, conv(y)> with the same kernel and zero bias
        let (kernel, mut p, b) = setup(3, 2, 4);
        *p.get_mut(kernel.bias) = ArrayD::zeros(IxDyn(&[3]));
        // convT maps 2 -> 3 channels; its adjoint conv maps 3 -> 2 with kernel [in=2... ]
        let convt = ConvTranspose2d { kernel: kernel.clone(), stride: 2, pad: 1 };
        let x = random_input((1, 2, 3, 4));
        let (y, _) = convt.forward(&x, &p, &b);
        assert_eq!(y.dim(), (1, 3, 6, 8));
        let probe = random_input((1, 3, 6, 8));
        let norm = kernel.normalized(&p, &b);
        let w4 = norm.matrix.clone().into_shape_with_order((3, 2, 4, 4)).unwrap();
        // adjoint conv kernel: [2, 3, k, k]
        let wadj = w4.view().permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned();
        let back = direct_conv(&probe, &wadj, &[0.0, 0.0], 2, 1);
        let lhs: f64 = y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(64, 4, 2, 1), 32);
        assert_eq!(conv_transpose_out_len(32, 4, 2, 1), 64);
        assert_eq!(conv_out_len(64, 3, 1, 1), 64);
    }
}
