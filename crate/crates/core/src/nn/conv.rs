use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{init::he_normal, Layer, Mode, Param, Real};

/// Geometry of a 2-D convolution over an `h_in × w_in` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Output columns `ox` in `lo..hi` read input column `ox + kx − pad` in range
/// (stride 1).
fn valid_span(kx: usize, pad: usize, w_in: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w_in + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

/// Unfold `x` (N×C×H×W, standard layout) into a `(C·k·k) × (N·Ho·Wo)` matrix.
pub fn im2col<T: Real>(x: &[T], batch: usize, g: &ConvGeom) -> Array2<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = g.h_in * g.w_in;
    let ncols = batch * ho * wo;
    let mut out = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h_in as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w_in..][..g.w_in];
                        let dst_row = &mut dst[(b * ho + oy) * wo..][..wo];
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g.pad, g.w_in, wo);
                            if lo < hi {
                                dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - g.pad..hi + kx - g.pad]);
                            }
                            continue;
                        }
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w_in {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-add columns back into an N×C×H×W tensor.
pub fn col2im<T: Real>(cols: ArrayView2<T>, batch: usize, g: &ConvGeom) -> Array4<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = g.h_in * g.w_in;
    let ncols = batch * ho * wo;
    assert_eq!(cols.dim(), (g.rows(), ncols), "col2im: column matrix shape");
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); batch * g.channels * plane];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut out[(b * g.channels + c) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h_in as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w_in..][..g.w_in];
                        let src_row = &src[(b * ho + oy) * wo..][..wo];
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g.pad, g.w_in, wo);
                            if lo < hi {
                                let d = &mut dst_row[lo + kx - g.pad..hi + kx - g.pad];
                                d.iter_mut().zip(&src_row[lo..hi]).for_each(|(d, &s)| *d += s);
                            }
                            continue;
                        }
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w_in {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((batch, g.channels, g.h_in, g.w_in), out).expect("col2im shape")
}

/// `(N, C, H, W)` → `(C, N·H·W)`.
fn channels_first<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let p = x.view().permuted_axes([1, 0, 2, 3]);
    p.as_standard_layout().into_owned().into_shape_with_order((c, n * h * w)).expect("reshape")
}

/// `(C, N·H·W)` → `(N, C, H, W)`.
fn batch_first<T: Real>(m: Array2<T>, n: usize, h: usize, w: usize) -> Array4<T> {
    let c = m.nrows();
    let t = m.into_shape_with_order((c, n, h, w)).expect("reshape");
    t.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

fn contiguous<T: Real>(x: &Array4<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.as_standard_layout().iter().copied().collect()),
    }
}

pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out_ch, in_ch·k·k)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Array2<T>, ConvGeom, usize)>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal::<T, _>(&[out_ch, fan_in], fan_in, rng);
        Self { in_ch, out_ch, kernel, stride, pad, weight: Param::weight(w), bias: Param::weight(ndarray::ArrayD::zeros(IxDyn(&[out_ch]))), cache: None }
    }

    /// Multiply initial weights by `scale` (used for small-output heads).
    pub fn scaled(mut self, scale: f64) -> Self {
        self.weight.value.mapv_inplace(|v| v * T::of(scale));
        self
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().expect("conv weight is 2-D")
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv2d: input channels");
        let g = ConvGeom { channels: c, h_in: h, w_in: w, kernel: self.kernel, stride: self.stride, pad: self.pad };
        let cols = im2col(&contiguous(x), n, &g);
        let mut y = Array2::zeros((self.out_ch, cols.ncols()));
        general_mat_mul(T::one(), &self.weight2(), &cols, T::zero(), &mut y);
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let (ho, wo) = (g.h_out(), g.w_out());
        self.cache = Some((cols, g, n));
        batch_first(y, n, ho, wo)
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (cols, g, n) = self.cache.as_ref().expect("conv2d backward before forward");
        let dy = channels_first(grad);
        if self.weight.wants_grad() {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            general_mat_mul(T::one(), &dy, &cols.t(), T::one(), &mut dw);
            let db: Array1<T> = dy.sum_axis(Axis(1));
            self.bias.grad.zip_mut_with(&db.into_dyn(), |a, &b| *a += b);
        }
        let mut dcols = Array2::zeros(cols.dim());
        general_mat_mul(T::one(), &self.weight2().t(), &dy, T::zero(), &mut dcols);
        col2im(dcols.view(), *n, g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

/// Transposed convolution; output side is `(H−1)·s − 2p + k`.
pub struct ConvTranspose2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(in_ch, out_ch·k·k)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Array2<T>, ConvGeom, usize, usize, usize)>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        // Each output pixel receives about in_ch·(k/s)² contributions.
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let w = he_normal::<T, _>(&[in_ch, out_ch * kernel * kernel], fan_in, rng);
        Self { in_ch, out_ch, kernel, stride, pad, weight: Param::weight(w), bias: Param::weight(ndarray::ArrayD::zeros(IxDyn(&[out_ch]))), cache: None }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().expect("deconv weight is 2-D")
    }
}

impl<T: Real> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv_transpose2d: input channels");
        let ho = self.output_size(h).expect("deconv output size");
        let wo = self.output_size(w).expect("deconv output size");
        let g = ConvGeom { channels: self.out_ch, h_in: ho, w_in: wo, kernel: self.kernel, stride: self.stride, pad: self.pad };
        debug_assert_eq!((g.h_out(), g.w_out()), (h, w));
        let xm = channels_first(x);
        let mut cols = Array2::zeros((g.rows(), n * h * w));
        general_mat_mul(T::one(), &self.weight2().t(), &xm, T::zero(), &mut cols);
        let mut y = col2im(cols.view(), n, &g);
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        for mut img in y.outer_iter_mut() {
            for (mut plane, &b) in img.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
        }
        self.cache = Some((xm, g, n, h, w));
        y
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (xm, g, n, h, w) = self.cache.as_ref().expect("deconv backward before forward");
        let dcols = im2col(&contiguous(grad), *n, g);
        if self.weight.wants_grad() {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            general_mat_mul(T::one(), xm, &dcols.t(), T::one(), &mut dw);
            let db = grad.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
            self.bias.grad.zip_mut_with(&db.into_dyn(), |a, &b| *a += b);
        }
        let mut dx = Array2::zeros((self.in_ch, dcols.ncols()));
        general_mat_mul(T::one(), &self.weight2(), &dcols, T::zero(), &mut dx);
        batch_first(dx, *n, *h, *w)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn naive_conv(x: &Array4<f64>, wt: &Array2<f64>, b: &[f64], oc: usize, k: usize, s: usize, p: usize) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut y = Array4::zeros((n, oc, ho, wo));
        for bi in 0..n {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, (ci * k + ky) * k + kx]] * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, &mut rng);
            conv.bias.value.mapv_inplace(|_| 0.25);
            let x = random4(&mut rng, (2, 3, 7, 6));
            let y = conv.forward(&x, Mode::Eval);
            let wt: Array2<f64> = conv.weight.value.clone().into_dimensionality().unwrap();
            let expect = naive_conv(&x, &wt, &[0.25; 4], 4, k, s, p);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom { channels: 2, h_in: 5, w_in: 4, kernel: 3, stride: 2, pad: 1 };
        let x = random4(&mut rng, (2, 2, 5, 4));
        let cols = im2col(x.as_slice().unwrap(), 2, &g);
        let r = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &r).sum();
        let back = col2im(r.view(), 2, &g);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn deconv_is_adjoint_of_conv_without_bias() {
        // <conv(x), y> == <x, deconv(y)> when both share one weight tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(3, 5, 2, 2, 0, &mut rng);
        let mut de = ConvTranspose2d::<f64>::new(5, 3, 2, 2, 0, &mut rng);
        // conv weight (5, 3·2·2) equals deconv weight (in=5, out·k·k=3·2·2).
        de.weight.value = conv.weight.value.clone();
        let x = random4(&mut rng, (1, 3, 8, 8));
        let y = random4(&mut rng, (1, 5, 4, 4));
        let cx = conv.forward(&x, Mode::Eval);
        let dy = de.forward(&y, Mode::Eval);
        assert_eq!(dy.dim(), (1, 3, 8, 8));
        let lhs = (&cx * &y).sum();
        let rhs = (&x * &dy).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn deconv_output_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = ConvTranspose2d::<f32>::new(2, 2, 4, 2, 1, &mut rng);
        assert_eq!(d.output_size(8), Some(16));
        let d = ConvTranspose2d::<f32>::new(2, 2, 3, 2, 0, &mut rng);
        assert_eq!(d.output_size(8), Some(17));
    }
}
