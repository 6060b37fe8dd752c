use ndarray::{Array4, Axis};

use super::{Layer, Mode, Param, Real};

/// 2×2 max pooling with stride 2.
#[derive(Default)]
pub struct MaxPool2d<T> {
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
    _t: std::marker::PhantomData<T>,
}

impl<T> MaxPool2d<T> {
    pub fn new() -> Self {
        Self { argmax: None, _t: std::marker::PhantomData }
    }
}

impl<T: Real> Layer<T> for MaxPool2d<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                    out.push(xs[best]);
                    idx.push(best);
                }
            }
        }
        self.argmax = Some((idx, (n, c, h, w)));
        Array4::from_shape_vec((n, c, ho, wo), out).expect("pool shape")
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (idx, dim) = self.argmax.as_ref().expect("maxpool backward before forward");
        let mut dx = vec![T::zero(); dim.0 * dim.1 * dim.2 * dim.3];
        let g = grad.as_standard_layout();
        for (&i, &gv) in idx.iter().zip(g.iter()) {
            dx[i] += gv;
        }
        Array4::from_shape_vec(*dim, dx).expect("pool shape")
    }

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
}

/// 2×2 average pooling with stride 2.
#[derive(Default)]
pub struct AvgPool2d<T> {
    dim: Option<(usize, usize, usize, usize)>,
    _t: std::marker::PhantomData<T>,
}

impl<T> AvgPool2d<T> {
    pub fn new() -> Self {
        Self { dim: None, _t: std::marker::PhantomData }
    }
}

impl<T: Real> Layer<T> for AvgPool2d<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        self.dim = Some((n, c, h, w));
        let q = T::of(0.25);
        Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ci, y, xx)| {
            (x[[b, ci, 2 * y, 2 * xx]] + x[[b, ci, 2 * y, 2 * xx + 1]] + x[[b, ci, 2 * y + 1, 2 * xx]] + x[[b, ci, 2 * y + 1, 2 * xx + 1]]) * q
        })
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let dim = self.dim.expect("avgpool backward before forward");
        let q = T::of(0.25);
        Array4::from_shape_fn(dim, |(b, ci, y, x)| if y / 2 < grad.dim().2 && x / 2 < grad.dim().3 { grad[[b, ci, y / 2, x / 2]] * q } else { T::zero() })
    }

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    fn name(&self) -> &'static str {
        "avgpool2d"
    }
}

/// Spatial mean per channel: N×C×H×W → N×C×1×1.
#[derive(Default)]
pub struct GlobalAvgPool<T> {
    dim: Option<(usize, usize, usize, usize)>,
    _t: std::marker::PhantomData<T>,
}

impl<T> GlobalAvgPool<T> {
    pub fn new() -> Self {
        Self { dim: None, _t: std::marker::PhantomData }
    }
}

impl<T: Real> Layer<T> for GlobalAvgPool<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        self.dim = Some((n, c, h, w));
        let inv = T::of(1.0 / (h * w) as f64);
        let s = x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv);
        s.into_shape_with_order((n, c, 1, 1)).expect("reshape")
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = self.dim.expect("gap backward before forward");
        let inv = T::of(1.0 / (h * w) as f64);
        Array4::from_shape_fn((n, c, h, w), |(b, ci, _, _)| grad[[b, ci, 0, 0]] * inv)
    }

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
}
