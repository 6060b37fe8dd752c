use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;

use super::{init::he_normal, Layer, Mode, Param, Real};

/// Fully connected layer over the flattened C×H×W input; output is N×out×1×1.
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        // Classification heads use the fan-in normal without the ReLU gain.
        let mut w = he_normal::<T, _>(&[out_features, in_features], in_features, rng);
        w.mapv_inplace(|v| v * T::of(std::f64::consts::FRAC_1_SQRT_2));
        Self { in_features, out_features, weight: Param::weight(w), bias: Param::weight(ndarray::ArrayD::zeros(IxDyn(&[out_features]))), cache: None }
    }

    pub fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().expect("linear weight is 2-D")
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let dim = x.dim();
        let n = dim.0;
        assert_eq!(dim.1 * dim.2 * dim.3, self.in_features, "linear: input features");
        let flat = x.as_standard_layout().into_owned().into_shape_with_order((n, self.in_features)).expect("flatten");
        let mut y = Array2::zeros((n, self.out_features));
        general_mat_mul(T::one(), &flat, &self.weight2().t(), T::zero(), &mut y);
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D bias");
        y += &b;
        self.cache = Some((flat, dim));
        y.into_shape_with_order((n, self.out_features, 1, 1)).expect("reshape")
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (flat, dim) = self.cache.as_ref().expect("linear backward before forward");
        let n = dim.0;
        let g = grad.as_standard_layout().into_owned().into_shape_with_order((n, self.out_features)).expect("flatten");
        if self.weight.wants_grad() {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            general_mat_mul(T::one(), &g.t(), flat, T::one(), &mut dw);
            let db = g.sum_axis(Axis(0));
            self.bias.grad.zip_mut_with(&db.into_dyn(), |a, &b| *a += b);
        }
        let mut dx = Array2::zeros((n, self.in_features));
        general_mat_mul(T::one(), &g, &self.weight2(), T::zero(), &mut dx);
        dx.into_shape_with_order(*dim).expect("reshape")
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
        "linear"
    }
}
