use ndarray::{Array1, Array4, ArrayD, Axis, Ix1, IxDyn};

use super::{Layer, Mode, Param, Real};

const EPS: f64 = 1e-5;

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<Cache<T>>,
}

struct Cache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            gamma: Param::weight(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::weight(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            cache: None,
        }
    }

    fn vec(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
        p.value.view().into_dimensionality::<Ix1>().expect("1-D")
    }
}

fn per_channel<T: Real>(x: &Array4<T>, c: usize, v: &Array1<T>) -> Array4<T> {
    let mut out = x.clone();
    for (ci, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        let s = v[ci];
        plane.mapv_inplace(|a| a * s);
    }
    debug_assert_eq!(x.dim().1, c);
    out
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm: channels");
        let count = (n * h * w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
                    let m = plane.iter().fold(0.0, |a, &v| a + v.to_f64().unwrap()) / count;
                    let v = plane.iter().fold(0.0, |a, &v| {
                        let d = v.to_f64().unwrap() - m;
                        a + d * d
                    }) / count;
                    mean[ci] = T::of(m);
                    var[ci] = T::of(v);
                }
                let mom = T::of(self.momentum);
                let unbias = T::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                let mut rm = self.running_mean.value.view_mut().into_dimensionality::<Ix1>().expect("1-D");
                rm.zip_mut_with(&mean, |r, &m| *r = (T::one() - mom) * *r + mom * m);
                let mut rv = self.running_var.value.view_mut().into_dimensionality::<Ix1>().expect("1-D");
                rv.zip_mut_with(&var, |r, &v| *r = (T::one() - mom) * *r + mom * v * unbias);
                (mean, var)
            }
            Mode::Eval => (Self::vec(&self.running_mean).to_owned(), Self::vec(&self.running_var).to_owned()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + T::of(EPS)).sqrt());
        let mut xhat = x.clone();
        for (ci, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[ci], inv_std[ci]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (gamma[ci], beta[ci]);
            plane.mapv_inplace(|v| v * g + b);
        }
        self.cache = Some(Cache { xhat, inv_std, mode });
        y
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let cache = self.cache.as_ref().expect("batchnorm backward before forward");
        let (n, c, h, w) = grad.dim();
        let count = T::of((n * h * w) as f64);
        let mut sum_dy = Array1::<T>::zeros(c);
        let mut sum_dy_xhat = Array1::<T>::zeros(c);
        for ci in 0..c {
            let g = grad.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            sum_dy[ci] = g.sum();
            sum_dy_xhat[ci] = ndarray::Zip::from(&g).and(&xh).fold(T::zero(), |a, &g, &x| a + g * x);
        }
        if self.gamma.wants_grad() {
            self.gamma.grad.zip_mut_with(&sum_dy_xhat.clone().into_dyn(), |a, &b| *a += b);
            self.beta.grad.zip_mut_with(&sum_dy.clone().into_dyn(), |a, &b| *a += b);
        }
        let gamma = Self::vec(&self.gamma);
        match cache.mode {
            Mode::Eval => {
                let scale = Array1::from_shape_fn(c, |ci| gamma[ci] * cache.inv_std[ci]);
                per_channel(grad, c, &scale)
            }
            Mode::Train => {
                let mut dx = grad.clone();
                for (ci, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                    let xh = cache.xhat.index_axis(Axis(1), ci);
                    let k = gamma[ci] * cache.inv_std[ci] / count;
                    let (sd, sdx) = (sum_dy[ci], sum_dy_xhat[ci]);
                    ndarray::Zip::from(&mut plane).and(&xh).for_each(|d, &x| {
                        *d = k * (count * *d - sd - x * sdx);
                    });
                }
                dx
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn name(&self) -> &'static str {
        "batchnorm2d"
    }
}
