use ndarray::Array4;

use super::{Layer, Mode, Param, Real};

#[derive(Default)]
pub struct Relu<T> {
    mask: Option<Array4<bool>>,
    _t: std::marker::PhantomData<T>,
}

impl<T> Relu<T> {
    pub fn new() -> Self {
        Self { mask: None, _t: std::marker::PhantomData }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        self.mask = Some(x.mapv(|v| v > T::zero()));
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mask = self.mask.as_ref().expect("relu backward before forward");
        let mut g = grad.clone();
        g.zip_mut_with(mask, |g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        g
    }

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    fn name(&self) -> &'static str {
        "relu"
    }
}

/// Bounded squashing to (-1, 1).
#[derive(Default)]
pub struct Tanh<T> {
    out: Option<Array4<T>>,
}

impl<T> Tanh<T> {
    pub fn new() -> Self {
        Self { out: None }
    }
}

impl<T: Real> Layer<T> for Tanh<T> {
    fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        let y = x.mapv(|v| v.tanh());
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let y = self.out.as_ref().expect("tanh backward before forward");
        let mut g = grad.clone();
        g.zip_mut_with(y, |g, &y| *g *= T::one() - y * y);
        g
    }

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    fn name(&self) -> &'static str {
        "tanh"
    }
}
