//! Minimal convolutional network toolkit with explicit backward passes.
//!
//! Every layer caches what it needs during `forward` and consumes that cache
//! in `backward`, which returns the gradient with respect to the layer input
//! and accumulates parameter gradients for trainable parameters. Tensors are
//! NCHW `Array4` values.

mod activation;
mod block;
mod conv;
mod init;
mod linear;
mod norm;
mod optim;
mod pool;

use ndarray::{Array4, ArrayD, NdFloat};
use num_traits::FromPrimitive;

pub use activation::{Relu, Tanh};
pub use block::{DenseBlock, Residual, Sequential};
pub use conv::{col2im, im2col, Conv2d, ConvGeom, ConvTranspose2d};
pub use init::he_normal;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamConfig, AdamState, WeightDecayMode};
pub use pool::{AvgPool2d, GlobalAvgPool, MaxPool2d};

/// Floating point element type usable by the layers (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: NdFloat + FromPrimitive + Default {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates.
    Train,
    /// Running statistics; deterministic.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn weight(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, kind: ParamKind::Weight, trainable: true }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Self { grad: ArrayD::zeros(ndarray::IxDyn(&[0])), value, kind: ParamKind::Buffer, trainable: false }
    }

    /// True when backward should accumulate into `grad`.
    pub fn wants_grad(&self) -> bool {
        self.kind == ParamKind::Weight && self.trainable
    }

    pub fn zero_grad(&mut self) {
        if self.kind == ParamKind::Weight {
            self.grad.fill(T::zero());
        }
    }
}

pub trait Layer<T: Real>: Send {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T>;

    /// Gradient w.r.t. the input of the most recent `forward` call.
    fn backward(&mut self, grad: &Array4<T>) -> Array4<T>;

    fn visit(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn name(&self) -> &'static str;
}

/// Helpers shared by any parameterized model built from layers.
pub trait ParamSet<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(&mut |p| {
            if p.kind == ParamKind::Weight {
                p.trainable = trainable;
            }
        });
    }

    /// Number of trainable scalars (buffers excluded).
    fn num_weights(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.kind == ParamKind::Weight {
                n += p.value.len();
            }
        });
        n
    }

    /// Flattened copy of every parameter and buffer, in visit order.
    fn flat_state(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.value.iter().copied()));
        out
    }
}

macro_rules! layer_param_set {
    ($($ty:ty),*) => {$(
        impl<T: Real> ParamSet<T> for $ty {
            fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
                self.visit(f)
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
                self.visit_mut(f)
            }
        }
    )*};
}

layer_param_set!(dyn Layer<T> + '_, Sequential<T>, Linear<T>, Conv2d<T>);

#[cfg(test)]
mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    fn probe(x: &Array4<f64>, r: &Array4<f64>, net: &mut dyn Layer<f64>, mode: Mode) -> f64 {
        (&net.forward(x, mode) * r).sum()
    }

    /// Central differences on the input and on a few parameters.
    fn check(net: &mut dyn Layer<f64>, x: Array4<f64>, mode: Mode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = net.forward(&x, mode);
        let r = rand4(&mut rng, y.dim());
        net.zero_grad();
        net.forward(&x, mode);
        let dx = net.backward(&r);
        let h = 1e-5;
        for _ in 0..6 {
            let idx = rng.random_range(0..x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (probe(&xp, &r, net, mode) - probe(&xm, &r, net, mode)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "{}: input fd {fd} vs {an}", net.name());
        }
        let mut grads = Vec::new();
        net.visit_params(&mut |p| {
            if p.wants_grad() {
                grads.push(p.grad.clone());
            }
        });
        for (pi, g) in grads.iter().enumerate() {
            let j = rng.random_range(0..g.len());
            let bump = |net: &mut dyn Layer<f64>, d: f64| {
                let mut k = 0;
                net.visit_params_mut(&mut |p| {
                    if p.wants_grad() {
                        if k == pi {
                            p.value.as_slice_mut().unwrap()[j] += d;
                        }
                        k += 1;
                    }
                });
            };
            bump(net, h);
            let fp = probe(&x, &r, net, mode);
            bump(net, -2.0 * h);
            let fm = probe(&x, &r, net, mode);
            bump(net, h);
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice().unwrap()[j];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "{} param {pi}: fd {fd} vs {an}", net.name());
        }
    }

    #[test]
    fn conv_bn_pool_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Sequential::new()
            .push(Conv2d::new(3, 4, 3, 1, 1, &mut rng))
            .push(BatchNorm2d::new(4))
            .push(Relu::new())
            .push(MaxPool2d::new())
            .push(ConvTranspose2d::new(4, 2, 2, 2, 0, &mut rng))
            .push(Tanh::new());
        let x = rand4(&mut rng, (3, 3, 6, 6));
        // Train-mode BN updates running stats on every call; gradients only
        // depend on batch statistics so the check is unaffected.
        check(&mut net, x.clone(), Mode::Train, 1);
        check(&mut net, x, Mode::Eval, 2);
    }

    #[test]
    fn residual_and_dense_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let body = Sequential::new().push(Conv2d::new(3, 3, 3, 1, 1, &mut rng)).push(BatchNorm2d::new(3));
        let down =
            Sequential::new().push(Conv2d::new(3, 5, 3, 2, 1, &mut rng)).push(BatchNorm2d::new(5)).push(Relu::new()).push(Conv2d::new(5, 5, 3, 1, 1, &mut rng));
        let shortcut = Sequential::new().push(Conv2d::new(3, 5, 1, 2, 0, &mut rng));
        let units =
            (0..2).map(|i| Sequential::new().push(BatchNorm2d::new(5 + 2 * i)).push(Relu::new()).push(Conv2d::new(5 + 2 * i, 2, 3, 1, 1, &mut rng))).collect();
        let mut net = Sequential::new()
            .push(Residual::new(body, None))
            .push(Residual::new(down, Some(shortcut)))
            .push(DenseBlock::new(units, 2))
            .push(AvgPool2d::new())
            .push(GlobalAvgPool::new())
            .push(Linear::new(9, 4, &mut rng));
        let x = rand4(&mut rng, (2, 3, 8, 8));
        check(&mut net, x, Mode::Train, 3);
    }
}
