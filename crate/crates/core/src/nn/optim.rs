use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// L2 penalty folded into the gradient before the moment updates.
    #[default]
    Coupled,
    /// Penalty applied directly to the weights, outside the moments.
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, decay_mode: WeightDecayMode) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, decay_mode }
    }
}

/// Moment estimates, one pair per trainable parameter in visit order.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: AdamState::default() }
    }

    /// One update over every trainable weight of `model`, using its
    /// accumulated gradients.
    pub fn step<T: Real, M: ParamSet<T> + ?Sized>(&mut self, model: &mut M) {
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut i = 0;
        let state = &mut self.state;
        model.visit_params_mut(&mut |p| {
            if p.kind != ParamKind::Weight || !p.trainable {
                return;
            }
            if state.m.len() <= i {
                state.m.push(ArrayD::zeros(p.value.raw_dim()));
                state.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                let wf = w.to_f64().unwrap();
                let mut gf = g.to_f64().unwrap();
                if c.decay_mode == WeightDecayMode::Coupled {
                    gf += c.weight_decay * wf;
                }
                let mf = c.beta1 * *m as f64 + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * *v as f64 + (1.0 - c.beta2) * gf * gf;
                *m = mf as f32;
                *v = vf as f32;
                let mut nw = wf - c.lr * (mf / bc1) / ((vf / bc2).sqrt() + c.eps);
                if c.decay_mode == WeightDecayMode::Decoupled {
                    nw -= c.lr * c.weight_decay * wf;
                }
                *w = T::of(nw);
            });
            i += 1;
        });
    }
}
