//! Training objective: classification consistency, noise magnitude and
//! spatial placement, with analytic gradients w.r.t. the noise image.

#[cfg(test)]
mod oracle;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::cam::{mean_attention, CamMap};
use crate::classifier::{ClassifierModel, ProbVector};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::generator::JndImage;
use crate::nn::{Mode, Real};

/// Guard constant in the magnitude loss.
pub const DEFAULT_Q: f64 = 1e-10;

/// How the spatial loss pairs the CAM weights with the noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss3Mode {
    /// Per-pixel mean |e| over the channels.
    #[default]
    Magnitude,
    /// Per-pixel mean of the signed noise.
    Signed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub q: f64,
}

pub fn total_loss(l1: f64, l2: f64, l3: f64, alpha: f64, beta: f64) -> LossBundle {
    LossBundle { loss1: l1, loss2: l2, loss3: l3, total: l1 + alpha * l2 + beta * l3, alpha, beta, q: DEFAULT_Q }
}

impl LossBundle {
    pub fn recombined(&self) -> f64 {
        self.loss1 + self.alpha * self.loss2 + self.beta * self.loss3
    }
}

/// Softmax over the flattened CAM.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeightVector(pub Vec<f64>);

impl SpatialWeightVector {
    pub fn from_cam<T: Real>(c: ArrayView2<T>) -> Self {
        let vals: Vec<f64> = c.iter().map(|v| v.to_f64().unwrap()).collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / z).collect())
    }
}

fn check_label(l: u8) -> Result<()> {
    if (l as usize) < NUM_CLASSES {
        Ok(())
    } else {
        Err(Error::Argument(format!("label {l} outside [0, {}]", NUM_CLASSES - 1)))
    }
}

/// Batch-mean cross-entropy of `logits` (N×10) against `labels`, with its
/// gradient w.r.t. the logits.
pub fn cross_entropy_with_grad<T: Real>(logits: ArrayView2<T>, labels: &[u8]) -> Result<(f64, Array2<T>)> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &l) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        check_label(l)?;
        let z: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[l as usize];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            *gk = T::of((p - if k == l as usize { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// Loss1 from probability vectors: `probs[n][i]` is classifier n's softmax
/// on distorted image i, `refs[i][n]` its reference label.
pub fn cross_entropy_loss(probs: &[Vec<ProbVector>], refs: &[[u8; 4]]) -> Result<f64> {
    if probs.len() != 4 || probs.iter().any(|p| p.len() != refs.len()) {
        return Err(Error::Argument("need four probability batches matching the reference labels".into()));
    }
    let mut acc = 0.0;
    for (n, batch) in probs.iter().enumerate() {
        let mut s = 0.0;
        for (p, r) in batch.iter().zip(refs) {
            check_label(r[n])?;
            s += -p.0[r[n] as usize].max(f64::MIN_POSITIVE).ln();
        }
        acc += s / refs.len().max(1) as f64;
    }
    Ok(acc / 4.0)
}

/// Loss1 on a distorted batch and its gradient w.r.t. that batch, through
/// the four frozen classifiers in inference mode.
pub fn loss1_with_grad<T: Real>(committee: &mut [ClassifierModel<T>], xhat: &Array4<T>, refs: &[[u8; 4]]) -> Result<(f64, Array4<T>)> {
    let mut grad = Array4::zeros(xhat.raw_dim());
    let mut loss = 0.0;
    let k = committee.len() as f64;
    for (n, model) in committee.iter_mut().enumerate() {
        let labels: Vec<u8> = refs.iter().map(|r| r[n]).collect();
        let logits = model.logits(xhat, Mode::Eval);
        let (l, dl) = cross_entropy_with_grad(logits.view(), &labels)?;
        loss += l / k;
        let dx = model.backward_input(&dl.mapv(|v| v / T::of(k)));
        grad += &dx;
    }
    Ok((loss, grad))
}

/// ln((N² + N0² + q) / (2·N·N0 + q)).
pub fn magnitude_from_terms(n: f64, n0: f64, q: f64) -> f64 {
    ((n * n + n0 * n0 + q) / (2.0 * n * n0 + q)).ln()
}

/// Loss2 for one image and its gradient w.r.t. e (3×H×W).
pub fn magnitude_with_grad<T: Real>(c: ArrayView2<T>, e: ArrayView3<T>, q: f64) -> (f64, Array3<T>) {
    let i = c.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / c.len() as f64;
    let n = 1.0 - i;
    let count = e.len() as f64;
    let n0 = e.iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>() / count;
    let a = n * n + n0 * n0 + q;
    let b = 2.0 * n * n0 + q;
    let dn0 = 2.0 * n0 / a - 2.0 * n / b;
    let scale = dn0 / count;
    (
        (a / b).ln(),
        e.mapv(|v| {
            let s = v.to_f64().unwrap().signum() * (v != T::zero()) as u8 as f64;
            T::of(scale * s)
        }),
    )
}

pub fn magnitude_loss(c: &CamMap, e: &JndImage, q: f64) -> f64 {
    let n = 1.0 - mean_attention(c);
    let n0 = e.values.iter().map(|v| v.abs() as f64).sum::<f64>() / e.values.len() as f64;
    magnitude_from_terms(n, n0, q)
}

/// Loss3 for one image and its gradient w.r.t. e.
pub fn spatial_with_grad<T: Real>(c: ArrayView2<T>, e: ArrayView3<T>, mode: Loss3Mode) -> (f64, Array3<T>) {
    let v = SpatialWeightVector::from_cam(c);
    let (ch, h, w) = e.dim();
    let mut grad = Array3::zeros(e.raw_dim());
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let vi = v.0[y * w + x];
            for k in 0..ch {
                let ek = e[[k, y, x]].to_f64().unwrap();
                let (m, d) = match mode {
                    Loss3Mode::Magnitude => (ek.abs(), if ek == 0.0 { 0.0 } else { ek.signum() }),
                    Loss3Mode::Signed => (ek, 1.0),
                };
                loss += vi * m / ch as f64;
                grad[[k, y, x]] = T::of(vi * d / ch as f64);
            }
        }
    }
    (loss, grad)
}

pub fn spatial_loss(c: &CamMap, e: &JndImage, mode: Loss3Mode) -> f64 {
    spatial_with_grad(c.values.view(), e.values.view(), mode).0
}

/// Batch means of Loss2 and Loss3 and the gradient of α·Loss2 + β·Loss3
/// w.r.t. e. `cams` is N×H×W, `e` is N×3×H×W.
pub fn noise_losses_with_grad<T: Real>(cams: ArrayView3<T>, e: &Array4<T>, q: f64, alpha: f64, beta: f64, mode: Loss3Mode) -> (f64, f64, Array4<T>) {
    let n = e.dim().0 as f64;
    let mut grad = Array4::zeros(e.raw_dim());
    let (mut l2, mut l3) = (0.0, 0.0);
    for ((c, ei), mut g) in cams.outer_iter().zip(e.outer_iter()).zip(grad.outer_iter_mut()) {
        let (a, ga) = magnitude_with_grad(c, ei, q);
        let (b, gb) = spatial_with_grad(c, ei, mode);
        l2 += a / n;
        l3 += b / n;
        let (wa, wb) = (T::of(alpha / n), T::of(beta / n));
        Zip::from(&mut g).and(&ga).and(&gb).for_each(|g, &a, &b| *g = wa * a + wb * b);
    }
    (l2, l3, grad)
}

/// Stack merged CAMs into N×H×W.
pub fn stack_cams(cs: &[CamMap]) -> Array3<f32> {
    let views: Vec<_> = cs.iter().map(|c| c.values.view()).collect();
    ndarray::stack(Axis(0), &views).expect("CAMs share a shape")
}
