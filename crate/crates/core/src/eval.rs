//! Measurement protocols: relative classification accuracy, PSNR, the
//! energy-matched white-noise control, the scaled-noise sweep and the
//! spatial-placement ratio.

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cam::CamMap;
use crate::classifier::{Committee, LabelSet};
use crate::data::{stack_batch, ImageTensor};
use crate::error::{Error, Result};
use crate::generator::{apply_jnd, scale_jnd, JndImage};

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcaReport {
    /// Mean of `acc_n`, percent.
    pub acc: f64,
    pub acc_n: [f64; 4],
    pub count: usize,
}

impl RcaReport {
    /// Compare predicted labels with reference labels, image by image.
    pub fn from_labels(predicted: &[[u8; 4]], refs: &[[u8; 4]]) -> Self {
        assert_eq!(predicted.len(), refs.len());
        let mut hits = [0usize; 4];
        for (p, r) in predicted.iter().zip(refs) {
            for n in 0..4 {
                hits[n] += (p[n] == r[n]) as usize;
            }
        }
        let count = refs.len();
        let acc_n = hits.map(|h| if count == 0 { 100.0 } else { 100.0 * h as f64 / count as f64 });
        RcaReport { acc: acc_n.iter().sum::<f64>() / 4.0, acc_n, count }
    }
}

/// Committee labels for a set of (possibly distorted) images.
pub fn committee_labels(committee: &mut Committee, images: &[ImageTensor]) -> Vec<[u8; 4]> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(100) {
        let per = committee.labels(&stack_batch(chunk));
        out.extend((0..chunk.len()).map(|j| [per[0][j], per[1][j], per[2][j], per[3][j]]));
    }
    out
}

/// RCA of distorted images against the committee's reference labels.
pub fn rca(committee: &mut Committee, images: &[ImageTensor], refs: &LabelSet) -> Result<RcaReport> {
    let ids: Vec<u32> = images.iter().map(|t| t.id).collect();
    let want = refs.lookup(&ids)?;
    Ok(RcaReport::from_labels(&committee_labels(committee, images), &want))
}

/// PSNR on the 8-bit scale from a normalized-space difference.
pub fn psnr_from_diff(diff: ArrayView3<f32>) -> f64 {
    let mse = diff.iter().map(|&d| (127.5 * d as f64).powi(2)).sum::<f64>() / diff.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(x: &ImageTensor, xh: &ImageTensor) -> Result<f64> {
    if x.values.dim() != xh.values.dim() {
        return Err(Error::Argument("PSNR needs images of equal shape".into()));
    }
    Ok(psnr_from_diff((&xh.values - &x.values).view()))
}

pub fn mean_psnr(jnds: &[JndImage]) -> f64 {
    jnds.iter().map(|e| psnr_from_diff(e.values.view())).sum::<f64>() / jnds.len().max(1) as f64
}

fn distort(images: &[ImageTensor], jnds: &[JndImage], fraction: f64) -> Result<Vec<ImageTensor>> {
    if images.len() != jnds.len() {
        return Err(Error::Argument("one noise image per image".into()));
    }
    images
        .iter()
        .zip(jnds)
        .map(|(x, e)| {
            if x.id != e.id {
                return Err(Error::Argument(format!("noise for image {} paired with image {}", e.id, x.id)));
            }
            apply_jnd(x, &scale_jnd(e, fraction)?)
        })
        .collect()
}

/// RCA after adding `fraction`·e to each image.
pub fn rca_under_jnd(committee: &mut Committee, images: &[ImageTensor], jnds: &[JndImage], fraction: f64, refs: &LabelSet) -> Result<RcaReport> {
    rca(committee, &distort(images, jnds, fraction)?, refs)
}

/// Gaussian noise with exactly the same RMS as `e`.
pub fn rms_matched_noise(e: &JndImage, rng: &mut ChaCha8Rng) -> JndImage {
    let rms = (e.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / e.values.len() as f64).sqrt();
    let raw: Array3<f64> = Array3::from_shape_simple_fn(e.values.raw_dim(), || StandardNormal.sample(rng));
    let raw_rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
    let k = if raw_rms > 0.0 { rms / raw_rms } else { 0.0 };
    JndImage { id: e.id, values: raw.mapv(|v| (v * k) as f32) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WgnReport {
    pub jnd: RcaReport,
    pub wgn: RcaReport,
    pub jnd_psnr: f64,
    pub wgn_psnr: f64,
}

impl WgnReport {
    pub fn gap(&self) -> f64 {
        self.jnd.acc - self.wgn.acc
    }
}

pub fn wgn_baseline(committee: &mut Committee, images: &[ImageTensor], jnds: &[JndImage], refs: &LabelSet, seed: u64) -> Result<WgnReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<JndImage> = jnds.iter().map(|e| rms_matched_noise(e, &mut rng)).collect();
    Ok(WgnReport {
        jnd: rca_under_jnd(committee, images, jnds, 1.0, refs)?,
        wgn: rca_under_jnd(committee, images, &noise, 1.0, refs)?,
        jnd_psnr: mean_psnr(jnds),
        wgn_psnr: mean_psnr(&noise),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    /// `(k, RCA at k/9 · e)` for k = 0..=9.
    pub entries: Vec<(u32, RcaReport)>,
}

impl HomogeneityReport {
    pub fn full(&self) -> &RcaReport {
        &self.entries.last().expect("sweep has ten entries").1
    }
}

pub fn homogeneity_test(committee: &mut Committee, images: &[ImageTensor], jnds: &[JndImage], refs: &LabelSet) -> Result<HomogeneityReport> {
    let mut entries = Vec::with_capacity(10);
    for k in 0..=9u32 {
        entries.push((k, rca_under_jnd(committee, images, jnds, k as f64 / 9.0, refs)?));
    }
    Ok(HomogeneityReport { entries })
}

/// Per-pixel noise magnitude: mean |e| over channels.
pub fn pixel_magnitude(e: &JndImage) -> Vec<f64> {
    let (ch, h, w) = e.values.dim();
    let mut m = vec![0.0; h * w];
    for ((_, y, x), v) in e.values.indexed_iter() {
        m[y * w + x] += (*v as f64).abs() / ch as f64;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialReport {
    /// Mean per-pixel |e| over each image's 10% least-attended pixels.
    pub bottom_decile: f64,
    /// Mean per-pixel |e| over each image's 10% most-attended pixels.
    pub top_decile: f64,
}

impl SpatialReport {
    pub fn ratio(&self) -> f64 {
        self.bottom_decile / self.top_decile
    }
}

/// Noise magnitude on low- versus high-attention pixels, deciles taken per image.
pub fn spatial_distribution(cams: &[CamMap], jnds: &[JndImage]) -> Result<SpatialReport> {
    if cams.len() != jnds.len() || cams.is_empty() {
        return Err(Error::Argument("one CAM per noise image".into()));
    }
    let (mut lo, mut hi) = (0.0, 0.0);
    for (c, e) in cams.iter().zip(jnds) {
        let m = pixel_magnitude(e);
        let mut order: Vec<usize> = (0..m.len()).collect();
        let cv = c.values.as_slice().expect("standard layout");
        order.sort_by(|&a, &b| cv[a].total_cmp(&cv[b]));
        let k = (m.len() / 10).max(1);
        lo += order[..k].iter().map(|&i| m[i]).sum::<f64>() / k as f64;
        hi += order[m.len() - k..].iter().map(|&i| m[i]).sum::<f64>() / k as f64;
    }
    let n = cams.len() as f64;
    Ok(SpatialReport { bottom_decile: lo / n, top_decile: hi / n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: u32, v: f32) -> ImageTensor {
        ImageTensor { id, augmented: false, values: Array3::from_elem((3, 32, 32), v) }
    }

    #[test]
    fn psnr_examples() {
        let x = img(0, 0.1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let y = img(0, 0.1 + 16.0 / 127.5);
        let expect = 10.0 * (255.0f64.powi(2) / 256.0).log10();
        assert!((psnr(&x, &y).unwrap() - expect).abs() < 1e-3);
        assert!((psnr(&x, &y).unwrap() - 24.05).abs() < 0.01);
        assert!(psnr(&x, &ImageTensor { values: Array3::zeros((3, 8, 8)), ..x.clone() }).is_err());
    }

    #[test]
    fn psnr_decreases_with_scale() {
        let e = JndImage { id: 0, values: Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y * x) % 7) as f32 * 0.01) };
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let scaled = JndImage { id: 0, values: e.values.mapv(|v| v * k as f32) };
            let p = psnr_from_diff(scaled.values.view());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn rca_fixtures() {
        let refs: Vec<[u8; 4]> = (0..10).map(|i| [i as u8; 4]).collect();
        assert_eq!(RcaReport::from_labels(&refs, &refs).acc, 100.0);
        let half: Vec<[u8; 4]> = refs.iter().enumerate().map(|(i, r)| if i % 2 == 0 { *r } else { r.map(|v| (v + 1) % 10) }).collect();
        let rep = RcaReport::from_labels(&half, &refs);
        assert_eq!(rep.acc, 50.0);
        assert_eq!(rep.acc_n, [50.0; 4]);
        let mut mixed = refs.clone();
        mixed[0][2] = 9;
        let r = RcaReport::from_labels(&mixed, &refs);
        assert_eq!(r.acc, r.acc_n.iter().sum::<f64>() / 4.0);
        assert_eq!(r.acc_n[2], 90.0);
    }

    #[test]
    fn wgn_matches_rms_and_zero_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = JndImage { id: 3, values: Array3::from_shape_fn((3, 32, 32), |(c, y, _)| (c as f32 - 1.0) * 0.2 + y as f32 * 0.01) };
        let n = rms_matched_noise(&e, &mut rng);
        let rms = |a: &Array3<f32>| (a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms(&n.values) - rms(&e.values)).abs() < 1e-6);
        assert!((psnr_from_diff(n.values.view()) - psnr_from_diff(e.values.view())).abs() < 1e-4);
        let z = JndImage { id: 3, values: Array3::zeros((3, 32, 32)) };
        assert!(rms_matched_noise(&z, &mut rng).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_ratio_on_constructed_noise() {
        let c = CamMap::merged(ndarray::Array2::from_shape_fn((32, 32), |(_, x)| x as f32 / 31.0));
        let e = JndImage { id: 0, values: Array3::from_shape_fn((3, 32, 32), |(_, _, x)| if x < 16 { 0.4 } else { -0.1 }) };
        let r = spatial_distribution(&[c], &[e]).unwrap();
        assert!((r.bottom_decile - 0.4).abs() < 1e-6);
        assert!((r.top_decile - 0.1).abs() < 1e-6);
        assert!((r.ratio() - 4.0).abs() < 1e-5);
    }
}
