//! Class activation maps: per-classifier maps, the merged committee map and
//! its mean attention.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, Committee, LabelSet};
use crate::data::{normalize, stack_batch, DatasetSplit, ImageTensor, Split, HEIGHT, NUM_CLASSES, WIDTH};
use crate::error::{Error, Result};
use crate::nn::Mode;

/// An H×W attention map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub values: Array2<f32>,
    /// Classifier arch id, or `merged`.
    pub source: String,
    pub target_class: Option<u8>,
}

impl CamMap {
    pub fn merged(values: Array2<f32>) -> Self {
        Self { values, source: "merged".into(), target_class: None }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        out.values.invert_axis(Axis(1));
        out.values = out.values.as_standard_layout().into_owned();
        out
    }
}

/// Σ_k w_k · F_k over the K final feature maps.
pub fn raw_cam(features: ArrayView3<f32>, weights: &[f32]) -> Array2<f64> {
    let (k, h, w) = features.dim();
    assert_eq!(k, weights.len(), "one weight per feature map");
    let mut out = Array2::<f64>::zeros((h, w));
    for (fm, &wk) in features.outer_iter().zip(weights) {
        out.zip_mut_with(&fm, |o, &f| *o += wk as f64 * f as f64);
    }
    out
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Min-max scaling to [0, 1]; a constant map becomes all 0.5.
pub fn minmax_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Array2::from_elem(map.dim(), 0.5);
    }
    map.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Raw map → upsample to H×W → normalize.
pub fn cam_from_features(features: ArrayView3<f32>, weights: &[f32], out_h: usize, out_w: usize) -> Array2<f32> {
    let raw = raw_cam(features, weights);
    minmax_normalize(&upsample_bilinear(&raw, out_h, out_w)).mapv(|v| v as f32)
}

fn check_target(model: &ClassifierModel<f32>, target_class: u8) -> Result<()> {
    if !model.is_frozen() {
        return Err(Error::Config(format!("{} must be frozen before computing CAMs", model.arch)));
    }
    if target_class as usize >= NUM_CLASSES {
        return Err(Error::Argument(format!("target class {target_class} out of range")));
    }
    Ok(())
}

pub fn compute_cam(model: &mut ClassifierModel<f32>, x: &ImageTensor, target_class: u8) -> Result<CamMap> {
    let batch = x.values.clone().insert_axis(Axis(0));
    Ok(compute_cams_batch(model, &batch, &[target_class])?.remove(0))
}

/// CAMs for a batch, one target class per image.
pub fn compute_cams_batch(model: &mut ClassifierModel<f32>, x: &Array4<f32>, targets: &[u8]) -> Result<Vec<CamMap>> {
    for &t in targets {
        check_target(model, t)?;
    }
    let (n, _, h, w) = x.dim();
    if targets.len() != n {
        return Err(Error::Argument("one target class per image".into()));
    }
    let feats = model.features(x, Mode::Eval);
    Ok(feats
        .outer_iter()
        .zip(targets)
        .map(|(f, &t)| CamMap {
            values: cam_from_features(f, &model.class_weights(t as usize), h, w),
            source: model.arch.as_str().into(),
            target_class: Some(t),
        })
        .collect())
}

/// Elementwise mean of four maps.
pub fn merge_cams(maps: &[CamMap]) -> Result<CamMap> {
    if maps.len() != 4 {
        return Err(Error::Argument(format!("merging needs four maps, got {}", maps.len())));
    }
    let dim = maps[0].dim();
    if maps.iter().any(|m| m.dim() != dim) {
        return Err(Error::Argument("CAM dimensions differ".into()));
    }
    let mut acc = Array2::<f64>::zeros(dim);
    for m in maps {
        acc.zip_mut_with(&m.values, |a, &v| *a += v as f64);
    }
    Ok(CamMap::merged(acc.mapv(|v| (v / 4.0) as f32)))
}

/// I = mean of the map.
pub fn mean_attention(c: &CamMap) -> f64 {
    c.values.iter().map(|&v| v as f64).sum::<f64>() / c.values.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    split: Split,
    split_digest: String,
    classifier_checksums: Vec<String>,
    height: usize,
    width: usize,
    count: usize,
}

const CACHE_MAGIC: &[u8; 8] = b"MJNDCAMS";

/// Merged CAM per image, keyed by image id and tied to the committee checksums.
#[derive(Clone, Debug, PartialEq)]
pub struct CamCache {
    pub split: Split,
    pub split_digest: String,
    pub classifier_checksums: Vec<String>,
    pub ids: Vec<u32>,
    pub targets: Vec<[u8; 4]>,
    pub maps: Vec<Array2<f32>>,
}

impl CamCache {
    pub fn get(&self, id: u32) -> Option<CamMap> {
        self.ids.binary_search(&id).ok().map(|i| CamMap::merged(self.maps[i].clone()))
    }

    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<CamMap>> {
        ids.iter().map(|&id| self.get(id).ok_or_else(|| Error::Argument(format!("image id {id} missing from CAM cache")))).collect()
    }

    pub fn is_fresh(&self, split_digest: &str, checksums: &[String]) -> bool {
        self.split_digest == split_digest && self.classifier_checksums == checksums
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            split: self.split,
            split_digest: self.split_digest.clone(),
            classifier_checksums: self.classifier_checksums.clone(),
            height: HEIGHT,
            width: WIDTH,
            count: self.ids.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.ids.len() * (8 + 4 * HEIGHT * WIDTH));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for ((id, t), m) in self.ids.iter().zip(&self.targets).zip(&self.maps) {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(t);
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::Ingest { file: path.into(), reason: r.into() };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad("not a CAM cache"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: CacheHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&e.to_string()))?;
        let plane = header.height * header.width;
        let rec = 8 + 4 * plane;
        let body = &bytes[12 + hlen..];
        if body.len() != rec * header.count {
            return Err(bad("entry count does not match file size"));
        }
        let mut cache = CamCache {
            split: header.split,
            split_digest: header.split_digest,
            classifier_checksums: header.classifier_checksums,
            ids: Vec::with_capacity(header.count),
            targets: Vec::with_capacity(header.count),
            maps: Vec::with_capacity(header.count),
        };
        for chunk in body.chunks_exact(rec) {
            cache.ids.push(u32::from_le_bytes(chunk[..4].try_into().unwrap()));
            cache.targets.push(chunk[4..8].try_into().unwrap());
            let vals: Vec<f32> = chunk[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            cache.maps.push(Array2::from_shape_vec((header.height, header.width), vals).expect("plane"));
        }
        Ok(cache)
    }
}

/// Merged CAMs for every image of `split`, each classifier explaining its own
/// reference label.
pub fn build_cam_cache(committee: &mut Committee, split: &DatasetSplit, labels: &LabelSet) -> Result<CamCache> {
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by_key(|&i| split.records[i].id);
    let mut cache = CamCache {
        split: split.split,
        split_digest: split.digest(),
        classifier_checksums: committee.checksums(),
        ids: Vec::with_capacity(split.len()),
        targets: Vec::with_capacity(split.len()),
        maps: Vec::with_capacity(split.len()),
    };
    for chunk in order.chunks(100) {
        let imgs: Vec<ImageTensor> = chunk.iter().map(|&i| normalize(&split.records[i])).collect();
        let ids: Vec<u32> = imgs.iter().map(|t| t.id).collect();
        let refs = labels.lookup(&ids)?;
        let x = stack_batch(&imgs);
        let mut per_model = Vec::with_capacity(4);
        for (n, m) in committee.members.iter_mut().enumerate() {
            let targets: Vec<u8> = refs.iter().map(|r| r[n]).collect();
            per_model.push(compute_cams_batch(m, &x, &targets)?);
        }
        for j in 0..chunk.len() {
            let maps: Vec<CamMap> = per_model.iter().map(|v| v[j].clone()).collect();
            cache.maps.push(merge_cams(&maps)?.values);
            cache.ids.push(ids[j]);
            cache.targets.push(refs[j]);
        }
    }
    Ok(cache)
}
