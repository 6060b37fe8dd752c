//! Binary checkpoint container: magic, JSON header, little-endian f32 blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamKind, ParamSet, Real};

const MAGIC: &[u8; 8] = b"MJNDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `classifier` or `generator`.
    pub kind: String,
    pub arch_id: String,
    /// Model construction settings plus training settings, verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_digest: String,
    pub accuracy: Option<f64>,
    pub epoch: usize,
    pub tensor_shapes: Vec<Vec<usize>>,
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub config_digest: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f32>,
    pub optimizer: Option<AdamState>,
}

/// SHA-256 over every parameter and buffer as little-endian f32.
pub fn param_digest<T: Real, M: ParamSet<T> + ?Sized>(model: &M) -> String {
    let mut h = Sha256::new();
    model.visit_params(&mut |p| {
        for v in p.value.iter() {
            h.update(v.to_f32().unwrap().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn tensor_shapes<T: Real, M: ParamSet<T> + ?Sized>(model: &M) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    model.visit_params(&mut |p| shapes.push(p.value.shape().to_vec()));
    shapes
}

fn push_f32s(out: &mut Vec<u8>, it: impl Iterator<Item = f32>) {
    for v in it {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint<T: Real, M: ParamSet<T> + ?Sized>(path: &Path, header: &CheckpointHeader, model: &M, optimizer: Option<&AdamState>) -> Result<()> {
    let mut header = header.clone();
    header.format_version = FORMAT_VERSION;
    header.tensor_shapes = tensor_shapes(model);
    header.optimizer_step = optimizer.map(|o| o.step);
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    model.visit_params(&mut |p| push_f32s(&mut out, p.value.iter().map(|v| v.to_f32().unwrap())));
    if let Some(o) = optimizer {
        for a in o.m.iter().chain(o.v.iter()) {
            push_f32s(&mut out, a.iter().copied());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Checkpoint { path: path.into(), reason: reason.into() };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let floats: Vec<f32> = bytes[12 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let n: usize = header.tensor_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if floats.len() < n {
        return Err(bad("truncated parameter blob"));
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let rest = &floats[n..];
            let total = rest.len() / 2;
            let (m, v) = rest.split_at(total);
            Some((step, m.to_vec(), v.to_vec()))
        }
    };
    let values = floats[..n].to_vec();
    let optimizer = optimizer.map(|(step, m, v)| AdamState {
        step,
        m: vec![ArrayD::from_shape_vec(IxDyn(&[m.len()]), m).unwrap()],
        v: vec![ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap()],
    });
    Ok(Checkpoint { header, values, optimizer })
}

/// Copy checkpoint values into `model`, verifying every tensor shape.
pub fn load_into<T: Real, M: ParamSet<T> + ?Sized>(path: &Path, ckpt: &Checkpoint, model: &mut M) -> Result<()> {
    let shapes = tensor_shapes(model);
    if shapes != ckpt.header.tensor_shapes {
        return Err(Error::Checkpoint { path: path.into(), reason: "tensor shapes do not match the model built from its header".into() });
    }
    let mut off = 0;
    model.visit_params_mut(&mut |p| {
        let n = p.value.len();
        for (dst, &src) in p.value.iter_mut().zip(&ckpt.values[off..off + n]) {
            *dst = T::of(src as f64);
        }
        off += n;
    });
    Ok(())
}

/// Re-split the flat optimizer moments to match `model`'s trainable weights.
pub fn unflatten_optimizer<T: Real, M: ParamSet<T> + ?Sized>(path: &Path, flat: &AdamState, model: &M) -> Result<AdamState> {
    let mut shapes = Vec::new();
    model.visit_params(&mut |p| {
        if p.kind == ParamKind::Weight && p.trainable {
            shapes.push(p.value.shape().to_vec());
        }
    });
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let (m, v) = (&flat.m[0], &flat.v[0]);
    if m.len() != total || v.len() != total {
        return Err(Error::Checkpoint { path: path.into(), reason: "optimizer state does not match trainable weights".into() });
    }
    let split = |flat: &ArrayD<f32>| {
        let s = flat.as_slice().unwrap();
        let mut off = 0;
        shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let a = ArrayD::from_shape_vec(IxDyn(shape), s[off..off + n].to_vec()).unwrap();
                off += n;
                a
            })
            .collect::<Vec<_>>()
    };
    Ok(AdamState { step: flat.step, m: split(m), v: split(v) })
}
