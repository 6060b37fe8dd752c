//! CIFAR-10 ingestion, augmentation and normalization.
//!
//! Records use the binary archive layout: one label byte followed by 1024
//! red, 1024 green and 1024 blue bytes (row-major 32×32 planes).

mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synthetic::{render_synthetic, write_synthetic_archive, SyntheticArchive};

pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;
pub const IMAGE_BYTES: usize = HEIGHT * WIDTH * CHANNELS;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// An 8-bit RGB image stored as planar CHW bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelImage {
    /// Position of the record in its split's archive files.
    pub id: u32,
    /// Human annotation; bookkeeping only.
    pub class_index: u8,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl PixelImage {
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> PixelImage {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let row = &mut out.pixels[(c * self.height + y) * self.width..][..self.width];
                row.reverse();
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}` (expected train|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub split: Split,
    pub records: Vec<PixelImage>,
    pub subset_fraction: f64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// SHA-256 over ids, annotations and pixels, in record order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.split.as_str().as_bytes());
        for r in &self.records {
            h.update(r.id.to_le_bytes());
            h.update([r.class_index]);
            h.update(&r.pixels);
        }
        hex::encode(h.finalize())
    }

    /// Deterministic sub-selection of `fraction` of the records (by position).
    pub fn sample(&self, fraction: f64, seed: u64) -> Vec<usize> {
        if fraction >= 1.0 {
            return (0..self.len()).collect();
        }
        let k = ((self.len() as f64 * fraction).ceil() as usize).clamp(1.min(self.len()), self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

/// A normalized CHW float image in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub id: u32,
    pub augmented: bool,
    pub values: Array3<f32>,
}

fn archive_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if !path.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn read_batch_file(file: &Path, first_id: u32) -> Result<Vec<PixelImage>> {
    let bytes = fs::read(file).map_err(|e| Error::Ingest { file: file.to_path_buf(), reason: e.to_string() })?;
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Ingest { file: file.to_path_buf(), reason: format!("size {} is not a positive multiple of {RECORD_BYTES}", bytes.len()) });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Ingest { file: file.to_path_buf(), reason: format!("record {i} has label {}", rec[0]) });
            }
            Ok(PixelImage { id: first_id + i as u32, class_index: rec[0], height: HEIGHT, width: WIDTH, pixels: rec[1..].to_vec() })
        })
        .collect()
}

/// Load a split, optionally keeping a class-stratified `subset_fraction` of it.
pub fn load_dataset(path: &Path, split: Split, subset_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::Argument(format!("subset fraction {subset_fraction} not in (0, 1]")));
    }
    let dir = archive_dir(path);
    let files: Vec<&str> = match split {
        Split::Train => TRAIN_FILES.to_vec(),
        Split::Test => vec![TEST_FILE],
    };
    let mut records = Vec::new();
    for f in files {
        let mut batch = read_batch_file(&dir.join(f), records.len() as u32)?;
        records.append(&mut batch);
    }
    let records = if subset_fraction < 1.0 { stratified_subset(records, subset_fraction, seed) } else { records };
    Ok(DatasetSplit { split, records, subset_fraction })
}

/// Keep `floor(fraction·N)` records with per-class quotas proportional to
/// class sizes (largest-remainder rounding); output sorted by id.
pub fn stratified_subset(records: Vec<PixelImage>, fraction: f64, seed: u64) -> Vec<PixelImage> {
    let target = (fraction * records.len() as f64).floor() as usize;
    let mut by_class: Vec<Vec<PixelImage>> = vec![Vec::new(); NUM_CLASSES];
    for r in records {
        by_class[r.class_index as usize].push(r);
    }
    let exact: Vec<f64> = by_class.iter().map(|c| fraction * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut rest = target.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for c in order {
        if rest == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            rest -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target);
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut rng);
        members.truncate(quota[c]);
        out.extend(members);
    }
    out.sort_by_key(|r| r.id);
    out
}

/// Mirror `img` horizontally with probability `p`.
pub fn augment_flip<R: Rng>(img: &PixelImage, p: f64, rng: &mut R) -> PixelImage {
    if rng.random_bool(p.clamp(0.0, 1.0)) {
        img.mirrored()
    } else {
        img.clone()
    }
}

/// `[0,255] → [0,1] → (v − 0.5)/0.5`.
pub fn normalize(img: &PixelImage) -> ImageTensor {
    let values = Array3::from_shape_fn((CHANNELS, img.height, img.width), |(c, y, x)| normalize_value(img.get(c, y, x)));
    ImageTensor { id: img.id, augmented: false, values }
}

pub fn normalize_value(p: u8) -> f32 {
    ((p as f64 / 255.0 - 0.5) / 0.5) as f32
}

/// Model-space value back to the (unrounded, unclipped) 8-bit scale.
pub fn to_pixel_scale(v: f64) -> f64 {
    (v * 0.5 + 0.5) * 255.0
}

/// Inverse of [`normalize`]. Without `clip`, any value that falls outside
/// [0, 255] after rounding is an argument error.
pub fn denormalize(t: &ImageTensor, clip: bool) -> Result<PixelImage> {
    let (c, h, w) = t.values.dim();
    let mut pixels = Vec::with_capacity(c * h * w);
    for &v in t.values.iter() {
        let p = to_pixel_scale(v as f64);
        let p = if clip { p.clamp(0.0, 255.0) } else { p };
        let r = p.round();
        if !(0.0..=255.0).contains(&r) {
            return Err(Error::Argument(format!("value {v} maps to pixel {r} outside [0,255]; denormalize with clip")));
        }
        pixels.push(r as u8);
    }
    Ok(PixelImage { id: t.id, class_index: 0, height: h, width: w, pixels })
}

/// Stack images into an N×C×H×W batch.
pub fn stack_batch(images: &[ImageTensor]) -> Array4<f32> {
    let views: Vec<_> = images.iter().map(|t| t.values.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share one shape")
}

/// Serialize records in the binary archive layout.
pub fn encode_records(records: &[PixelImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.class_index);
        out.extend_from_slice(&r.pixels);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: u32, class: u8, seed: u64) -> PixelImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PixelImage { id, class_index: class, height: HEIGHT, width: WIDTH, pixels: (0..IMAGE_BYTES).map(|_| rng.random()).collect() }
    }

    #[test]
    fn normalize_boundaries() {
        assert_eq!(normalize_value(255), 1.0);
        assert_eq!(normalize_value(0), -1.0);
        assert!((normalize_value(64) as f64 - (64.0 / 255.0 - 0.5) / 0.5).abs() < 1e-7);
        assert!((normalize_value(64) - (-0.4980)).abs() < 1e-4);
    }

    #[test]
    fn denormalize_round_trip_and_clip() {
        let img = image(3, 1, 9);
        let back = denormalize(&normalize(&img), false).unwrap();
        assert_eq!(back.pixels, img.pixels);
        let t = ImageTensor { id: 0, augmented: false, values: Array3::from_elem((3, 1, 1), 1.2) };
        assert_eq!(denormalize(&t, true).unwrap().pixels, vec![255; 3]);
        assert!(denormalize(&t, false).is_err());
    }

    #[test]
    fn quantization_error_is_at_most_half_a_level() {
        for p in 0..=255u8 {
            let v = normalize_value(p) as f64;
            let q = to_pixel_scale(v);
            assert_eq!(q.round() as u8, p);
            assert!((q - p as f64).abs() / 255.0 < 1e-6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0f32..=1.0));
        let t = ImageTensor { id: 0, augmented: false, values };
        let back = normalize(&denormalize(&t, false).unwrap());
        for (a, b) in t.values.iter().zip(back.values.iter()) {
            // distance on the [0,1] scale
            assert!(((*a as f64 - *b as f64) / 2.0).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn flip_identity_involution_and_rate() {
        let img = image(0, 0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment_flip(&img, 0.0, &mut rng), img);
        let twice = augment_flip(&augment_flip(&img, 1.0, &mut rng), 1.0, &mut rng);
        assert_eq!(twice, img);
        let flipped = augment_flip(&img, 1.0, &mut rng);
        for c in 0..3 {
            for y in 0..HEIGHT {
                let mut a: Vec<u8> = (0..WIDTH).map(|x| img.get(c, y, x)).collect();
                let mut b: Vec<u8> = (0..WIDTH).map(|x| flipped.get(c, y, x)).collect();
                a.sort_unstable();
                b.sort_unstable();
                assert_eq!(a, b);
            }
        }
        // Binomial(10000, 0.5): σ = 50.
        let small = PixelImage { pixels: vec![0; 3 * 2], height: 1, width: 2, ..img };
        let mut marked = small.clone();
        marked.pixels[0] = 1;
        let flips = (0..10_000).filter(|_| augment_flip(&marked, 0.5, &mut rng).pixels[0] == 0).count();
        assert!((flips as f64 - 5000.0).abs() <= 150.0, "flips {flips}");
    }

    #[test]
    fn stratified_subset_is_balanced_and_deterministic() {
        let records: Vec<PixelImage> = (0..1000).map(|i| PixelImage { pixels: vec![0; 4], height: 1, width: 1, ..image(i, (i % 10) as u8, 0) }).collect();
        let a = stratified_subset(records.clone(), 0.1, 7);
        let b = stratified_subset(records.clone(), 0.1, 7);
        assert_eq!(a.len(), 100);
        assert_eq!(a.iter().map(|r| r.id).collect::<Vec<_>>(), b.iter().map(|r| r.id).collect::<Vec<_>>());
        for c in 0..10u8 {
            assert_eq!(a.iter().filter(|r| r.class_index == c).count(), 10);
        }
        let c = stratified_subset(records, 0.1, 8);
        assert_ne!(a.iter().map(|r| r.id).collect::<Vec<_>>(), c.iter().map(|r| r.id).collect::<Vec<_>>());
    }

    #[test]
    fn subset_fraction_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Train, 0.0, 0), Err(Error::Argument(_))));
        assert!(matches!(load_dataset(dir.path(), Split::Train, 1.5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_and_corrupt_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(dir.path(), Split::Test, 1.0, 0) {
            Err(Error::Ingest { file, .. }) => assert!(file.ends_with(TEST_FILE)),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(dir.path().join(TEST_FILE), vec![0u8; RECORD_BYTES + 7]).unwrap();
        let err = load_dataset(dir.path(), Split::Test, 1.0, 0).unwrap_err();
        assert!(err.to_string().contains(TEST_FILE));
        let mut bad = vec![0u8; RECORD_BYTES];
        bad[0] = 12;
        fs::write(dir.path().join(TEST_FILE), bad).unwrap();
        assert!(load_dataset(dir.path(), Split::Test, 1.0, 0).is_err());
    }
}
