//! Procedural stand-in archive in the CIFAR-10 binary layout.
//!
//! Each class is one geometric shape drawn at a random position, scale and
//! colour over a textured gradient background; only the shape identifies
//! the class.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_records, PixelImage, CHANNELS, HEIGHT, IMAGE_BYTES, NUM_CLASSES, TEST_FILE, TRAIN_FILES, WIDTH};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["square", "disk", "ring", "triangle", "plus", "cross", "hstripes", "vstripes", "diamond", "checker"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticArchive {
    /// Records in each of the five training files.
    pub train_per_file: usize,
    pub test_records: usize,
    pub seed: u64,
}

impl Default for SyntheticArchive {
    fn default() -> Self {
        Self { train_per_file: 10_000, test_records: 10_000, seed: 0 }
    }
}

fn in_shape(class: u8, dx: f64, dy: f64, r: f64) -> bool {
    let (u, v) = (dx / r, dy / r);
    let inside = u.abs() <= 0.9 && v.abs() <= 0.9;
    match class {
        0 => u.abs() <= 0.8 && v.abs() <= 0.8,
        1 => u * u + v * v <= 0.8 * 0.8,
        2 => (0.25..=0.81).contains(&(u * u + v * v)),
        3 => inside && u.abs() <= (v + 0.9) / 1.8 * 0.9,
        4 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        5 => inside && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3),
        6 => inside && ((dy + r).div_euclid(2.5) as i64) % 2 == 0,
        7 => inside && ((dx + r).div_euclid(2.5) as i64) % 2 == 0,
        8 => u.abs() + v.abs() <= 0.9,
        9 => inside && ((dx + r).div_euclid(3.0) as i64 + (dy + r).div_euclid(3.0) as i64) % 2 == 0,
        _ => false,
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Draw one planar CHW image of `class`.
pub fn render_synthetic<R: Rng>(class: u8, rng: &mut R) -> Vec<u8> {
    let mut col = || [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
    let (c0, c1) = (col(), col());
    let bg_mean = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0, (c0[2] + c1[2]) / 2.0];
    let fg = loop {
        let c = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
        if (luma(c) - luma(bg_mean)).abs() >= 70.0 {
            break c;
        }
    };
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (freq, phase, amp) = (rng.random_range(0.2..0.6), rng.random_range(0.0..6.3), rng.random_range(5.0..20.0));
    let r: f64 = rng.random_range(7.0..11.0);
    let lo = r + 1.0;
    let hi = WIDTH as f64 - r - 1.0;
    let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let mut out = vec![0u8; IMAGE_BYTES];
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((fx - 16.0) * theta.cos() + (fy - 16.0) * theta.sin()) / 45.0 + 0.5;
            let tex = amp * (freq * (fx * theta.sin() - fy * theta.cos()) + phase).sin();
            let obj = in_shape(class, fx - cx, fy - cy, r);
            for c in 0..CHANNELS {
                let base = if obj { fg[c] } else { c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0) + tex };
                let v = base + rng.random_range(-10.0..10.0);
                out[(c * HEIGHT + y) * WIDTH + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn records<R: Rng>(n: usize, rng: &mut R) -> Vec<PixelImage> {
    (0..n)
        .map(|i| {
            let class = (i % NUM_CLASSES) as u8;
            PixelImage { id: i as u32, class_index: class, height: HEIGHT, width: WIDTH, pixels: render_synthetic(class, rng) }
        })
        .collect()
}

/// Write `data_batch_1..5.bin`, `test_batch.bin` and `batches.meta.txt` into `dir`.
pub fn write_synthetic_archive(dir: &Path, archive: &SyntheticArchive) -> Result<()> {
    if archive.train_per_file == 0 || archive.test_records == 0 {
        return Err(Error::Argument("synthetic archive needs at least one record per file".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(archive.seed);
    for name in TRAIN_FILES {
        let path = dir.join(name);
        fs::write(&path, encode_records(&records(archive.train_per_file, &mut rng))).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(TEST_FILE);
    fs::write(&path, encode_records(&records(archive.test_records, &mut rng))).map_err(|e| Error::io(&path, e))?;
    let meta = dir.join("batches.meta.txt");
    fs::write(&meta, CLASS_NAMES.join("\n") + "\n").map_err(|e| Error::io(&meta, e))?;
    Ok(())
}
