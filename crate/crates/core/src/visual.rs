//! PNG export of CAMs, noise images and training trends.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::cam::CamMap;
use crate::data::{denormalize, ImageTensor};
use crate::error::{Error, Result};
use crate::generator::JndImage;

/// Gray level that stands for zero noise.
pub const JND_GRAY: u8 = 125;

pub fn write_png(path: &Path, width: usize, height: usize, rgb: bool, data: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Internal(format!("encoding {}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(data).map_err(png_err)
}

/// CHW → interleaved RGB bytes.
fn interleave(chw: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            out[p * 3 + c] = chw[c * h * w + p];
        }
    }
    out
}

pub fn cam_to_gray(c: &CamMap) -> Vec<u8> {
    c.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Zero maps to [`JND_GRAY`]; one normalized unit is 127.5 levels.
pub fn jnd_to_rgb(e: &JndImage) -> Vec<u8> {
    let (_, h, w) = e.values.dim();
    let chw: Vec<u8> = e.values.iter().map(|&v| (JND_GRAY as f64 + 127.5 * v as f64).round().clamp(0.0, 255.0) as u8).collect();
    interleave(&chw, h, w)
}

pub fn image_to_rgb(x: &ImageTensor) -> Vec<u8> {
    let (_, h, w) = x.values.dim();
    let px = denormalize(x, true).expect("clipped denormalize never fails");
    interleave(&px.pixels, h, w)
}

/// Writes `{id}_cam.png`, `{id}_jnd.png`, `{id}_original.png` and
/// `{id}_distorted.png` (clipped) into `out_dir`.
pub fn export_visuals(x: &ImageTensor, c: &CamMap, e: &JndImage, xh: &ImageTensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if x.id != e.id || x.id != xh.id {
        return Err(Error::Argument("visual export needs one image id".into()));
    }
    let (_, h, w) = x.values.dim();
    let id = x.id;
    let paths = ["cam", "jnd", "original", "distorted"].map(|k| out_dir.join(format!("{id:05}_{k}.png")));
    write_png(&paths[0], w, h, false, &cam_to_gray(c))?;
    write_png(&paths[1], w, h, true, &jnd_to_rgb(e))?;
    write_png(&paths[2], w, h, true, &image_to_rgb(x))?;
    write_png(&paths[3], w, h, true, &image_to_rgb(xh))?;
    Ok(paths.to_vec())
}

/// Line chart of one series over epochs, dark line on white.
pub fn plot_series(values: &[f64], path: &Path) -> Result<()> {
    const W: usize = 320;
    const H: usize = 200;
    const M: usize = 16;
    let mut img = vec![255u8; W * H * 3];
    let mut put = |x: usize, y: usize, rgb: [u8; 3]| {
        if x < W && y < H {
            img[(y * W + x) * 3..(y * W + x) * 3 + 3].copy_from_slice(&rgb);
        }
    };
    for x in M..W - M {
        put(x, H - M, [160; 3]);
    }
    for y in M..H - M + 1 {
        put(M, y, [160; 3]);
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = values.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            let x = M as f64 + (W - 2 * M) as f64 * i as f64 / n as f64;
            let y = (H - M) as f64 - (H - 2 * M) as f64 * (v - lo) / span;
            (x, y)
        };
        let mut prev: Option<(f64, f64)> = None;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = pt(i, v);
            let a = prev.unwrap_or(p);
            let steps = ((p.0 - a.0).abs().max((p.1 - a.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put((a.0 + (p.0 - a.0) * t).round() as usize, (a.1 + (p.1 - a.1) * t).round() as usize, [20, 60, 160]);
            }
            prev = Some(p);
        }
    }
    write_png(path, W, H, true, &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn read_png(path: &Path) -> (Vec<u8>, png::ColorType) {
        let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (buf, info.color_type)
    }

    #[test]
    fn zero_noise_is_uniform_gray_and_export_clips() {
        let dir = tempfile::tempdir().unwrap();
        let x = ImageTensor { id: 7, augmented: false, values: Array3::from_shape_fn((3, 32, 32), |(c, y, _)| c as f32 * 0.5 - 0.5 + y as f32 * 0.01) };
        let e = JndImage { id: 7, values: Array3::zeros((3, 32, 32)) };
        let c = CamMap::merged(Array2::from_shape_fn((32, 32), |(y, x)| (y * 32 + x) as f32 / 1023.0));
        let xh = ImageTensor { values: x.values.mapv(|v| v * 3.0), ..x.clone() };
        let paths = export_visuals(&x, &c, &e, &xh, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let (jnd, ct) = read_png(&paths[1]);
        assert_eq!(ct, png::ColorType::Rgb);
        assert!(jnd.iter().all(|&v| v == JND_GRAY));
        let (cam, ct) = read_png(&paths[0]);
        assert_eq!(ct, png::ColorType::Grayscale);
        // Monotone CAM values give monotone (non-strict) gray levels.
        assert!(cam.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((cam[0], cam[1023]), (0, 255));
        let (orig, _) = read_png(&paths[2]);
        assert_eq!(orig.len(), 32 * 32 * 3);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let x = ImageTensor { id: 1, augmented: false, values: Array3::zeros((3, 32, 32)) };
        let e = JndImage { id: 1, values: Array3::zeros((3, 32, 32)) };
        let c = CamMap::merged(Array2::zeros((32, 32)));
        assert!(matches!(export_visuals(&x, &c, &e, &x, &blocker.join("sub")), Err(Error::Io { .. })));
    }

    #[test]
    fn plot_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        plot_series(&[3.0, 2.0, 2.5, f64::NAN, 1.0], &p).unwrap();
        let (data, _) = read_png(&p);
        assert_eq!(data.len(), 320 * 200 * 3);
        assert!(data.chunks(3).any(|px| px == [20, 60, 160]));
    }
}
