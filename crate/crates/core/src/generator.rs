//! Encoder-decoder noise generator: (image, merged CAM) → JND image e.

use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::CamMap;
use crate::checkpoint::{self, CheckpointHeader};
use crate::data::{ImageTensor, CHANNELS, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use crate::nn::{AdamState, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, MaxPool2d, Mode, Param, ParamSet, Real, Relu, Sequential, Tanh};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Filters per encoder stage; a 2×2 max pool sits between stages.
    pub encoder_widths: Vec<usize>,
    pub deconv_kernel: usize,
    pub deconv_stride: usize,
    /// Multiplier on the initial weights of the output convolution.
    pub output_init_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { encoder_widths: vec![64, 128, 256], deconv_kernel: 2, deconv_stride: 2, output_init_scale: 0.1, seed: 0 }
    }
}

impl GeneratorConfig {
    /// Spatial size after the decoder, or a config error if it is not 32×32.
    fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("generator needs at least one encoder stage with positive width".into()));
        }
        if self.deconv_kernel == 0 || self.deconv_stride == 0 {
            return Err(Error::Config("deconvolution kernel and stride must be positive".into()));
        }
        let mut size = HEIGHT;
        for _ in 1..self.encoder_widths.len() {
            if !size.is_multiple_of(2) || size < 2 {
                return Err(Error::Config(format!("encoder pooling cannot halve a {size}×{size} map")));
            }
            size /= 2;
        }
        for _ in 1..self.encoder_widths.len() {
            size = (size - 1) * self.deconv_stride + self.deconv_kernel;
        }
        if size != HEIGHT {
            return Err(Error::Config(format!("decoder restores {size}×{size}, expected {HEIGHT}×{WIDTH}")));
        }
        Ok(())
    }
}

const OUTPUT_BOUND: f64 = 1.0 - 1.0 / (1u64 << 24) as f64;

pub struct GeneratorModel<T: Real = f32> {
    pub config: GeneratorConfig,
    net: Sequential<T>,
}

pub fn build_generator<T: Real>(config: &GeneratorConfig) -> Result<GeneratorModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Sequential::new();
    let mut prev = CHANNELS + 1;
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        if i > 0 {
            net = net.push(MaxPool2d::new());
        }
        net = net.push(Conv2d::new(prev, w, 3, 1, 1, &mut rng)).push(BatchNorm2d::new(w)).push(Relu::new());
        prev = w;
    }
    for &w in config.encoder_widths.iter().rev().skip(1) {
        net = net.push(ConvTranspose2d::new(prev, w, config.deconv_kernel, config.deconv_stride, 0, &mut rng)).push(BatchNorm2d::new(w)).push(Relu::new());
        prev = w;
    }
    net = net.push(Conv2d::new(prev, CHANNELS, 3, 1, 1, &mut rng).scaled(config.output_init_scale)).push(Tanh::new());
    Ok(GeneratorModel { config: config.clone(), net })
}

impl<T: Real> GeneratorModel<T> {
    /// N×4×H×W stacked inputs → N×3×H×W noise in (-1, 1).
    pub fn forward(&mut self, input: &Array4<T>, mode: Mode) -> Array4<T> {
        // tanh rounds to ±1 in f32 once saturated; shrink by one ulp to keep
        // the output bound strict.
        self.net.forward(input, mode) * T::of(OUTPUT_BOUND)
    }

    /// Accumulates parameter gradients for the last `forward`.
    pub fn backward(&mut self, grad: &Array4<T>) {
        self.net.backward(&(grad * T::of(OUTPUT_BOUND)));
    }

    pub fn digest(&self) -> String {
        checkpoint::param_digest(self)
    }
}

impl<T: Real> ParamSet<T> for GeneratorModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.net.visit(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_mut(f)
    }
}

impl GeneratorModel<f32> {
    pub fn save(&self, path: &Path, header: &CheckpointHeader, optimizer: Option<&AdamState>) -> Result<()> {
        checkpoint::save_checkpoint(path, header, self, optimizer)
    }

    /// Rebuild from a checkpoint written by [`Self::save`]; returns the
    /// optimizer moments when present.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader, Option<AdamState>)> {
        let ckpt = checkpoint::read_checkpoint(path)?;
        if ckpt.header.kind != "generator" {
            return Err(Error::Checkpoint { path: path.into(), reason: format!("expected a generator checkpoint, found `{}`", ckpt.header.kind) });
        }
        let cfg: GeneratorConfig = serde_json::from_value(ckpt.header.config["generator"].clone())
            .map_err(|e| Error::Checkpoint { path: path.into(), reason: format!("generator config: {e}") })?;
        let mut model = build_generator::<f32>(&cfg)?;
        checkpoint::load_into(path, &ckpt, &mut model)?;
        let opt = match &ckpt.optimizer {
            Some(flat) => Some(checkpoint::unflatten_optimizer(path, flat, &model)?),
            None => None,
        };
        Ok((model, ckpt.header, opt))
    }
}

/// Signed per-pixel noise in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct JndImage {
    pub id: u32,
    /// 3×H×W.
    pub values: Array3<f32>,
}

/// [R, G, B, 2c − 1].
pub fn stack_inputs(x: &ImageTensor, c: &CamMap) -> Result<Array3<f32>> {
    let (ch, h, w) = x.values.dim();
    if ch != CHANNELS || c.dim() != (h, w) {
        return Err(Error::Argument(format!("cannot stack a {:?} image with a {:?} CAM", x.values.dim(), c.dim())));
    }
    let mut out = Array3::zeros((CHANNELS + 1, h, w));
    out.slice_mut(s![..CHANNELS, .., ..]).assign(&x.values);
    out.slice_mut(s![CHANNELS, .., ..]).assign(&c.values.mapv(|v| 2.0 * v - 1.0));
    Ok(out)
}

/// Inverse of [`stack_inputs`].
pub fn unstack_inputs(stacked: &Array3<f32>, id: u32) -> (ImageTensor, CamMap) {
    let x = stacked.slice(s![..CHANNELS, .., ..]).to_owned();
    let c = stacked.slice(s![CHANNELS, .., ..]).mapv(|v| (v + 1.0) / 2.0);
    (ImageTensor { id, augmented: false, values: x }, CamMap::merged(c))
}

/// Stack a batch of (image, CAM) pairs into N×4×H×W.
pub fn stack_batch_inputs(xs: &[ImageTensor], cs: &[CamMap]) -> Result<Array4<f32>> {
    if xs.len() != cs.len() || xs.is_empty() {
        return Err(Error::Argument("need one CAM per image".into()));
    }
    let (_, h, w) = xs[0].values.dim();
    let mut out = Array4::zeros((xs.len(), CHANNELS + 1, h, w));
    for (i, (x, c)) in xs.iter().zip(cs).enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&stack_inputs(x, c)?);
    }
    Ok(out)
}

/// e = E(x, c) in inference mode.
pub fn generate_jnd(g: &mut GeneratorModel<f32>, x: &ImageTensor, c: &CamMap) -> Result<JndImage> {
    let input = stack_inputs(x, c)?.insert_axis(Axis(0));
    let e = g.forward(&input, Mode::Eval);
    Ok(JndImage { id: x.id, values: e.index_axis_move(Axis(0), 0) })
}

/// Inference-mode noise for a batch.
pub fn generate_batch(g: &mut GeneratorModel<f32>, xs: &[ImageTensor], cs: &[CamMap]) -> Result<Vec<JndImage>> {
    let e = g.forward(&stack_batch_inputs(xs, cs)?, Mode::Eval);
    Ok(e.outer_iter().zip(xs).map(|(v, x)| JndImage { id: x.id, values: v.to_owned() }).collect())
}

/// x̂ = x + e, unclipped.
pub fn apply_jnd(x: &ImageTensor, e: &JndImage) -> Result<ImageTensor> {
    if x.values.dim() != e.values.dim() {
        return Err(Error::Argument(format!("image {:?} and noise {:?} differ in shape", x.values.dim(), e.values.dim())));
    }
    Ok(ImageTensor { id: x.id, augmented: x.augmented, values: &x.values + &e.values })
}

pub fn scale_jnd(e: &JndImage, fraction: f64) -> Result<JndImage> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("scale fraction {fraction} outside [0, 1]")));
    }
    Ok(JndImage { id: e.id, values: e.values.mapv(|v| (v as f64 * fraction) as f32) })
}
