//! The four-member classifier committee.
//!
//! Every architecture ends in global average pooling followed by one linear
//! layer, so the same weights serve both as the classifier and as its
//! class-activation-map network.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::data::{augment_flip, normalize, stack_batch, DatasetSplit, ImageTensor, Split, CHANNELS, HEIGHT, NUM_CLASSES, WIDTH};
use crate::error::{Error, Result};
use crate::nn::{
    Adam, AdamConfig, AvgPool2d, BatchNorm2d, Conv2d, DenseBlock, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode, ParamSet, Real, Relu, Residual, Sequential,
    WeightDecayMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "alexnet-style")]
    AlexnetStyle,
    #[serde(rename = "vgg-style")]
    VggStyle,
    #[serde(rename = "resnet-style")]
    ResnetStyle,
    #[serde(rename = "densenet-style")]
    DensenetStyle,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [ArchId::AlexnetStyle, ArchId::VggStyle, ArchId::ResnetStyle, ArchId::DensenetStyle];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::AlexnetStyle => "alexnet-style",
            ArchId::VggStyle => "vgg-style",
            ArchId::ResnetStyle => "resnet-style",
            ArchId::DensenetStyle => "densenet-style",
        }
    }

    /// Short name used for file names.
    pub fn stem(self) -> &'static str {
        self.as_str().trim_end_matches("-style")
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s || a.stem() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected one of alexnet-style, vgg-style, resnet-style, densenet-style)")))
    }
}

/// A softmax output over the ten classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbVector(pub [f64; NUM_CLASSES]);

impl ProbVector {
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; NUM_CLASSES];
        let mut z = 0.0;
        for (pi, &l) in p.iter_mut().zip(logits) {
            *pi = (l - m).exp();
            z += *pi;
        }
        p.iter_mut().for_each(|v| *v /= z);
        ProbVector(p)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn assign_label(p: &ProbVector) -> u8 {
    let mut best = 0;
    for (i, &v) in p.0.iter().enumerate().skip(1) {
        if v > p.0[best] {
            best = i;
        }
    }
    best as u8
}

fn conv_bn_relu<T: Real, R: Rng>(seq: Sequential<T>, cin: usize, cout: usize, rng: &mut R) -> Sequential<T> {
    seq.push(Conv2d::new(cin, cout, 3, 1, 1, rng)).push(BatchNorm2d::new(cout)).push(Relu::new())
}

fn residual<T: Real, R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Residual<T> {
    let body = Sequential::new()
        .push(Conv2d::new(cin, cout, 3, stride, 1, rng))
        .push(BatchNorm2d::new(cout))
        .push(Relu::new())
        .push(Conv2d::new(cout, cout, 3, 1, 1, rng))
        .push(BatchNorm2d::new(cout));
    let shortcut = (stride != 1 || cin != cout).then(|| Sequential::new().push(Conv2d::new(cin, cout, 1, stride, 0, rng)).push(BatchNorm2d::new(cout)));
    Residual::new(body, shortcut)
}

fn dense_block<T: Real, R: Rng>(cin: usize, units: usize, growth: usize, rng: &mut R) -> (DenseBlock<T>, usize) {
    let layers = (0..units)
        .map(|i| {
            let c = cin + i * growth;
            Sequential::new().push(BatchNorm2d::new(c)).push(Relu::new()).push(Conv2d::new(c, growth, 3, 1, 1, rng))
        })
        .collect();
    (DenseBlock::new(layers, growth), cin + units * growth)
}

fn transition<T: Real, R: Rng>(seq: Sequential<T>, cin: usize, cout: usize, pool: bool, rng: &mut R) -> Sequential<T> {
    let seq = seq.push(BatchNorm2d::new(cin)).push(Relu::new()).push(Conv2d::new(cin, cout, 1, 1, 0, rng));
    if pool {
        seq.push(AvgPool2d::new())
    } else {
        seq
    }
}

/// Feature stack for `arch` at base width `w`; returns the stack and its
/// output channel count K. All stacks end at 8×8 resolution.
fn feature_stack<T: Real, R: Rng>(arch: ArchId, w: usize, rng: &mut R) -> (Sequential<T>, usize) {
    match arch {
        ArchId::AlexnetStyle => {
            let s = Sequential::new()
                .push(Conv2d::new(CHANNELS, w, 5, 1, 2, rng))
                .push(Relu::new())
                .push(MaxPool2d::new())
                .push(Conv2d::new(w, 2 * w, 5, 1, 2, rng))
                .push(Relu::new())
                .push(MaxPool2d::new())
                .push(Conv2d::new(2 * w, 4 * w, 3, 1, 1, rng))
                .push(Relu::new())
                .push(Conv2d::new(4 * w, 4 * w, 3, 1, 1, rng))
                .push(Relu::new());
            (s, 4 * w)
        }
        ArchId::VggStyle => {
            let mut s = Sequential::new();
            s = conv_bn_relu(s, CHANNELS, w, rng);
            s = conv_bn_relu(s, w, w, rng).push(MaxPool2d::new());
            s = conv_bn_relu(s, w, 2 * w, rng);
            s = conv_bn_relu(s, 2 * w, 2 * w, rng).push(MaxPool2d::new());
            s = conv_bn_relu(s, 2 * w, 4 * w, rng);
            s = conv_bn_relu(s, 4 * w, 4 * w, rng);
            (s, 4 * w)
        }
        ArchId::ResnetStyle => {
            let s = conv_bn_relu(Sequential::new(), CHANNELS, w, rng).push(residual(w, w, 1, rng)).push(residual(w, 2 * w, 2, rng)).push(residual(
                2 * w,
                4 * w,
                2,
                rng,
            ));
            (s, 4 * w)
        }
        ArchId::DensenetStyle => {
            let growth = (w / 2).max(2);
            let mut c = 2 * growth;
            let mut s = conv_bn_relu(Sequential::new(), CHANNELS, c, rng).push(MaxPool2d::new());
            for stage in 0..3 {
                let (block, out) = dense_block(c, 4, growth, rng);
                s = s.push(block);
                c = out;
                if stage < 2 {
                    s = transition(s, c, c / 2, stage == 0, rng);
                    c /= 2;
                }
            }
            (s.push(BatchNorm2d::new(c)).push(Relu::new()), c)
        }
    }
}

pub struct ClassifierModel<T: Real = f32> {
    pub arch: ArchId,
    pub width: usize,
    pub seed: u64,
    features: Sequential<T>,
    gap: GlobalAvgPool<T>,
    head: Linear<T>,
    channels: usize,
    frozen: bool,
}

/// Initialized, CAM-ready classifier at base width `width`.
pub fn build_classifier<T: Real>(arch: ArchId, num_classes: usize, width: usize, seed: u64) -> Result<ClassifierModel<T>> {
    if num_classes != NUM_CLASSES {
        return Err(Error::Config(format!("classifiers are built for {NUM_CLASSES} classes, got {num_classes}")));
    }
    if width == 0 {
        return Err(Error::Config("classifier width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((arch as u64) << 32));
    let (features, channels) = feature_stack(arch, width, &mut rng);
    let head = Linear::new(channels, num_classes, &mut rng);
    Ok(ClassifierModel { arch, width, seed, features, gap: GlobalAvgPool::new(), head, channels, frozen: false })
}

impl<T: Real> ClassifierModel<T> {
    /// Channel count K of the final convolutional feature stack.
    pub fn cam_channels(&self) -> usize {
        self.channels
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    pub fn digest(&self) -> String {
        checkpoint::param_digest(self)
    }

    /// Final feature maps (N×K×h×w).
    pub fn features(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        self.features.forward(x, mode)
    }

    /// Logits (N×10); caches activations for [`Self::backward_input`].
    pub fn logits(&mut self, x: &Array4<T>, mode: Mode) -> Array2<T> {
        let f = self.features.forward(x, mode);
        let pooled = self.gap.forward(&f, mode);
        let y = self.head.forward(&pooled, mode);
        let n = y.dim().0;
        y.into_shape_with_order((n, NUM_CLASSES)).expect("logit shape")
    }

    /// Gradient w.r.t. the input of the last [`Self::logits`] call.
    pub fn backward_input(&mut self, dlogits: &Array2<T>) -> Array4<T> {
        let n = dlogits.nrows();
        let g = dlogits.clone().into_shape_with_order((n, NUM_CLASSES, 1, 1)).expect("reshape");
        let g = self.head.backward(&g);
        let g = self.gap.backward(&g);
        self.features.backward(&g)
    }

    /// Linear-layer weights of `class` over the K feature maps.
    pub fn class_weights(&self, class: usize) -> Vec<T> {
        self.head.weight2().row(class).to_vec()
    }

    pub fn predict_batch(&mut self, x: &Array4<T>) -> Vec<ProbVector> {
        let logits = self.logits(x, Mode::Eval);
        logits.axis_iter(Axis(0)).map(|row| ProbVector::from_logits(&row.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>())).collect()
    }
}

impl ClassifierModel<f32> {
    /// Softmax of one normalized image in inference mode.
    pub fn predict_softmax(&mut self, x: &ImageTensor) -> Result<ProbVector> {
        if x.values.dim() != (CHANNELS, HEIGHT, WIDTH) {
            return Err(Error::Argument(format!("expected a 3×32×32 image, got {:?}", x.values.dim())));
        }
        let batch = x.values.clone().insert_axis(Axis(0));
        Ok(self.predict_batch(&batch)[0])
    }

    /// Hard labels for a whole split, batched.
    pub fn predict_labels(&mut self, split: &DatasetSplit, batch_size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(split.len());
        for chunk in split.records.chunks(batch_size.max(1)) {
            let imgs: Vec<ImageTensor> = chunk.iter().map(normalize).collect();
            out.extend(self.predict_batch(&stack_batch(&imgs)).iter().map(assign_label));
        }
        out
    }

    pub fn accuracy(&mut self, split: &DatasetSplit) -> f64 {
        let labels = self.predict_labels(split, 100);
        let hits = labels.iter().zip(&split.records).filter(|(l, r)| **l == r.class_index).count();
        100.0 * hits as f64 / split.len().max(1) as f64
    }

    pub fn checkpoint_header(&self, dataset_digest: &str, accuracy: Option<f64>, recipe: &PretrainConfig) -> CheckpointHeader {
        CheckpointHeader {
            format_version: checkpoint::FORMAT_VERSION,
            kind: "classifier".into(),
            arch_id: self.arch.as_str().into(),
            config: serde_json::json!({ "width": self.width, "init_seed": self.seed, "recipe": recipe }),
            seed: recipe.seed,
            dataset_digest: dataset_digest.into(),
            accuracy,
            epoch: recipe.epochs,
            tensor_shapes: Vec::new(),
            optimizer_step: None,
            config_digest: String::new(),
        }
    }

    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        checkpoint::save_checkpoint(path, header, self, None)
    }

    /// Rebuild from a checkpoint; the model comes back frozen.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let ckpt = checkpoint::read_checkpoint(path)?;
        let h = &ckpt.header;
        if h.kind != "classifier" {
            return Err(Error::Checkpoint { path: path.into(), reason: format!("expected a classifier checkpoint, found `{}`", h.kind) });
        }
        let arch: ArchId = h.arch_id.parse()?;
        let width = h.config["width"].as_u64().ok_or_else(|| Error::Checkpoint { path: path.into(), reason: "missing width".into() })? as usize;
        let init_seed = h.config["init_seed"].as_u64().unwrap_or(0);
        let mut model = build_classifier::<f32>(arch, NUM_CLASSES, width, init_seed)?;
        checkpoint::load_into(path, &ckpt, &mut model)?;
        model.freeze();
        Ok((model, ckpt.header))
    }
}

impl<T: Real> ParamSet<T> for ClassifierModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&crate::nn::Param<T>)) {
        self.features.visit(f);
        self.head.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param<T>)) {
        self.features.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Supervised pretraining recipe (repo-defined; recorded in every checkpoint).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub flip_probability: f64,
    /// Stop once validation accuracy has not improved for this many epochs.
    pub patience: usize,
    /// Stratified fraction of the training split used for pretraining.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            width: 32,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            flip_probability: 0.5,
            patience: 5,
            train_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub accuracy: f64,
    pub epochs_run: usize,
}

/// Train on human annotations, keep the best-validation weights, persist
/// them to `checkpoint_path` and freeze the model.
pub fn pretrain_classifier(
    model: &mut ClassifierModel<f32>,
    train: &DatasetSplit,
    validation: &DatasetSplit,
    config: &PretrainConfig,
    checkpoint_path: &Path,
) -> Result<PretrainOutcome> {
    if model.is_frozen() {
        return Err(Error::Argument(format!("{} is frozen; pretraining needs a trainable model", model.arch)));
    }
    if train.split != Split::Train {
        return Err(Error::Argument("pretraining expects the training split".into()));
    }
    let mut opt = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay, WeightDecayMode::Coupled));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c1a5);
    let digest = train.digest();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut have_checkpoint = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let imgs: Vec<ImageTensor> = chunk.iter().map(|&i| normalize(&augment_flip(&train.records[i], config.flip_probability, &mut rng))).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train.records[i].class_index).collect();
            let x = stack_batch(&imgs);
            model.zero_grad();
            let logits = model.logits(&x, Mode::Train);
            let (loss, g) = crate::losses::cross_entropy_with_grad(logits.view(), &labels)?;
            if !loss.is_finite() {
                let last = if have_checkpoint { checkpoint_path.display().to_string() } else { "none".into() };
                return Err(Error::Diverged { epoch, last_checkpoint: last });
            }
            model.backward_input(&g);
            opt.step(model);
        }
        let acc = model.accuracy(validation);
        if acc > best {
            best = acc;
            since_best = 0;
            model.save(checkpoint_path, &model.checkpoint_header(&digest, Some(acc), config))?;
            have_checkpoint = true;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    if !have_checkpoint {
        return Err(Error::Argument("pretraining ran zero epochs".into()));
    }
    // Reload the best epoch so the in-memory model matches the checkpoint.
    let (best_model, _) = ClassifierModel::load(checkpoint_path)?;
    *model = best_model;
    Ok(PretrainOutcome { checkpoint: checkpoint_path.to_path_buf(), accuracy: best, epochs_run })
}

/// Committee of four frozen classifiers in canonical architecture order.
pub struct Committee {
    pub members: Vec<ClassifierModel<f32>>,
}

impl Committee {
    pub fn new(members: Vec<ClassifierModel<f32>>) -> Result<Self> {
        if members.len() != 4 {
            return Err(Error::Argument(format!("a committee has four classifiers, got {}", members.len())));
        }
        if let Some(m) = members.iter().find(|m| !m.is_frozen()) {
            return Err(Error::Argument(format!("{} is not frozen", m.arch)));
        }
        Ok(Self { members })
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut members = Vec::new();
        for arch in ArchId::ALL {
            let path = classifier_path(dir, arch);
            if !path.exists() {
                return Err(Error::MissingPrerequisite { artifact: path.display().to_string(), stage: "train-classifiers".into() });
            }
            members.push(ClassifierModel::load(&path)?.0);
        }
        Self::new(members)
    }

    pub fn checksums(&self) -> Vec<String> {
        self.members.iter().map(|m| m.digest()).collect()
    }

    /// Hard labels of every member for a batch: `labels[n][i]`.
    pub fn labels(&mut self, x: &Array4<f32>) -> Vec<Vec<u8>> {
        self.members.iter_mut().map(|m| m.predict_batch(x).iter().map(assign_label).collect()).collect()
    }
}

pub fn classifier_path(dir: &Path, arch: ArchId) -> PathBuf {
    dir.join(format!("{}.ckpt", arch.stem()))
}

/// Per-image reference labels l_1..l_4 produced by the committee on clean images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub split: Split,
    pub split_digest: String,
    pub classifier_checksums: Vec<String>,
    pub ids: Vec<u32>,
    pub labels: Vec<[u8; 4]>,
}

impl LabelSet {
    pub fn get(&self, id: u32) -> Option<[u8; 4]> {
        self.ids.binary_search(&id).ok().map(|i| self.labels[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Ingest { file: path.into(), reason: e.to_string() })
    }

    /// Labels for `ids` in order, or an argument error naming the first
    /// uncovered id.
    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<[u8; 4]>> {
        ids.iter().map(|&id| self.get(id).ok_or_else(|| Error::Argument(format!("image id {id} has no reference labels")))).collect()
    }
}

/// Compute (or reuse a fresh cached copy of) the committee's reference labels.
pub fn generate_reference_labels(committee: &mut Committee, split: &DatasetSplit, cache: Option<&Path>) -> Result<LabelSet> {
    let checksums = committee.checksums();
    let digest = split.digest();
    if let Some(path) = cache {
        if path.exists() {
            if let Ok(cached) = LabelSet::load(path) {
                if cached.split_digest == digest && cached.classifier_checksums == checksums {
                    return Ok(cached);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by_key(|&i| split.records[i].id);
    let mut ids = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for chunk in order.chunks(100) {
        let imgs: Vec<ImageTensor> = chunk.iter().map(|&i| normalize(&split.records[i])).collect();
        let per = committee.labels(&stack_batch(&imgs));
        for (j, &i) in chunk.iter().enumerate() {
            ids.push(split.records[i].id);
            labels.push([per[0][j], per[1][j], per[2][j], per[3][j]]);
        }
    }
    let set = LabelSet { split: split.split, split_digest: digest, classifier_checksums: checksums, ids, labels };
    if let Some(path) = cache {
        set.save(path)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_tie_break() {
        let mut p = [0.0; 10];
        p[0] = 0.1;
        p[1] = 0.7;
        p[2] = 0.2;
        assert_eq!(assign_label(&ProbVector(p)), 1);
        assert_eq!(assign_label(&ProbVector([0.1; 10])), 0);
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!("lenet".parse::<ArchId>(), Err(Error::Config(_))));
        assert_eq!("resnet".parse::<ArchId>().unwrap(), ArchId::ResnetStyle);
        assert!(matches!(build_classifier::<f32>(ArchId::VggStyle, 100, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_softmax_and_distinct_sizes() {
        let mut counts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((3, 3, 32, 32), |_| rng.random_range(-1.0f32..1.0));
        for arch in ArchId::ALL {
            let mut m = build_classifier::<f32>(arch, 10, 8, 1).unwrap();
            counts.push(m.num_weights());
            let logits = m.logits(&x, Mode::Eval);
            assert_eq!(logits.dim(), (3, 10));
            let f = m.features(&x, Mode::Eval);
            assert_eq!(f.dim(), (3, m.cam_channels(), 8, 8));
            for p in m.predict_batch(&x) {
                assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(p.0.iter().all(|&v| v >= 0.0));
            }
        }
        let mut uniq = counts.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4, "{counts:?}");
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = build_classifier::<f32>(ArchId::DensenetStyle, 10, 8, 2).unwrap();
        m.freeze();
        let imgs: Vec<ImageTensor> = (0..4)
            .map(|i| ImageTensor { id: i, augmented: false, values: ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0f32..1.0)) })
            .collect();
        let batch = m.predict_batch(&stack_batch(&imgs));
        for (img, pb) in imgs.iter().zip(&batch) {
            let a = m.predict_softmax(img).unwrap();
            let b = m.predict_softmax(img).unwrap();
            assert_eq!(a, b);
            for (x, y) in a.0.iter().zip(pb.0.iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let bad = ImageTensor { id: 0, augmented: false, values: ndarray::Array3::zeros((3, 16, 16)) };
        assert!(matches!(m.predict_softmax(&bad), Err(Error::Argument(_))));
    }
}
