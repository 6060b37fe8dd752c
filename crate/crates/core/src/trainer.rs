//! Unsupervised generator training against the frozen committee.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::{CamCache, CamMap};
use crate::checkpoint::{CheckpointHeader, FORMAT_VERSION};
use crate::classifier::{Committee, LabelSet};
use crate::data::{normalize, stack_batch, DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::eval::{mean_psnr, rca_under_jnd, RcaReport};
use crate::generator::{build_generator, stack_batch_inputs, GeneratorConfig, GeneratorModel, JndImage};
use crate::losses::{loss1_with_grad, noise_losses_with_grad, stack_cams, total_loss, Loss3Mode, DEFAULT_Q};
use crate::nn::{Adam, AdamConfig, Mode, ParamSet, WeightDecayMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub q: f64,
    pub flip_probability: f64,
    pub loss3_mode: Loss3Mode,
    /// Fraction of the training split scored after each epoch; the last
    /// epoch is always scored in full.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            decay_mode: WeightDecayMode::Coupled,
            epochs: 200,
            alpha: 1.0,
            beta: 1.0,
            q: DEFAULT_Q,
            flip_probability: 0.5,
            loss3_mode: Loss3Mode::Magnitude,
            eval_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.q > 0.0) {
            return bad("q must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip_probability must lie in [0, 1]");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("eval_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub rca: f64,
    pub rca_1: f64,
    pub rca_2: f64,
    pub rca_3: f64,
    pub rca_4: f64,
    pub psnr: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Ingest { file: path.into(), reason: e.to_string() })?;
    rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::Ingest { file: path.into(), reason: e.to_string() })
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Internal(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything the trainer reads besides the generator.
pub struct TrainingData<'a> {
    pub split: &'a DatasetSplit,
    pub cams: &'a CamCache,
    pub refs: &'a LabelSet,
}

impl TrainingData<'_> {
    fn check(&self, committee: &Committee) -> Result<()> {
        let digest = self.split.digest();
        if self.refs.split_digest != digest || self.cams.split_digest != digest {
            return Err(Error::Argument("labels or CAM cache were built for a different split".into()));
        }
        let sums = committee.checksums();
        if self.refs.classifier_checksums != sums || self.cams.classifier_checksums != sums {
            return Err(Error::Internal("classifier parameters differ from those that produced the reference labels".into()));
        }
        Ok(())
    }
}

/// Averages of the batch losses over one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: GeneratorModel<f32>,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, generator_config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(generator_config)?;
        let optimizer = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay, config.decay_mode));
        Ok(Self { config, generator, optimizer, epoch: 0 })
    }

    /// Continue from a generator checkpoint written by [`train`].
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let (generator, header, state) = GeneratorModel::load(path)?;
        let mut optimizer = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay, config.decay_mode));
        optimizer.state = state.ok_or_else(|| Error::Checkpoint { path: path.into(), reason: "no optimizer state to resume from".into() })?;
        Ok(Self { config, generator, optimizer, epoch: header.epoch })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// One pass over the training split with flip augmentation; the CAM of a
    /// flipped image is flipped with it.
    pub fn train_epoch(&mut self, committee: &mut Committee, data: &TrainingData) -> Result<EpochLosses> {
        data.check(committee)?;
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.split.len()).collect();
        order.shuffle(&mut rng);
        let cfg = self.config.clone();
        let mut sums = EpochLosses::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut cs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &data.split.records[i];
                let cam = data.cams.get(rec.id).ok_or_else(|| Error::Argument(format!("image id {} missing from CAM cache", rec.id)))?;
                if rng.random_bool(cfg.flip_probability) {
                    let mut t = normalize(&rec.mirrored());
                    t.augmented = true;
                    xs.push(t);
                    cs.push(cam.mirrored());
                } else {
                    xs.push(normalize(rec));
                    cs.push(cam);
                }
            }
            let ids: Vec<u32> = xs.iter().map(|t| t.id).collect();
            let refs = data.refs.lookup(&ids)?;
            let x = stack_batch(&xs);
            let input = stack_batch_inputs(&xs, &cs)?;
            let cams = stack_cams(&cs);

            self.generator.zero_grad();
            let e = self.generator.forward(&input, Mode::Train);
            let xhat = &x + &e;
            let (l1, mut grad) = loss1_with_grad(&mut committee.members, &xhat, &refs)?;
            let (l2, l3, g_noise) = noise_losses_with_grad(cams.view(), &e, cfg.q, cfg.alpha, cfg.beta, cfg.loss3_mode);
            if !(l1.is_finite() && l2.is_finite() && l3.is_finite()) {
                return Err(Error::Diverged { epoch, last_checkpoint: String::new() });
            }
            grad += &g_noise;
            self.generator.backward(&grad);
            self.optimizer.step(&mut self.generator);
            sums.loss1 += l1;
            sums.loss2 += l2;
            sums.loss3 += l3;
            batches += 1;
        }
        data.check(committee)?;
        self.epoch = epoch;
        let b = batches.max(1) as f64;
        Ok(EpochLosses { loss1: sums.loss1 / b, loss2: sums.loss2 / b, loss3: sums.loss3 / b })
    }

    pub fn checkpoint_header(&self, dataset_digest: &str, rca: Option<f64>) -> CheckpointHeader {
        let config = serde_json::json!({ "train": self.config, "generator": self.generator.config });
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: "generator".into(),
            arch_id: "encoder-decoder".into(),
            config_digest: config_digest(&config),
            config,
            seed: self.config.seed,
            dataset_digest: dataset_digest.into(),
            accuracy: rca,
            epoch: self.epoch,
            tensor_shapes: Vec::new(),
            optimizer_step: None,
        }
    }
}

pub fn config_digest(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Inference-mode noise for `images`, each paired with its cached CAM.
pub fn generate_all(generator: &mut GeneratorModel<f32>, images: &[ImageTensor], cams: &CamCache) -> Result<Vec<JndImage>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(100) {
        let ids: Vec<u32> = chunk.iter().map(|t| t.id).collect();
        let cs: Vec<CamMap> = cams.lookup(&ids)?;
        let e = generator.forward(&stack_batch_inputs(chunk, &cs)?, Mode::Eval);
        out.extend(e.outer_iter().zip(&ids).map(|(v, &id)| JndImage { id, values: v.to_owned() }));
    }
    Ok(out)
}

/// Clean-image RCA and mean PSNR of the generator's noise.
pub fn evaluate(
    generator: &mut GeneratorModel<f32>,
    committee: &mut Committee,
    images: &[ImageTensor],
    cams: &CamCache,
    refs: &LabelSet,
) -> Result<(RcaReport, f64)> {
    let jnds = generate_all(generator, images, cams)?;
    Ok((rca_under_jnd(committee, images, &jnds, 1.0, refs)?, mean_psnr(&jnds)))
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Run epochs `trainer.epoch + 1 ..= config.epochs`, scoring after each one,
/// writing `final.ckpt`, `best.ckpt` (highest RCA, later epochs win ties)
/// into `out_dir` and the metrics log to `metrics_path`.
pub fn train(trainer: &mut Trainer, committee: &mut Committee, data: &TrainingData, out_dir: &Path, metrics_path: &Path) -> Result<TrainOutcome> {
    let final_path = out_dir.join(FINAL_CKPT);
    let best_path = out_dir.join(BEST_CKPT);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = if trainer.epoch > 0 && metrics_path.exists() {
        let mut r = read_metrics(metrics_path)?;
        r.retain(|m| m.epoch <= trainer.epoch);
        r
    } else {
        Vec::new()
    };
    if records.len() != trainer.epoch {
        return Err(Error::Argument(format!("metrics log has {} rows but the checkpoint is at epoch {}", records.len(), trainer.epoch)));
    }
    let mut best = records.iter().map(|r| r.rca).fold(f64::NEG_INFINITY, f64::max);
    let images: Vec<ImageTensor> = data.split.records.iter().map(normalize).collect();
    let mut eval_order: Vec<usize> = (0..images.len()).collect();
    eval_order.shuffle(&mut ChaCha8Rng::seed_from_u64(trainer.config.seed ^ 0xe7a1));
    let n_eval = ((trainer.config.eval_fraction * images.len() as f64).ceil() as usize).clamp(1, images.len().max(1));
    let mut eval_subset: Vec<ImageTensor> = eval_order[..n_eval].iter().map(|&i| images[i].clone()).collect();
    eval_subset.sort_by_key(|t| t.id);
    let digest = data.split.digest();

    while trainer.epoch < trainer.config.epochs {
        let losses = match trainer.train_epoch(committee, data) {
            Err(Error::Diverged { epoch, .. }) => {
                let last = if final_path.exists() { final_path.display().to_string() } else { "none".into() };
                return Err(Error::Diverged { epoch, last_checkpoint: last });
            }
            other => other?,
        };
        let scored = if trainer.epoch == trainer.config.epochs { &images } else { &eval_subset };
        let (rca, psnr) = evaluate(&mut trainer.generator, committee, scored, data.cams, data.refs)?;
        let bundle = total_loss(losses.loss1, losses.loss2, losses.loss3, trainer.config.alpha, trainer.config.beta);
        records.push(MetricsRecord {
            epoch: trainer.epoch,
            loss: bundle.total,
            loss1: bundle.loss1,
            loss2: bundle.loss2,
            loss3: bundle.loss3,
            rca: rca.acc,
            rca_1: rca.acc_n[0],
            rca_2: rca.acc_n[1],
            rca_3: rca.acc_n[2],
            rca_4: rca.acc_n[3],
            psnr,
        });
        let header = trainer.checkpoint_header(&digest, Some(rca.acc));
        trainer.generator.save(&final_path, &header, Some(&trainer.optimizer.state))?;
        if rca.acc >= best {
            best = rca.acc;
            trainer.generator.save(&best_path, &header, Some(&trainer.optimizer.state))?;
        }
        write_metrics(metrics_path, &records)?;
    }
    Ok(TrainOutcome { final_checkpoint: final_path, best_checkpoint: best_path, metrics_path: metrics_path.to_path_buf(), records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.weight_decay, c.epochs), (50, 1e-5, 1e-3, 200));
        assert_eq!((c.alpha, c.beta, c.flip_probability), (1.0, 1.0, 0.5));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { alpha: 0.0, beta: 0.0, ..c.clone() }.validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { q: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { eval_fraction: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = MetricsRecord {
            epoch: 1,
            loss: 3.0,
            loss1: 1.0,
            loss2: 1.5,
            loss3: 0.5,
            rca: 97.5,
            rca_1: 100.0,
            rca_2: 95.0,
            rca_3: 97.5,
            rca_4: 97.5,
            psnr: 31.2,
        };
        write_metrics(&p, &[r.clone()]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,loss,loss1,loss2,loss3,rca,rca_1,rca_2,rca_3,rca_4,psnr\n"));
        assert_eq!(read_metrics(&p).unwrap(), vec![r]);
    }
}
