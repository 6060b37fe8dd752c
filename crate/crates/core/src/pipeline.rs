//! Stage orchestration over a run directory.
//!
//! Layout:
//!
//! ```text
//! <run>/config.toml              effective configuration
//! <run>/manifest.json            digests of inputs and artifacts per stage
//! <run>/classifiers/<arch>.ckpt
//! <run>/labels/<split>.json
//! <run>/cams/<split>.cam
//! <run>/generator/{final,best}.ckpt
//! <run>/metrics.csv
//! <run>/reports/*.csv, summary.md
//! <run>/visuals/*.png
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::{build_cam_cache, CamCache};
use crate::classifier::{build_classifier, classifier_path, generate_reference_labels, pretrain_classifier, ArchId, Committee, LabelSet};
use crate::config::RunConfig;
use crate::data::{load_dataset, normalize, DatasetSplit, ImageTensor, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{homogeneity_test, spatial_distribution, wgn_baseline, HomogeneityReport, RcaReport, SpatialReport, WgnReport};
use crate::generator::{apply_jnd, GeneratorModel};
use crate::trainer::{self, generate_all, read_metrics, Trainer, TrainingData, FINAL_CKPT};
use crate::visual;

pub const DATA_ROOT_ENV: &str = "MJND_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of everything the stage read.
    pub key: String,
    pub completed_at: u64,
    /// Run-relative path → SHA-256 of the file.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub dataset_digests: BTreeMap<String, String>,
    pub classifier_digests: BTreeMap<String, String>,
    pub generator_digest: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub created_at: u64,
    pub updated_at: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn json_digest(v: &serde_json::Value) -> String {
    sha_hex(v.to_string().as_bytes())
}

/// Outcome of one stage invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    /// True when the stage was already complete and nothing ran.
    pub skipped: bool,
    pub message: String,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub data_root: Option<PathBuf>,
    pub manifest: RunManifest,
    /// Rerun stages even when their inputs are unchanged.
    pub force: bool,
}

impl Run {
    /// Open (or create) a run directory with the effective `config`.
    pub fn open(dir: &Path, config: RunConfig, data_root: Option<PathBuf>, force: bool) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join("manifest.json");
        let mut manifest = if mpath.exists() {
            let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Ingest { file: mpath.clone(), reason: e.to_string() })?
        } else {
            RunManifest { created_at: now(), ..Default::default() }
        };
        manifest.tool_version = env!("CARGO_PKG_VERSION").into();
        manifest.config = config.to_json();
        manifest.config_digest = json_digest(&manifest.config);
        let data_root = data_root.or_else(|| config.data.root.clone());
        let run = Run { dir: dir.to_path_buf(), config, data_root, manifest, force };
        let cfg_path = run.dir.join("config.toml");
        fs::write(&cfg_path, run.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let p = self.dir.join("manifest.json");
        let mut m = self.manifest.clone();
        m.updated_at = now();
        let bytes = serde_json::to_vec_pretty(&m).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn classifiers_dir(&self) -> PathBuf {
        self.path("classifiers")
    }

    pub fn labels_path(&self, split: Split) -> PathBuf {
        self.path(&format!("labels/{split}.json"))
    }

    pub fn cams_path(&self, split: Split) -> PathBuf {
        self.path(&format!("cams/{split}.cam"))
    }

    pub fn generator_dir(&self) -> PathBuf {
        self.path("generator")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path("metrics.csv")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.path("reports")
    }

    fn data_root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| Error::Argument(format!("no data root; pass --data-root, set {DATA_ROOT_ENV} or [data].root")))
    }

    fn load(&mut self, split: Split, fraction: f64) -> Result<DatasetSplit> {
        let d = load_dataset(self.data_root()?, split, fraction, self.config.data.seed)?;
        self.manifest.dataset_digests.insert(format!("{split}@{fraction}"), d.digest());
        Ok(d)
    }

    fn load_stage_split(&mut self, split: Split) -> Result<DatasetSplit> {
        let f = self.config.data.subset_fraction;
        self.load(split, f)
    }

    fn up_to_date(&self, stage: &str, key: &str) -> bool {
        if self.force {
            return false;
        }
        let Some(rec) = self.manifest.stages.get(stage) else { return false };
        rec.key == key && rec.artifacts.iter().all(|(rel, digest)| file_digest(&self.dir.join(rel)).map(|d| &d == digest).unwrap_or(false))
    }

    fn record(&mut self, stage: &str, key: String, artifacts: &[PathBuf]) -> Result<()> {
        let mut map = BTreeMap::new();
        for p in artifacts {
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            map.insert(rel, file_digest(p)?);
        }
        self.manifest.stages.insert(stage.into(), StageRecord { key, completed_at: now(), artifacts: map });
        self.save_manifest()
    }

    fn committee(&mut self) -> Result<Committee> {
        let c = Committee::load_dir(&self.classifiers_dir())?;
        for (arch, sum) in ArchId::ALL.iter().zip(c.checksums()) {
            self.manifest.classifier_digests.insert(arch.as_str().into(), sum);
        }
        Ok(c)
    }

    fn labels(&self, split: Split, committee: &Committee) -> Result<LabelSet> {
        let p = self.labels_path(split);
        let stage = format!("gen-labels --split {split}");
        if !p.exists() {
            return Err(Error::MissingPrerequisite { artifact: p.display().to_string(), stage });
        }
        let l = LabelSet::load(&p)?;
        if l.classifier_checksums != committee.checksums() {
            return Err(Error::MissingPrerequisite { artifact: format!("{} (stale: classifiers changed)", p.display()), stage });
        }
        Ok(l)
    }

    fn cams(&self, split: Split, labels: &LabelSet) -> Result<CamCache> {
        let p = self.cams_path(split);
        let stage = format!("cache-cams --split {split}");
        if !p.exists() {
            return Err(Error::MissingPrerequisite { artifact: p.display().to_string(), stage });
        }
        let c = CamCache::load(&p)?;
        if !c.is_fresh(&labels.split_digest, &labels.classifier_checksums) {
            return Err(Error::MissingPrerequisite { artifact: format!("{} (stale)", p.display()), stage });
        }
        Ok(c)
    }

    fn generator(&mut self) -> Result<GeneratorModel<f32>> {
        let p = self.generator_dir().join(FINAL_CKPT);
        if !p.exists() {
            return Err(Error::MissingPrerequisite { artifact: p.display().to_string(), stage: "train-jnd".into() });
        }
        let (g, _, _) = GeneratorModel::load(&p)?;
        self.manifest.generator_digest = Some(g.digest());
        Ok(g)
    }

    pub fn train_classifiers(&mut self) -> Result<StageReport> {
        let cfg = self.config.classifiers.clone();
        let train = self.load(Split::Train, cfg.train_fraction)?;
        let val = self.load(Split::Test, cfg.train_fraction)?;
        let key = json_digest(&serde_json::json!({ "classifiers": cfg, "train": train.digest(), "validation": val.digest() }));
        if self.up_to_date("train-classifiers", &key) {
            return Ok(StageReport { stage: "train-classifiers", skipped: true, message: "classifiers up to date".into() });
        }
        let mut paths = Vec::new();
        let mut msg = String::new();
        for arch in ArchId::ALL {
            let mut model = build_classifier::<f32>(arch, NUM_CLASSES, cfg.width, cfg.seed)?;
            let path = classifier_path(&self.classifiers_dir(), arch);
            let out = pretrain_classifier(&mut model, &train, &val, &cfg, &path)?;
            let _ = writeln!(msg, "{arch}: validation accuracy {:.2}% after {} epochs", out.accuracy, out.epochs_run);
            self.manifest.classifier_digests.insert(arch.as_str().into(), model.digest());
            paths.push(path);
        }
        self.record("train-classifiers", key, &paths)?;
        Ok(StageReport { stage: "train-classifiers", skipped: false, message: msg })
    }

    pub fn gen_labels(&mut self, split: Split) -> Result<StageReport> {
        let mut committee = self.committee()?;
        let data = self.load_stage_split(split)?;
        let stage = stage_name("gen-labels", split);
        let key = json_digest(&serde_json::json!({ "classifiers": committee.checksums(), "split": data.digest() }));
        if self.up_to_date(&stage, &key) {
            return Ok(StageReport { stage: "gen-labels", skipped: true, message: format!("{split} labels up to date") });
        }
        let path = self.labels_path(split);
        let set = generate_reference_labels(&mut committee, &data, None)?;
        set.save(&path)?;
        let agree = set.labels.iter().filter(|l| l.iter().all(|&v| v == l[0])).count();
        self.record(&stage, key, &[path])?;
        Ok(StageReport { stage: "gen-labels", skipped: false, message: format!("{} {split} images labelled; all four agree on {agree}", set.len()) })
    }

    pub fn cache_cams(&mut self, split: Split) -> Result<StageReport> {
        let mut committee = self.committee()?;
        let labels = self.labels(split, &committee)?;
        let data = self.load_stage_split(split)?;
        if labels.split_digest != data.digest() {
            return Err(Error::MissingPrerequisite {
                artifact: format!("{} (built for a different subset)", self.labels_path(split).display()),
                stage: format!("gen-labels --split {split}"),
            });
        }
        let stage = stage_name("cache-cams", split);
        let key = json_digest(&serde_json::json!({ "labels": file_digest(&self.labels_path(split))?, "split": data.digest() }));
        if self.up_to_date(&stage, &key) {
            return Ok(StageReport { stage: "cache-cams", skipped: true, message: format!("{split} CAM cache up to date") });
        }
        let cache = build_cam_cache(&mut committee, &data, &labels)?;
        let path = self.cams_path(split);
        cache.save(&path)?;
        self.record(&stage, key, &[path])?;
        Ok(StageReport { stage: "cache-cams", skipped: false, message: format!("{} merged CAMs cached for {split}", cache.ids.len()) })
    }

    /// Train (or continue training) the generator on the training split.
    pub fn train_jnd(&mut self, resume: Option<&Path>) -> Result<StageReport> {
        let mut committee = self.committee()?;
        let labels = self.labels(Split::Train, &committee)?;
        let cams = self.cams(Split::Train, &labels)?;
        let data = self.load_stage_split(Split::Train)?;
        if labels.split_digest != data.digest() {
            return Err(Error::MissingPrerequisite {
                artifact: format!("{} (built for a different subset)", self.labels_path(Split::Train).display()),
                stage: "gen-labels".into(),
            });
        }
        let key = json_digest(&serde_json::json!({
            "train": self.config.train, "generator": self.config.generator,
            "labels": file_digest(&self.labels_path(Split::Train))?, "cams": file_digest(&self.cams_path(Split::Train))?,
        }));
        if resume.is_none() && self.up_to_date("train-jnd", &key) {
            return Ok(StageReport { stage: "train-jnd", skipped: true, message: "generator up to date".into() });
        }
        let mut tr = match resume {
            Some(p) => Trainer::resume(self.config.train.clone(), p)?,
            None => Trainer::new(self.config.train.clone(), &self.config.generator)?,
        };
        let before = committee.checksums();
        let td = TrainingData { split: &data, cams: &cams, refs: &labels };
        let out = trainer::train(&mut tr, &mut committee, &td, &self.generator_dir(), &self.metrics_path())?;
        if committee.checksums() != before {
            return Err(Error::Internal("classifier parameters changed during generator training".into()));
        }
        self.manifest.generator_digest = Some(tr.generator.digest());
        self.record("train-jnd", key, &[out.final_checkpoint.clone(), out.best_checkpoint.clone(), out.metrics_path.clone()])?;
        let msg = match out.records.last() {
            Some(r) => format!("epoch {}: loss {:.4}, RCA {:.2}%, PSNR {:.2} dB", r.epoch, r.loss, r.rca, r.psnr),
            None => "no epochs to run".into(),
        };
        Ok(StageReport { stage: "train-jnd", skipped: false, message: msg })
    }

    /// Everything the measurement stages share.
    fn eval_inputs(&mut self, split: Split) -> Result<EvalInputs> {
        let generator = self.generator()?;
        let committee = self.committee()?;
        let labels = self.labels(split, &committee)?;
        let cams = self.cams(split, &labels)?;
        let data = self.load_stage_split(split)?;
        if labels.split_digest != data.digest() {
            return Err(Error::MissingPrerequisite {
                artifact: format!("{} (built for a different subset)", self.labels_path(split).display()),
                stage: format!("gen-labels --split {split}"),
            });
        }
        let images: Vec<ImageTensor> = data.records.iter().map(normalize).collect();
        let key = json_digest(&serde_json::json!({
            "generator": file_digest(&self.generator_dir().join(FINAL_CKPT))?, "labels": labels.split_digest, "classifiers": labels.classifier_checksums, "eval": self.config.eval,
        }));
        Ok(EvalInputs { generator, committee, labels, cams, images, key })
    }

    pub fn eval(&mut self, split: Split) -> Result<(StageReport, RcaReport, f64, SpatialReport)> {
        let mut inp = self.eval_inputs(split)?;
        let jnds = generate_all(&mut inp.generator, &inp.images, &inp.cams)?;
        let rca = crate::eval::rca_under_jnd(&mut inp.committee, &inp.images, &jnds, 1.0, &inp.labels)?;
        let psnr = crate::eval::mean_psnr(&jnds);
        let cams = inp.cams.lookup(&inp.images.iter().map(|t| t.id).collect::<Vec<_>>())?;
        let spatial = spatial_distribution(&cams, &jnds)?;
        let path = self.reports_dir().join(format!("eval_{split}.csv"));
        write_csv(
            &path,
            &["split", "count", "rca", "rca_1", "rca_2", "rca_3", "rca_4", "psnr", "spatial_bottom", "spatial_top", "spatial_ratio"],
            &[vec![
                split.to_string(),
                rca.count.to_string(),
                f(rca.acc),
                f(rca.acc_n[0]),
                f(rca.acc_n[1]),
                f(rca.acc_n[2]),
                f(rca.acc_n[3]),
                f(psnr),
                f(spatial.bottom_decile),
                f(spatial.top_decile),
                f(spatial.ratio()),
            ]],
        )?;
        self.record(&stage_name("eval", split), inp.key, &[path])?;
        let msg = format!("{split}: RCA {:.2}% ({}), PSNR {:.2} dB, low/high-attention noise ratio {:.3}", rca.acc, fmt_acc(&rca), psnr, spatial.ratio());
        Ok((StageReport { stage: "eval", skipped: false, message: msg }, rca, psnr, spatial))
    }

    pub fn wgn_baseline(&mut self, split: Split) -> Result<(StageReport, WgnReport)> {
        let mut inp = self.eval_inputs(split)?;
        let jnds = generate_all(&mut inp.generator, &inp.images, &inp.cams)?;
        let rep = wgn_baseline(&mut inp.committee, &inp.images, &jnds, &inp.labels, self.config.eval.wgn_seed)?;
        let path = self.reports_dir().join(format!("wgn_{split}.csv"));
        let mut header = vec!["split", "count", "jnd_rca", "jnd_rca_1", "jnd_rca_2", "jnd_rca_3", "jnd_rca_4"];
        header.extend(["wgn_rca", "wgn_rca_1", "wgn_rca_2", "wgn_rca_3", "wgn_rca_4", "jnd_psnr", "wgn_psnr", "gap"]);
        let mut row = vec![split.to_string(), rep.jnd.count.to_string()];
        for r in [&rep.jnd, &rep.wgn] {
            row.push(f(r.acc));
            row.extend(r.acc_n.iter().map(|&v| f(v)));
        }
        row.extend([f(rep.jnd_psnr), f(rep.wgn_psnr), f(rep.gap())]);
        write_csv(&path, &header, &[row])?;
        self.record(&stage_name("wgn-baseline", split), inp.key, &[path])?;
        let msg = format!("{split}: RCA under JND {:.2}%, under RMS-matched WGN {:.2}% (gap {:.2} points)", rep.jnd.acc, rep.wgn.acc, rep.gap());
        Ok((StageReport { stage: "wgn-baseline", skipped: false, message: msg }, rep))
    }

    pub fn homogeneity(&mut self, split: Split) -> Result<(StageReport, HomogeneityReport)> {
        let mut inp = self.eval_inputs(split)?;
        let jnds = generate_all(&mut inp.generator, &inp.images, &inp.cams)?;
        let rep = homogeneity_test(&mut inp.committee, &inp.images, &jnds, &inp.labels)?;
        let path = self.reports_dir().join(format!("homogeneity_{split}.csv"));
        let rows: Vec<Vec<String>> = rep
            .entries
            .iter()
            .map(|(k, r)| {
                let mut row = vec![k.to_string(), f(*k as f64 / 9.0), f(r.acc)];
                row.extend(r.acc_n.iter().map(|&v| f(v)));
                row
            })
            .collect();
        write_csv(&path, &["k", "fraction", "rca", "rca_1", "rca_2", "rca_3", "rca_4"], &rows)?;
        self.record(&stage_name("homogeneity", split), inp.key, &[path])?;
        let table: Vec<String> = rep.entries.iter().map(|(k, r)| format!("{k}/9: {:.2}%", r.acc)).collect();
        Ok((StageReport { stage: "homogeneity", skipped: false, message: format!("{split}: {}", table.join(", ")) }, rep))
    }

    /// PNG exports for `ids` (or the first `eval.visual_count` images) plus
    /// trend plots from the metrics log.
    pub fn visualize(&mut self, split: Split, ids: &[u32]) -> Result<StageReport> {
        let mut inp = self.eval_inputs(split)?;
        let chosen: Vec<ImageTensor> = if ids.is_empty() {
            inp.images.iter().take(self.config.eval.visual_count).cloned().collect()
        } else {
            ids.iter()
                .map(|id| {
                    inp.images.iter().find(|t| t.id == *id).cloned().ok_or_else(|| Error::Argument(format!("image id {id} is not in the {split} subset")))
                })
                .collect::<Result<_>>()?
        };
        let out_dir = self.path("visuals");
        let mut written = Vec::new();
        if !chosen.is_empty() {
            let jnds = generate_all(&mut inp.generator, &chosen, &inp.cams)?;
            for (x, e) in chosen.iter().zip(&jnds) {
                let c = inp.cams.get(x.id).expect("looked up above");
                written.extend(visual::export_visuals(x, &c, e, &apply_jnd(x, e)?, &out_dir)?);
            }
        }
        if self.metrics_path().exists() {
            let m = read_metrics(&self.metrics_path())?;
            for (name, series) in [
                ("loss", m.iter().map(|r| r.loss).collect::<Vec<_>>()),
                ("loss1", m.iter().map(|r| r.loss1).collect()),
                ("loss2", m.iter().map(|r| r.loss2).collect()),
                ("loss3", m.iter().map(|r| r.loss3).collect()),
                ("rca", m.iter().map(|r| r.rca).collect()),
                ("psnr", m.iter().map(|r| r.psnr).collect()),
            ] {
                let p = out_dir.join(format!("trend_{name}.png"));
                visual::plot_series(&series, &p)?;
                written.push(p);
            }
        }
        self.record(&stage_name("visualize", split), inp.key, &written)?;
        Ok(StageReport { stage: "visualize", skipped: false, message: format!("{} files written to {}", written.len(), out_dir.display()) })
    }

    /// Render every report CSV and the metrics log into `reports/summary.md`.
    pub fn report(&mut self) -> Result<(StageReport, String)> {
        let rdir = self.reports_dir();
        let mut s = String::new();
        let _ = writeln!(s, "# Run summary\n\nrun directory: {}\nconfig digest: {}\n", self.dir.display(), self.manifest.config_digest);
        let mut any = false;
        if self.metrics_path().exists() {
            let m = read_metrics(&self.metrics_path())?;
            if let (Some(first), Some(last)) = (m.first(), m.last()) {
                any = true;
                let _ = writeln!(s, "## Training\n\nepochs: {}\n", m.len());
                let _ = writeln!(s, "| epoch | loss | loss1 | loss2 | loss3 | RCA % | PSNR dB |\n|---|---|---|---|---|---|---|");
                for r in [first, last] {
                    let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.2} |", r.epoch, r.loss, r.loss1, r.loss2, r.loss3, r.rca, r.psnr);
                }
                s.push('\n');
            }
        }
        for split in [Split::Train, Split::Test] {
            for (title, name) in [("Evaluation", "eval"), ("White-noise control", "wgn"), ("Homogeneity sweep", "homogeneity")] {
                let p = rdir.join(format!("{name}_{split}.csv"));
                if !p.exists() {
                    continue;
                }
                any = true;
                let _ = writeln!(s, "## {title} ({split})\n");
                s.push_str(&csv_to_markdown(&p)?);
                s.push('\n');
            }
        }
        if !any {
            return Err(Error::MissingPrerequisite { artifact: format!("{} or {}", self.metrics_path().display(), rdir.display()), stage: "train-jnd".into() });
        }
        fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        let path = rdir.join("summary.md");
        fs::write(&path, &s).map_err(|e| Error::io(&path, e))?;
        self.save_manifest()?;
        Ok((StageReport { stage: "report", skipped: false, message: format!("summary written to {}", path.display()) }, s))
    }
}

struct EvalInputs {
    generator: GeneratorModel<f32>,
    committee: Committee,
    labels: LabelSet,
    cams: CamCache,
    images: Vec<ImageTensor>,
    key: String,
}

fn stage_name(stage: &str, split: Split) -> String {
    format!("{stage}:{split}")
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_acc(r: &RcaReport) -> String {
    r.acc_n.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" / ")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let err = |e: csv::Error| Error::Internal(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_to_markdown(path: &Path) -> Result<String> {
    let err = |e: csv::Error| Error::Ingest { file: path.into(), reason: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header: Vec<String> = r.headers().map_err(err)?.iter().map(String::from).collect();
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        s.push_str(&format!("| {} |\n", rec.iter().collect::<Vec<_>>().join(" | ")));
    }
    Ok(s)
}
