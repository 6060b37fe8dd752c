use std::path::Path;

use machine_jnd::cam::{build_cam_cache, CamCache};
use machine_jnd::classifier::{build_classifier, generate_reference_labels, ArchId, Committee};
use machine_jnd::config::RunConfig;
use machine_jnd::data::{load_dataset, normalize, write_synthetic_archive, Split, SyntheticArchive};
use machine_jnd::generator::{generate_jnd, GeneratorModel};
use machine_jnd::nn::{Mode, ParamSet};
use machine_jnd::pipeline::Run;
use machine_jnd::trainer::{read_metrics, TrainConfig, Trainer, TrainingData, BEST_CKPT, FINAL_CKPT};
use machine_jnd::{Error, GeneratorConfig};

const TINY: &str = r#"
[data]
subset_fraction = 0.5
seed = 3
[classifiers]
width = 2
epochs = 1
patience = 0
batch_size = 25
[generator]
encoder_widths = [4, 8, 16]
[train]
batch_size = 10
learning_rate = 1e-3
epochs = 2
"#;

fn tiny_archive(dir: &Path) {
    write_synthetic_archive(dir, &SyntheticArchive { train_per_file: 20, test_records: 40, seed: 1 }).unwrap();
}

fn prepared_run(dir: &Path, data: &Path, cfg: RunConfig) -> Run {
    let mut run = Run::open(dir, cfg, Some(data.to_path_buf()), false).unwrap();
    run.train_classifiers().unwrap();
    run.gen_labels(Split::Train).unwrap();
    run.cache_cams(Split::Train).unwrap();
    run
}

#[test]
fn full_size_archive_counts_and_stratified_subset() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_archive(dir.path(), &SyntheticArchive::default()).unwrap();
    assert_eq!(load_dataset(dir.path(), Split::Train, 1.0, 0).unwrap().len(), 50_000);
    assert_eq!(load_dataset(dir.path(), Split::Test, 1.0, 0).unwrap().len(), 10_000);
    let sub = load_dataset(dir.path(), Split::Train, 0.1, 7).unwrap();
    assert_eq!(sub.len(), 5000);
    let mut per_class = [0usize; 10];
    for r in &sub.records {
        per_class[r.class_index as usize] += 1;
    }
    assert_eq!(per_class, [500; 10]);
    assert_eq!(sub.digest(), load_dataset(dir.path(), Split::Train, 0.1, 7).unwrap().digest());
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let data = tempfile::tempdir().unwrap();
    tiny_archive(data.path());
    let cfg = RunConfig::parse(TINY).unwrap();

    let a = tempfile::tempdir().unwrap();
    let mut run_a = prepared_run(a.path(), data.path(), cfg.clone());
    run_a.train_jnd(None).unwrap();
    let straight = read_metrics(&run_a.metrics_path()).unwrap();
    assert_eq!(straight.len(), 2);

    let b = tempfile::tempdir().unwrap();
    let mut one = cfg.clone();
    one.train.epochs = 1;
    let mut run_b = prepared_run(b.path(), data.path(), one);
    run_b.train_jnd(None).unwrap();
    assert_eq!(read_metrics(&run_b.metrics_path()).unwrap().len(), 1);
    let ckpt = run_b.generator_dir().join(FINAL_CKPT);
    let mut run_b = Run::open(b.path(), cfg, Some(data.path().to_path_buf()), false).unwrap();
    run_b.train_jnd(Some(&ckpt)).unwrap();
    let resumed = read_metrics(&run_b.metrics_path()).unwrap();

    assert_eq!(resumed, straight);
    let (ga, _, _) = GeneratorModel::<f32>::load(&run_a.generator_dir().join(FINAL_CKPT)).unwrap();
    let (gb, _, _) = GeneratorModel::<f32>::load(&run_b.generator_dir().join(FINAL_CKPT)).unwrap();
    assert_eq!(ga.digest(), gb.digest());
}

#[test]
fn tampered_classifier_is_refused() {
    let data = tempfile::tempdir().unwrap();
    tiny_archive(data.path());
    let dir = tempfile::tempdir().unwrap();
    let run = prepared_run(dir.path(), data.path(), RunConfig::parse(TINY).unwrap());
    let split = load_dataset(data.path(), Split::Train, 0.5, 3).unwrap();
    let mut committee = Committee::load_dir(&run.classifiers_dir()).unwrap();
    let refs = generate_reference_labels(&mut committee, &split, None).unwrap();
    let cams = build_cam_cache(&mut committee, &split, &refs).unwrap();
    committee.members[2].visit_params_mut(&mut |p| p.value.mapv_inplace(|v| v * 1.0001));
    let mut tr = Trainer::new(
        TrainConfig { batch_size: 10, epochs: 1, ..Default::default() },
        &GeneratorConfig { encoder_widths: vec![4, 8, 16], ..Default::default() },
    )
    .unwrap();
    let td = TrainingData { split: &split, cams: &cams, refs: &refs };
    assert!(matches!(tr.train_epoch(&mut committee, &td), Err(Error::Internal(_))));
    assert_eq!(tr.epoch, 0);
}

#[test]
fn committee_rejects_unfrozen_members() {
    let members: Vec<_> = ArchId::ALL.iter().map(|&a| build_classifier::<f32>(a, 10, 2, 0).unwrap()).collect();
    assert!(matches!(Committee::new(members), Err(Error::Argument(_))));
}

#[test]
fn ablation_without_noise_terms_trains_on_loss1_only() {
    let data = tempfile::tempdir().unwrap();
    tiny_archive(data.path());
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.train.alpha = 0.0;
    cfg.train.beta = 0.0;
    let mut run = prepared_run(dir.path(), data.path(), cfg);
    run.train_jnd(None).unwrap();
    let rows = read_metrics(&run.metrics_path()).unwrap();
    for r in &rows {
        assert_eq!(r.loss, r.loss1);
        assert!(r.loss2.is_finite() && r.loss3.is_finite());
        assert!(r.rca >= 0.0 && r.rca <= 100.0);
    }
}

#[test]
fn generator_checkpoint_round_trip() {
    let data = tempfile::tempdir().unwrap();
    tiny_archive(data.path());
    let dir = tempfile::tempdir().unwrap();
    let mut run = prepared_run(dir.path(), data.path(), RunConfig::parse(TINY).unwrap());
    run.train_jnd(None).unwrap();
    let path = run.generator_dir().join(FINAL_CKPT);
    assert!(run.generator_dir().join(BEST_CKPT).exists());
    let (mut g, header, opt) = GeneratorModel::<f32>::load(&path).unwrap();
    assert_eq!(header.epoch, 2);
    assert_eq!(header.kind, "generator");
    assert!(opt.is_some());

    let copy = dir.path().join("copy.ckpt");
    g.save(&copy, &header, opt.as_ref()).unwrap();
    let (mut g2, header2, _) = GeneratorModel::<f32>::load(&copy).unwrap();
    assert_eq!(g.digest(), g2.digest());
    assert_eq!(header2.config_digest, header.config_digest);

    let split = load_dataset(data.path(), Split::Train, 0.5, 3).unwrap();
    let cams = CamCache::load(&run.cams_path(Split::Train)).unwrap();
    let x = normalize(&split.records[0]);
    let c = cams.get(x.id).unwrap();
    assert_eq!(generate_jnd(&mut g, &x, &c).unwrap().values, generate_jnd(&mut g2, &x, &c).unwrap().values);
    let input = ndarray::Array4::<f32>::zeros((1, 4, 32, 32));
    assert_eq!(g.forward(&input, Mode::Eval), g2.forward(&input, Mode::Eval));
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let data = tempfile::tempdir().unwrap();
    tiny_archive(data.path());
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(dir.path(), RunConfig::parse(TINY).unwrap(), Some(data.path().to_path_buf()), false).unwrap();
    let stage = |e: Error| match e {
        Error::MissingPrerequisite { stage, .. } => stage,
        other => panic!("expected a missing prerequisite, got {other}"),
    };
    assert_eq!(stage(run.gen_labels(Split::Train).unwrap_err()), "train-classifiers");
    run.train_classifiers().unwrap();
    assert_eq!(stage(run.cache_cams(Split::Train).unwrap_err()), "gen-labels --split train");
    run.gen_labels(Split::Train).unwrap();
    assert_eq!(stage(run.train_jnd(None).unwrap_err()), "cache-cams --split train");
    run.cache_cams(Split::Train).unwrap();
    assert_eq!(stage(run.homogeneity(Split::Train).unwrap_err()), "train-jnd");
    assert!(run.cache_cams(Split::Train).unwrap().skipped);
}
