//! Argument parsing and stage dispatch for the `mjnd` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use machine_jnd::config::{load_config, RunConfig};
use machine_jnd::data::{write_synthetic_archive, SyntheticArchive};
use machine_jnd::pipeline::{Run, DATA_ROOT_ENV};
use machine_jnd::{Error, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mjnd", version, about = "Train and evaluate per-image JND noise for a committee of CNN classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// TOML config; defaults to <run-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory with the binary dataset archive.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Stratified subset fraction of each split, in (0, 1].
    #[arg(long, global = true)]
    subset: Option<f64>,
    /// Seed for subsetting, initialization and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun the stage even if its inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Args)]
struct SplitArg {
    #[arg(long, default_value = "train")]
    split: Split,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain and freeze the four classifiers.
    TrainClassifiers,
    /// Record each classifier's label on every clean image.
    GenLabels(SplitArg),
    /// Compute and cache merged CAMs.
    CacheCams(SplitArg),
    /// Train the noise generator.
    TrainJnd {
        /// Generator checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// RCA, PSNR and spatial placement of the trained generator's noise.
    Eval(SplitArg),
    /// Compare against white Gaussian noise of equal RMS.
    WgnBaseline(SplitArg),
    /// RCA under k/9 of the noise for k = 0..9.
    Homogeneity(SplitArg),
    /// Export CAM, noise, original and distorted PNGs plus trend plots.
    Visualize {
        #[command(flatten)]
        split: SplitArg,
        /// Image ids to export (comma separated); defaults to the first few.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u32>,
    },
    /// Collect every report into reports/summary.md.
    Report,
    /// Write a synthetic archive in the binary dataset layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        train_per_file: usize,
        #[arg(long, default_value_t = 10_000)]
        test_records: usize,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
    },
}

fn effective_config(g: &Global) -> Result<RunConfig, Error> {
    let fallback = g.run_dir.join("config.toml");
    let mut cfg = match &g.config {
        Some(p) => load_config(p)?,
        None if fallback.exists() => load_config(&fallback)?,
        None => RunConfig::default(),
    };
    if let Some(f) = g.subset {
        cfg.data.subset_fraction = f;
    }
    if let Some(s) = g.seed {
        cfg.data.seed = s;
        cfg.classifiers.seed = s;
        cfg.generator.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_command(cli: Cli) -> Result<Vec<String>, Error> {
    if let Command::SynthData { out, train_per_file, test_records, synth_seed } = &cli.command {
        write_synthetic_archive(out, &SyntheticArchive { train_per_file: *train_per_file, test_records: *test_records, seed: *synth_seed })?;
        return Ok(vec![format!("synthetic archive written to {}", out.display())]);
    }
    let cfg = effective_config(&cli.global)?;
    let mut run = Run::open(&cli.global.run_dir, cfg, cli.global.data_root.clone(), cli.global.force)?;
    let report = match cli.command {
        Command::TrainClassifiers => run.train_classifiers()?,
        Command::GenLabels(s) => run.gen_labels(s.split)?,
        Command::CacheCams(s) => run.cache_cams(s.split)?,
        Command::TrainJnd { resume } => run.train_jnd(resume.as_deref())?,
        Command::Eval(s) => run.eval(s.split)?.0,
        Command::WgnBaseline(s) => run.wgn_baseline(s.split)?.0,
        Command::Homogeneity(s) => run.homogeneity(s.split)?.0,
        Command::Visualize { split, ids } => run.visualize(split.split, &ids)?,
        Command::Report => {
            let (r, text) = run.report()?;
            return Ok(vec![text, r.message]);
        }
        Command::SynthData { .. } => unreachable!("handled above"),
    };
    let prefix = if report.skipped { "up to date (use --force to rerun)" } else { "done" };
    Ok(vec![format!("{}: {prefix}", report.stage), report.message])
}

/// Exit code for a pipeline error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingPrerequisite { .. } => EXIT_MISSING,
        Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parse `argv` (including the program name), run one stage and return the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli) {
        Ok(lines) => {
            for l in lines.iter().filter(|l| !l.is_empty()) {
                println!("{}", l.trim_end());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::MissingPrerequisite { artifact: "a".into(), stage: "train-jnd".into() }), EXIT_MISSING);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Argument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Internal("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn seed_flag_overrides_every_seed() {
        let cli = Cli::try_parse_from(["mjnd", "--seed", "9", "--subset", "0.25", "--run-dir", "/nonexistent/run", "report"]).unwrap();
        let cfg = effective_config(&cli.global).unwrap();
        assert_eq!((cfg.data.seed, cfg.classifiers.seed, cfg.generator.seed, cfg.train.seed), (9, 9, 9, 9));
        assert_eq!(cfg.data.subset_fraction, 0.25);
    }
}
