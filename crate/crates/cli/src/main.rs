//! `xview`: generate data, train, evaluate, check gradients, sweep gamma.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xview_core::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, CheckpointMeta};
use xview_core::config::RunConfig;
use xview_core::data::{gen_synthetic, load_dataset, save_dataset, split, Dataset};
use xview_core::eval::evaluate;
use xview_core::experiments::{sweep_gamma, write_gamma_csv};
use xview_core::gradsuite::{self, MIN_INSTANCES, TOLERANCE};
use xview_core::trainer::fit;
use xview_core::Error;

const CHECKPOINT_DIR: &str = "checkpoint";
const HISTORY_FILE: &str = "history.csv";
const SWEEP_FILE: &str = "sweep.csv";

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view embedding adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-view dataset into --out.
    GenData(Common),
    /// Train on --data and write checkpoint, history and a validation report.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on one partition of --data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
    },
    /// Compare tape gradients with central differences for every op and loss.
    Gradcheck {
        /// Random instances per target.
        #[arg(long, default_value_t = MIN_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the tape gradients; every target must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train once per gamma and write gamma,rank1,map for the test partition.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,2.5,10")]
        gammas: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; see README for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override with dotted keys, e.g. `train.sim_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelFlags {
    /// Same architecture for both mappings.
    #[arg(long)]
    symmetric: bool,
    /// Adaptive pair weighting instead of the uniform contrastive loss.
    #[arg(long)]
    adaptive: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Valid,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("gradient check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn resolve(common: &Common, model: Option<&ModelFlags>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = model {
        if m.symmetric {
            cfg.model.symmetric = true;
        }
        if m.adaptive {
            cfg.train.similarity_objective = "adaptive".into();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Refuses to write into the input dataset directory.
fn check_out_dir(out: &Path, data: &Path) -> Result<(), Error> {
    if let (Ok(a), Ok(b)) = (fs::canonicalize(out), fs::canonicalize(data)) {
        if a == b {
            return Err(Error::Validation(format!(
                "output directory {} is the input dataset directory",
                out.display()
            )));
        }
    }
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, Error> {
    if !dir.join(xview_core::data::MANIFEST_FILE).is_file() {
        return Err(Error::Validation(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    load_dataset(dir)
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None)?;
            let ds = gen_synthetic(&cfg.generator())?;
            save_dataset(&ds, &cfg.out_dir)?;
            cfg.archive(&cfg.out_dir)?;
            println!(
                "wrote {} samples of {} identities to {}",
                ds.len(),
                ds.num_identities(),
                cfg.out_dir.display()
            );
        }
        Command::Train { common, model, data } => {
            let cfg = resolve(&common, Some(&model))?;
            check_out_dir(&cfg.out_dir, &data)?;
            let ds = load_data(&data)?;
            let parts = split(&ds, &cfg.split_spec())?;
            let setup = cfg.setup();
            let start = Instant::now();
            let result = fit(&parts.train, &parts.valid, &setup)?;
            let seconds = start.elapsed().as_secs_f64();

            let out = &cfg.out_dir;
            let archive = cfg.archive(out)?;
            let archived = fs::read(&archive).map_err(|e| Error::io(&archive, e))?;
            let meta = CheckpointMeta {
                seed: cfg.seed,
                split: cfg.split_spec(),
                config_sha256: sha256_hex(&archived),
            };
            save_checkpoint(&out.join(CHECKPOINT_DIR), &result.model, &meta)?;
            result.history.write(&out.join(HISTORY_FILE))?;
            let report = evaluate(&result.model, &parts.valid, cfg.seed)?;
            report.write(out)?;
            println!(
                "trained in {seconds:.1}s: {} records, best round {}, validation rank-1 {:.4}, mAP {:.4}",
                result.history.records.len(),
                result.best_round.map_or("-".into(), |r| r.to_string()),
                report.rank1(),
                report.map_score
            );
        }
        Command::Eval { common, checkpoint, data, split: part } => {
            let cfg = resolve(&common, None)?;
            check_out_dir(&cfg.out_dir, &data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_data(&data)?;
            if ds.feature_dim() != ckpt.model.feature_dim() {
                return Err(Error::Validation(format!(
                    "dataset feature_dim {} does not match checkpoint feature_dim {}",
                    ds.feature_dim(),
                    ckpt.model.feature_dim()
                ))
                .into());
            }
            let target = match part {
                Part::All => ds,
                p => {
                    let parts = split(&ds, &ckpt.meta.split)?;
                    match p {
                        Part::Train => parts.train,
                        Part::Valid => parts.valid,
                        _ => parts.test,
                    }
                }
            };
            // the gallery draw follows the training seed unless --seed is given
            let seed = common.seed.unwrap_or(ckpt.meta.seed);
            let report = evaluate(&ckpt.model, &target, seed)?;
            report.write(&cfg.out_dir)?;
            cfg.archive(&cfg.out_dir)?;
            let ranks: Vec<String> = report
                .rank_values
                .iter()
                .map(|r| format!("rank-{} {:.4}", r.rank, r.accuracy))
                .collect();
            println!(
                "{}, mAP {:.4}, view accuracy {:.4}",
                ranks.join(", "),
                report.map_score,
                report.dd_confusion_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Gradcheck { instances, seed, corrupt } => {
            if instances == 0 {
                return Err(Error::Validation("--instances must be >= 1".into()).into());
            }
            let mut failed = 0;
            println!("{:<34} {:>9} {:>6} {:>12}  status", "target", "instances", "draws", "max_rel_err");
            for r in gradsuite::run_all(instances, seed, corrupt)? {
                let ok = r.passed(TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{:<34} {:>9} {:>6} {:>12.3e}  {}",
                    r.name,
                    r.instances,
                    r.draws,
                    r.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} targets exceed relative error {TOLERANCE:e}")));
            }
            println!("all gradient checks within {TOLERANCE:e}");
        }
        Command::SweepGamma { common, model, data, gammas } => {
            let cfg = resolve(&common, Some(&model))?;
            check_out_dir(&cfg.out_dir, &data)?;
            if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
                return Err(Error::Validation(format!("gamma must be finite and >= 0, got {g}")).into());
            }
            let ds = load_data(&data)?;
            let parts = split(&ds, &cfg.split_spec())?;
            let points = sweep_gamma(&parts, &cfg.setup(), &gammas)?;
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            write_gamma_csv(&cfg.out_dir.join(SWEEP_FILE), &points)?;
            cfg.archive(&cfg.out_dir)?;
            for p in &points {
                println!("gamma {:<6} rank-1 {:.4}  mAP {:.4}", p.gamma, p.rank1, p.map);
            }
        }
    }
    Ok(())
}
