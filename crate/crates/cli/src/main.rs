use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use oraclefuse::base_model::{cv_predict, train, BaseModel, Scorer, TrainParams};
use oraclefuse::calibration::{choose_grid, Calibrator, CalibratorKind, GridSpec};
use oraclefuse::dataset::{
    load_dataset, make_folds, save_dataset, synthesize, Format, LabeledDataset, SyntheticSpec,
};
use oraclefuse::ensemble::{
    fit_adaptive_weights_with, fit_constant_weight, fusion_report, WeightFunction,
};
use oraclefuse::harness::{
    evaluate, load_section, run_transfer_experiment, tune_hyperparameter, ExperimentConfig,
    MetricReport, TuneTarget,
};
use oraclefuse::oracle::{OracleCache, OracleConfig, SyntheticOracleSpec};
use oraclefuse::rng::derive_seed;

#[derive(Parser)]
#[command(
    name = "oraclefuse",
    version,
    about = "Fuse a base classifier with oracle scores"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random step [default: 0; experiment, transfer and tune
    /// use the config's seed list unless this is given]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (each command documents its default).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [synthetic] table of --config.
    Synth {
        #[arg(long, default_value = "csv")]
        format: Format,
        /// Also attach binary oracle scores that are correct with this probability.
        #[arg(long)]
        oracle_accuracy: Option<f64>,
        /// Drop the label column.
        #[arg(long)]
        no_labels: bool,
    },
    /// Score a dataset with the [oracle] of --config and write an id,z cache (default scores.csv).
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Also write the dataset with the z column filled in.
        #[arg(long)]
        attach: Option<PathBuf>,
    },
    /// Train the logistic base model (default output base_model.json).
    FitBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Fit the constant fusion weight on out-of-fold scores (default output linear.json).
    FitLinear {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Fit piecewise-constant fusion weights (default output adalinear.json).
    FitAdaptive {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        pieces: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Weight for pieces with no training samples.
        #[arg(long, default_value_t = 0.0)]
        empty_weight: f64,
    },
    /// Fit a grid calibrator on base and oracle scores (default output calibrator.json).
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// Saved base model; trained on --data when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "cell")]
        kind: CalibratorKind,
        /// Base-score grid resolution M; chosen by cross-validation from --candidates when omitted.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        candidates: Vec<usize>,
        /// Oracle-score grid resolution M'.
        #[arg(long, default_value_t = 2)]
        oracle_grid: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Run the covariate-shift experiment of --config (default output directory results).
    Transfer,
    /// Score a labeled dataset with a base model and optional fusion or calibration.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "calibrator")]
        fusion: Option<PathBuf>,
        #[arg(long)]
        calibrator: Option<PathBuf>,
    },
    /// Run the experiment of --config; --seed replaces its seed list when given explicitly.
    Experiment,
    /// Select r or M by cross-validation on the training split.
    Tune {
        /// r (adaptive pieces) or m (calibration grid).
        #[arg(long)]
        param: TuneTarget,
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<usize>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load(path: &Path) -> Result<LabeledDataset> {
    load_dataset(path, Format::from_path(path))
        .with_context(|| format!("loading {}", path.display()))
}

fn require_config(cli: &Cli) -> Result<&Path> {
    match &cli.config {
        Some(p) => Ok(p),
        None => bail!("this command needs --config"),
    }
}

fn base_params(cli: &Cli) -> Result<TrainParams> {
    let mut params = match &cli.config {
        Some(p) => load_section(p, "base")?,
        None => TrainParams::default(),
    };
    params.seed = cli.seed();
    Ok(params)
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Out-of-fold base scores, oracle scores and labels of a fully annotated dataset.
fn fusion_inputs(
    ds: &LabeledDataset,
    folds: usize,
    cli: &Cli,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let assignment = make_folds(ds, folds, derive_seed(cli.seed(), "folds"))?;
    let cv = cv_predict(ds, &assignment, &base_params(cli)?)?;
    for w in &cv.warnings {
        log::warn!("{w}");
    }
    Ok((cv.scores, ds.oracle_scores()?, ds.labels()?))
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = require_config(cli)?;
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    report.save(dir)?;
    print!("{}", report.render_table());
    info!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            format,
            oracle_accuracy,
            no_labels,
        } => {
            let mut spec: SyntheticSpec = load_section(require_config(cli)?, "synthetic")?;
            spec.seed = cli.seed();
            let mut ds = synthesize(&spec)?;
            if let Some(q) = oracle_accuracy {
                let hidden = ds
                    .instances()
                    .iter()
                    .map(|i| (i.id.clone(), i.label.unwrap_or(0)))
                    .collect();
                let mut oracle = OracleConfig::Synthetic(SyntheticOracleSpec::binary(
                    *q,
                    derive_seed(cli.seed(), "oracle"),
                ))
                .build(hidden)?;
                let scores = oracle.score_batch(ds.instances())?.into_iter().collect();
                ds = ds.with_oracle_scores(&scores)?;
            }
            if *no_labels {
                ds = ds.without_labels();
            }
            let out = out_or(
                cli,
                if *format == Format::Csv {
                    "synthetic.csv"
                } else {
                    "synthetic.jsonl"
                },
            );
            save_dataset(&ds, &out, *format)?;
            info!("wrote {} instances to {}", ds.len(), out.display());
        }
        Command::Score { data, attach } => {
            let path = require_config(cli)?;
            let mut oracle_cfg: OracleConfig = load_section(path, "oracle")?;
            oracle_cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            if let OracleConfig::Synthetic(spec) = &mut oracle_cfg {
                spec.seed = spec.seed.wrapping_add(cli.seed());
            }
            let ds = load(data)?;
            let hidden = ds
                .instances()
                .iter()
                .filter_map(|i| i.label.map(|y| (i.id.clone(), y)))
                .collect();
            let mut oracle = oracle_cfg.build(hidden)?;
            let scored = oracle.score_batch(ds.instances())?;
            let mut cache = OracleCache::in_memory();
            for (id, z) in &scored {
                cache.insert(id.clone(), *z)?;
            }
            let out = out_or(cli, "scores.csv");
            cache.save_as(&out)?;
            info!("wrote {} scores to {}", cache.len(), out.display());
            if let Some(target) = attach {
                let with_z = ds.with_oracle_scores(cache.scores())?;
                save_dataset(&with_z, target, Format::from_path(target))?;
            }
        }
        Command::FitBase {
            data,
            lambda,
            max_iter,
            tol,
        } => {
            let mut params = base_params(cli)?;
            if let Some(v) = lambda {
                params.reg_lambda = *v;
            }
            if let Some(v) = max_iter {
                params.max_iter = *v;
            }
            if let Some(v) = tol {
                params.tol = *v;
            }
            let ds = load(data)?;
            let model = train(&ds, &params)?;
            let out = out_or(cli, "base_model.json");
            model.save(&out)?;
            print_json(&model.meta)?;
        }
        Command::FitLinear { data, folds } => {
            let (y_cv, z, y) = fusion_inputs(&load(data)?, *folds, cli)?;
            let wf = WeightFunction::constant(fit_constant_weight(&y_cv, &z, &y)?);
            wf.save(out_or(cli, "linear.json"))?;
            print_json(&wf)?;
        }
        Command::FitAdaptive {
            data,
            pieces,
            folds,
            empty_weight,
        } => {
            let (y_cv, z, y) = fusion_inputs(&load(data)?, *folds, cli)?;
            let wf = fit_adaptive_weights_with(&y_cv, &z, &y, *pieces, *empty_weight)?;
            wf.save(out_or(cli, "adalinear.json"))?;
            print_json(&fusion_report(&y_cv, &z, &y, &wf)?)?;
        }
        Command::Calibrate {
            data,
            model,
            kind,
            grid,
            candidates,
            oracle_grid,
            folds,
        } => {
            let ds = load(data)?;
            let base = match model {
                Some(p) => BaseModel::load(p)?,
                None => train(&ds, &base_params(cli)?)?,
            };
            let f = base.score_all(&ds)?;
            let (z, y) = (ds.oracle_scores()?, ds.labels()?);
            let spec = match grid {
                Some(m) => GridSpec::new(*m, *oracle_grid)?,
                None => choose_grid(
                    &f,
                    &z,
                    &y,
                    candidates,
                    *oracle_grid,
                    *kind,
                    *folds,
                    derive_seed(cli.seed(), "grid"),
                )?,
            };
            let cal = Calibrator::fit(*kind, &f, &z, &y, spec)?;
            cal.save(out_or(cli, "calibrator.json"))?;
            info!(
                "fitted {} parameters on grid M={}, M'={}",
                cal.num_params(),
                spec.m,
                spec.m_prime
            );
        }
        Command::Transfer => {
            let cfg = experiment_config(cli)?;
            if cfg.transfer.is_none() {
                bail!("the config has no [transfer] table");
            }
            let dir = cli
                .out
                .clone()
                .or(cfg.output_dir.clone())
                .unwrap_or_else(|| "results".into());
            let report = run_transfer_experiment(&cfg, Some(&dir))?;
            write_report(&report, &dir)?;
        }
        Command::Eval {
            data,
            model,
            fusion,
            calibrator,
        } => {
            let ds = load(data)?;
            let base = BaseModel::load(model)?;
            let f = base.score_all(&ds)?;
            let scores = if let Some(p) = fusion {
                WeightFunction::load(p)?.fuse_all(&f, &ds.oracle_scores()?)?
            } else if let Some(p) = calibrator {
                Calibrator::load(p)?.predict_all(&f, &ds.oracle_scores()?)?
            } else {
                f
            };
            let metrics = evaluate(&scores, &ds.labels()?)?;
            if let Some(out) = &cli.out {
                oraclefuse::persist::save_json(&metrics, out)?;
            }
            print_json(&metrics)?;
        }
        Command::Experiment => {
            let cfg = experiment_config(cli)?;
            let dir = cli
                .out
                .clone()
                .or(cfg.output_dir.clone())
                .unwrap_or_else(|| "results".into());
            let report = oraclefuse::harness::run(&cfg, Some(&dir))?;
            write_report(&report, &dir)?;
        }
        Command::Tune { param, candidates } => {
            let cfg = experiment_config(cli)?;
            let candidates = if candidates.is_empty() {
                match param {
                    TuneTarget::Pieces => cfg.adalinear.candidates.clone(),
                    TuneTarget::Grid => cfg.calibration.candidates.clone(),
                }
            } else {
                candidates.clone()
            };
            let result = tune_hyperparameter(&cfg, *param, &candidates, cfg.seeds[0])?;
            if let Some(out) = &cli.out {
                oraclefuse::persist::save_json(&result, out)?;
            }
            print_json(&result)?;
        }
    }
    Ok(())
}
