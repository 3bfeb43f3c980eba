//! Metrics, experiment configuration and orchestration.
//!
//! An experiment evaluates a list of [`Method`]s over several seeds. Each
//! seed reloads (or regenerates) the data, splits it, fits every method on the
//! training part only and scores the held-out part. Reports aggregate the
//! per-seed metrics as mean and sample standard deviation and serialize
//! deterministically: equal inputs produce byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::base_model::{cv_predict, train, BaseModel, Scorer, TrainParams, SCORE_CLAMP};
use crate::calibration::{choose_grid, cv_grid_losses, Calibrator, CalibratorKind, GridSpec};
use crate::dataset::{
    load_dataset, make_folds, split, synthesize, Format, LabeledDataset, SyntheticSpec,
};
use crate::ensemble::{
    choose_pieces, cv_piece_losses, fit_adaptive_weights_with, fit_constant_weight, WeightFunction,
};
use crate::error::{Error, Result};
use crate::oracle::{OracleConfig, OracleProvider};
use crate::rng::derive_seed;
use crate::transfer::{
    label_with_oracle, sample_augmentation, train_augmented, AugmentOptions, StratumDensity,
    TransferPlan,
};

fn check_lengths(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    Ok(())
}

/// Fraction of correct hard predictions; a score of exactly 0.5 predicts 0.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s > 0.5) == (**y > 0.5))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

pub fn brier(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(s, y)| (s - y).powi(2))
        .sum::<f64>()
        / scores.len() as f64)
}

/// Mean negative log-likelihood with scores clamped away from 0 and 1.
pub fn log_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub brier: f64,
    pub log_loss: f64,
    pub n: usize,
}

pub fn evaluate(scores: &[f64], labels: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        accuracy: accuracy(scores, labels)?,
        brier: brier(scores, labels)?,
        log_loss: log_loss(scores, labels)?,
        n: scores.len(),
    })
}

/// A prediction method. Unset hyperparameters are tuned on the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Llm,
    Ml,
    Linear,
    AdaLinear {
        r: Option<usize>,
    },
    Calibration {
        m: Option<usize>,
        m_prime: Option<usize>,
    },
    Transfer {
        m: usize,
    },
}

impl Method {
    pub fn needs_oracle(&self) -> bool {
        !matches!(self, Method::Ml | Method::Transfer { m: 0 })
    }

    fn needs_cv(&self) -> bool {
        matches!(self, Method::Linear | Method::AdaLinear { .. })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Llm => write!(f, "llm"),
            Method::Ml => write!(f, "ml"),
            Method::Linear => write!(f, "linear"),
            Method::AdaLinear { r: None } => write!(f, "adalinear"),
            Method::AdaLinear { r: Some(r) } => write!(f, "adalinear({r})"),
            Method::Calibration { m: None, .. } => write!(f, "calibration"),
            Method::Calibration {
                m: Some(m),
                m_prime: None,
            } => write!(f, "calibration({m})"),
            Method::Calibration {
                m: Some(m),
                m_prime: Some(mp),
            } => write!(f, "calibration({m},{mp})"),
            Method::Transfer { m } => write!(f, "transfer({m})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        let bad = || Error::InvalidArgument(format!("unknown method {s:?}"));
        let (name, args) = match compact.split_once('(') {
            Some((name, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(bad)?;
                let args = inner
                    .split(',')
                    .map(|a| a.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                (name.to_string(), args)
            }
            None => (compact.clone(), Vec::new()),
        };
        match (name.as_str(), args.as_slice()) {
            ("llm", []) => Ok(Method::Llm),
            ("ml", []) => Ok(Method::Ml),
            ("linear", []) => Ok(Method::Linear),
            ("adalinear", []) => Ok(Method::AdaLinear { r: None }),
            ("adalinear", [r]) if *r >= 1 => Ok(Method::AdaLinear { r: Some(*r) }),
            ("calibration", []) => Ok(Method::Calibration {
                m: None,
                m_prime: None,
            }),
            ("calibration", [m]) if *m >= 1 => Ok(Method::Calibration {
                m: Some(*m),
                m_prime: None,
            }),
            ("calibration", [m, mp]) if *m >= 1 && *mp >= 1 => Ok(Method::Calibration {
                m: Some(*m),
                m_prime: Some(*mp),
            }),
            ("transfer", [m]) => Ok(Method::Transfer { m: *m }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaLinearConfig {
    /// Piece counts tried when a method leaves `r` unset.
    pub candidates: Vec<usize>,
    pub empty_piece_weight: f64,
}

impl Default for AdaLinearConfig {
    fn default() -> Self {
        AdaLinearConfig {
            candidates: vec![1, 2, 4, 10],
            empty_piece_weight: crate::ensemble::DEFAULT_EMPTY_PIECE_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Base-grid resolutions tried when a method leaves `M` unset.
    pub candidates: Vec<usize>,
    pub m_prime: usize,
    pub kind: CalibratorKind,
    /// Fit the calibrator on a held-out slice of the training data, scored by
    /// a base model trained on the rest. Unset means in-sample base scores.
    pub holdout_fraction: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            candidates: vec![5, 10, 20],
            m_prime: 2,
            kind: CalibratorKind::Cell,
            holdout_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub source: String,
    pub target: String,
    /// Labeled source instances; defaults to every non-test source instance.
    #[serde(default)]
    pub n_labeled: Option<usize>,
    /// Augmentation sizes, in addition to any `transfer(m)` methods.
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default)]
    pub round_oracle: bool,
    /// Draw augmentation from the target density instead of the corrected one.
    #[serde(default)]
    pub sample_from_target: bool,
}

fn default_slack() -> f64 {
    crate::transfer::DEFAULT_SLACK
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_folds() -> usize {
    5
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_methods() -> Vec<Method> {
    vec![
        Method::Llm,
        Method::Ml,
        Method::Linear,
        Method::AdaLinear { r: None },
        Method::Calibration {
            m: None,
            m_prime: None,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Data read from a file.
    #[serde(default)]
    pub data: Option<DataConfig>,
    /// Data generated per seed (the run seed is added to `seed`).
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub base: TrainParams,
    #[serde(default)]
    pub adalinear: AdaLinearConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
}

impl ExperimentConfig {
    pub fn with_synthetic(spec: SyntheticSpec) -> Self {
        ExperimentConfig {
            seeds: default_seeds(),
            folds: default_folds(),
            test_fraction: default_test_fraction(),
            methods: default_methods(),
            output_dir: None,
            data: None,
            synthetic: Some(spec),
            oracle: None,
            base: TrainParams::default(),
            adalinear: AdaLinearConfig::default(),
            calibration: CalibrationConfig::default(),
            transfer: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(data) = &mut self.data {
            fix(&mut data.path);
        }
        if let Some(dir) = &mut self.output_dir {
            fix(dir);
        }
        if let Some(oracle) = &mut self.oracle {
            oracle.resolve_paths(base);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => {
                return fail("give either [data] or [synthetic], not both".into())
            }
            (None, None) => return fail("missing [data] or [synthetic]".into()),
            (Some(d), None) if !d.path.exists() => {
                return fail(format!("data file {} does not exist", d.path.display()))
            }
            (None, Some(spec)) => spec.validate()?,
            _ => {}
        }
        if let Some(OracleConfig::Cached { path }) = &self.oracle {
            if !path.exists() {
                return fail(format!("oracle cache {} does not exist", path.display()));
            }
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.folds < 2 {
            return fail(format!("folds = {} must be >= 2", self.folds));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!(
                "test_fraction = {} must lie in (0, 1)",
                self.test_fraction
            ));
        }
        if self.methods.is_empty() && self.transfer.as_ref().is_none_or(|t| t.m.is_empty()) {
            return fail("no methods to run".into());
        }
        if self.adalinear.candidates.contains(&0) || self.calibration.candidates.contains(&0) {
            return fail("hyperparameter candidates must be >= 1".into());
        }
        if self.calibration.m_prime == 0 {
            return fail("calibration.m_prime must be >= 1".into());
        }
        if let Some(h) = self.calibration.holdout_fraction {
            if !(h > 0.0 && h < 1.0) {
                return fail(format!(
                    "calibration.holdout_fraction = {h} must lie in (0, 1)"
                ));
            }
        }
        let has_transfer = self
            .methods
            .iter()
            .any(|m| matches!(m, Method::Transfer { .. }));
        if has_transfer && self.transfer.is_none() {
            return fail("transfer(m) methods need a [transfer] table".into());
        }
        if let Some(t) = &self.transfer {
            if t.source == t.target {
                return fail("transfer source and target strata must differ".into());
            }
            if !(t.slack >= 0.0) {
                return fail(format!("transfer.slack = {} must be >= 0", t.slack));
            }
            if let Some(bad) = self
                .methods
                .iter()
                .find(|m| matches!(m, Method::AdaLinear { .. } | Method::Calibration { .. }))
            {
                return fail(format!(
                    "method {bad} is not available in transfer experiments"
                ));
            }
        }
        if self.methods.iter().any(Method::needs_oracle)
            && self.oracle.is_none()
            && self.data.is_none()
        {
            return fail("oracle-based methods on synthetic data need an [oracle] table".into());
        }
        Ok(())
    }

    /// Loads or generates the data for one run seed.
    pub fn dataset_for_seed(&self, seed: u64) -> Result<LabeledDataset> {
        match (&self.data, &self.synthetic) {
            (Some(d), _) => load_dataset(
                &d.path,
                d.format.unwrap_or_else(|| Format::from_path(&d.path)),
            ),
            (None, Some(spec)) => {
                let mut spec = spec.clone();
                spec.seed = spec.seed.wrapping_add(seed);
                synthesize(&spec)
            }
            (None, None) => Err(Error::Config("missing [data] or [synthetic]".into())),
        }
    }

    /// The oracle for one run seed; synthetic oracles get the run seed added.
    pub fn oracle_for_seed(
        &self,
        seed: u64,
        hidden: HashMap<String, u8>,
    ) -> Result<Box<dyn OracleProvider>> {
        match &self.oracle {
            Some(OracleConfig::Synthetic(spec)) => {
                let mut spec = *spec;
                spec.seed = spec.seed.wrapping_add(seed);
                OracleConfig::Synthetic(spec).build(hidden)
            }
            Some(other) => other.build(hidden),
            None => Err(Error::Config(
                "oracle scores are missing and no [oracle] is configured".into(),
            )),
        }
    }
}

/// Reads `T` from the `[name]` table of a TOML file, or from the whole file
/// when it has no such table.
pub fn load_section<T: DeserializeOwned>(path: impl AsRef<Path>, name: &str) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let part = match table.get(name) {
        Some(v) => v.clone(),
        None => toml::Value::Table(table),
    };
    part.try_into()
        .map_err(|e| Error::Config(format!("{} [{name}]: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    /// Which held-out set was scored: `test`, `source` or `target`.
    pub eval_set: String,
    /// Selected hyperparameters and fitted scalars, for inspection.
    pub detail: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub results: Vec<MethodResult>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub eval_set: String,
    pub runs: usize,
    pub accuracy: Stat,
    pub brier: Stat,
    pub log_loss: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<Summary>,
}

impl MetricReport {
    pub fn from_runs(experiment: &str, runs: Vec<SeedRun>) -> MetricReport {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: HashMap<(String, String), Vec<Metrics>> = HashMap::new();
        for run in &runs {
            for r in &run.results {
                let key = (r.method.clone(), r.eval_set.clone());
                if !groups.contains_key(&key) {
                    order.push(key.clone());
                }
                groups.entry(key).or_default().push(r.metrics);
            }
        }
        let summary = order
            .into_iter()
            .map(|key| {
                let ms = &groups[&key];
                let col = |f: fn(&Metrics) -> f64| Stat::of(&ms.iter().map(f).collect::<Vec<_>>());
                Summary {
                    runs: ms.len(),
                    accuracy: col(|m| m.accuracy),
                    brier: col(|m| m.brier),
                    log_loss: col(|m| m.log_loss),
                    method: key.0,
                    eval_set: key.1,
                }
            })
            .collect();
        MetricReport {
            experiment: experiment.to_string(),
            runs,
            summary,
        }
    }

    pub fn summary_for(&self, method: &str, eval_set: &str) -> Option<&Summary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.eval_set == eval_set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Flat `seed,method,metric,value` rows. For transfer experiments the
    /// method column carries the evaluation set, as in `ml@target`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "method", "metric", "value"])?;
        for run in &self.runs {
            for r in &run.results {
                let method = if r.eval_set == "test" {
                    r.method.clone()
                } else {
                    format!("{}@{}", r.method, r.eval_set)
                };
                for (metric, value) in [
                    ("accuracy", r.metrics.accuracy),
                    ("brier", r.metrics.brier),
                    ("log_loss", r.metrics.log_loss),
                ] {
                    w.write_record([
                        run.seed.to_string(),
                        method.clone(),
                        metric.to_string(),
                        value.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("metrics.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }

    /// Plain-text table of the summary.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:<8} {:>17} {:>17} {:>17}\n",
            "method", "set", "accuracy", "brier", "log_loss"
        );
        for s in &self.summary {
            let cell = |st: Stat| format!("{:.4} ± {:.4}", st.mean, st.std);
            out.push_str(&format!(
                "{:<20} {:<8} {:>17} {:>17} {:>17}\n",
                s.method,
                s.eval_set,
                cell(s.accuracy),
                cell(s.brier),
                cell(s.log_loss)
            ));
        }
        out
    }
}

fn hidden_labels(ds: &LabeledDataset) -> HashMap<String, u8> {
    ds.instances()
        .iter()
        .filter_map(|i| i.label.map(|y| (i.id.clone(), y)))
        .collect()
}

/// Fills in oracle scores for every instance that lacks one.
fn ensure_oracle_scores(
    ds: &LabeledDataset,
    oracle: &mut dyn OracleProvider,
) -> Result<LabeledDataset> {
    if ds.has_oracle_scores() {
        return Ok(ds.clone());
    }
    let missing = ds.filter(|i| i.oracle_score.is_none());
    let scores: BTreeMap<String, f64> = oracle
        .score_batch(missing.instances())?
        .into_iter()
        .collect();
    let mut instances = ds.clone().into_instances();
    for inst in &mut instances {
        if inst.oracle_score.is_none() {
            let z = scores
                .get(&inst.id)
                .ok_or_else(|| Error::MissingOracleScore {
                    id: inst.id.clone(),
                })?;
            inst.oracle_score = Some(*z);
        }
    }
    LabeledDataset::new(ds.dim(), instances)
}

fn scores_of(model: &BaseModel, ds: &LabeledDataset) -> Result<Vec<f64>> {
    model.score_all(ds)
}

fn artifact_dir(out: Option<&Path>, seed: u64) -> Result<Option<PathBuf>> {
    match out {
        None => Ok(None),
        Some(dir) => {
            let d = dir.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Ok(Some(d))
        }
    }
}

/// Runs the experiment described by `cfg`, writing per-seed artifacts (fitted
/// models, weights, calibrators, transfer plans) under `out` when given.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<MetricReport> {
    if cfg.transfer.is_some() {
        run_transfer_experiment(cfg, out)
    } else {
        run_experiment(cfg, out)
    }
}

/// Fusion experiment: every method is fitted on the training split and
/// evaluated on the test split, once per seed.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<MetricReport> {
    cfg.validate()?;
    if let Some(m) = cfg
        .methods
        .iter()
        .find(|m| matches!(m, Method::Transfer { .. }))
    {
        return Err(Error::Config(format!("{m} needs a [transfer] table")));
    }
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| fusion_seed(cfg, seed, out))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_runs("fusion", runs))
}

fn fusion_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let artifacts = artifact_dir(out, seed)?;
    let mut ds = cfg.dataset_for_seed(seed)?;
    if !ds.is_fully_labeled() {
        return Err(Error::InvalidDataset(
            "evaluation needs a label on every instance".into(),
        ));
    }
    if cfg.methods.iter().any(Method::needs_oracle) && !ds.has_oracle_scores() {
        let mut oracle = cfg.oracle_for_seed(seed, hidden_labels(&ds))?;
        ds = ensure_oracle_scores(&ds, oracle.as_mut())?;
    }
    let (train_ds, test_ds) = split(&ds, cfg.test_fraction, derive_seed(seed, "split"))?;
    let y_train = train_ds.labels()?;
    let y_test = test_ds.labels()?;
    let base = train(&train_ds, &TrainParams { seed, ..cfg.base })?;
    let f_test = scores_of(&base, &test_ds)?;
    if let Some(dir) = &artifacts {
        base.save(dir.join("base_model.json"))?;
    }
    let mut warnings = Vec::new();
    let cv = if cfg.methods.iter().any(Method::needs_cv) {
        let folds = make_folds(&train_ds, cfg.folds, derive_seed(seed, "folds"))?;
        let cv = cv_predict(&train_ds, &folds, &cfg.base)?;
        warnings.extend(cv.warnings.iter().cloned());
        Some(cv.scores)
    } else {
        None
    };
    let z_train = || train_ds.oracle_scores();
    let z_test = || test_ds.oracle_scores();

    let mut results = Vec::new();
    for method in &cfg.methods {
        let (scores, detail) = match *method {
            Method::Llm => (z_test()?, String::new()),
            Method::Ml => (f_test.clone(), String::new()),
            Method::Linear => {
                let alpha =
                    fit_constant_weight(cv.as_deref().expect("cv scores"), &z_train()?, &y_train)?;
                let wf = WeightFunction::constant(alpha);
                if let Some(dir) = &artifacts {
                    wf.save(dir.join("linear.json"))?;
                }
                (wf.fuse_all(&f_test, &z_test()?)?, format!("alpha={alpha}"))
            }
            Method::AdaLinear { r } => {
                let y_cv = cv.as_deref().expect("cv scores");
                let z = z_train()?;
                let r = match r {
                    Some(r) => r,
                    None => choose_pieces(
                        y_cv,
                        &z,
                        &y_train,
                        &cfg.adalinear.candidates,
                        cfg.folds,
                        derive_seed(seed, "pieces"),
                    )?,
                };
                let wf = fit_adaptive_weights_with(
                    y_cv,
                    &z,
                    &y_train,
                    r,
                    cfg.adalinear.empty_piece_weight,
                )?;
                if let Some(dir) = &artifacts {
                    wf.save(dir.join(format!("adalinear-{r}.json")))?;
                }
                (wf.fuse_all(&f_test, &z_test()?)?, format!("r={r}"))
            }
            Method::Calibration { m, m_prime } => {
                let m_prime = m_prime.unwrap_or(cfg.calibration.m_prime);
                let kind = cfg.calibration.kind;
                let (cal_base, cal_set) = match cfg.calibration.holdout_fraction {
                    None => (base.clone(), train_ds.clone()),
                    Some(h) => {
                        let (fit_part, cal_part) =
                            split(&train_ds, h, derive_seed(seed, "calibration-holdout"))?;
                        (
                            train(&fit_part, &TrainParams { seed, ..cfg.base })?,
                            cal_part,
                        )
                    }
                };
                let f_cal = scores_of(&cal_base, &cal_set)?;
                let z_cal = cal_set.oracle_scores()?;
                let y_cal = cal_set.labels()?;
                let grid = match m {
                    Some(m) => GridSpec::new(m, m_prime)?,
                    None => choose_grid(
                        &f_cal,
                        &z_cal,
                        &y_cal,
                        &cfg.calibration.candidates,
                        m_prime,
                        kind,
                        cfg.folds,
                        derive_seed(seed, "grid"),
                    )?,
                };
                let cal = Calibrator::fit(kind, &f_cal, &z_cal, &y_cal, grid)?;
                if let Some(dir) = &artifacts {
                    cal.save(dir.join(format!("calibration-{}-{}.json", grid.m, grid.m_prime)))?;
                }
                let f_eval = if cfg.calibration.holdout_fraction.is_some() {
                    scores_of(&cal_base, &test_ds)?
                } else {
                    f_test.clone()
                };
                (
                    cal.predict_all(&f_eval, &z_test()?)?,
                    format!("M={},M'={}", grid.m, grid.m_prime),
                )
            }
            Method::Transfer { .. } => unreachable!("rejected above"),
        };
        results.push(MethodResult {
            method: method.to_string(),
            eval_set: "test".into(),
            detail,
            metrics: evaluate(&scores, &y_test)?,
        });
    }
    Ok(SeedRun {
        seed,
        results,
        warnings,
    })
}

/// Covariate-shift experiment: a base model trained on labeled source-stratum
/// data is compared against models trained on that data plus `m`
/// oracle-labeled samples, on held-out source and target instances.
pub fn run_transfer_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<MetricReport> {
    cfg.validate()?;
    let tcfg = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("missing [transfer] table".into()))?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| transfer_seed(cfg, tcfg, seed, out))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_runs("transfer", runs))
}

fn transfer_seed(
    cfg: &ExperimentConfig,
    tcfg: &TransferConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedRun> {
    let artifacts = artifact_dir(out, seed)?;
    let ds = cfg.dataset_for_seed(seed)?;
    if !ds.is_fully_labeled() {
        return Err(Error::InvalidDataset(
            "evaluation needs a label on every instance".into(),
        ));
    }
    let in_stratum = |tag: &str| {
        let part = ds.filter(|i| i.stratum.as_deref() == Some(tag));
        if part.is_empty() {
            Err(Error::InvalidDataset(format!(
                "no instances in stratum {tag:?}"
            )))
        } else {
            Ok(part)
        }
    };
    let (source_rest, source_test) = split(
        &in_stratum(&tcfg.source)?,
        cfg.test_fraction,
        derive_seed(seed, "source-split"),
    )?;
    let (target_pool, target_test) = split(
        &in_stratum(&tcfg.target)?,
        cfg.test_fraction,
        derive_seed(seed, "target-split"),
    )?;
    let n = tcfg.n_labeled.unwrap_or(source_rest.len());
    if n == 0 || n > source_rest.len() {
        return Err(Error::InvalidArgument(format!(
            "n_labeled = {n} but {} source instances are available",
            source_rest.len()
        )));
    }
    let labeled_idx: Vec<usize> = (0..n).collect();
    let extra_idx: Vec<usize> = (n..source_rest.len()).collect();
    let mut labeled = source_rest.subset(&labeled_idx);
    let pool = source_rest
        .subset(&extra_idx)
        .concat(&target_pool)?
        .without_labels();

    let mut sizes: Vec<usize> = cfg
        .methods
        .iter()
        .filter_map(|m| match m {
            Method::Transfer { m } => Some(*m),
            _ => None,
        })
        .chain(tcfg.m.iter().copied())
        .collect();
    sizes.sort_unstable();
    sizes.dedup();

    let needs_oracle = cfg.methods.iter().any(Method::needs_oracle) || sizes.iter().any(|&m| m > 0);
    let mut oracle = if needs_oracle && !ds.has_oracle_scores() {
        Some(cfg.oracle_for_seed(seed, hidden_labels(&ds))?)
    } else {
        None
    };
    let mut tests = vec![("source", source_test), ("target", target_test)];
    let uses_eval_z = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Llm | Method::Linear));
    if let Some(oracle) = oracle.as_mut() {
        if uses_eval_z {
            for (_, t) in &mut tests {
                *t = ensure_oracle_scores(t, oracle.as_mut())?;
            }
        }
        if cfg.methods.contains(&Method::Linear) {
            labeled = ensure_oracle_scores(&labeled, oracle.as_mut())?;
        }
    }

    let ml = train(&labeled, &TrainParams { seed, ..cfg.base })?;
    if let Some(dir) = &artifacts {
        ml.save(dir.join("base_model.json"))?;
    }
    let mut warnings = Vec::new();
    let mut results = Vec::new();
    let mut record = |method: String,
                      detail: String,
                      per_set: Vec<Vec<f64>>,
                      tests: &[(&str, LabeledDataset)]|
     -> Result<()> {
        for ((name, t), scores) in tests.iter().zip(per_set) {
            results.push(MethodResult {
                method: method.clone(),
                eval_set: name.to_string(),
                detail: detail.clone(),
                metrics: evaluate(&scores, &t.labels()?)?,
            });
        }
        Ok(())
    };

    for method in &cfg.methods {
        match method {
            Method::Llm => {
                let s = tests
                    .iter()
                    .map(|(_, t)| t.oracle_scores())
                    .collect::<Result<_>>()?;
                record(method.to_string(), String::new(), s, &tests)?;
            }
            Method::Ml => {
                let s = tests
                    .iter()
                    .map(|(_, t)| scores_of(&ml, t))
                    .collect::<Result<_>>()?;
                record(method.to_string(), String::new(), s, &tests)?;
            }
            Method::Linear => {
                let folds = make_folds(&labeled, cfg.folds, derive_seed(seed, "folds"))?;
                let cv = cv_predict(&labeled, &folds, &cfg.base)?;
                warnings.extend(cv.warnings.iter().cloned());
                let alpha =
                    fit_constant_weight(&cv.scores, &labeled.oracle_scores()?, &labeled.labels()?)?;
                let wf = WeightFunction::constant(alpha);
                let s = tests
                    .iter()
                    .map(|(_, t)| wf.fuse_all(&scores_of(&ml, t)?, &t.oracle_scores()?))
                    .collect::<Result<_>>()?;
                record(method.to_string(), format!("alpha={alpha}"), s, &tests)?;
            }
            _ => {}
        }
    }

    let support = vec![tcfg.source.clone(), tcfg.target.clone()];
    let p1 = StratumDensity::from_counts(&labeled.stratum_counts(), &support)?;
    let p2 = StratumDensity::from_counts(&tests[1].1.stratum_counts(), &support)?;
    for &m in &sizes {
        let name = Method::Transfer { m }.to_string();
        if m == 0 {
            let s = tests
                .iter()
                .map(|(_, t)| scores_of(&ml, t))
                .collect::<Result<_>>()?;
            record(name, "m=0".into(), s, &tests)?;
            continue;
        }
        let plan = if tcfg.sample_from_target {
            TransferPlan::sample_from_target(p1.clone(), p2.clone(), n, m, tcfg.slack)
        } else {
            TransferPlan::new(p1.clone(), p2.clone(), n, m, tcfg.slack)?
        };
        let drawn = sample_augmentation(
            &pool,
            &plan.sampling,
            m,
            derive_seed(seed, &format!("augment-{m}")),
        )?;
        let augmented = match oracle.as_mut() {
            Some(o) => label_with_oracle(&drawn, o.as_mut())?,
            None => drawn,
        };
        let opts = AugmentOptions {
            slack: tcfg.slack,
            round_oracle: tcfg.round_oracle,
        };
        let model = train_augmented(
            &labeled,
            &augmented,
            &TrainParams { seed, ..cfg.base },
            &opts,
        )?;
        if let Some(dir) = &artifacts {
            plan.save(dir.join(format!("transfer-{m}-plan.json")))?;
            model.save(dir.join(format!("transfer-{m}-model.json")))?;
        }
        let s = tests
            .iter()
            .map(|(_, t)| scores_of(&model, t))
            .collect::<Result<_>>()?;
        record(name, format!("clamped={}", plan.clamped), s, &tests)?;
    }
    Ok(SeedRun {
        seed,
        results,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneTarget {
    /// Piece count `r` of the adaptive weights.
    Pieces,
    /// Base-grid resolution `M` of the calibrator.
    Grid,
}

impl FromStr for TuneTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "pieces" | "adalinear" => Ok(TuneTarget::Pieces),
            "m" | "grid" | "calibration" => Ok(TuneTarget::Grid),
            other => Err(Error::InvalidArgument(format!(
                "unknown tuning target {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub target: TuneTarget,
    pub selected: usize,
    /// Cross-validated mean squared error per candidate.
    pub losses: Vec<(usize, f64)>,
}

/// Selects `r` or `M` by cross-validation on the training split of `seed`.
/// Ties go to the smaller candidate.
pub fn tune_hyperparameter(
    cfg: &ExperimentConfig,
    target: TuneTarget,
    candidates: &[usize],
    seed: u64,
) -> Result<TuneResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to tune over".into()));
    }
    let mut ds = cfg.dataset_for_seed(seed)?;
    if !ds.has_oracle_scores() {
        let mut oracle = cfg.oracle_for_seed(seed, hidden_labels(&ds))?;
        ds = ensure_oracle_scores(&ds, oracle.as_mut())?;
    }
    let (train_ds, _) = split(&ds, cfg.test_fraction, derive_seed(seed, "split"))?;
    let y = train_ds.labels()?;
    let z = train_ds.oracle_scores()?;
    let losses = match target {
        TuneTarget::Pieces => {
            let folds = make_folds(&train_ds, cfg.folds, derive_seed(seed, "folds"))?;
            let cv = cv_predict(&train_ds, &folds, &cfg.base)?;
            cv_piece_losses(
                &cv.scores,
                &z,
                &y,
                candidates,
                cfg.folds,
                derive_seed(seed, "pieces"),
            )?
        }
        TuneTarget::Grid => {
            let base = train(&train_ds, &TrainParams { seed, ..cfg.base })?;
            let f = scores_of(&base, &train_ds)?;
            cv_grid_losses(
                &f,
                &z,
                &y,
                candidates,
                cfg.calibration.m_prime,
                cfg.calibration.kind,
                cfg.folds,
                derive_seed(seed, "grid"),
            )?
        }
    };
    let selected = crate::calibration::argmin_prefer_smaller(&losses);
    Ok(TuneResult {
        target,
        selected,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BoundaryNoise;
    use crate::oracle::SyntheticOracleSpec;

    #[test]
    fn metric_examples() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(accuracy(&[0.9, 0.1, 0.5, 0.5], &y).unwrap(), 0.75);
        assert!((brier(&[1.0, 0.0, 0.5, 0.5], &y).unwrap() - 0.125).abs() < 1e-15);
        let ll = log_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((ll + SCORE_CLAMP.ln()).abs() < 1e-4, "{ll}");
        assert!(ll.is_finite());
        assert!(accuracy(&[0.1], &[]).is_err());
    }

    #[test]
    fn method_round_trip() {
        for s in [
            "llm",
            "ml",
            "linear",
            "adalinear",
            "adalinear(4)",
            "calibration",
            "calibration(10)",
            "calibration(10,2)",
            "transfer(2000)",
        ] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!(
            "AdaLinear( 4 )".parse::<Method>().unwrap(),
            Method::AdaLinear { r: Some(4) }
        );
        for bad in [
            "adalinear(0)",
            "transfer",
            "svm",
            "calibration(1,2,3)",
            "ml(3)",
        ] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
    }

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    fn small_config() -> ExperimentConfig {
        let mut spec = SyntheticSpec::new(3, 600, vec![1.0, -1.0, 0.5, 0.0], 7);
        spec.boundary_noise = Some(BoundaryNoise {
            band: 0.5,
            flip_probability: 0.3,
        });
        let mut cfg = ExperimentConfig::with_synthetic(spec);
        cfg.seeds = vec![1, 2];
        cfg.oracle = Some(OracleConfig::Synthetic(SyntheticOracleSpec::binary(0.8, 3)));
        cfg
    }

    #[test]
    fn fusion_experiment_runs_and_is_deterministic() {
        let cfg = small_config();
        let a = run(&cfg, None).unwrap();
        let b = run(&cfg, None).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.runs.len(), 2);
        assert_eq!(a.summary.len(), cfg.methods.len());
        let csv = a.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * cfg.methods.len() * 3);
        assert!(a.render_table().contains("adalinear"));
        let llm = a.summary_for("llm", "test").unwrap();
        assert!(
            (llm.accuracy.mean - 0.8).abs() < 0.08,
            "{}",
            llm.accuracy.mean
        );
    }

    #[test]
    fn config_parsing() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seeds = [1, 2, 3]
            methods = ["ml", "adalinear(4)", "calibration(10,2)"]
            [synthetic]
            d = 2
            n = 100
            true_weights = [1.0, 0.0, 0.0]
            [oracle]
            kind = "synthetic"
            accuracy = 0.9
            [calibration]
            kind = "additive"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.methods[1], Method::AdaLinear { r: Some(4) });
        assert_eq!(cfg.calibration.kind, CalibratorKind::Additive);
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.test_fraction, 0.2);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let mut both = cfg.clone();
        both.data = Some(DataConfig {
            path: "x.csv".into(),
            format: None,
        });
        assert!(both.validate().is_err());
        let mut no_oracle = cfg.clone();
        no_oracle.oracle = None;
        assert!(no_oracle.validate().is_err());
    }

    #[test]
    fn tuning_prefers_listed_candidates() {
        let cfg = small_config();
        let r = tune_hyperparameter(&cfg, TuneTarget::Pieces, &[1, 2, 4], 1).unwrap();
        assert!([1, 2, 4].contains(&r.selected));
        assert_eq!(r.losses.len(), 3);
        let g = tune_hyperparameter(&cfg, TuneTarget::Grid, &[5, 10], 1).unwrap();
        let best = g.losses.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
        assert_eq!(g.losses.iter().find(|l| l.0 == g.selected).unwrap().1, best);
    }
}
