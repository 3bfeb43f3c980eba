//! Logistic-regression base scorer and out-of-fold predictions.
//!
//! Features are standardized with per-coordinate statistics from the
//! training set; the transform is stored in the model and applied by
//! [`BaseModel::score`]. Training minimizes the mean per-sample loss plus
//! `(reg_lambda / 2) * |w|^2` (intercept unpenalized) with
//! [`gradient_descent`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sigmoid, FoldAssignment, LabeledDataset};
use crate::error::{Error, Result};
use crate::optim::{gradient_descent, DescentOptions, Objective};

/// Scores fed to the log-loss are kept at least this far from 0 and 1.
pub const SCORE_CLAMP: f64 = 1e-12;

/// Anything that maps a feature vector to a score in `[0, 1]`.
pub trait Scorer {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64]) -> Result<f64>;

    fn score_all(&self, ds: &LabeledDataset) -> Result<Vec<f64>> {
        ds.instances()
            .iter()
            .map(|i| self.score(&i.features))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub reg_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            reg_lambda: 1e-3,
            max_iter: 5000,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainParams {
    fn validate(&self) -> Result<()> {
        if !(self.reg_lambda >= 0.0) || !self.reg_lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reg_lambda {} must be finite and >= 0",
                self.reg_lambda
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol {} must be >= 0",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per coordinate; zero-variance
    /// coordinates get scale 1.
    pub fn fit(rows: &[&[f64]], dim: usize) -> Standardizer {
        let n = rows.len().max(1) as f64;
        let mut means = vec![0.0; dim];
        for row in rows {
            for (m, v) in means.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut scales = vec![0.0; dim];
        for row in rows {
            for k in 0..dim {
                scales[k] += (row[k] - means[k]).powi(2);
            }
        }
        for s in &mut scales {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Standardizer { means, scales }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(
            x.iter()
                .zip(self.means.iter().zip(&self.scales))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub seed: u64,
}

/// `score(x) = sigmoid(w . standardize(x) + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub d: usize,
    /// Weights in standardized feature space.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardizer: Standardizer,
    pub params: TrainParams,
    pub meta: TrainMeta,
}

impl BaseModel {
    /// A model with the identity standardization, mostly for tests and
    /// hand-built scorers.
    pub fn from_weights(weights: Vec<f64>, intercept: f64) -> BaseModel {
        let d = weights.len();
        BaseModel {
            d,
            weights,
            intercept,
            standardizer: Standardizer {
                means: vec![0.0; d],
                scales: vec![1.0; d],
            },
            params: TrainParams::default(),
            meta: TrainMeta {
                iterations: 0,
                objective: f64::NAN,
                converged: false,
                seed: 0,
            },
        }
    }

    /// `w . standardize(x) + b`.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: x.len(),
            });
        }
        let s = &self.standardizer;
        let dot: f64 = x
            .iter()
            .zip(&self.weights)
            .zip(s.means.iter().zip(&s.scales))
            .map(|((v, w), (m, sc))| w * (v - m) / sc)
            .sum();
        Ok(dot + self.intercept)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::persist::save_json(self, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<BaseModel> {
        crate::persist::load_json(path)
    }
}

impl Scorer for BaseModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }
}

/// Per-sample loss on the sigmoid output `p` against a target `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleLoss {
    /// `-(t ln p + (1 - t) ln(1 - p))` with `p` clamped by [`SCORE_CLAMP`].
    Log,
    /// `(p - t)^2`.
    Squared,
    /// `max(|p - t| - slack, 0)^2`: squared loss with a dead band.
    Relaxed { slack: f64 },
}

impl SampleLoss {
    /// Loss value and its derivative with respect to the logit.
    fn eval(self, logit: f64, target: f64) -> (f64, f64) {
        let p = sigmoid(logit);
        match self {
            SampleLoss::Log => {
                let floor = SCORE_CLAMP.ln();
                let ln_p = (-softplus(-logit)).max(floor);
                let ln_q = (-softplus(logit)).max(floor);
                (-(target * ln_p + (1.0 - target) * ln_q), p - target)
            }
            SampleLoss::Squared => {
                let r = p - target;
                (r * r, 2.0 * r * p * (1.0 - p))
            }
            SampleLoss::Relaxed { slack } => {
                let r = p - target;
                let excess = (r.abs() - slack).max(0.0);
                (excess * excess, 2.0 * excess * r.signum() * p * (1.0 - p))
            }
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Regularized logistic objective over standardized rows:
/// `(1 / normalizer) * sum_i loss_i(sigmoid(w . x_i + b), t_i) + (lambda / 2) |w|^2`.
///
/// Parameters are laid out as `[w_0, .., w_{d-1}, b]`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    d: usize,
    rows: Vec<f64>,
    targets: Vec<f64>,
    losses: Vec<SampleLoss>,
    normalizer: f64,
    reg_lambda: f64,
}

impl LogisticObjective {
    pub fn new(d: usize, reg_lambda: f64) -> Self {
        LogisticObjective {
            d,
            rows: Vec::new(),
            targets: Vec::new(),
            losses: Vec::new(),
            normalizer: 0.0,
            reg_lambda,
        }
    }

    /// Adds one sample whose features are already standardized.
    pub fn push(&mut self, row: &[f64], target: f64, loss: SampleLoss) {
        debug_assert_eq!(row.len(), self.d);
        self.rows.extend_from_slice(row);
        self.targets.push(target);
        self.losses.push(loss);
        self.normalizer += 1.0;
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn logit(&self, params: &[f64], i: usize) -> f64 {
        let row = &self.rows[i * self.d..(i + 1) * self.d];
        row.iter().zip(params).map(|(x, w)| x * w).sum::<f64>() + params[self.d]
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        0.5 * self.reg_lambda * params[..self.d].iter().map(|w| w * w).sum::<f64>()
    }
}

impl Objective for LogisticObjective {
    fn num_params(&self) -> usize {
        self.d + 1
    }

    fn value(&self, params: &[f64]) -> f64 {
        let data: f64 = (0..self.len())
            .map(|i| {
                self.losses[i]
                    .eval(self.logit(params, i), self.targets[i])
                    .0
            })
            .sum();
        let data = if self.normalizer > 0.0 {
            data / self.normalizer
        } else {
            0.0
        };
        data + self.penalty(params)
    }

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.d + 1];
        let mut data = 0.0;
        for i in 0..self.len() {
            let (l, dl) = self.losses[i].eval(self.logit(params, i), self.targets[i]);
            data += l;
            if dl != 0.0 {
                let row = &self.rows[i * self.d..(i + 1) * self.d];
                for (g, x) in grad.iter_mut().zip(row) {
                    *g += dl * x;
                }
                grad[self.d] += dl;
            }
        }
        let scale = if self.normalizer > 0.0 {
            1.0 / self.normalizer
        } else {
            0.0
        };
        for g in &mut grad {
            *g *= scale;
        }
        for k in 0..self.d {
            grad[k] += self.reg_lambda * params[k];
        }
        (data * scale + self.penalty(params), grad)
    }
}

/// Runs the optimizer on a prepared objective and packages the model.
pub(crate) fn fit_objective(
    objective: &LogisticObjective,
    standardizer: Standardizer,
    params: TrainParams,
) -> BaseModel {
    let d = objective.d;
    let result = gradient_descent(
        objective,
        vec![0.0; d + 1],
        DescentOptions {
            max_iter: params.max_iter,
            tol: params.tol,
        },
    );
    if !result.converged {
        log::debug!(
            "gradient descent stopped after {} iterations without reaching tol {}",
            result.iterations,
            params.tol
        );
    }
    BaseModel {
        d,
        weights: result.params[..d].to_vec(),
        intercept: result.params[d],
        standardizer,
        params,
        meta: TrainMeta {
            iterations: result.iterations,
            objective: result.value,
            converged: result.converged,
            seed: params.seed,
        },
    }
}

/// Builds the mean log-loss objective for `ds` together with its standardizer.
pub fn log_loss_objective(
    ds: &LabeledDataset,
    reg_lambda: f64,
) -> Result<(LogisticObjective, Standardizer)> {
    let labels = ds.labels()?;
    let standardizer = Standardizer::fit(&ds.features(), ds.dim());
    let mut objective = LogisticObjective::new(ds.dim(), reg_lambda);
    let mut row = Vec::with_capacity(ds.dim());
    for (inst, y) in ds.instances().iter().zip(labels) {
        row.clear();
        standardizer.apply_into(&inst.features, &mut row);
        objective.push(&row, y, SampleLoss::Log);
    }
    Ok((objective, standardizer))
}

/// Trains a logistic model by minimizing mean log-loss plus the ridge penalty.
pub fn train(ds: &LabeledDataset, params: &TrainParams) -> Result<BaseModel> {
    params.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidDataset(
            "cannot train on an empty dataset".into(),
        ));
    }
    let (objective, standardizer) = log_loss_objective(ds, params.reg_lambda)?;
    Ok(fit_objective(&objective, standardizer, *params))
}

/// Held-out indices, their scores and an optional warning.
type FoldScores = (Vec<usize>, Vec<f64>, Option<String>);

/// Out-of-fold scores aligned with the dataset's instance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPredictions {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub folds: FoldAssignment,
    /// Notes about degenerate fold models (for example single-class training sets).
    pub warnings: Vec<String>,
}

/// Scores each instance with the model trained on every other fold.
///
/// Fold models train in parallel; the output is assembled in instance order,
/// so the result does not depend on scheduling.
pub fn cv_predict(
    ds: &LabeledDataset,
    folds: &FoldAssignment,
    params: &TrainParams,
) -> Result<CvPredictions> {
    if folds.fold_of.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: folds.fold_of.len(),
            right: ds.len(),
        });
    }
    ds.labels()?;
    let per_fold: Vec<Result<FoldScores>> = (0..folds.k)
        .into_par_iter()
        .map(|j| {
            let (train_idx, held_idx) = folds.indices(j);
            let train_ds = ds.subset(&train_idx);
            let labels = train_ds.labels()?;
            let positives = labels.iter().filter(|&&y| y > 0.5).count();
            let warning = (positives == 0 || positives == labels.len())
                .then(|| format!("fold {j}: training set contains a single class"));
            let model = train(&train_ds, params)?;
            let scores = held_idx
                .iter()
                .map(|&i| model.score(&ds.instances()[i].features))
                .collect::<Result<Vec<_>>>()?;
            Ok((held_idx, scores, warning))
        })
        .collect();
    let mut scores = vec![f64::NAN; ds.len()];
    let mut warnings = Vec::new();
    for fold in per_fold {
        let (held, fold_scores, warning) = fold?;
        for (i, s) in held.into_iter().zip(fold_scores) {
            scores[i] = s;
        }
        if let Some(w) = warning {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(CvPredictions {
        ids: ds.instances().iter().map(|i| i.id.clone()).collect(),
        scores,
        folds: folds.clone(),
        warnings,
    })
}
