//! Covariate-shift transfer by augmenting the labeled set with oracle-labeled
//! samples.
//!
//! Given labeled data drawn with stratum density `p1` and a target density
//! `p2`, augmentation inputs are drawn from `p3` so that the mixture of `n`
//! labeled and `m` augmented samples has density `p2`:
//! `p3 = p2 + (n / m) (p2 - p1)`. When that is negative somewhere the
//! positive part is renormalized and the plan is marked as clamped.
//!
//! Augmented samples carry only the oracle score and are fitted with a
//! slack-banded squared loss, `max(|p - z| - a, 0)^2`, which is the squared
//! loss minimized over targets within `a` of `z`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base_model::{
    fit_objective, BaseModel, LogisticObjective, SampleLoss, Standardizer, TrainParams,
};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::oracle::OracleProvider;
use crate::rng::seeded;

/// Slack used when none is configured.
pub const DEFAULT_SLACK: f64 = 0.1;

const DENSITY_TOL: f64 = 1e-9;

/// Negative mixture entries no larger than this in magnitude are treated as zero.
const FEASIBILITY_TOL: f64 = 1e-12;

/// A probability distribution over stratum tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StratumDensity(BTreeMap<String, f64>);

impl StratumDensity {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("density over no strata".into()));
        }
        if let Some((tag, p)) = weights
            .iter()
            .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "stratum {tag} has probability {p}"
            )));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > DENSITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "stratum probabilities sum to {total}"
            )));
        }
        Ok(StratumDensity(weights))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Empirical frequencies of `counts`, extended with zero-probability
    /// entries for every tag in `support` that has no count.
    pub fn from_counts(counts: &BTreeMap<String, usize>, support: &[String]) -> Result<Self> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no stratum-tagged instances".into()));
        }
        let mut weights: BTreeMap<String, f64> = support.iter().map(|t| (t.clone(), 0.0)).collect();
        for (tag, &c) in counts {
            weights.insert(tag.clone(), c as f64 / total as f64);
        }
        Self::new(weights)
    }

    pub fn get(&self, tag: &str) -> f64 {
        self.0.get(tag).copied().unwrap_or(0.0)
    }

    pub fn tags(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, f64)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }
}

/// Sampling density that makes the labeled/augmented mixture match `p2`.
///
/// Returns the density and whether the exact solution was infeasible.
pub fn derive_p3(
    p1: &StratumDensity,
    p2: &StratumDensity,
    n: usize,
    m: usize,
) -> Result<(StratumDensity, bool)> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("n and m must be >= 1".into()));
    }
    if !p1.tags().eq(p2.tags()) {
        return Err(Error::InvalidArgument(format!(
            "stratum tags differ: {:?} vs {:?}",
            p1.tags().collect::<Vec<_>>(),
            p2.tags().collect::<Vec<_>>()
        )));
    }
    let ratio = n as f64 / m as f64;
    let raw: BTreeMap<String, f64> = p2
        .iter()
        .map(|(tag, q2)| (tag.clone(), q2 + ratio * (q2 - p1.get(tag))))
        .collect();
    if raw.values().all(|&v| v >= -FEASIBILITY_TOL) {
        let exact = raw.into_iter().map(|(k, v)| (k, v.max(0.0))).collect();
        return Ok((StratumDensity(exact), false));
    }
    let positive: BTreeMap<String, f64> = raw.into_iter().map(|(k, v)| (k, v.max(0.0))).collect();
    let total: f64 = positive.values().sum();
    let normalized = positive.into_iter().map(|(k, v)| (k, v / total)).collect();
    Ok((StratumDensity(normalized), true))
}

/// Everything needed to reproduce an augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub n: usize,
    pub m: usize,
    pub source: StratumDensity,
    pub target: StratumDensity,
    pub sampling: StratumDensity,
    pub slack_a: f64,
    pub clamped: bool,
}

impl TransferPlan {
    pub fn new(
        source: StratumDensity,
        target: StratumDensity,
        n: usize,
        m: usize,
        slack_a: f64,
    ) -> Result<Self> {
        if !(slack_a >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slack {slack_a} must be >= 0"
            )));
        }
        let (sampling, clamped) = derive_p3(&source, &target, n, m)?;
        Ok(TransferPlan {
            n,
            m,
            source,
            target,
            sampling,
            slack_a,
            clamped,
        })
    }

    /// Plan that samples straight from the target density.
    pub fn sample_from_target(
        source: StratumDensity,
        target: StratumDensity,
        n: usize,
        m: usize,
        slack_a: f64,
    ) -> Self {
        TransferPlan {
            n,
            m,
            sampling: target.clone(),
            source,
            target,
            slack_a,
            clamped: false,
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::persist::save_json(self, path)
    }
}

/// Squared loss with a dead band of half-width `slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedLoss {
    pub slack: f64,
}

impl RelaxedLoss {
    pub fn value(&self, prediction: f64, target: f64) -> f64 {
        let excess = ((prediction - target).abs() - self.slack).max(0.0);
        excess * excess
    }
}

/// Draws `m` pool instances: stratum counts are multinomial in `p3`, and
/// instances are taken without replacement within each stratum. Labels are
/// dropped and the result is ordered by id.
pub fn sample_augmentation(
    pool: &LabeledDataset,
    p3: &StratumDensity,
    m: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = seeded(seed);
    let tags: Vec<(&String, f64)> = p3.iter().collect();
    let mut counts = vec![0usize; tags.len()];
    for _ in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (k, (_, p)) in tags.iter().enumerate() {
            acc += p;
            if *p > 0.0 && u < acc {
                pick = Some(k);
                break;
            }
        }
        // rounding can leave u above the final cumulative sum
        let pick = pick.unwrap_or_else(|| {
            tags.iter()
                .rposition(|(_, p)| *p > 0.0)
                .expect("density has mass")
        });
        counts[pick] += 1;
    }
    let mut chosen = Vec::with_capacity(m);
    for ((tag, _), &count) in tags.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let mut members: Vec<usize> = pool
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, i)| i.stratum.as_deref() == Some(tag.as_str()))
            .map(|(k, _)| k)
            .collect();
        if members.len() < count {
            return Err(Error::StratumExhausted {
                stratum: (*tag).clone(),
                requested: count,
                available: members.len(),
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..count]);
    }
    chosen.sort_by(|&a, &b| pool.instances()[a].id.cmp(&pool.instances()[b].id));
    Ok(pool.subset(&chosen).without_labels())
}

/// Attaches oracle scores to every instance; labels stay absent.
pub fn label_with_oracle(
    ds: &LabeledDataset,
    oracle: &mut dyn OracleProvider,
) -> Result<LabeledDataset> {
    let scores: BTreeMap<String, f64> = oracle.score_batch(ds.instances())?.into_iter().collect();
    ds.without_labels().with_oracle_scores(&scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub slack: f64,
    /// Round oracle scores to {0, 1} before fitting.
    pub round_oracle: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            slack: DEFAULT_SLACK,
            round_oracle: false,
        }
    }
}

/// Objective over the labeled set (squared loss against `y`) and the
/// augmented set (relaxed loss against `z`), normalized by `n + m`.
/// Standardization statistics come from the labeled set.
pub fn augmented_objective(
    labeled: &LabeledDataset,
    augmented: &LabeledDataset,
    reg_lambda: f64,
    opts: &AugmentOptions,
) -> Result<(LogisticObjective, Standardizer)> {
    if !augmented.is_empty() && augmented.dim() != labeled.dim() {
        return Err(Error::DimensionMismatch {
            expected: labeled.dim(),
            actual: augmented.dim(),
        });
    }
    if !(opts.slack >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "slack {} must be >= 0",
            opts.slack
        )));
    }
    let labels = labeled.labels()?;
    let z = augmented.oracle_scores()?;
    let standardizer = Standardizer::fit(&labeled.features(), labeled.dim());
    let mut objective = LogisticObjective::new(labeled.dim(), reg_lambda);
    let mut row = Vec::with_capacity(labeled.dim());
    for (inst, y) in labeled.instances().iter().zip(labels) {
        row.clear();
        standardizer.apply_into(&inst.features, &mut row);
        objective.push(&row, y, SampleLoss::Squared);
    }
    for (inst, z) in augmented.instances().iter().zip(z) {
        row.clear();
        standardizer.apply_into(&inst.features, &mut row);
        let target = if opts.round_oracle {
            f64::from(u8::from(z > 0.5))
        } else {
            z
        };
        objective.push(&row, target, SampleLoss::Relaxed { slack: opts.slack });
    }
    Ok((objective, standardizer))
}

/// Trains the base scorer on labeled plus oracle-labeled data.
pub fn train_augmented(
    labeled: &LabeledDataset,
    augmented: &LabeledDataset,
    params: &TrainParams,
    opts: &AugmentOptions,
) -> Result<BaseModel> {
    if labeled.is_empty() {
        return Err(Error::InvalidDataset("labeled set is empty".into()));
    }
    let (objective, standardizer) =
        augmented_objective(labeled, augmented, params.reg_lambda, opts)?;
    Ok(fit_objective(&objective, standardizer, *params))
}
