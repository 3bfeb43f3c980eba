//! Linear fusion of base-model scores with oracle scores.
//!
//! The fused score is `alpha(y_hat) * y_hat + (1 - alpha(y_hat)) * z`, where
//! `alpha` is piecewise constant on the uniform partition of `[0, 1]` into
//! `r` pieces. With `r = 1` this is the constant-weight combination. Weights
//! are fitted on out-of-fold base scores by minimizing squared error.

use serde::{Deserialize, Serialize};

use crate::dataset::balanced_folds;
use crate::error::{Error, Result};

/// Weight used for pieces that received no samples at fit time.
pub const DEFAULT_EMPTY_PIECE_WEIGHT: f64 = 0.0;

fn check_inputs(y_cv: &[f64], z: &[f64], y: &[f64]) -> Result<()> {
    if y_cv.len() != z.len() {
        return Err(Error::LengthMismatch {
            left: y_cv.len(),
            right: z.len(),
        });
    }
    if y_cv.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: y_cv.len(),
            right: y.len(),
        });
    }
    if y_cv.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit weights on empty input".into(),
        ));
    }
    if let Some(v) = y_cv.iter().chain(z).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::ScoreOutOfRange(*v));
    }
    Ok(())
}

/// Closed-form least-squares weight of `y - z` regressed on `y_cv - z`,
/// projected onto `[0, 1]`. Returns 1 when `y_cv == z` everywhere.
fn closed_form(y_cv: &[f64], z: &[f64], y: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &q), &t) in y_cv.iter().zip(z).zip(y) {
        let diff = p - q;
        num += (t - q) * diff;
        den += diff * diff;
    }
    if den == 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

/// Best constant weight in `[0, 1]` under squared error.
pub fn fit_constant_weight(y_cv: &[f64], z: &[f64], y: &[f64]) -> Result<f64> {
    check_inputs(y_cv, z, y)?;
    Ok(closed_form(y_cv, z, y))
}

/// Sum of squared errors of the fused score at a fixed weight.
pub fn fused_sse(alpha: f64, y_cv: &[f64], z: &[f64], y: &[f64]) -> f64 {
    y_cv.iter()
        .zip(z)
        .zip(y)
        .map(|((&p, &q), &t)| (alpha * p + (1.0 - alpha) * q - t).powi(2))
        .sum()
}

/// Piecewise-constant weight function on `[0, 1]`.
///
/// Piece `j` (0-based) covers `[j / r, (j + 1) / r)`; the last piece is
/// closed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub r: usize,
    pub weights: Vec<f64>,
    pub support_counts: Vec<usize>,
}

impl WeightFunction {
    pub fn constant(alpha: f64) -> WeightFunction {
        WeightFunction {
            r: 1,
            weights: vec![alpha],
            support_counts: vec![0],
        }
    }

    pub fn piece_of(&self, y_hat: f64) -> usize {
        piece_index(y_hat, self.r)
    }

    pub fn alpha(&self, y_hat: f64) -> f64 {
        self.weights[self.piece_of(y_hat)]
    }

    /// `alpha(y_hat) * y_hat + (1 - alpha(y_hat)) * z`.
    pub fn fuse(&self, y_hat: f64, z: f64) -> f64 {
        let a = self.alpha(y_hat);
        a * y_hat + (1.0 - a) * z
    }

    pub fn fuse_all(&self, y_hat: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if y_hat.len() != z.len() {
            return Err(Error::LengthMismatch {
                left: y_hat.len(),
                right: z.len(),
            });
        }
        Ok(y_hat
            .iter()
            .zip(z)
            .map(|(&p, &q)| self.fuse(p, q))
            .collect())
    }

    /// Mean squared error of the fused score.
    pub fn objective(&self, y_cv: &[f64], z: &[f64], y: &[f64]) -> f64 {
        let sse: f64 = y_cv
            .iter()
            .zip(z)
            .zip(y)
            .map(|((&p, &q), &t)| (self.fuse(p, q) - t).powi(2))
            .sum();
        sse / y_cv.len().max(1) as f64
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::persist::save_json(self, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<WeightFunction> {
        let wf: WeightFunction = crate::persist::load_json(path)?;
        if wf.r == 0 || wf.weights.len() != wf.r || wf.support_counts.len() != wf.r {
            return Err(Error::InvalidArgument(
                "inconsistent weight function".into(),
            ));
        }
        Ok(wf)
    }
}

/// Index of the uniform piece containing `v`; values at or above 1 land in
/// the last piece.
pub fn piece_index(v: f64, r: usize) -> usize {
    let j = (v * r as f64).floor();
    if j <= 0.0 {
        0
    } else {
        (j as usize).min(r - 1)
    }
}

/// Fits one weight per piece of the uniform `r`-piece partition, using the
/// samples whose out-of-fold score falls in that piece.
pub fn fit_adaptive_weights(
    y_cv: &[f64],
    z: &[f64],
    y: &[f64],
    r: usize,
) -> Result<WeightFunction> {
    fit_adaptive_weights_with(y_cv, z, y, r, DEFAULT_EMPTY_PIECE_WEIGHT)
}

pub fn fit_adaptive_weights_with(
    y_cv: &[f64],
    z: &[f64],
    y: &[f64],
    r: usize,
    empty_piece_weight: f64,
) -> Result<WeightFunction> {
    check_inputs(y_cv, z, y)?;
    if r == 0 {
        return Err(Error::InvalidArgument("piece count r must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&empty_piece_weight) {
        return Err(Error::InvalidArgument(format!(
            "empty-piece weight {empty_piece_weight} outside [0, 1]"
        )));
    }
    let mut buckets: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = vec![Default::default(); r];
    for i in 0..y_cv.len() {
        let b = &mut buckets[piece_index(y_cv[i], r)];
        b.0.push(y_cv[i]);
        b.1.push(z[i]);
        b.2.push(y[i]);
    }
    let mut weights = Vec::with_capacity(r);
    let mut support_counts = Vec::with_capacity(r);
    for (p, q, t) in &buckets {
        support_counts.push(p.len());
        weights.push(if p.is_empty() {
            empty_piece_weight
        } else {
            closed_form(p, q, t)
        });
    }
    Ok(WeightFunction {
        r,
        weights,
        support_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub weight: f64,
    pub count: usize,
    /// Piece SSE under the best constant weight.
    pub objective_before: f64,
    /// Piece SSE under the piece's own weight.
    pub objective_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub constant_weight: f64,
    pub pieces: Vec<PieceReport>,
    /// Mean squared error of the constant fit on the out-of-fold data.
    pub constant_objective: f64,
    /// Mean squared error of the adaptive fit on the out-of-fold data.
    pub adaptive_objective: f64,
}

/// Compares an adaptive fit with the constant fit, piece by piece.
pub fn fusion_report(
    y_cv: &[f64],
    z: &[f64],
    y: &[f64],
    wf: &WeightFunction,
) -> Result<FusionReport> {
    let constant = fit_constant_weight(y_cv, z, y)?;
    let mut pieces: Vec<PieceReport> = wf
        .weights
        .iter()
        .map(|&weight| PieceReport {
            weight,
            count: 0,
            objective_before: 0.0,
            objective_after: 0.0,
        })
        .collect();
    for i in 0..y_cv.len() {
        let piece = &mut pieces[wf.piece_of(y_cv[i])];
        piece.count += 1;
        piece.objective_before += (constant * y_cv[i] + (1.0 - constant) * z[i] - y[i]).powi(2);
        piece.objective_after +=
            (piece.weight * y_cv[i] + (1.0 - piece.weight) * z[i] - y[i]).powi(2);
    }
    Ok(FusionReport {
        constant_weight: constant,
        pieces,
        constant_objective: WeightFunction::constant(constant).objective(y_cv, z, y),
        adaptive_objective: wf.objective(y_cv, z, y),
    })
}

/// Held-out squared error of the adaptive fit for each candidate piece count,
/// from a `k`-fold split of the out-of-fold scores.
pub fn cv_piece_losses(
    y_cv: &[f64],
    z: &[f64],
    y: &[f64],
    candidates: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_inputs(y_cv, z, y)?;
    let fold_of = balanced_folds(y_cv.len(), k, seed)?;
    let mut out = Vec::with_capacity(candidates.len());
    for &r in candidates {
        let mut sse = 0.0;
        for j in 0..k {
            let (train, held): (Vec<usize>, Vec<usize>) =
                (0..y_cv.len()).partition(|&i| fold_of[i] != j);
            let pick = |v: &[f64]| train.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let wf = fit_adaptive_weights(&pick(y_cv), &pick(z), &pick(y), r)?;
            sse += held
                .iter()
                .map(|&i| (wf.fuse(y_cv[i], z[i]) - y[i]).powi(2))
                .sum::<f64>();
        }
        out.push((r, sse / y_cv.len() as f64));
    }
    Ok(out)
}

/// Piece count with the lowest held-out error; ties go to the smaller `r`.
pub fn choose_pieces(
    y_cv: &[f64],
    z: &[f64],
    y: &[f64],
    candidates: &[usize],
    k: usize,
    seed: u64,
) -> Result<usize> {
    match candidates {
        [] => Err(Error::InvalidArgument("no piece-count candidates".into())),
        [only] => Ok(*only),
        _ => Ok(crate::calibration::argmin_prefer_smaller(&cv_piece_losses(
            y_cv, z, y, candidates, k, seed,
        )?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Grid search over [0, 1]; independent of the closed form.
    fn grid_alpha(y_cv: &[f64], z: &[f64], y: &[f64]) -> f64 {
        (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| fused_sse(*a, y_cv, z, y).total_cmp(&fused_sse(*b, y_cv, z, y)))
            .unwrap()
    }

    #[test]
    fn constant_weight_examples() {
        let a = fit_constant_weight(&[0.8, 0.4], &[0.6, 0.0], &[1.0, 0.0]).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
        assert!((grid_alpha(&[0.8, 0.4], &[0.6, 0.0], &[1.0, 0.0]) - 0.4).abs() < 1e-9);

        let perfect =
            fit_constant_weight(&[0.7, 0.2, 0.6], &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(perfect, 0.0);

        // unclamped value is -1/3
        let y_cv = [0.6, 0.4];
        let z = [0.9, 0.1];
        let num: f64 = (1.0 - 0.9) * (0.6 - 0.9) + (0.0 - 0.1) * (0.4 - 0.1);
        let den: f64 = 0.09 + 0.09;
        assert!((num / den + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fit_constant_weight(&y_cv, &z, &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn identical_estimators_give_one() {
        assert_eq!(
            fit_constant_weight(&[0.3, 0.9], &[0.3, 0.9], &[0.0, 1.0]).unwrap(),
            1.0
        );
    }

    #[test]
    fn input_errors() {
        assert!(fit_constant_weight(&[], &[], &[]).is_err());
        assert!(fit_constant_weight(&[0.1], &[0.1, 0.2], &[0.0]).is_err());
        assert!(fit_constant_weight(&[1.1], &[0.1], &[0.0]).is_err());
        assert!(fit_adaptive_weights(&[0.1], &[0.1], &[0.0], 0).is_err());
    }

    #[test]
    fn two_piece_example() {
        let y_cv = [0.2, 0.3, 0.8, 0.6];
        let z = [1.0, 0.0, 0.6, 0.0];
        let y = [1.0, 0.0, 1.0, 0.0];
        let wf = fit_adaptive_weights(&y_cv, &z, &y, 2).unwrap();
        assert_eq!(wf.support_counts, vec![2, 2]);
        assert!((wf.weights[0] - 0.0).abs() < 1e-12);
        assert!((wf.weights[1] - 0.2).abs() < 1e-12);
        assert!((grid_alpha(&y_cv[2..], &z[2..], &y[2..]) - 0.2).abs() < 1e-9);
        assert!((wf.fuse(0.8, 0.6) - 0.64).abs() < 1e-12);
    }

    #[test]
    fn single_piece_reduces_to_constant() {
        let y_cv = [0.1, 0.45, 0.9, 0.66];
        let z = [0.0, 1.0, 1.0, 0.0];
        let y = [0.0, 1.0, 1.0, 1.0];
        let wf = fit_adaptive_weights(&y_cv, &z, &y, 1).unwrap();
        assert_eq!(
            wf.weights[0].to_bits(),
            fit_constant_weight(&y_cv, &z, &y).unwrap().to_bits()
        );
    }

    #[test]
    fn empty_pieces_defer_to_oracle() {
        let wf = fit_adaptive_weights(&[0.05, 0.1], &[0.0, 1.0], &[0.0, 1.0], 4).unwrap();
        assert_eq!(wf.support_counts, vec![2, 0, 0, 0]);
        assert_eq!(&wf.weights[1..], &[0.0, 0.0, 0.0]);
        let half = fit_adaptive_weights_with(&[0.05], &[0.0], &[0.0], 2, 0.5).unwrap();
        assert_eq!(half.weights[1], 0.5);
    }

    #[test]
    fn fuse_identities() {
        let one = WeightFunction::constant(1.0);
        let zero = WeightFunction::constant(0.0);
        assert_eq!(one.fuse(0.37, 0.9), 0.37);
        assert_eq!(zero.fuse(0.37, 0.9), 0.9);
    }

    #[test]
    fn pieces_partition_unit_interval() {
        assert_eq!(piece_index(0.0, 4), 0);
        assert_eq!(piece_index(0.25, 4), 1);
        assert_eq!(piece_index(0.999, 4), 3);
        assert_eq!(piece_index(1.0, 4), 3);
        assert_eq!(piece_index(0.5, 1), 0);
    }

    #[test]
    fn report_pieces_improve() {
        let y_cv = [0.2, 0.3, 0.8, 0.6, 0.55, 0.1];
        let z = [1.0, 0.0, 0.6, 0.0, 1.0, 1.0];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let wf = fit_adaptive_weights(&y_cv, &z, &y, 3).unwrap();
        let report = fusion_report(&y_cv, &z, &y, &wf).unwrap();
        for p in &report.pieces {
            assert!(p.objective_after <= p.objective_before + 1e-15);
        }
        assert!(report.adaptive_objective <= report.constant_objective + 1e-15);
    }

    #[test]
    fn weight_function_json() {
        let wf = fit_adaptive_weights(&[0.2, 0.7], &[1.0, 0.0], &[1.0, 1.0], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        wf.save(&path).unwrap();
        assert_eq!(WeightFunction::load(&path).unwrap(), wf);
    }

    fn triples() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0..=1.0f64, n),
                prop::collection::vec(0.0..=1.0f64, n),
                prop::collection::vec(prop::bool::ANY.prop_map(|b| f64::from(u8::from(b))), n),
            )
        })
    }

    proptest! {
        #[test]
        fn fused_score_is_convex((y_cv, z, y) in triples(), r in 1usize..12) {
            let wf = fit_adaptive_weights(&y_cv, &z, &y, r).unwrap();
            for (&p, &q) in y_cv.iter().zip(&z) {
                let f = wf.fuse(p, q);
                prop_assert!(f >= p.min(q) - 1e-15 && f <= p.max(q) + 1e-15);
            }
        }

        #[test]
        fn adaptive_dominates_constant((y_cv, z, y) in triples(), r in 1usize..12) {
            let c = fit_constant_weight(&y_cv, &z, &y).unwrap();
            let wf = fit_adaptive_weights(&y_cv, &z, &y, r).unwrap();
            prop_assert!(wf.objective(&y_cv, &z, &y) <= WeightFunction::constant(c).objective(&y_cv, &z, &y) + 1e-12);
        }

        #[test]
        fn changing_one_piece_leaves_others((y_cv, z, y) in triples(), r in 2usize..8, k in 0usize..40, newz in 0.0..=1.0f64) {
            let k = k % y_cv.len();
            let before = fit_adaptive_weights(&y_cv, &z, &y, r).unwrap();
            let mut z2 = z.clone();
            z2[k] = newz;
            let after = fit_adaptive_weights(&y_cv, &z2, &y, r).unwrap();
            let touched = piece_index(y_cv[k], r);
            for j in 0..r {
                if j != touched {
                    prop_assert_eq!(before.weights[j].to_bits(), after.weights[j].to_bits());
                }
            }
        }
    }
}
