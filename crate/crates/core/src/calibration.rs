//! Grid-discretized calibration of a base scorer against oracle-score groups.
//!
//! Base scores are rounded to the grid `{i / M}` and oracle scores to
//! `{j / M'}`; each sample then falls in a cell `(i, j)`. Two post-processors
//! are provided:
//!
//! - [`CellCalibrator`] adds the mean training residual `y - f(x)` of the
//!   sample's cell, one offset per cell (`(M + 1) * (M' + 1)` parameters).
//! - [`AdditiveCalibrator`] adds a row offset plus a column offset fitted by
//!   least squares (`M + M' + 2` parameters). The design is rank deficient, so
//!   the minimum-norm solution is returned.
//!
//! Outputs are clamped to `[0, 1]`; the unclamped value is available from
//! [`Calibrator::predict_unclamped`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::balanced_folds;
use crate::error::{Error, Result};

/// Index `i` of the grid point `i / m` closest to `v`.
///
/// A value exactly halfway between two grid points rounds to the lower one.
pub fn grid_index(v: f64, m: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::ScoreOutOfRange(v));
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "grid resolution must be >= 1".into(),
        ));
    }
    Ok(grid_index_unchecked(v, m))
}

fn grid_index_unchecked(v: f64, m: usize) -> usize {
    let t = v.clamp(0.0, 1.0) * m as f64;
    let lower = t.floor();
    let i = if t - lower > 0.5 { lower + 1.0 } else { lower };
    (i as usize).min(m)
}

/// The grid point `i / m` closest to `v` (ties toward the lower point).
pub fn grid_round(v: f64, m: usize) -> Result<f64> {
    grid_index(v, m).map(|i| i as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Base-score grid resolution.
    pub m: usize,
    /// Oracle-score grid resolution.
    pub m_prime: usize,
}

impl GridSpec {
    pub fn new(m: usize, m_prime: usize) -> Result<GridSpec> {
        if m == 0 || m_prime == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid resolutions must be >= 1, got M = {m}, M' = {m_prime}"
            )));
        }
        Ok(GridSpec { m, m_prime })
    }

    pub fn rows(&self) -> usize {
        self.m + 1
    }

    pub fn cols(&self) -> usize {
        self.m_prime + 1
    }

    /// `(row, col)` cell of a base score and an oracle score.
    pub fn cell(&self, f: f64, z: f64) -> (usize, usize) {
        (
            grid_index_unchecked(f, self.m),
            grid_index_unchecked(z, self.m_prime),
        )
    }
}

fn check_inputs(base: &[f64], z: &[f64], y: &[f64]) -> Result<()> {
    if base.len() != z.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: z.len(),
        });
    }
    if base.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: y.len(),
        });
    }
    if let Some(v) = base.iter().chain(z).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::ScoreOutOfRange(*v));
    }
    Ok(())
}

/// One additive offset per `(base level, oracle level)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCalibrator {
    pub grid: GridSpec,
    /// Row-major `(M + 1) x (M' + 1)` table of mean residuals.
    pub delta: Vec<f64>,
    pub counts: Vec<usize>,
}

impl CellCalibrator {
    pub fn delta_at(&self, row: usize, col: usize) -> f64 {
        self.delta[row * self.grid.cols() + col]
    }

    pub fn count_at(&self, row: usize, col: usize) -> usize {
        self.counts[row * self.grid.cols() + col]
    }

    pub fn num_params(&self) -> usize {
        self.delta.len()
    }
}

/// Mean of `y - f(x)` within each cell; empty cells get offset 0.
pub fn fit_cell_calibrator(
    base: &[f64],
    z: &[f64],
    y: &[f64],
    grid: GridSpec,
) -> Result<CellCalibrator> {
    check_inputs(base, z, y)?;
    let cells = grid.rows() * grid.cols();
    let mut sums = vec![0.0; cells];
    let mut counts = vec![0usize; cells];
    for i in 0..base.len() {
        let (r, c) = grid.cell(base[i], z[i]);
        sums[r * grid.cols() + c] += y[i] - base[i];
        counts[r * grid.cols() + c] += 1;
    }
    let delta = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    Ok(CellCalibrator {
        grid,
        delta,
        counts,
    })
}

/// Row offset for the base-score level plus column offset for the
/// oracle-score level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveCalibrator {
    pub grid: GridSpec,
    pub row_offsets: Vec<f64>,
    pub col_offsets: Vec<f64>,
}

impl AdditiveCalibrator {
    pub fn num_params(&self) -> usize {
        self.row_offsets.len() + self.col_offsets.len()
    }
}

/// Minimum-norm least-squares fit of
/// `sum_i (f_i + row[r_i] + col[c_i] - y_i)^2`.
///
/// The normal equations are solved with an SVD pseudo-inverse; singular
/// values below `1e-9` times the largest are treated as zero, which removes
/// the row/column shift ambiguity and zeroes unoccupied levels.
pub fn fit_additive_calibrator(
    base: &[f64],
    z: &[f64],
    y: &[f64],
    grid: GridSpec,
) -> Result<AdditiveCalibrator> {
    check_inputs(base, z, y)?;
    let rows = grid.rows();
    let size = rows + grid.cols();
    let mut normal = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    for i in 0..base.len() {
        let (r, c) = grid.cell(base[i], z[i]);
        let c = rows + c;
        let resid = y[i] - base[i];
        normal[(r, r)] += 1.0;
        normal[(c, c)] += 1.0;
        normal[(r, c)] += 1.0;
        normal[(c, r)] += 1.0;
        rhs[r] += resid;
        rhs[c] += resid;
    }
    let svd = normal.svd(true, true);
    let largest = svd.singular_values.max();
    let solution = if largest > 0.0 {
        svd.solve(&rhs, 1e-9 * largest)
            .map_err(|e| Error::InvalidArgument(format!("least-squares solve failed: {e}")))?
    } else {
        DVector::zeros(size)
    };
    Ok(AdditiveCalibrator {
        grid,
        row_offsets: solution.rows(0, rows).iter().copied().collect(),
        col_offsets: solution.rows(rows, grid.cols()).iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    Cell,
    Additive,
}

impl std::str::FromStr for CalibratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cell" => Ok(CalibratorKind::Cell),
            "additive" => Ok(CalibratorKind::Additive),
            other => Err(Error::InvalidArgument(format!(
                "unknown calibrator kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Calibrator {
    Cell(CellCalibrator),
    Additive(AdditiveCalibrator),
}

impl Calibrator {
    pub fn fit(
        kind: CalibratorKind,
        base: &[f64],
        z: &[f64],
        y: &[f64],
        grid: GridSpec,
    ) -> Result<Calibrator> {
        Ok(match kind {
            CalibratorKind::Cell => Calibrator::Cell(fit_cell_calibrator(base, z, y, grid)?),
            CalibratorKind::Additive => {
                Calibrator::Additive(fit_additive_calibrator(base, z, y, grid)?)
            }
        })
    }

    pub fn grid(&self) -> GridSpec {
        match self {
            Calibrator::Cell(c) => c.grid,
            Calibrator::Additive(c) => c.grid,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Calibrator::Cell(c) => c.num_params(),
            Calibrator::Additive(c) => c.num_params(),
        }
    }

    pub fn offset(&self, f: f64, z: f64) -> f64 {
        let (r, c) = self.grid().cell(f, z);
        match self {
            Calibrator::Cell(cal) => cal.delta_at(r, c),
            Calibrator::Additive(cal) => cal.row_offsets[r] + cal.col_offsets[c],
        }
    }

    pub fn predict_unclamped(&self, f: f64, z: f64) -> f64 {
        f + self.offset(f, z)
    }

    pub fn predict(&self, f: f64, z: f64) -> f64 {
        self.predict_unclamped(f, z).clamp(0.0, 1.0)
    }

    pub fn predict_all(&self, base: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if base.len() != z.len() {
            return Err(Error::LengthMismatch {
                left: base.len(),
                right: z.len(),
            });
        }
        Ok(base
            .iter()
            .zip(z)
            .map(|(&f, &q)| self.predict(f, q))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::persist::save_json(self, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Calibrator> {
        let cal: Calibrator = crate::persist::load_json(path)?;
        let g = cal.grid();
        let ok = match &cal {
            Calibrator::Cell(c) => {
                c.delta.len() == g.rows() * g.cols() && c.counts.len() == c.delta.len()
            }
            Calibrator::Additive(c) => {
                c.row_offsets.len() == g.rows() && c.col_offsets.len() == g.cols()
            }
        };
        if !ok || g.m == 0 || g.m_prime == 0 {
            return Err(Error::InvalidArgument(
                "calibrator tables do not match grid".into(),
            ));
        }
        Ok(cal)
    }
}

/// Mean squared error of each candidate `M` under `k`-fold cross-validation of
/// the calibrator fit (the base scores are held fixed).
#[allow(clippy::too_many_arguments)]
pub fn cv_grid_losses(
    base: &[f64],
    z: &[f64],
    y: &[f64],
    candidates: &[usize],
    m_prime: usize,
    kind: CalibratorKind,
    k: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_inputs(base, z, y)?;
    let fold_of = balanced_folds(base.len(), k, seed)?;
    let mut out = Vec::with_capacity(candidates.len());
    for &m in candidates {
        let grid = GridSpec::new(m, m_prime)?;
        let mut sse = 0.0;
        for j in 0..k {
            let (train, held): (Vec<usize>, Vec<usize>) =
                (0..base.len()).partition(|&i| fold_of[i] != j);
            let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let cal = Calibrator::fit(
                kind,
                &pick(base, &train),
                &pick(z, &train),
                &pick(y, &train),
                grid,
            )?;
            sse += held
                .iter()
                .map(|&i| (cal.predict(base[i], z[i]) - y[i]).powi(2))
                .sum::<f64>();
        }
        out.push((m, sse / base.len() as f64));
    }
    Ok(out)
}

/// Picks the base-grid resolution with the lowest cross-validated squared
/// error; ties go to the smaller `M`.
#[allow(clippy::too_many_arguments)]
pub fn choose_grid(
    base: &[f64],
    z: &[f64],
    y: &[f64],
    candidates: &[usize],
    m_prime: usize,
    kind: CalibratorKind,
    k: usize,
    seed: u64,
) -> Result<GridSpec> {
    match candidates {
        [] => Err(Error::InvalidArgument("no grid candidates".into())),
        [only] => GridSpec::new(*only, m_prime),
        _ => {
            let losses = cv_grid_losses(base, z, y, candidates, m_prime, kind, k, seed)?;
            let best = argmin_prefer_smaller(&losses);
            GridSpec::new(best, m_prime)
        }
    }
}

/// Smallest key among those attaining the minimum value.
pub(crate) fn argmin_prefer_smaller(losses: &[(usize, f64)]) -> usize {
    let mut best = losses[0];
    for &(key, loss) in &losses[1..] {
        if loss < best.1 || (loss == best.1 && key < best.0) {
            best = (key, loss);
        }
    }
    best.0
}
