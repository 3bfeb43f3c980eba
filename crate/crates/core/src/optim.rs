//! Full-batch gradient descent with an Armijo backtracking line search.

/// A differentiable objective over a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;

    fn value(&self, params: &[f64]) -> f64;

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub max_iter: usize,
    /// Stop once the gradient's infinity norm is at or below this value.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// Minimizes `objective` from `start`.
///
/// The trial step of each line search is the Barzilai-Borwein step from the
/// previous iteration; it is halved until the Armijo sufficient-decrease
/// condition holds, so accepted steps never increase the objective.
pub fn gradient_descent(
    objective: &impl Objective,
    start: Vec<f64>,
    opts: DescentOptions,
) -> DescentResult {
    let mut x = start;
    let (mut f, mut g) = objective.value_and_gradient(&x);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        if inf_norm(&g) <= opts.tol {
            converged = true;
            break;
        }
        let g_sq: f64 = g.iter().map(|v| v * v).sum();
        let mut t = step;
        let (x_next, f_next) = loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let f_trial = objective.value(&trial);
            if f_trial <= f - ARMIJO_C * t * g_sq {
                break (trial, f_trial);
            }
            t *= 0.5;
            if t < MIN_STEP {
                return DescentResult {
                    params: x,
                    value: f,
                    iterations,
                    converged: false,
                    trace,
                };
            }
        };
        let (f_next2, g_next) = objective.value_and_gradient(&x_next);
        debug_assert!((f_next2 - f_next).abs() <= 1e-9 * (1.0 + f_next.abs()));
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..x.len() {
            let s = x_next[i] - x[i];
            ss += s * s;
            sy += s * (g_next[i] - g[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            (2.0 * t).min(1e10)
        };
        x = x_next;
        f = f_next;
        g = g_next;
        trace.push(f);
        iterations += 1;
    }
    if !converged && inf_norm(&g) <= opts.tol {
        converged = true;
    }
    DescentResult {
        params: x,
        value: f,
        iterations,
        converged,
        trace,
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Central finite-difference gradient, used to check analytic gradients.
pub fn finite_difference_gradient(objective: &impl Objective, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = objective.value(&p);
            p[i] = orig - h;
            let down = objective.value(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
