//! Reference solutions the trained models are compared against.
//!
//! * uniform-margin `w*`: minimum-norm solution of `<w, z_r> = 1` over all
//!   constraint rows, through the `m × m` Gram system;
//! * maximum-margin `w_max`: hard-margin SVM on the patch sums, by dual
//!   coordinate ascent;
//! * the spectrum of `Σ` restricted to the input span;
//! * two scalar inequalities used by the convergence analysis.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, solve_spd, sym_eigs, SymMat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    UniformMargin {
        /// `w* = Σ_r coefficients[r] · z_r`.
        coefficients: Vec<f64>,
        ridge: f64,
        /// Set when the Gram matrix needed a ridge to factor.
        regularized: bool,
    },
    MaxMargin {
        alphas: Vec<f64>,
        /// `y_i <w, x̄_i> − 1`.
        slacks: Vec<f64>,
        /// Largest of `−slack_i` and `α_i · |slack_i|`.
        kkt_violation: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    /// Largest constraint violation, recomputed from `solution`.
    pub residual: f64,
    pub iterations: usize,
    pub certificate: Certificate,
}

impl SolverReport {
    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

/// Largest residual accepted before declaring the system infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Minimum-norm solution of `<w, y_i x_i^(p)> = 1` for every `(i, p)`.
///
/// Solves `G a = 1` with `G_ab = <z_a, z_b>`, trying ridges
/// `0, 1e-12·tr(G)/m, 1e-10·tr(G)/m` in turn, and returns `w* = Σ a_b z_b`,
/// which lies in the span of the rows by construction.
pub fn solve_uniform_margin(data: &Dataset) -> Result<SolverReport> {
    let rows = data.constraint_rows();
    solve_uniform_rows(&rows)
}

pub fn solve_uniform_rows(rows: &[Vec<f64>]) -> Result<SolverReport> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let gram = SymMat::gram(&refs, 1.0);
    let base = gram.trace() / m as f64;
    let ones = vec![1.0; m];

    let mut best: Option<SolverReport> = None;
    let mut last_err = None;
    for (attempt, ridge) in [0.0, 1e-12 * base, 1e-10 * base].into_iter().enumerate() {
        let coeffs = match solve_spd(&gram, &ones, ridge) {
            Ok(c) => c,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let mut w = vec![0.0; rows[0].len()];
        for (c, z) in coeffs.iter().zip(rows) {
            axpy(*c, z, &mut w);
        }
        let residual = rows.iter().map(|z| (dot(&w, z) - 1.0).abs()).fold(0.0, f64::max);
        let report = SolverReport {
            solution: w,
            residual,
            iterations: attempt + 1,
            certificate: Certificate::UniformMargin {
                coefficients: coeffs,
                ridge,
                regularized: ridge > 0.0,
            },
        };
        if residual <= FEASIBILITY_TOL {
            return Ok(report);
        }
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(report);
        }
    }
    match best {
        Some(b) => Err(Error::Infeasible { residual: b.residual }),
        None => Err(last_err.unwrap_or(Error::Infeasible { residual: f64::INFINITY })),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxMarginOptions {
    /// Stop once the projected dual gradient is below this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for MaxMarginOptions {
    fn default() -> Self {
        MaxMarginOptions { tol: 1e-10, max_sweeps: 1_000_000 }
    }
}

/// Hard-margin SVM `argmin ||w||² s.t. y_i <w, x̄_i> >= 1` on the patch
/// sums `x̄_i = Σ_p x_i^(p)`.
pub fn solve_max_margin(data: &Dataset) -> Result<SolverReport> {
    solve_max_margin_with(data, MaxMarginOptions::default())
}

pub fn solve_max_margin_with(data: &Dataset, opts: MaxMarginOptions) -> Result<SolverReport> {
    let points: Vec<Vec<f64>> = (0..data.n()).map(|i| data.patch_sum(i)).collect();
    max_margin_points(&points, data.labels(), opts)
}

/// Dual coordinate ascent on `max Σα − ½||Σ α_i y_i x_i||²`, `α >= 0`.
///
/// Keeps `g = Qα` with `Q_ij = y_i y_j <x_i, x_j>` up to date; a sweep
/// visits the coordinates that can still move (positive `α`, or a
/// constraint that is not strictly satisfied) in index order.
pub fn max_margin_points(
    points: &[Vec<f64>],
    labels: &[f64],
    opts: MaxMarginOptions,
) -> Result<SolverReport> {
    let m = points.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: labels.len() });
    }
    let q = SymMat::from_fn(m, |i, j| labels[i] * labels[j] * dot(&points[i], &points[j]));
    let min_norm = points.iter().map(|p| norm2(p)).fold(f64::INFINITY, f64::min);
    if !(min_norm > 0.0) {
        return Err(Error::NotSeparable { norm: f64::INFINITY });
    }
    // ||w_max|| >= 1 / min ||x̄_i||
    let scale = 1.0 / min_norm;
    let norm_cap = 1e8 * scale;

    let mut alpha = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut sweeps = 0;
    loop {
        let violation = projected_gradient(&alpha, &g);
        if violation <= opts.tol {
            break;
        }
        let w_sq: f64 = alpha.iter().zip(&g).map(|(a, gi)| a * gi).sum();
        let alpha_sum: f64 = alpha.iter().sum();
        // at a separable optimum Σα = ||w||²; runaway growth means no optimum
        if w_sq.sqrt() > norm_cap || alpha_sum > 1e8 * (w_sq + scale * scale) {
            return Err(Error::NotSeparable { norm: w_sq.max(0.0).sqrt() });
        }
        if sweeps == opts.max_sweeps {
            return Err(Error::SolverStalled { sweeps, violation });
        }
        sweeps += 1;
        for i in 0..m {
            if alpha[i] == 0.0 && g[i] > 1.0 {
                continue;
            }
            let updated = (alpha[i] + (1.0 - g[i]) / q.get(i, i)).max(0.0);
            let delta = updated - alpha[i];
            if delta != 0.0 {
                alpha[i] = updated;
                axpy(delta, q.row(i), &mut g);
            }
        }
    }

    let d = points[0].len();
    let mut w = vec![0.0; d];
    for ((a, y), x) in alpha.iter().zip(labels).zip(points) {
        if *a != 0.0 {
            axpy(a * y, x, &mut w);
        }
    }
    let slacks: Vec<f64> = points.iter().zip(labels).map(|(x, y)| y * dot(&w, x) - 1.0).collect();
    let residual = slacks.iter().fold(0.0, |r: f64, s| r.max(-s));
    let kkt_violation = slacks
        .iter()
        .zip(&alpha)
        .fold(residual, |v, (s, a)| v.max(a * s.abs()));
    Ok(SolverReport {
        solution: w,
        residual,
        iterations: sweeps,
        certificate: Certificate::MaxMargin { alphas: alpha, slacks, kkt_violation },
    })
}

fn projected_gradient(alpha: &[f64], g: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(g)
        .map(|(a, gi)| if *a > 0.0 { (1.0 - gi).abs() } else { (1.0 - gi).max(0.0) })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub rank: usize,
}

/// Smallest and largest nonzero eigenvalues of `Σ` on the input span,
/// from the `nP × nP` Gram matrix scaled by `1/(nP)`. Eigenvalues below
/// `1e-10 · λ_max` count as rank deficiency.
pub fn span_spectrum(data: &Dataset) -> Result<SpectrumReport> {
    let eig = sym_eigs(&data.scaled_input_gram())?;
    let lambda_max = eig.values[0].max(0.0);
    if lambda_max == 0.0 {
        return Ok(SpectrumReport { lambda_min: 0.0, lambda_max: 0.0, rank: 0 });
    }
    let cutoff = 1e-10 * lambda_max;
    let kept: Vec<f64> = eig.values.iter().copied().filter(|&l| l > cutoff).collect();
    Ok(SpectrumReport {
        lambda_min: *kept.last().expect("lambda_max is kept"),
        lambda_max,
        rank: kept.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxInequality {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `Σ_(i,i') max(b_i, b_i') (a_i − a_i')² >= (Σ b_i)/(4n) · Σ_(i,i') (a_i − a_i')²`
/// for nondecreasing `a` and nonincreasing nonnegative `b`.
pub fn check_aux_inequality(a: &[f64], b: &[f64]) -> Result<AuxInequality> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: b.len() });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if a.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::NotSorted("a must be nondecreasing"));
    }
    if b.windows(2).any(|w| w[0] < w[1]) || b[n - 1] < 0.0 {
        return Err(Error::NotSorted("b must be nonincreasing and nonnegative"));
    }
    let mut weighted = 0.0;
    let mut plain = 0.0;
    for i in 0..n {
        for j in 0..n {
            let sq = (a[i] - a[j]).powi(2);
            weighted += b[i].max(b[j]) * sq;
            plain += sq;
        }
    }
    let rhs = b.iter().sum::<f64>() / (4.0 * n as f64) * plain;
    let slack = 1e-12 * weighted.abs().max(rhs.abs());
    Ok(AuxInequality { lhs: weighted, rhs, holds: weighted >= rhs - slack })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceBounds {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

/// Iterates `a ← a + c·e^(−a)` `t` times from `a0` and brackets the result
/// between `log(c t + e^a0)` and `c e^(−a0) + log(c t + e^a0)`.
pub fn gamma_recurrence_bounds(a0: f64, c: f64, t: u64) -> RecurrenceBounds {
    let mut a = a0;
    for _ in 0..t {
        a += c * (-a).exp();
    }
    let lower = (c * t as f64 + a0.exp()).ln();
    let upper = c * (-a0).exp() + lower;
    // accumulated rounding of t additions
    let slack = 2.0 * f64::EPSILON * (t as f64 + 1.0) * (a.abs() + 1.0);
    RecurrenceBounds { value: a, lower, upper, holds: lower - slack <= a && a <= upper + slack }
}
