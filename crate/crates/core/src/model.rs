//! Batch-normalized predictors on (patched) linear inputs.
//!
//! With centered training data the BN layer reduces to
//! `f(w, γ, x) = γ <w, x> / ||w||_Σ`; the single-filter CNN sums this over
//! patches, `g(w, γ, x) = Σ_p γ <w, x^(p)> / ||w||_Σ`, with `Σ` averaged
//! over samples and patches. A one-patch dataset makes the two coincide, so
//! everything below is written once for general `P`.
//!
//! Gradients are returned as `∇L`; the trainer applies the sign.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2};

/// Relative threshold below which `||w||_Σ` counts as degenerate.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub w: Vec<f64>,
    pub gamma: f64,
}

impl ModelState {
    pub fn new(w: Vec<f64>, gamma: f64) -> Self {
        ModelState { w, gamma }
    }
}

/// `ℓ(z) = log(1 + e^-z)`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `ℓ'(z) = -1 / (1 + e^z)`, evaluated without overflow.
pub fn logistic_derivative(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// Per-row inner products `a_(i,p) = <w, x_i^(p)>` together with
/// `||w||_Σ = sqrt(mean a²)`.
#[derive(Debug, Clone)]
pub struct Activations {
    pub raw: Vec<f64>,
    pub sigma_norm: f64,
}

impl Activations {
    pub fn compute(w: &[f64], data: &Dataset) -> Result<Self> {
        Self::compute_with_tol(w, data, DEFAULT_DEGENERACY_TOL)
    }

    pub fn compute_with_tol(w: &[f64], data: &Dataset, tol: f64) -> Result<Self> {
        if w.len() != data.d() {
            return Err(Error::DimensionMismatch { expected: data.d(), found: w.len() });
        }
        let raw: Vec<f64> = data.row_iter().map(|x| dot(w, x)).collect();
        let sigma_norm = (raw.iter().map(|a| a * a).sum::<f64>() / raw.len() as f64).sqrt();
        let floor = tol * norm2(w) * data.sigma_top_eigenvalue().sqrt();
        if !(sigma_norm > floor) {
            return Err(Error::DegenerateDirection { sigma_norm });
        }
        Ok(Activations { raw, sigma_norm })
    }

    /// `y_i Σ_p a_(i,p)`.
    fn signed_sample_sums(&self, data: &Dataset) -> Vec<f64> {
        self.raw
            .chunks_exact(data.patches())
            .zip(data.labels())
            .map(|(a, y)| y * a.iter().sum::<f64>())
            .collect()
    }
}

/// `||w||_Σ`, computed from the `nP` inner products rather than from `Σ`.
pub fn bn_norm(w: &[f64], data: &Dataset) -> Result<f64> {
    Activations::compute(w, data).map(|a| a.sigma_norm)
}

pub fn bn_norm_with_tol(w: &[f64], data: &Dataset, tol: f64) -> Result<f64> {
    Activations::compute_with_tol(w, data, tol).map(|a| a.sigma_norm)
}

/// `γ <w, x> / ||w||_Σ` with the training-set `||w||_Σ`; `x` must already
/// be centered with the training mean.
pub fn predict_linear(state: &ModelState, data: &Dataset, x: &[f64]) -> Result<f64> {
    predict_cnn(state, data, &[x])
}

/// `Σ_p γ <w, x^(p)> / ||w||_Σ` with the training-set `||w||_Σ`.
pub fn predict_cnn(state: &ModelState, data: &Dataset, patches: &[&[f64]]) -> Result<f64> {
    let s = bn_norm(&state.w, data)?;
    let total: f64 = patches.iter().map(|x| dot(&state.w, x)).sum();
    Ok(state.gamma * total / s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_gamma: f64,
}

/// Mean logistic loss of the BN model and its gradient in `(w, γ)`.
///
/// `∇_w L = γ/(n ||w||_Σ) Σ_i ℓ'_i y_i Σ_p (I − Σ w wᵀ / ||w||_Σ²) x_i^(p)`,
/// expanded as a combination of the patch vectors so that `Σ` is never
/// formed.
pub fn loss_and_grads(state: &ModelState, data: &Dataset) -> Result<LossGrad> {
    let acts = Activations::compute(&state.w, data)?;
    Ok(loss_and_grads_from(state, data, &acts))
}

pub(crate) fn loss_and_grads_from(state: &ModelState, data: &Dataset, acts: &Activations) -> LossGrad {
    let n = data.n() as f64;
    let rows = data.rows() as f64;
    let s = acts.sigma_norm;
    let gamma = state.gamma;

    let sums = acts.signed_sample_sums(data);
    let mut loss = 0.0;
    let mut coupling = 0.0;
    let mut lprime = Vec::with_capacity(sums.len());
    for &m in &sums {
        let z = gamma * m / s;
        loss += logistic_loss(z);
        let lp = logistic_derivative(z);
        coupling += lp * m;
        lprime.push(lp);
    }
    loss /= n;

    let lead = gamma / (n * s);
    let radial = coupling / (s * s * rows);
    let mut grad_w = vec![0.0; data.d()];
    for (r, x) in data.row_iter().enumerate() {
        let i = r / data.patches();
        let beta = lead * (lprime[i] * data.label(i) - radial * acts.raw[r]);
        axpy(beta, x, &mut grad_w);
    }
    LossGrad { loss, grad_w, grad_gamma: coupling / (n * s) }
}

/// Mean logistic loss of the unnormalized model `Σ_p <w, x^(p)>` and its
/// gradient in `w`; `grad_gamma` is zero.
pub fn plain_loss_and_grad(w: &[f64], data: &Dataset) -> Result<LossGrad> {
    if w.len() != data.d() {
        return Err(Error::DimensionMismatch { expected: data.d(), found: w.len() });
    }
    let n = data.n() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; data.d()];
    for i in 0..data.n() {
        let y = data.label(i);
        let m: f64 = (0..data.patches()).map(|p| dot(w, data.patch(i, p))).sum::<f64>() * y;
        loss += logistic_loss(m);
        let c = logistic_derivative(m) * y / n;
        for p in 0..data.patches() {
            axpy(c, data.patch(i, p), &mut grad_w);
        }
    }
    Ok(LossGrad { loss: loss / n, grad_w, grad_gamma: 0.0 })
}

/// Normalized margins `y_i <w, x_i^(p)> / ||w||_Σ`, one per patch row.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginProfile {
    pub margins: Vec<f64>,
    pub patches: usize,
}

impl MarginProfile {
    pub fn min(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }

    /// Mean squared pairwise difference, `2 · Var(m)` by a two-pass
    /// variance.
    pub fn discrepancy(&self) -> f64 {
        let mean = self.mean();
        let var =
            self.margins.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / self.margins.len() as f64;
        2.0 * var
    }
}

pub fn margin_profile(w: &[f64], data: &Dataset) -> Result<MarginProfile> {
    let acts = Activations::compute(w, data)?;
    Ok(profile_from(data, &acts))
}

pub(crate) fn profile_from(data: &Dataset, acts: &Activations) -> MarginProfile {
    let margins = acts
        .raw
        .iter()
        .enumerate()
        .map(|(r, a)| data.label(r / data.patches()) * a / acts.sigma_norm)
        .collect();
    MarginProfile { margins, patches: data.patches() }
}

/// `D(w)` (one patch) or `D_patch(w)`.
pub fn discrepancy(w: &[f64], data: &Dataset) -> Result<f64> {
    margin_profile(w, data).map(|p| p.discrepancy())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> Dataset {
        Dataset::from_vectors(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, -1.0]).unwrap()
    }

    fn unit_pair() -> Dataset {
        Dataset::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn sigma_norm_by_hand() {
        assert_eq!(bn_norm(&[3.0, 4.0], &pair()).unwrap(), 3.0);
    }

    #[test]
    fn zero_w_is_degenerate() {
        assert!(matches!(bn_norm(&[0.0, 0.0], &pair()), Err(Error::DegenerateDirection { .. })));
        // orthogonal to every input
        assert!(matches!(bn_norm(&[0.0, 1.0], &pair()), Err(Error::DegenerateDirection { .. })));
    }

    #[test]
    fn duplicated_patches_match_linear() {
        let lin = pair();
        let dup = Dataset::from_patches(
            vec![vec![vec![1.0, 0.0]; 2], vec![vec![-1.0, 0.0]; 2]],
            vec![1.0, -1.0],
        )
        .unwrap();
        assert_eq!(bn_norm(&[3.0, 4.0], &lin).unwrap(), bn_norm(&[3.0, 4.0], &dup).unwrap());
    }

    #[test]
    fn sigma_norm_agrees_with_quadratic_form() {
        let ds = Dataset::from_vectors(
            vec![vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 2.0], vec![-1.2, 0.1, 0.4]],
            vec![1.0, -1.0, 1.0],
        )
        .unwrap();
        let w = [0.3, -0.7, 1.1];
        let direct = bn_norm(&w, &ds).unwrap();
        let quad = ds.sigma().quad_form(&w).sqrt();
        assert!((direct - quad).abs() <= 1e-10 * quad);
    }

    #[test]
    fn prediction_by_hand() {
        let ds = pair();
        let st = ModelState::new(vec![3.0, 4.0], 2.0);
        assert_eq!(predict_linear(&st, &ds, &[1.0, 0.0]).unwrap(), 2.0);
        let zero = ModelState::new(vec![3.0, 4.0], 0.0);
        assert_eq!(predict_linear(&zero, &ds, &[5.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn margins_by_hand() {
        let p = margin_profile(&[2.0, 1.0], &unit_pair()).unwrap();
        let s = 2.5f64.sqrt();
        assert!((p.margins[0] - 2.0 / s).abs() < 1e-15);
        assert!((p.margins[1] - 1.0 / s).abs() < 1e-15);
    }

    #[test]
    fn discrepancy_by_hand() {
        // brute force: (1/4) * 2 * (1/sqrt(2.5))^2 = 0.2
        let d = discrepancy(&[2.0, 1.0], &unit_pair()).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_sample_has_zero_discrepancy() {
        let ds = Dataset::from_vectors(vec![vec![1.0, 2.0]], vec![-1.0]).unwrap();
        assert_eq!(discrepancy(&[1.0, 1.0], &ds).unwrap(), 0.0);
    }

    #[test]
    fn loss_branches_are_stable() {
        assert!((logistic_loss(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(-800.0).is_finite());
        assert!((logistic_loss(-800.0) - 800.0).abs() < 1e-12);
        assert!(logistic_loss(800.0) >= 0.0);
        assert_eq!(logistic_derivative(0.0), -0.5);
        assert_eq!(logistic_derivative(-800.0), -1.0);
        assert!(logistic_derivative(800.0) <= 0.0);
        assert!((logistic_derivative(3.0) + 1.0 / (1.0 + 3f64.exp())).abs() < 1e-16);
    }

    #[test]
    fn one_step_gradient_by_hand() {
        // x1=(1,0), x2=(0,1), y=+1, w=(2,1), γ=1: a=(2,1), s²=2.5, Σ=I/2
        let ds = unit_pair();
        let st = ModelState::new(vec![2.0, 1.0], 1.0);
        let g = loss_and_grads(&st, &ds).unwrap();
        let s = 2.5f64.sqrt();
        let (z1, z2) = (2.0 / s, 1.0 / s);
        let (l1, l2) = (logistic_derivative(z1), logistic_derivative(z2));
        // (I - Σ w wᵀ / s²) x_i with Σ w = (1, 0.5)
        let proj = |x: [f64; 2], a: f64| [x[0] - a / 2.5, x[1] - 0.5 * a / 2.5];
        let p1 = proj([1.0, 0.0], 2.0);
        let p2 = proj([0.0, 1.0], 1.0);
        let expect_w = [
            (l1 * p1[0] + l2 * p2[0]) / (2.0 * s),
            (l1 * p1[1] + l2 * p2[1]) / (2.0 * s),
        ];
        let expect_gamma = (l1 * z1 + l2 * z2) / 2.0;
        let expect_loss = (logistic_loss(z1) + logistic_loss(z2)) / 2.0;
        assert!((g.grad_w[0] - expect_w[0]).abs() < 1e-15);
        assert!((g.grad_w[1] - expect_w[1]).abs() < 1e-15);
        assert!((g.grad_gamma - expect_gamma).abs() < 1e-15);
        assert!((g.loss - expect_loss).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_by_hand() {
        let ds = unit_pair();
        let g = plain_loss_and_grad(&[2.0, 1.0], &ds).unwrap();
        assert!((g.grad_w[0] - logistic_derivative(2.0) / 2.0).abs() < 1e-16);
        assert!((g.grad_w[1] - logistic_derivative(1.0) / 2.0).abs() < 1e-16);
        assert_eq!(g.grad_gamma, 0.0);
    }
}
