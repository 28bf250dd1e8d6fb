//! Randomized property suites: gradient identities, Σ-geometry identities,
//! finite-difference gradient checks and scalar inequalities.
//!
//! Each check runs on seeded random instances. A failing check keeps the
//! first failing instance as JSON so it can be replayed.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::linalg::{dot, norm2, sub};
use crate::model::{self, logistic_derivative, ModelState};
use crate::random::Rng;
use crate::solvers::{check_aux_inequality, gamma_recurrence_bounds, solve_uniform_margin, span_spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Identities,
    Inequalities,
    Gradients,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Perturbs the analytic gradient before checking it (negative control).
    pub corrupt_gradient: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { trials: 100, seed: 0, corrupt_gradient: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Largest error measure seen, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub first_failure: Option<Value>,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            instances: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
            first_failure: None,
        }
    }

    fn record(&mut self, err: f64, instance: impl FnOnce() -> Value) {
        self.instances += 1;
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= self.tolerance) {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(instance());
            }
        }
    }

    fn fail_with(&mut self, instance: Value) {
        self.instances += 1;
        self.failures += 1;
        self.worst = f64::INFINITY;
        self.first_failure.get_or_insert(instance);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// Fixed-width pass/fail table, one line per check.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<34} {:>9} {:>9} {:>12} {:>10}  result\n",
            "check", "instances", "failures", "worst", "tolerance"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<34} {:>9} {:>9} {:>12.3e} {:>10.1e}  {}\n",
                c.name,
                c.instances,
                c.failures,
                c.worst,
                c.tolerance,
                if c.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let mut report =
        VerifyReport { seed: opts.seed, trials: opts.trials, checks: Vec::new(), warnings: Vec::new() };
    if opts.trials == 0 {
        report.warnings.push("trials = 0: no random instances were checked".into());
    }
    let root = Rng::new(opts.seed);
    if suite.includes(Suite::Identities) {
        report.checks.extend(identities(&mut root.split(1), opts.trials));
    }
    if suite.includes(Suite::Gradients) {
        report.checks.extend(gradients(&mut root.split(2), opts.trials, opts.corrupt_gradient));
    }
    if suite.includes(Suite::Inequalities) {
        report.checks.extend(inequalities(&mut root.split(3), opts.trials));
    }
    report
}

/// A random instance: Gaussian patches and labels, a direction and a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub samples: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma: f64,
}

impl Instance {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_patches(self.samples.clone(), self.labels.clone())
    }

    pub fn state(&self) -> ModelState {
        ModelState::new(self.w.clone(), self.gamma)
    }

    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("instance is plain data")
    }
}

fn below(rng: &mut Rng, k: usize) -> usize {
    (rng.next_u64() % k as u64) as usize
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + below(rng, hi - lo + 1)
}

/// `n <= 30`, `d <= 50`, `d >= nP`. With `in_span` the direction is a random
/// combination of the patches, otherwise a Gaussian vector.
pub fn random_instance(rng: &mut Rng, max_patches: usize, in_span: bool) -> Instance {
    let patches = between(rng, 1, max_patches.max(1));
    let n = between(rng, 2, (50 / patches).min(30));
    let d = between(rng, n * patches, 50);
    let samples: Vec<Vec<Vec<f64>>> =
        (0..n).map(|_| (0..patches).map(|_| rng.normal_vec(d)).collect()).collect();
    let labels = (0..n).map(|_| rng.rademacher()).collect();
    let w = if in_span {
        let mut w = vec![0.0; d];
        for x in samples.iter().flatten() {
            crate::linalg::axpy(rng.standard_normal(), x, &mut w);
        }
        w
    } else {
        rng.normal_vec(d)
    };
    let gamma = 0.5 + 2.5 * rng.uniform();
    Instance { samples, labels, w, gamma }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `<−∇_w L, w*>` by the pairwise formula, with `b_i = |ℓ'_i|`,
/// `U_i = Σ_p <w, z_ip>`:
/// `γ/(2n²P s³) [Σ_ij b_i b_j (U_j − U_i)(U_j/b_j − U_i/b_i)
///   + (Σ_i b_i) Σ_j Σ_(p,q) (u_jp − u_jq)²]`.
pub fn wstar_inner_pairwise(state: &ModelState, data: &Dataset) -> f64 {
    let (n, p) = (data.n(), data.patches());
    let u: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..p).map(|q| data.label(i) * dot(&state.w, data.patch(i, q))).collect())
        .collect();
    let s2 = u.iter().flatten().map(|v| v * v).sum::<f64>() / (n * p) as f64;
    let s = s2.sqrt();
    let big_u: Vec<f64> = u.iter().map(|r| r.iter().sum()).collect();
    let b: Vec<f64> =
        big_u.iter().map(|&ui| -logistic_derivative(state.gamma * ui / s)).collect();
    let mut pairs = 0.0;
    for i in 0..n {
        for j in 0..n {
            pairs += b[i] * b[j] * (big_u[j] - big_u[i]) * (big_u[j] / b[j] - big_u[i] / b[i]);
        }
    }
    let mut within = 0.0;
    for r in &u {
        for a in r {
            for c in r {
                within += (a - c).powi(2);
            }
        }
    }
    let pre = state.gamma / (2.0 * (n * n * p) as f64 * s2 * s);
    pre * (pairs + b.iter().sum::<f64>() * within)
}

/// `n⁻²Σ_(i,j)(m_i − m_j)²` by the explicit double loop over all margins.
pub fn discrepancy_brute_force(w: &[f64], data: &Dataset) -> Result<f64> {
    let m = model::margin_profile(w, data)?.margins;
    let k = m.len() as f64;
    let mut sum = 0.0;
    for a in &m {
        for b in &m {
            sum += (a - b).powi(2);
        }
    }
    Ok(sum / (k * k))
}

fn identities(rng: &mut Rng, trials: usize) -> Vec<CheckResult> {
    let mut lin = CheckResult::new("wstar-inner-identity/linear", 1e-8);
    let mut cnn = CheckResult::new("wstar-inner-identity/cnn", 1e-8);
    let mut dist = CheckResult::new("sigma-distance-identity", 1e-10);
    let mut sandwich = CheckResult::new("sigma-distance-sandwich", 1e-10);
    let mut fast = CheckResult::new("discrepancy-fast-path", 1e-12);
    let mut anchor = CheckResult::new("sigma-distance-anchor", 1e-12);

    for k in 0..trials {
        for (check, max_p) in [(&mut lin, 1), (&mut cnn, 3)] {
            let inst = random_instance(&mut rng.split(k as u64 * 2 + (max_p > 1) as u64), max_p, false);
            match wstar_inner_case(&inst) {
                Ok((analytic, pairwise)) => check.record(rel_err(analytic, pairwise), || {
                    json!({"instance": inst.to_value(), "analytic": analytic, "pairwise": pairwise})
                }),
                Err(e) => check.fail_with(json!({"instance": inst.to_value(), "error": e.to_string()})),
            }
        }

        let inst = random_instance(&mut rng.split(1_000_000 + k as u64), 3, true);
        match sigma_distance_case(&inst) {
            Ok(c) => {
                dist.record(rel_err(c.lhs, c.rhs), || {
                    json!({"instance": inst.to_value(), "lhs": c.lhs, "rhs": c.rhs})
                });
                let excess = ((c.lower - c.middle) / c.middle.abs().max(f64::MIN_POSITIVE))
                    .max((c.middle - c.upper) / c.middle.abs().max(f64::MIN_POSITIVE))
                    .max(0.0);
                sandwich.record(excess, || {
                    json!({"instance": inst.to_value(), "lower": c.lower, "middle": c.middle, "upper": c.upper})
                });
            }
            Err(e) => {
                let v = json!({"instance": inst.to_value(), "error": e.to_string()});
                dist.fail_with(v.clone());
                sandwich.fail_with(v);
            }
        }

        let inst = random_instance(&mut rng.split(2_000_000 + k as u64), 5, false);
        let data = inst.dataset();
        match data.and_then(|d| Ok((model::discrepancy(&inst.w, &d)?, discrepancy_brute_force(&inst.w, &d)?))) {
            Ok((a, b)) => fast.record((a - b).abs() / a.abs().max(b.abs()).max(1.0), || {
                json!({"instance": inst.to_value(), "fast": a, "brute_force": b})
            }),
            Err(e) => fast.fail_with(json!({"instance": inst.to_value(), "error": e.to_string()})),
        }
    }

    // z1 = (1,0), z2 = (0,1), w = (2,1): both sides 0.5
    let inst = Instance {
        samples: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
        labels: vec![1.0, 1.0],
        w: vec![2.0, 1.0],
        gamma: 1.0,
    };
    match sigma_distance_case(&inst) {
        Ok(c) => anchor.record((c.lhs - 0.5).abs().max((c.rhs - 0.5).abs()), || {
            json!({"lhs": c.lhs, "rhs": c.rhs})
        }),
        Err(e) => anchor.fail_with(json!({"error": e.to_string()})),
    }

    vec![lin, cnn, dist, sandwich, fast, anchor]
}

fn wstar_inner_case(inst: &Instance) -> Result<(f64, f64)> {
    let data = inst.dataset()?;
    let wstar = solve_uniform_margin(&data)?.solution;
    let state = inst.state();
    let g = model::loss_and_grads(&state, &data)?;
    Ok((-dot(&g.grad_w, &wstar), wstar_inner_pairwise(&state, &data)))
}

struct SigmaDistance {
    lhs: f64,
    rhs: f64,
    lower: f64,
    middle: f64,
    upper: f64,
}

/// `||w||_Σ² D(w)` against `2||w − <w*,w>_Σ w*||_Σ²` with the explicit `Σ`
/// matrix, and the spectral bounds on `||w − <w*,w>_Σ w*||_Σ²`.
fn sigma_distance_case(inst: &Instance) -> Result<SigmaDistance> {
    let data = inst.dataset()?;
    let sigma = data.sigma();
    let wstar = solve_uniform_margin(&data)?.solution;
    let w = &inst.w;
    let lhs = sigma.quad_form(w) * model::discrepancy(w, &data)?;
    let c = dot(&wstar, &sigma.mul_vec(w));
    let resid = sub(w, &crate::linalg::scaled(c, &wstar));
    let middle = sigma.quad_form(&resid);
    let euclid_c = dot(&wstar, w) / dot(&wstar, &wstar);
    let euclid = norm2(&sub(w, &crate::linalg::scaled(euclid_c, &wstar))).powi(2);
    let spec = span_spectrum(&data)?;
    Ok(SigmaDistance {
        lhs,
        rhs: 2.0 * middle,
        lower: spec.lambda_min * euclid,
        middle,
        upper: spec.lambda_max * euclid,
    })
}

const FD_STEP: f64 = 1e-6;

fn gradients(rng: &mut Rng, trials: usize, corrupt: bool) -> Vec<CheckResult> {
    let mut fd = CheckResult::new("finite-difference", 1e-5);
    let mut orth = CheckResult::new("gradient-orthogonality", 1e-10);
    let mut stationary = CheckResult::new("uniform-margin-stationarity", 1e-10);

    for k in 0..trials {
        let mut r = rng.split(k as u64);
        let inst = random_instance(&mut r, 3, false);
        let dir_noise = r.normal_vec(inst.w.len() + 1);
        match gradient_case(&inst, &dir_noise, corrupt) {
            Ok(c) => {
                fd.record(rel_err(c.analytic, c.numeric), || {
                    json!({"instance": inst.to_value(), "direction_noise": dir_noise,
                           "analytic": c.analytic, "numeric": c.numeric})
                });
                orth.record(c.orthogonality, || {
                    json!({"instance": inst.to_value(), "normalized_inner": c.orthogonality})
                });
                stationary.record(c.stationarity, || {
                    json!({"instance": inst.to_value(), "normalized_inner": c.stationarity})
                });
            }
            Err(e) => {
                let v = json!({"instance": inst.to_value(), "error": e.to_string()});
                fd.fail_with(v.clone());
                orth.fail_with(v.clone());
                stationary.fail_with(v);
            }
        }
    }
    vec![fd, orth, stationary]
}

struct GradientCase {
    analytic: f64,
    numeric: f64,
    orthogonality: f64,
    stationarity: f64,
}

/// Directional derivative along `v = ĝ + ½ n̂` (`ĝ` the unit joint gradient
/// in `(w, γ)`, `n̂` a unit random vector), so `<∇L, v>` stays away from 0.
fn gradient_case(inst: &Instance, noise: &[f64], corrupt: bool) -> Result<GradientCase> {
    let data = inst.dataset()?;
    let state = inst.state();
    let mut g = model::loss_and_grads(&state, &data)?;
    if corrupt {
        let bump = 1e-3 * norm2(&g.grad_w).max(g.grad_gamma.abs());
        let last = g.grad_w.len() - 1;
        g.grad_w[0] += bump;
        g.grad_w[last] += bump;
    }
    let d = state.w.len();
    let mut joint = g.grad_w.clone();
    joint.push(g.grad_gamma);
    let gn = norm2(&joint);
    let nn = norm2(noise);
    let v: Vec<f64> = joint.iter().zip(noise).map(|(a, b)| a / gn + 0.5 * b / nn).collect();
    let analytic = dot(&joint, &v);
    let loss_at = |h: f64| -> Result<f64> {
        let w: Vec<f64> = state.w.iter().zip(&v).map(|(w, vi)| w + h * vi).collect();
        let s = ModelState::new(w, state.gamma + h * v[d]);
        Ok(model::loss_and_grads(&s, &data)?.loss)
    };
    let numeric = (loss_at(FD_STEP)? - loss_at(-FD_STEP)?) / (2.0 * FD_STEP);

    let orthogonality =
        dot(&g.grad_w, &state.w).abs() / (norm2(&g.grad_w) * norm2(&state.w)).max(f64::MIN_POSITIVE);

    // at w = w* every margin is equal and the pairwise formula vanishes
    let wstar = solve_uniform_margin(&data)?.solution;
    let at_star = ModelState::new(wstar.clone(), state.gamma);
    let gs = model::loss_and_grads(&at_star, &data)?;
    let s = model::bn_norm(&wstar, &data)?;
    let max_x = (0..data.n()).map(|i| norm2(&data.patch_sum(i))).fold(0.0, f64::max);
    let scale = state.gamma * max_x * norm2(&wstar) / s;
    let stationarity = dot(&gs.grad_w, &wstar).abs() / scale;

    Ok(GradientCase { analytic, numeric, orthogonality, stationarity })
}

fn inequalities(rng: &mut Rng, trials: usize) -> Vec<CheckResult> {
    let mut aux = CheckResult::new("aux-inequality", 0.0);
    let mut anchor = CheckResult::new("aux-inequality-anchor", 1e-12);
    let mut rec = CheckResult::new("gamma-recurrence", 0.0);

    for k in 0..trials * 100 {
        let mut r = rng.split(k as u64);
        let n = between(&mut r, 1, 40);
        let mut a: Vec<f64> = (0..n).map(|_| 4.0 * r.standard_normal()).collect();
        let mut b: Vec<f64> = (0..n).map(|_| r.uniform() * 10f64.powf(-3.0 * r.uniform())).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(|x, y| y.total_cmp(x));
        match check_aux_inequality(&a, &b) {
            Ok(c) => aux.record(if c.holds { 0.0 } else { 1.0 }, || {
                json!({"a": a, "b": b, "lhs": c.lhs, "rhs": c.rhs})
            }),
            Err(e) => aux.fail_with(json!({"a": a, "b": b, "error": e.to_string()})),
        }
    }

    match check_aux_inequality(&[0.0, 1.0], &[2.0, 1.0]) {
        Ok(c) => anchor.record((c.lhs - 4.0).abs().max((c.rhs - 0.75).abs()), || {
            json!({"lhs": c.lhs, "rhs": c.rhs})
        }),
        Err(e) => anchor.fail_with(json!({"error": e.to_string()})),
    }

    for k in 0..trials {
        let mut r = rng.split(10_000_000 + k as u64);
        let a0 = 0.1 + 2.9 * r.uniform();
        let c = 10f64.powf(-3.0 * r.uniform());
        let t = 1 + r.next_u64() % 1_000_000;
        let b = gamma_recurrence_bounds(a0, c, t);
        rec.record(if b.holds { 0.0 } else { 1.0 }, || {
            json!({"a0": a0, "c": c, "t": t, "value": b.value, "lower": b.lower, "upper": b.upper})
        });
    }

    vec![aux, anchor, rec]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_formula_on_two_points() {
        // z1 = (1,0), z2 = (0,1), w = (2,1), γ = 1
        let inst = Instance {
            samples: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            labels: vec![1.0, 1.0],
            w: vec![2.0, 1.0],
            gamma: 1.0,
        };
        let (analytic, pairwise) = wstar_inner_case(&inst).unwrap();
        assert!(rel_err(analytic, pairwise) < 1e-12, "{analytic} {pairwise}");
        assert!(pairwise > 0.0);
    }

    #[test]
    fn anchor_sides_are_one_half() {
        let inst = Instance {
            samples: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            labels: vec![1.0, 1.0],
            w: vec![2.0, 1.0],
            gamma: 1.0,
        };
        let c = sigma_distance_case(&inst).unwrap();
        assert!((c.lhs - 0.5).abs() < 1e-12 && (c.rhs - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_trials_is_vacuous_with_warning() {
        let r = run_suite(Suite::All, &VerifyOptions { trials: 0, ..VerifyOptions::default() });
        assert!(r.passed());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn small_run_passes() {
        let r = run_suite(Suite::All, &VerifyOptions { trials: 10, seed: 7, corrupt_gradient: false });
        assert!(r.passed(), "{}", r.table());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let opts = VerifyOptions { trials: 5, seed: 7, corrupt_gradient: true };
        let r = run_suite(Suite::Gradients, &opts);
        assert!(!r.passed());
        let fd = r.checks.iter().find(|c| c.name == "finite-difference").unwrap();
        assert_eq!(fd.failures, 5);
        assert!(fd.first_failure.is_some());
    }

    #[test]
    fn random_instances_respect_bounds() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let inst = random_instance(&mut rng, 5, false);
            let (n, p, d) = (inst.samples.len(), inst.samples[0].len(), inst.w.len());
            assert!(n <= 30 && d <= 50 && d >= n * p && p <= 5);
        }
    }
}
