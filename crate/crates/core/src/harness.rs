//! Experiment drivers: rate fitting on traces, Monte-Carlo test error with
//! Wilson intervals, the two generalization examples and paired BN/plain
//! runs.
//!
//! Parallel work is split into fixed chunks, each with its own generator
//! `rng.split(chunk)`, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{gen_example1, gen_example2, Dataset, Example1Config, Example2Config, TestSampler};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::random::Rng;
use crate::solvers::{solve_max_margin, solve_uniform_margin, Certificate, SolverReport, FEASIBILITY_TOL};
use crate::trainer::{train, Probes, TrainConfig, TrainRun, TrainTrace};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "BNML_THREADS";

/// Sizes the global worker pool from `BNML_THREADS` when set. Returns the
/// resulting worker count. Only the first call in a process has effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::ConfigInvalid(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        // an already-initialized pool is kept as is
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Coefficient of `log² t` in the least-squares fit of `log D`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
    pub rows: usize,
    /// `max(t L) / min(t L)` over the window.
    pub loss_band_ratio: f64,
    /// Rows whose `D` was raised to [`D_FLOOR`] before taking logs.
    pub clipped: usize,
}

pub const D_FLOOR: f64 = 1e-300;
pub const MIN_FIT_ROWS: usize = 20;

/// Fits `log D(t) = slope · log² t + intercept` on the last
/// `tail_fraction` of logged rows (rows with `t = 0` are skipped).
pub fn fit_rate(trace: &TrainTrace, tail_fraction: f64) -> Result<RateFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!("tail fraction {tail_fraction} not in (0, 1]")));
    }
    let rows: Vec<_> = trace.rows.iter().filter(|r| r.t > 0).collect();
    let keep = ((rows.len() as f64) * tail_fraction).ceil() as usize;
    let window = &rows[rows.len() - keep.min(rows.len())..];
    let positive = window.iter().filter(|r| r.discrepancy > 0.0).count();
    if positive < MIN_FIT_ROWS {
        return Err(Error::InsufficientData(format!(
            "{positive} rows with D > 0 in the tail window, need {MIN_FIT_ROWS}"
        )));
    }
    let xs: Vec<f64> = window.iter().map(|r| (r.t as f64).ln().powi(2)).collect();
    let mut clipped = 0;
    let ys: Vec<f64> = window
        .iter()
        .map(|r| {
            if r.discrepancy <= D_FLOOR {
                clipped += 1;
                D_FLOOR.ln()
            } else {
                r.discrepancy.ln()
            }
        })
        .collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    let tl: Vec<f64> = window.iter().map(|r| r.t as f64 * r.loss).collect();
    let hi = tl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tl.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        window: (window[0].t, window[window.len() - 1].t),
        rows: window.len(),
        loss_band_ratio: hi / lo,
        clipped,
    })
}

/// Fraction of the `t > 0` rows lying in the last `decades` decades of `t`,
/// i.e. with `t >= t_last / 10^decades`.
pub fn tail_for_decades(trace: &TrainTrace, decades: f64) -> f64 {
    let rows: Vec<usize> = trace.rows.iter().map(|r| r.t).filter(|&t| t > 0).collect();
    let Some(&last) = rows.last() else { return 1.0 };
    let start = last as f64 / 10f64.powf(decades);
    let inside = rows.iter().filter(|&&t| t as f64 >= start).count();
    (inside as f64 / rows.len() as f64).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Ordinary least squares `y = a x + b`; a constant `y` gives `a = 0`,
/// `r² = 1`.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    if ys.iter().all(|y| *y == ys[0]) {
        return (0.0, ys[0], 1.0);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0);
    (slope, my - slope * mx, r2)
}

/// Two-sided 95% normal quantile.
pub const WILSON_Z: f64 = 1.959963984540054;

/// Wilson score interval `(center, half_width)` for `k` successes in `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.5, 0.5);
    }
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (center, half)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub errors: usize,
    pub samples: usize,
    pub error: f64,
    pub wilson_halfwidth: f64,
}

impl McEstimate {
    fn from_counts(errors: usize, samples: usize) -> Self {
        McEstimate {
            errors,
            samples,
            error: if samples == 0 { 0.0 } else { errors as f64 / samples as f64 },
            wilson_halfwidth: wilson_interval(errors, samples).1,
        }
    }
}

pub const MC_CHUNK: usize = 1024;

/// Test error of each classifier on the same `mc_samples` fresh points.
/// A point counts as an error when `y <w, Σ_p x^(p)> <= 0`.
pub fn mc_test_errors(
    classifiers: &[&[f64]],
    sampler: &TestSampler,
    mc_samples: usize,
    rng: &Rng,
) -> Vec<McEstimate> {
    let chunks = mc_samples.div_ceil(MC_CHUNK);
    let counts: Vec<Vec<usize>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.split(c as u64);
            let len = MC_CHUNK.min(mc_samples - c * MC_CHUNK);
            let mut errs = vec![0; classifiers.len()];
            for _ in 0..len {
                let pt = sampler.draw(&mut r);
                let xbar = pt.patch_sum();
                for (e, w) in errs.iter_mut().zip(classifiers) {
                    if !(pt.label * dot(w, &xbar) > 0.0) {
                        *e += 1;
                    }
                }
            }
            errs
        })
        .collect();
    (0..classifiers.len())
        .map(|k| McEstimate::from_counts(counts.iter().map(|c| c[k]).sum(), mc_samples))
        .collect()
}

pub fn mc_test_error(w: &[f64], sampler: &TestSampler, mc_samples: usize, rng: &Rng) -> McEstimate {
    mc_test_errors(&[w], sampler, mc_samples, rng)[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub seed: u64,
    pub error_uniform: f64,
    pub error_max: f64,
    pub mc_samples: usize,
    pub wilson_halfwidth_uniform: f64,
    pub wilson_halfwidth_max: f64,
    pub uniform_residual: f64,
    pub uniform_regularized: bool,
    pub max_kkt_violation: f64,
    /// False when the uniform-margin residual exceeds the feasibility
    /// tolerance.
    pub valid: bool,
    pub warnings: Vec<String>,
}

fn gen_report(
    seed: u64,
    data: &Dataset,
    sampler: &TestSampler,
    mc_samples: usize,
    mc_rng: &Rng,
    warnings: Vec<String>,
) -> Result<GenReport> {
    let uniform = solve_uniform_margin(data)?;
    let max = solve_max_margin(data)?;
    let est = mc_test_errors(&[&uniform.solution, &max.solution], sampler, mc_samples, mc_rng);
    let kkt = match &max.certificate {
        Certificate::MaxMargin { kkt_violation, .. } => *kkt_violation,
        _ => f64::NAN,
    };
    Ok(GenReport {
        seed,
        error_uniform: est[0].error,
        error_max: est[1].error,
        mc_samples,
        wilson_halfwidth_uniform: est[0].wilson_halfwidth,
        wilson_halfwidth_max: est[1].wilson_halfwidth,
        uniform_residual: uniform.residual,
        uniform_regularized: regularized(&uniform),
        max_kkt_violation: kkt,
        valid: uniform.residual <= FEASIBILITY_TOL,
        warnings,
    })
}

fn regularized(r: &SolverReport) -> bool {
    matches!(r.certificate, Certificate::UniformMargin { regularized: true, .. })
}

/// Training data from `rng.split(0)`, test points from `rng.split(1)`.
pub fn run_example1(cfg: &Example1Config, mc_samples: usize, rng: &Rng) -> Result<GenReport> {
    let (data, sampler) = gen_example1(&mut rng.split(0), cfg)?;
    gen_report(rng.seed(), &data, &sampler, mc_samples, &rng.split(1), cfg.regime_warnings())
}

/// As [`run_example1`] for the strong/weak mixture.
pub fn run_example2(cfg: &Example2Config, mc_samples: usize, rng: &Rng) -> Result<GenReport> {
    let (data, sampler) = gen_example2(&mut rng.split(0), cfg)?;
    gen_report(rng.seed(), &data, &sampler, mc_samples, &rng.split(1), cfg.regime_warnings())
}

/// Runs `seeds` independent repetitions with seeds `split_seed(master, k)`.
pub fn repeat_seeds<T: Send>(
    master: u64,
    seeds: usize,
    run: impl Fn(&Rng) -> Result<T> + Sync,
) -> Vec<Result<T>> {
    let root = Rng::new(master);
    (0..seeds).into_par_iter().map(|k| run(&root.split(k as u64))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial_discrepancy: f64,
    pub final_discrepancy: f64,
    /// `(max − min) / |mean|` of the final margins `y_i <w, x̄_i>`.
    pub final_spread: f64,
    pub align_wstar: Vec<(usize, f64)>,
    pub align_wmax: Vec<(usize, f64)>,
    pub norm_decreases: usize,
    pub halted: Option<String>,
}

impl RunSummary {
    pub fn of(run: &TrainRun, data: &Dataset) -> Self {
        let rows = &run.trace.rows;
        let series = |f: fn(&crate::trainer::TraceRow) -> Option<f64>| {
            rows.iter().filter_map(|r| f(r).map(|v| (r.t, v))).collect()
        };
        RunSummary {
            initial_discrepancy: rows.first().map_or(f64::NAN, |r| r.discrepancy),
            final_discrepancy: rows.last().map_or(f64::NAN, |r| r.discrepancy),
            final_spread: sample_margin_spread(&run.state.w, data),
            align_wstar: series(|r| r.align_wstar),
            align_wmax: series(|r| r.align_wmax),
            norm_decreases: run.norm_decreases,
            halted: run.halted.as_ref().map(|e| e.to_string()),
        }
    }

    pub fn discrepancy_ratio(&self) -> f64 {
        self.final_discrepancy / self.initial_discrepancy
    }
}

/// `(max − min) / |mean|` of `y_i <w, Σ_p x_i^(p)>`.
pub fn sample_margin_spread(w: &[f64], data: &Dataset) -> f64 {
    let m: Vec<f64> = (0..data.n()).map(|i| data.label(i) * dot(w, &data.patch_sum(i))).collect();
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo) / mean.abs()
}

#[derive(Debug, Clone)]
pub struct PairedRuns {
    pub bn: TrainRun,
    pub plain: TrainRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub bn: RunSummary,
    pub plain: RunSummary,
    /// `D_BN(T) / D_plain(T)`.
    pub discrepancy_ratio: f64,
}

/// BN and plain runs on the same data. Both configs are used as given; pass
/// the same seed for a shared initial direction.
pub fn compare_bn_vs_plain(
    data: &Dataset,
    cfg_bn: &TrainConfig,
    cfg_plain: &TrainConfig,
    probes: Probes<'_>,
) -> Result<PairedRuns> {
    if !cfg_bn.model.is_bn() || cfg_plain.model.is_bn() {
        return Err(Error::ConfigInvalid("expected one BN config and one plain config".into()));
    }
    let (bn, plain) = rayon::join(|| train(data, cfg_bn, probes), || train(data, cfg_plain, probes));
    Ok(PairedRuns { bn: bn?, plain: plain? })
}

impl PairedRuns {
    pub fn summary(&self, data: &Dataset) -> PairedSummary {
        let bn = RunSummary::of(&self.bn, data);
        let plain = RunSummary::of(&self.plain, data);
        let discrepancy_ratio = bn.final_discrepancy / plain.final_discrepancy;
        PairedSummary { bn, plain, discrepancy_ratio }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TraceRow;

    fn synthetic(f: impl Fn(f64) -> (f64, f64), ts: impl Iterator<Item = usize>) -> TrainTrace {
        TrainTrace {
            rows: ts
                .map(|t| {
                    let (d, l) = f(t as f64);
                    TraceRow {
                        t,
                        loss: l,
                        discrepancy: d,
                        gamma: Some(1.0),
                        w_norm2: 1.0,
                        w_sigma_norm: 1.0,
                        align_wstar: None,
                        align_wmax: None,
                        min_margin: 1.0,
                        max_margin: 1.0,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn exact_model_is_recovered() {
        let tr = synthetic(|t| ((-0.1 * t.ln().powi(2)).exp(), 3.0 / t), (0..=2000).map(|k| k * 100));
        let fit = fit_rate(&tr, 0.5).unwrap();
        assert!((fit.slope + 0.1).abs() <= 1e-6, "{}", fit.slope);
        assert!(fit.r_squared >= 1.0 - 1e-9);
        assert!((fit.loss_band_ratio - 1.0).abs() <= 1e-9);
        assert_eq!(fit.window, (100_100, 200_000));
    }

    #[test]
    fn constant_series_is_flat() {
        let tr = synthetic(|_| (0.25, 1.0), (1..=50).map(|k| k * 10));
        let fit = fit_rate(&tr, 1.0).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn too_few_rows() {
        let tr = synthetic(|_| (0.25, 1.0), 0..10);
        assert!(matches!(fit_rate(&tr, 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_discrepancy_is_clipped() {
        let tr = synthetic(|t| (if t > 1000.0 { 0.0 } else { 1.0 / t }, 1.0 / t), (1..=100).map(|k| k * 20));
        let fit = fit_rate(&tr, 1.0).unwrap();
        assert_eq!(fit.clipped, 50);
    }

    #[test]
    fn two_decade_window() {
        let tr = synthetic(|t| (1.0 / t, 1.0 / t), (0..=2000).map(|k| k * 100));
        let f = tail_for_decades(&tr, 2.0);
        // t = 2000..=200000 in steps of 100
        assert!((f - 0.9905).abs() < 1e-12, "{f}");
    }

    #[test]
    fn wilson_anchors() {
        let (c, h) = wilson_interval(0, 1);
        assert!((h - 0.3967).abs() < 1e-4, "{h}");
        assert!((c - h - 0.0).abs() < 1e-12);
        let (_, h1) = wilson_interval(5000, 10_000);
        let (_, h4) = wilson_interval(20_000, 40_000);
        assert!((h1 / h4 - 2.0).abs() < 1e-3);
    }

    #[test]
    fn signal_direction_never_errs() {
        let cfg = Example1Config::regime_scale(10, 4);
        let (_, sampler) = gen_example1(&mut Rng::new(0), &cfg).unwrap();
        let e = mc_test_error(&cfg.u, &sampler, 3000, &Rng::new(5));
        assert_eq!(e.errors, 0);
    }

    #[test]
    fn noise_direction_is_a_coin_flip() {
        let cfg = Example1Config::regime_scale(10, 4);
        let (_, sampler) = gen_example1(&mut Rng::new(0), &cfg).unwrap();
        let mut w = vec![0.0; cfg.d];
        w[1] = 1.0;
        let e = mc_test_error(&w, &sampler, 20_000, &Rng::new(5));
        assert!((e.error - 0.5).abs() <= 3.0 * e.wilson_halfwidth, "{e:?}");
    }

    #[test]
    fn mc_is_deterministic_across_pool_sizes() {
        let cfg = Example1Config::regime_scale(10, 4);
        let (_, sampler) = gen_example1(&mut Rng::new(0), &cfg).unwrap();
        let mut w = vec![0.0; cfg.d];
        w[1] = 1.0;
        let a = mc_test_error(&w, &sampler, 5000, &Rng::new(5));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mc_test_error(&w, &sampler, 5000, &Rng::new(5)));
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_example_is_perfect() {
        let mut cfg = Example1Config::regime_scale(10, 4);
        cfg.sigma = 0.0;
        let r = run_example1(&cfg, 500, &Rng::new(2)).unwrap();
        assert_eq!((r.error_uniform, r.error_max), (0.0, 0.0));
    }

    #[test]
    fn single_sample_half_width() {
        let cfg = Example1Config::regime_scale(10, 4);
        let r = run_example1(&cfg, 1, &Rng::new(2)).unwrap();
        assert_eq!(r.mc_samples, 1);
        assert!(r.wilson_halfwidth_uniform > 0.39);
    }
}
