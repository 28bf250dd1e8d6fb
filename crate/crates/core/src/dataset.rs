//! Training sets and the synthetic generators.
//!
//! A [`Dataset`] holds `n` samples of `P` patches each, every patch a
//! vector in `R^d`. The plain linear model is the `P = 1` case, so the same
//! type serves both; [`PatchedDataset`] is an alias kept for readability at
//! call sites that need patches.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, check_finite, dot, norm2, sym_eigs, SymMat};
use crate::random::{sample_gaussian, Covariance, Rng};

pub type PatchedDataset = Dataset;

#[derive(Debug)]
pub struct Dataset {
    n: usize,
    patches: usize,
    d: usize,
    /// Patch `(i, p)` lives at `[(i * patches + p) * d ..][.. d]`.
    x: Vec<f64>,
    labels: Vec<f64>,
    train_mean: Vec<f64>,
    centered: bool,
    sigma: OnceLock<SymMat>,
    top_eigenvalue: OnceLock<f64>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            n: self.n,
            patches: self.patches,
            d: self.d,
            x: self.x.clone(),
            labels: self.labels.clone(),
            train_mean: self.train_mean.clone(),
            centered: self.centered,
            sigma: OnceLock::new(),
            top_eigenvalue: OnceLock::new(),
        }
    }
}

fn validate_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        Some(&bad) => Err(Error::InvalidLabel(bad)),
        None => Ok(()),
    }
}

impl Dataset {
    /// Stores samples as given, without centering.
    pub fn from_patches(samples: Vec<Vec<Vec<f64>>>, labels: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
        }
        validate_labels(&labels)?;
        let patches = samples[0].len();
        if patches == 0 {
            return Err(Error::ConfigInvalid("samples need at least one patch".into()));
        }
        let d = samples[0][0].len();
        if d == 0 {
            return Err(Error::ConfigInvalid("dimension must be at least 1".into()));
        }
        let mut x = Vec::with_capacity(n * patches * d);
        for s in &samples {
            if s.len() != patches {
                return Err(Error::DimensionMismatch { expected: patches, found: s.len() });
            }
            for patch in s {
                if patch.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, found: patch.len() });
                }
                check_finite(patch, "input")?;
                x.extend_from_slice(patch);
            }
        }
        Ok(Dataset {
            n,
            patches,
            d,
            x,
            labels,
            train_mean: vec![0.0; d],
            centered: false,
            sigma: OnceLock::new(),
            top_eigenvalue: OnceLock::new(),
        })
    }

    /// Single-patch samples, stored as given.
    pub fn from_vectors(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        Self::from_patches(inputs.into_iter().map(|v| vec![v]).collect(), labels)
    }

    /// Subtracts the empirical mean of the inputs (over samples and
    /// patches) and records it as the training mean.
    pub fn center(raw_inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        Self::from_vectors(raw_inputs, labels).map(Self::centered)
    }

    pub fn center_patched(samples: Vec<Vec<Vec<f64>>>, labels: Vec<f64>) -> Result<Self> {
        Self::from_patches(samples, labels).map(Self::centered)
    }

    /// Recenters this dataset; the stored training mean accumulates.
    pub fn centered(mut self) -> Self {
        let rows = self.rows();
        let mut mean = vec![0.0; self.d];
        for r in self.x.chunks_exact(self.d) {
            axpy(1.0, r, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in self.x.chunks_exact_mut(self.d) {
            for (v, m) in r.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        for (t, m) in self.train_mean.iter_mut().zip(&mean) {
            *t += m;
        }
        self.centered = true;
        self.sigma = OnceLock::new();
        self.top_eigenvalue = OnceLock::new();
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Total number of patch vectors, `n * P`.
    pub fn rows(&self) -> usize {
        self.n * self.patches
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn train_mean(&self) -> &[f64] {
        &self.train_mean
    }

    pub fn patch(&self, i: usize, p: usize) -> &[f64] {
        let start = (i * self.patches + p) * self.d;
        &self.x[start..start + self.d]
    }

    /// Patch vectors in row order `(0,0), (0,1), …, (n-1, P-1)`.
    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.x.chunks_exact(self.d)
    }

    /// `x̄_i = Σ_p x_i^(p)`.
    pub fn patch_sum(&self, i: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for p in 0..self.patches {
            axpy(1.0, self.patch(i, p), &mut s);
        }
        s
    }

    /// Constraint rows `z_(i,p) = y_i x_i^(p)`.
    pub fn constraint_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .flat_map(|i| {
                let y = self.labels[i];
                (0..self.patches).map(move |p| (i, p, y))
            })
            .map(|(i, p, y)| self.patch(i, p).iter().map(|v| y * v).collect())
            .collect()
    }

    /// Patch-input Gram matrix scaled by `1/(nP)`; shares its nonzero
    /// spectrum with `Σ` restricted to the input span.
    pub fn scaled_input_gram(&self) -> SymMat {
        let rows: Vec<&[f64]> = self.row_iter().collect();
        SymMat::gram(&rows, 1.0 / self.rows() as f64)
    }

    /// `Σ = (nP)^-1 Σ_(i,p) x x^T`, built on first use.
    pub fn sigma(&self) -> &SymMat {
        self.sigma.get_or_init(|| {
            let scale = 1.0 / self.rows() as f64;
            let rows: Vec<&[f64]> = self.row_iter().collect();
            SymMat::from_fn(self.d, |a, b| {
                scale * rows.iter().map(|r| r[a] * r[b]).sum::<f64>()
            })
        })
    }

    /// Largest eigenvalue of `Σ`, via the `nP × nP` Gram matrix.
    pub fn sigma_top_eigenvalue(&self) -> f64 {
        *self.top_eigenvalue.get_or_init(|| {
            let g = self.scaled_input_gram();
            if g.dim() <= 400 {
                if let Ok(e) = sym_eigs(&g) {
                    return e.values[0].max(0.0);
                }
            }
            power_iteration(&g, 500)
        })
    }

    pub fn max_input_norm(&self) -> f64 {
        self.row_iter().map(norm2).fold(0.0, f64::max)
    }

    /// Largest absolute coordinate of `Σ_rows x`.
    pub fn mean_residual(&self) -> f64 {
        let mut s = vec![0.0; self.d];
        for r in self.row_iter() {
            axpy(1.0, r, &mut s);
        }
        s.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the documented CSV layout: `# n=<n> d=<d> P=<P>` followed by
    /// `i,p,y,x_1,…,x_d` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# n={} d={} P={}\n", self.n, self.d, self.patches);
        for i in 0..self.n {
            for p in 0..self.patches {
                let _ = write!(out, "{},{},{}", i, p, self.labels[i] as i32);
                for v in self.patch(i, p) {
                    out.push(',');
                    out.push_str(&crate::io::fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
        let (n, d, patches) = parse_header(header)?;
        let mut samples = vec![vec![Vec::new(); patches]; n];
        let mut labels = vec![0.0; n];
        let mut seen = 0usize;
        for (lineno, line) in lines {
            let parse_err = |msg: String| Error::Parse { line: lineno + 1, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 3 {
                return Err(parse_err(format!("expected {} fields, found {}", d + 3, fields.len())));
            }
            let i: usize = fields[0].parse().map_err(|e| parse_err(format!("sample index: {e}")))?;
            let p: usize = fields[1].parse().map_err(|e| parse_err(format!("patch index: {e}")))?;
            let y: f64 = fields[2].parse().map_err(|e| parse_err(format!("label: {e}")))?;
            if i >= n || p >= patches {
                return Err(parse_err(format!("index ({i},{p}) out of range")));
            }
            if !samples[i][p].is_empty() {
                return Err(parse_err(format!("duplicate row ({i},{p})")));
            }
            if p > 0 && labels[i] != y {
                return Err(parse_err(format!("label of sample {i} differs across patches")));
            }
            labels[i] = y;
            samples[i][p] = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("coordinate: {e}"))))
                .collect::<Result<_>>()?;
            seen += 1;
        }
        if seen != n * patches {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {} rows, found {seen}", n * patches),
            });
        }
        Self::from_patches(samples, labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Parse { line: 1, msg: msg.to_string() };
    let body = line.strip_prefix('#').ok_or_else(|| bad("missing '#' header"))?;
    let (mut n, mut d, mut p) = (None, None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad("malformed header token"))?;
        let v: usize = v.parse().map_err(|_| bad("header value is not an integer"))?;
        match k {
            "n" => n = Some(v),
            "d" => d = Some(v),
            "P" => p = Some(v),
            _ => return Err(bad("unknown header key")),
        }
    }
    match (n, d, p) {
        (Some(n), Some(d), Some(p)) if n > 0 && d > 0 && p > 0 => Ok((n, d, p)),
        _ => Err(bad("header needs positive n, d and P")),
    }
}

fn power_iteration(a: &SymMat, iters: usize) -> f64 {
    let n = a.dim();
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.mul_vec(&v);
        let nw = norm2(&w);
        if nw == 0.0 {
            return 0.0;
        }
        lambda = dot(&v, &w);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lambda
}

/// Rademacher labels for `n` samples. For even `n` the whole vector is
/// redrawn until it sums to zero, i.e. labels are i.i.d. Rademacher
/// conditioned on balance.
fn balanced_labels(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let labels: Vec<f64> = (0..n).map(|_| rng.rademacher()).collect();
        if n % 2 == 1 || labels.iter().sum::<f64>() == 0.0 {
            return labels;
        }
    }
}

/// Standard-normal inputs with balanced Rademacher labels, then centered.
///
/// After centering, `Σ_i y_i z_i = Σ_i x_i = 0`, so the uniform-margin
/// system `<w, y_i x_i> = 1` can only be solved when the labels sum to
/// zero; hence the conditioning on balance. For odd `n` no such labelling
/// exists and the labels are plain i.i.d. Rademacher.
pub fn gen_gaussian_experiment(rng: &mut Rng, n: usize, d: usize) -> Result<Dataset> {
    gen_gaussian_patches(rng, n, 1, d)
}

/// [`gen_gaussian_experiment`] with `P` independent standard-normal patches
/// per sample, centered over all patches. Draws the same stream for `P = 1`.
pub fn gen_gaussian_patches(rng: &mut Rng, n: usize, patches: usize, d: usize) -> Result<Dataset> {
    if n == 0 || d == 0 || patches == 0 {
        return Err(Error::ConfigInvalid("n, P and d must be at least 1".into()));
    }
    let samples: Vec<Vec<Vec<f64>>> =
        (0..n).map(|_| (0..patches).map(|_| rng.normal_vec(d)).collect()).collect();
    let labels = balanced_labels(rng, n);
    Dataset::center_patched(samples, labels)
}

/// Signal-plus-orthogonal-noise patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example1Config {
    pub u: Vec<f64>,
    pub patches: usize,
    pub sigma: f64,
    pub n: usize,
    pub d: usize,
}

impl Example1Config {
    /// `d = 2n`, `u = e_1`, `σ = 20 ||u|| sqrt(P d)`.
    pub fn regime_scale(n: usize, patches: usize) -> Self {
        let d = 2 * n;
        let mut u = vec![0.0; d];
        u[0] = 1.0;
        let sigma = 20.0 * ((patches * d) as f64).sqrt();
        Example1Config { u, patches, sigma, n, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, found: self.u.len() });
        }
        check_finite(&self.u, "signal u")?;
        if !(norm2(&self.u) > 0.0) {
            return Err(Error::ConfigInvalid("signal u must be nonzero".into()));
        }
        if self.patches == 0 || self.n == 0 {
            return Err(Error::ConfigInvalid("n and P must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::ConfigInvalid("sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Ways in which this configuration leaves the proved regime
    /// (`d = 2n`, `P >= 4`, `σ >= 20 ||u|| sqrt(P d)`).
    pub fn regime_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.d != 2 * self.n {
            w.push(format!("d = {} differs from 2n = {}", self.d, 2 * self.n));
        }
        if self.patches < 4 {
            w.push(format!("P = {} is below 4", self.patches));
        }
        let threshold = 20.0 * norm2(&self.u) * ((self.patches * self.d) as f64).sqrt();
        if self.sigma < threshold {
            w.push(format!("sigma = {} is below 20 ||u|| sqrt(P d) = {threshold}", self.sigma));
        }
        w
    }

    fn unit_u(&self) -> Vec<f64> {
        let nu = norm2(&self.u);
        self.u.iter().map(|v| v / nu).collect()
    }
}

/// Strong/weak signal mixture on two patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example2Config {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub n: usize,
    pub d: usize,
}

/// Largest dimension accepted for the two-patch mixture.
pub const EXAMPLE2_MAX_DIM: usize = 200_000;

impl Example2Config {
    /// `d = ⌈n² ln n⌉`, `σ = d^-1/2`, `ρ = n^-3/4`, `α = n^-1/2`,
    /// `u = e_1`, `v = α² e_2`.
    pub fn default_scaling(n: usize) -> Self {
        let nf = n as f64;
        let d = ((nf * nf * nf.ln()).ceil() as usize).max(2);
        let alpha = nf.powf(-0.5);
        let mut u = vec![0.0; d];
        u[0] = 1.0;
        let mut v = vec![0.0; d];
        v[1] = alpha * alpha;
        Example2Config {
            u,
            v,
            rho: nf.powf(-0.75),
            alpha,
            sigma: (d as f64).powf(-0.5),
            n,
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, vec) in [("u", &self.u), ("v", &self.v)] {
            if vec.len() != self.d {
                return Err(Error::DimensionMismatch { expected: self.d, found: vec.len() });
            }
            check_finite(vec, if name == "u" { "signal u" } else { "signal v" })?;
        }
        let (nu, nv) = (norm2(&self.u), norm2(&self.v));
        if !(nu > 0.0 && nv > 0.0) {
            return Err(Error::ConfigInvalid("signals u and v must be nonzero".into()));
        }
        if dot(&self.u, &self.v).abs() > 1e-12 * nu * nv {
            return Err(Error::ConfigInvalid("signals u and v must be orthogonal".into()));
        }
        if !(0.0..0.5).contains(&self.rho) {
            return Err(Error::ConfigInvalid(format!("rho = {} must lie in [0, 0.5)", self.rho)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ConfigInvalid(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::ConfigInvalid("sigma must be finite and nonnegative".into()));
        }
        if self.n == 0 {
            return Err(Error::ConfigInvalid("n must be at least 1".into()));
        }
        if self.d > EXAMPLE2_MAX_DIM {
            return Err(Error::ConfigInvalid(format!(
                "d = {} exceeds the cap of {EXAMPLE2_MAX_DIM}",
                self.d
            )));
        }
        Ok(())
    }

    pub fn regime_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.n < 20 {
            w.push(format!("n = {} is below the recommended 20", self.n));
        }
        w
    }
}

/// One labelled test point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub patches: Vec<Vec<f64>>,
    pub label: f64,
    /// Whether the point carries the weak signal (two-patch mixture only).
    pub weak: bool,
}

impl LabeledPoint {
    pub fn patch_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.patches[0].len()];
        for p in &self.patches {
            axpy(1.0, p, &mut s);
        }
        s
    }
}

/// Draws fresh points from a generating law.
///
/// Points are raw: the generators do not center, and test-time scores use
/// `<w, Σ_p x^(p)>` directly.
#[derive(Debug, Clone)]
pub enum TestSampler {
    Example1 { cfg: Example1Config, basis: Vec<Vec<f64>> },
    Example2 { cfg: Example2Config, strong_basis: Vec<Vec<f64>> },
}

impl TestSampler {
    fn example1(cfg: Example1Config) -> Self {
        let basis = vec![cfg.unit_u()];
        TestSampler::Example1 { cfg, basis }
    }

    fn example2(cfg: Example2Config) -> Self {
        let nu = norm2(&cfg.u);
        let nv = norm2(&cfg.v);
        let strong_basis = vec![
            cfg.u.iter().map(|x| x / nu).collect(),
            cfg.v.iter().map(|x| x / nv).collect(),
        ];
        TestSampler::Example2 { cfg, strong_basis }
    }

    pub fn dim(&self) -> usize {
        match self {
            TestSampler::Example1 { cfg, .. } => cfg.d,
            TestSampler::Example2 { cfg, .. } => cfg.d,
        }
    }

    /// Draw order: label, then (mixture only) weak flag, signal slot and
    /// feature-noise sign, then the noise vectors patch by patch.
    pub fn draw(&self, rng: &mut Rng) -> LabeledPoint {
        match self {
            TestSampler::Example1 { cfg, basis } => {
                let y = rng.rademacher();
                let signal: Vec<f64> = cfg.u.iter().map(|v| y * v).collect();
                let cov = Covariance::Projected { sigma: cfg.sigma, basis };
                let patches =
                    (0..cfg.patches).map(|_| sample_gaussian(rng, &signal, &cov)).collect();
                LabeledPoint { patches, label: y, weak: false }
            }
            TestSampler::Example2 { cfg, strong_basis } => {
                let y = rng.rademacher();
                let weak = rng.bernoulli(cfg.rho);
                let slot = (rng.next_u64() >> 63) as usize;
                let (signal, other) = if weak {
                    let zeta = rng.rademacher();
                    let signal: Vec<f64> = cfg.v.iter().map(|v| y * v).collect();
                    let feature: Vec<f64> = cfg.u.iter().map(|v| cfg.alpha * zeta * v).collect();
                    let other = sample_gaussian(
                        rng,
                        &feature,
                        &Covariance::Isotropic { sigma: cfg.sigma },
                    );
                    (signal, other)
                } else {
                    let signal: Vec<f64> = cfg.u.iter().map(|v| y * v).collect();
                    let other = sample_gaussian(
                        rng,
                        &vec![0.0; cfg.d],
                        &Covariance::Projected { sigma: cfg.sigma, basis: strong_basis },
                    );
                    (signal, other)
                };
                let patches = if slot == 0 { vec![signal, other] } else { vec![other, signal] };
                LabeledPoint { patches, label: y, weak }
            }
        }
    }

    fn draw_dataset(&self, rng: &mut Rng, n: usize) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let pt = self.draw(rng);
            labels.push(pt.label);
            samples.push(pt.patches);
        }
        Dataset::from_patches(samples, labels)
    }
}

/// Example-1 training set plus a sampler for fresh test points.
///
/// The data is not centered: the law has population mean zero and
/// centering would break the exact orthogonality of the noise to `u`.
/// Callers who want it anyway can apply [`Dataset::centered`].
pub fn gen_example1(rng: &mut Rng, cfg: &Example1Config) -> Result<(Dataset, TestSampler)> {
    cfg.validate()?;
    let sampler = TestSampler::example1(cfg.clone());
    let data = sampler.draw_dataset(rng, cfg.n)?;
    Ok((data, sampler))
}

/// Example-2 (two-patch strong/weak mixture) training set and sampler.
pub fn gen_example2(rng: &mut Rng, cfg: &Example2Config) -> Result<(Dataset, TestSampler)> {
    cfg.validate()?;
    let sampler = TestSampler::example2(cfg.clone());
    let data = sampler.draw_dataset(rng, cfg.n)?;
    Ok((data, sampler))
}
