//! Full-batch gradient descent with per-iteration metric traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, fmt_opt};
use crate::linalg::{cosine, norm2};
use crate::model::{self, Activations, LossGrad, ModelState};
use crate::random::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// BN on a linear model; the data must have one patch.
    BnLinear,
    /// BN on a single-filter linear CNN.
    BnCnn,
    /// Logistic regression on `Σ_p <w, x^(p)>`, no normalization, no `γ`.
    Plain,
}

impl ModelKind {
    pub fn is_bn(self) -> bool {
        !matches!(self, ModelKind::Plain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub init_scale: f64,
    pub gamma0: f64,
    pub seed: u64,
    pub log_every: usize,
    pub model: ModelKind,
    /// Keep the raw per-sample margins `y_i <w, x̄_i>` of every logged row.
    pub record_margins: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.05,
            steps: 200_000,
            init_scale: 0.01,
            gamma0: 1.0,
            seed: 0,
            log_every: 100,
            model: ModelKind::BnLinear,
            record_margins: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::ConfigInvalid(format!("eta = {} must be positive", self.eta)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "init_scale = {} must be positive",
                self.init_scale
            )));
        }
        if !self.gamma0.is_finite() {
            return Err(Error::ConfigInvalid("gamma0 must be finite".into()));
        }
        if self.log_every == 0 {
            return Err(Error::ConfigInvalid("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `w0 = init_scale · g / ||g||` for a standard Gaussian `g` (redrawn while
/// `||g|| < 1e-8`), `γ0 = gamma0`.
pub fn init_state(rng: &mut Rng, cfg: &TrainConfig, d: usize) -> ModelState {
    let g = loop {
        let g = rng.normal_vec(d);
        if norm2(&g) >= 1e-8 {
            break g;
        }
    };
    let scale = cfg.init_scale / norm2(&g);
    ModelState { w: g.iter().map(|v| v * scale).collect(), gamma: cfg.gamma0 }
}

/// Reference directions whose alignment with `w` is traced.
#[derive(Debug, Clone, Copy, Default)]
pub struct Probes<'a> {
    pub wstar: Option<&'a [f64]>,
    pub wmax: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub loss: f64,
    pub discrepancy: f64,
    /// Absent for the plain model.
    pub gamma: Option<f64>,
    pub w_norm2: f64,
    pub w_sigma_norm: f64,
    pub align_wstar: Option<f64>,
    pub align_wmax: Option<f64>,
    /// Extremes of the normalized margins `y_i <w, x_i^(p)> / ||w||_Σ`.
    pub min_margin: f64,
    pub max_margin: f64,
}

pub const TRACE_HEADER: &str =
    "t,loss,discrepancy,gamma,w_norm2,w_sigma_norm,align_wstar,align_wmax,min_margin,max_margin";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t,
                fmt_f64(r.loss),
                fmt_f64(r.discrepancy),
                fmt_opt(r.gamma),
                fmt_f64(r.w_norm2),
                fmt_f64(r.w_sigma_norm),
                fmt_opt(r.align_wstar),
                fmt_opt(r.align_wmax),
                fmt_f64(r.min_margin),
                fmt_f64(r.max_margin),
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TRACE_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: "unexpected trace header".into() }),
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: idx + 1, msg };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 10 {
                return Err(err(format!("expected 10 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(TraceRow {
                t: f[0].parse().map_err(|e| err(format!("t: {e}")))?,
                loss: num(f[1])?,
                discrepancy: num(f[2])?,
                gamma: opt(f[3])?,
                w_norm2: num(f[4])?,
                w_sigma_norm: num(f[5])?,
                align_wstar: opt(f[6])?,
                align_wmax: opt(f[7])?,
                min_margin: num(f[8])?,
                max_margin: num(f[9])?,
            });
        }
        if rows.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(Error::Parse { line: 0, msg: "t must be strictly increasing".into() });
        }
        Ok(TrainTrace { rows })
    }
}

/// Result of a training run. A run that stops early keeps everything logged
/// up to that point, with the cause in `halted`.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub trace: TrainTrace,
    pub state: ModelState,
    /// Raw margins `y_i Σ_p <w, x_i^(p)>`, one vector per logged row.
    pub margins: Vec<Vec<f64>>,
    /// Steps at which `||w||₂` decreased by more than the rounding slack.
    pub norm_decreases: usize,
    pub halted: Option<Error>,
}

impl TrainRun {
    pub fn into_result(self) -> Result<TrainRun> {
        match self.halted {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }
}

/// Stream index of the initialization draw within a run seed.
pub const INIT_STREAM: u64 = 1;

/// Per-step relative slack on `||w||₂` monotonicity.
pub const NORM_SLACK: f64 = 1e-12;

/// Runs `cfg.steps` full-batch GD steps from [`init_state`] drawn from
/// `Rng::new(cfg.seed).split(INIT_STREAM)`, so data generated from the same
/// seed never shares its stream with the initialization. `w` and `γ` are updated simultaneously from the gradient at
/// the current iterate. Rows are logged at `t = 0`, every `log_every`
/// steps and at `t = steps`.
pub fn train(data: &Dataset, cfg: &TrainConfig, probes: Probes<'_>) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.model == ModelKind::BnLinear && data.patches() != 1 {
        return Err(Error::ConfigInvalid(format!(
            "bn-linear needs single-patch data, found P = {}",
            data.patches()
        )));
    }
    let mut rng = Rng::new(cfg.seed).split(INIT_STREAM);
    let state = init_state(&mut rng, cfg, data.d());
    Ok(train_from(data, cfg, probes, state))
}

pub fn train_from(
    data: &Dataset,
    cfg: &TrainConfig,
    probes: Probes<'_>,
    mut state: ModelState,
) -> TrainRun {
    let mut trace = TrainTrace::default();
    let mut margins = Vec::new();
    let mut norm_decreases = 0;
    let mut halted = None;
    let mut prev_norm = norm2(&state.w);

    for t in 0..=cfg.steps {
        let acts = match Activations::compute(&state.w, data) {
            Ok(a) => a,
            Err(e) => {
                halted = Some(if norm2(&state.w).is_finite() { e } else { Error::Diverged { step: t } });
                break;
            }
        };
        let grads: LossGrad = if cfg.model.is_bn() {
            model::loss_and_grads_from(&state, data, &acts)
        } else {
            model::plain_loss_and_grad(&state.w, data).expect("dimensions checked by activations")
        };
        if !grads.loss.is_finite() {
            halted = Some(Error::Diverged { step: t });
            break;
        }
        if t == 0 || t % cfg.log_every == 0 || t == cfg.steps {
            trace.rows.push(trace_row(t, &state, cfg.model, data, &acts, grads.loss, probes));
            if cfg.record_margins {
                margins.push(raw_margins(data, &acts));
            }
        }
        if t == cfg.steps {
            break;
        }
        for (w, g) in state.w.iter_mut().zip(&grads.grad_w) {
            *w -= cfg.eta * g;
        }
        if cfg.model.is_bn() {
            state.gamma -= cfg.eta * grads.grad_gamma;
        }
        let norm = norm2(&state.w);
        if norm < prev_norm * (1.0 - NORM_SLACK) {
            norm_decreases += 1;
        }
        prev_norm = norm;
    }
    TrainRun { trace, state, margins, norm_decreases, halted }
}

fn raw_margins(data: &Dataset, acts: &Activations) -> Vec<f64> {
    acts.raw
        .chunks_exact(data.patches())
        .zip(data.labels())
        .map(|(a, y)| y * a.iter().sum::<f64>())
        .collect()
}

fn trace_row(
    t: usize,
    state: &ModelState,
    kind: ModelKind,
    data: &Dataset,
    acts: &Activations,
    loss: f64,
    probes: Probes<'_>,
) -> TraceRow {
    let profile = model::profile_from(data, acts);
    TraceRow {
        t,
        loss,
        discrepancy: profile.discrepancy(),
        gamma: kind.is_bn().then_some(state.gamma),
        w_norm2: norm2(&state.w),
        w_sigma_norm: acts.sigma_norm,
        align_wstar: probes.wstar.map(|p| cosine(&state.w, p)),
        align_wmax: probes.wmax.map(|p| cosine(&state.w, p)),
        min_margin: profile.min(),
        max_margin: profile.max(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub transitions: usize,
    pub norm_violations: usize,
    /// First logged `t` with `γ >= 1/2`, from which `<w, w*>` is checked.
    pub inner_checked_from: Option<usize>,
    pub inner_transitions: usize,
    pub inner_violations: usize,
}

/// Counts decreases of `||w||₂` between consecutive rows and, given
/// `||w*||₂`, decreases of `<w, w*>` once `γ >= 1/2`. Each transition
/// allows a relative slack of `1e-12` per elapsed step.
pub fn monotonicity_report(trace: &TrainTrace, wstar_norm: Option<f64>) -> MonotonicityReport {
    let rows = &trace.rows;
    let mut report = MonotonicityReport {
        transitions: rows.len().saturating_sub(1),
        norm_violations: 0,
        inner_checked_from: None,
        inner_transitions: 0,
        inner_violations: 0,
    };
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let slack = NORM_SLACK * (b.t - a.t) as f64;
        if b.w_norm2 < a.w_norm2 * (1.0 - slack) {
            report.norm_violations += 1;
        }
    }
    let (Some(ws), Some(start)) = (
        wstar_norm,
        rows.iter().position(|r| r.gamma.is_some_and(|g| g >= 0.5)),
    ) else {
        return report;
    };
    report.inner_checked_from = Some(rows[start].t);
    let inner = |r: &TraceRow| r.align_wstar.map(|c| c * r.w_norm2 * ws);
    for pair in rows[start..].windows(2) {
        let (Some(ia), Some(ib)) = (inner(&pair[0]), inner(&pair[1])) else {
            continue;
        };
        report.inner_transitions += 1;
        let slack = NORM_SLACK * (pair[1].t - pair[0].t) as f64 * pair[1].w_norm2 * ws;
        if ib < ia - slack {
            report.inner_violations += 1;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEnvelopeReport {
    /// First logged `t` where the margins are within a quarter of each
    /// other, and `γ` there.
    pub start: Option<(usize, f64)>,
    pub checked: usize,
    pub violations: usize,
    /// Largest relative excursion outside the envelope (0 when inside).
    pub worst_excursion: f64,
}

/// Checks `log((η/8)Δt + e^γ₁) <= γ_t <= log(8ηΔt + 2e^γ₁)` on logged rows
/// after the first row `t₁` with `max_margin − min_margin <= min_margin / 4`
/// (which implies a spread within a quarter of the mean margin).
pub fn gamma_envelope_report(trace: &TrainTrace, eta: f64) -> GammaEnvelopeReport {
    let mut report =
        GammaEnvelopeReport { start: None, checked: 0, violations: 0, worst_excursion: 0.0 };
    let Some(k) = trace.rows.iter().position(|r| {
        r.gamma.is_some() && r.min_margin > 0.0 && r.max_margin - r.min_margin <= r.min_margin / 4.0
    }) else {
        return report;
    };
    let first = &trace.rows[k];
    let g1 = first.gamma.expect("checked above");
    report.start = Some((first.t, g1));
    for r in &trace.rows[k..] {
        let Some(g) = r.gamma else { continue };
        let dt = (r.t - first.t) as f64;
        let lower = ((eta / 8.0) * dt + g1.exp()).ln();
        let upper = (8.0 * eta * dt + 2.0 * g1.exp()).ln();
        report.checked += 1;
        let excursion = ((lower - g) / lower.abs().max(1.0)).max((g - upper) / upper.abs().max(1.0));
        if excursion > 1e-12 {
            report.violations += 1;
            report.worst_excursion = report.worst_excursion.max(excursion);
        }
    }
    report
}

/// `<w, w*>` for a trace row, given `||w*||₂`.
pub fn inner_with_wstar(row: &TraceRow, wstar_norm: f64) -> Option<f64> {
    row.align_wstar.map(|c| c * row.w_norm2 * wstar_norm)
}
