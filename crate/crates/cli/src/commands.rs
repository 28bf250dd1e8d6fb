use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bnml_core::harness::{fit_rate, repeat_seeds, run_example1, run_example2, tail_for_decades, D_FLOOR};
use bnml_core::io::to_json;
use bnml_core::linalg::norm2;
use bnml_core::solvers::{solve_max_margin, solve_uniform_margin};
use bnml_core::trainer::{self, monotonicity_report};
use bnml_core::verify::{run_suite, VerifyOptions};
use bnml_core::{
    Certificate, Dataset, Error, GenReport, ModelKind, Probes, RateFit, SolverReport, TrainRun,
    TrainTrace,
};
use serde::Serialize;

use crate::config::{DataSource, RunConfig, SolverChoice};
use crate::svg::{Chart, Series};
use crate::{CliError, EXIT_OK, EXIT_PROPERTY};

/// Output directory; every file is written by the calling thread once all
/// work has finished.
pub struct Outputs {
    dir: Option<PathBuf>,
}

impl Outputs {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Outputs { dir }
    }

    pub fn is_set(&self) -> bool {
        self.dir.is_some()
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
    }

    fn config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        self.write("config.json", &cfg.to_json())
    }
}

/// Solver reference directions used as alignment probes.
struct ProbeSet {
    wstar: Option<Vec<f64>>,
    wmax: Option<Vec<f64>>,
    warnings: Vec<String>,
}

fn probe_set(data: &Dataset) -> ProbeSet {
    let mut warnings = Vec::new();
    let wstar = match solve_uniform_margin(data) {
        Ok(r) => Some(r.solution),
        Err(e) => {
            warnings.push(format!("no w* probe: {e}"));
            None
        }
    };
    let wmax = match solve_max_margin(data) {
        Ok(r) => Some(r.solution),
        Err(e) => {
            warnings.push(format!("no w_max probe: {e}"));
            None
        }
    };
    ProbeSet { wstar, wmax, warnings }
}

#[derive(Serialize)]
struct FinalState<'a> {
    model: ModelKind,
    steps: usize,
    /// Absent for the plain model.
    gamma: Option<f64>,
    w: &'a [f64],
    initial_discrepancy: f64,
    final_discrepancy: f64,
    norm_decreases: usize,
    wstar_inner_decreases: Option<usize>,
    halted: Option<String>,
    warnings: &'a [String],
}

/// A finished training run and what it was measured against.
pub struct TrainOutcome {
    pub run: TrainRun,
    pub data: Dataset,
    /// Decreases of `<w, w*>` once `γ >= 1/2`, when `w*` exists.
    pub wstar_inner_decreases: Option<usize>,
    pub warnings: Vec<String>,
}

pub fn run_training(cfg: &RunConfig, record_margins: bool) -> Result<TrainOutcome, CliError> {
    let (data, _) = cfg.dataset()?;
    if cfg.train.model == ModelKind::BnLinear && data.patches() != 1 {
        return Err(CliError::usage(format!(
            "bn-linear needs P = 1 but the data has P = {}; use --model bn-cnn",
            data.patches()
        )));
    }
    let probes = probe_set(&data);
    let mut tc = cfg.train.clone();
    tc.record_margins = record_margins;
    let run = trainer::train(
        &data,
        &tc,
        Probes { wstar: probes.wstar.as_deref(), wmax: probes.wmax.as_deref() },
    )
    .map_err(CliError::usage)?;
    let mut warnings = probes.warnings;
    let wstar_inner_decreases = probes
        .wstar
        .as_ref()
        .map(|w| monotonicity_report(&run.trace, Some(norm2(w))).inner_violations);
    if let (true, Some(k @ 1..)) = (cfg.train.model.is_bn(), wstar_inner_decreases) {
        warnings.push(format!("<w, w*> decreased {k} times after gamma >= 1/2"));
    }
    Ok(TrainOutcome { run, data, wstar_inner_decreases, warnings })
}

fn final_state_json(cfg: &RunConfig, o: &TrainOutcome) -> String {
    let rows = &o.run.trace.rows;
    to_json(&FinalState {
        model: cfg.train.model,
        steps: rows.last().map_or(0, |r| r.t),
        gamma: cfg.train.model.is_bn().then_some(o.run.state.gamma),
        w: &o.run.state.w,
        initial_discrepancy: rows.first().map_or(f64::NAN, |r| r.discrepancy),
        final_discrepancy: rows.last().map_or(f64::NAN, |r| r.discrepancy),
        norm_decreases: o.run.norm_decreases,
        wstar_inner_decreases: o.wstar_inner_decreases,
        halted: o.run.halted.as_ref().map(Error::to_string),
        warnings: &o.warnings,
    })
}

/// Per-sample raw margins `y_i <w, x̄_i>` against `t`.
pub fn margins_chart(cfg: &RunConfig, run: &TrainRun) -> Chart {
    let title = format!("Per-sample margins, {} model", model_name(cfg.train.model));
    let mut chart = Chart::new(&title, "iteration t", "y_i <w_t, x_i>");
    let n = run.margins.first().map_or(0, Vec::len);
    for i in 0..n {
        let pts = run.trace.rows.iter().zip(&run.margins).map(|(r, m)| (r.t as f64, m[i])).collect();
        chart.push(Series::new(format!("sample {i}"), pts));
    }
    chart
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::BnLinear => "BN linear",
        ModelKind::BnCnn => "BN CNN",
        ModelKind::Plain => "plain",
    }
}

pub fn train(cfg: &RunConfig, out: &Outputs, plot: bool) -> Result<i32, CliError> {
    let outcome = run_training(cfg, plot)?;
    let csv = outcome.run.trace.to_csv();
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if out.is_set() {
        out.config(cfg)?;
        out.write("trace.csv", &csv)?;
        out.write("state.json", &final_state_json(cfg, &outcome))?;
        if plot {
            out.write("margins.svg", &margins_chart(cfg, &outcome.run).render())?;
        }
        let last = outcome.run.trace.rows.last().expect("trace has a t = 0 row");
        println!(
            "t = {}  loss = {:.6e}  D = {:.6e}  norm decreases = {}",
            last.t, last.loss, last.discrepancy, outcome.run.norm_decreases
        );
    } else {
        print!("{csv}");
    }
    match &outcome.run.halted {
        Some(e) => Err(CliError::runtime(format!("training halted: {e}"))),
        None => Ok(EXIT_OK),
    }
}

pub fn verify(cfg: &RunConfig, out: &Outputs) -> Result<i32, CliError> {
    let h = &cfg.harness;
    let opts = VerifyOptions { trials: h.trials, seed: cfg.seed, corrupt_gradient: h.corrupt_gradient };
    let report = run_suite(h.suite, &opts);
    print!("{}", report.table());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    out.config(cfg)?;
    out.write("verify.json", &to_json(&report))?;
    if report.passed() {
        println!("all checks passed");
        return Ok(EXIT_OK);
    }
    for c in report.checks.iter().filter(|c| !c.passed()) {
        eprintln!("{} failed on {} of {} instances", c.name, c.failures, c.instances);
        if let Some(inst) = &c.first_failure {
            if out.is_set() {
                let name = format!("failure-{}.json", c.name.replace('/', "-"));
                out.write(&name, &to_json(inst))?;
                eprintln!("replay instance written to {name}");
            } else {
                eprintln!("replay instance: {}", serde_json::to_string(inst).unwrap_or_default());
            }
        }
    }
    Ok(EXIT_PROPERTY)
}

#[derive(Serialize)]
struct ExampleSummary {
    seeds: usize,
    failed_seeds: usize,
    mean_error_uniform: f64,
    mean_error_max: f64,
    uniform_below_max_in_every_seed: bool,
}

#[derive(Serialize)]
struct SeedFailure {
    index: usize,
    error: String,
}

#[derive(Serialize)]
struct ExampleOutput<'a> {
    reports: &'a [GenReport],
    failures: &'a [SeedFailure],
    summary: ExampleSummary,
}

pub fn example(cfg: &RunConfig, out: &Outputs) -> Result<i32, CliError> {
    let h = &cfg.harness;
    if h.seeds == 0 || h.mc == 0 {
        return Err(CliError::usage("--seeds and --mc must be at least 1"));
    }
    let results = match &cfg.dataset.source {
        DataSource::Example1 => {
            let e = cfg.example1()?;
            repeat_seeds(cfg.seed, h.seeds, |rng| run_example1(&e, h.mc, rng))
        }
        DataSource::Example2 => {
            let e = cfg.example2()?;
            repeat_seeds(cfg.seed, h.seeds, |rng| run_example2(&e, h.mc, rng))
        }
        other => return Err(CliError::usage(format!("example needs example1 or example2 data, not {other}"))),
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => failures.push(SeedFailure { index, error: e.to_string() }),
        }
    }
    let k = reports.len().max(1) as f64;
    let summary = ExampleSummary {
        seeds: h.seeds,
        failed_seeds: failures.len(),
        mean_error_uniform: reports.iter().map(|r| r.error_uniform).sum::<f64>() / k,
        mean_error_max: reports.iter().map(|r| r.error_max).sum::<f64>() / k,
        uniform_below_max_in_every_seed: reports.iter().all(|r| r.error_uniform < r.error_max),
    };
    let table = example_table(&reports, &failures, &summary);
    print!("{table}");
    for w in reports.first().map_or(&[][..], |r| &r.warnings[..]) {
        eprintln!("warning: {w}");
    }
    out.config(cfg)?;
    out.write("report.json", &to_json(&ExampleOutput { reports: &reports, failures: &failures, summary }))?;
    out.write("summary.txt", &table)?;
    if 2 * failures.len() > h.seeds {
        return Err(CliError::runtime(format!(
            "solvers failed in {} of {} seeds",
            failures.len(),
            h.seeds
        )));
    }
    Ok(EXIT_OK)
}

fn example_table(reports: &[GenReport], failures: &[SeedFailure], s: &ExampleSummary) -> String {
    let mut t = format!(
        "{:>20}  {:>24}  {:>24}  {:>5}\n",
        "seed", "error_uniform ± 95%", "error_max ± 95%", "valid"
    );
    for r in reports {
        let _ = writeln!(
            t,
            "{:>20}  {:>11.6} ± {:<10.6}  {:>11.6} ± {:<10.6}  {:>5}",
            r.seed, r.error_uniform, r.wilson_halfwidth_uniform, r.error_max, r.wilson_halfwidth_max, r.valid
        );
    }
    for f in failures {
        let _ = writeln!(t, "{:>20}  failed: {}", format!("#{}", f.index), f.error);
    }
    let _ = writeln!(
        t,
        "{:>20}  {:>24.6}  {:>24.6}\nuniform < max in every seed: {}",
        "mean", s.mean_error_uniform, s.mean_error_max, s.uniform_below_max_in_every_seed
    );
    t
}

/// `log D` against `log² t` with the fitted line over the window.
pub fn rate_chart(trace: &TrainTrace, fit: &RateFit) -> Chart {
    let mut chart = Chart::new("Margin discrepancy decay", "log^2 t", "log D");
    let pts = trace
        .rows
        .iter()
        .filter(|r| r.t > 0)
        .map(|r| ((r.t as f64).ln().powi(2), r.discrepancy.max(D_FLOOR).ln()))
        .collect();
    chart.push(Series::new("log D", pts));
    let line = [fit.window.0, fit.window.1]
        .iter()
        .map(|&t| {
            let x = (t as f64).ln().powi(2);
            (x, fit.slope * x + fit.intercept)
        })
        .collect();
    chart.push(Series::new("fit", line).dashed());
    chart
}

pub fn ratefit(cfg: &RunConfig, out: &Outputs, trace_path: Option<&Path>) -> Result<i32, CliError> {
    let trace = match trace_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            TrainTrace::from_csv(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => {
            let o = run_training(cfg, false)?;
            if let Some(e) = &o.run.halted {
                return Err(CliError::runtime(format!("training halted: {e}")));
            }
            out.write("trace.csv", &o.run.trace.to_csv())?;
            o.run.trace
        }
    };
    let tail = cfg.harness.decades.map_or(cfg.harness.tail, |k| tail_for_decades(&trace, k));
    let fit = fit_rate(&trace, tail).map_err(|e| match e {
        Error::InsufficientData(_) => CliError::runtime(e),
        other => CliError::usage(other),
    })?;
    let json = to_json(&fit);
    println!("{json}");
    out.config(cfg)?;
    out.write("ratefit.json", &json)?;
    out.write("ratefit.svg", &rate_chart(&trace, &fit).render())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Solutions {
    uniform: Option<SolverReport>,
    max: Option<SolverReport>,
}

pub fn solve(cfg: &RunConfig, out: &Outputs) -> Result<i32, CliError> {
    let (data, _) = cfg.dataset()?;
    let which = cfg.harness.solver;
    let uniform = match which {
        SolverChoice::Max => None,
        _ => Some(solve_uniform_margin(&data).map_err(CliError::runtime)?),
    };
    let max = match which {
        SolverChoice::Uniform => None,
        _ => Some(solve_max_margin(&data).map_err(CliError::runtime)?),
    };
    if let Some(r) = &uniform {
        let reg = matches!(r.certificate, Certificate::UniformMargin { regularized: true, .. });
        eprintln!("w*: residual {:.3e}{}", r.residual, if reg { " (regularized)" } else { "" });
    }
    if let Some(Certificate::MaxMargin { kkt_violation, .. }) = max.as_ref().map(|r| &r.certificate) {
        eprintln!("w_max: KKT violation {kkt_violation:.3e}");
    }
    let json = to_json(&Solutions { uniform, max });
    out.config(cfg)?;
    out.write("solution.json", &json)?;
    if !out.is_set() {
        println!("{json}");
    }
    Ok(EXIT_OK)
}
