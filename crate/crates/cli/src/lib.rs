//! The `bnml` command line: argument parsing, configuration merging and the
//! five commands. `main` only forwards to [`run`].

pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use bnml_core::verify::Suite;
use bnml_core::ModelKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{DataSource, Experiment, RunConfig, SolverChoice};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A failure carrying its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError { code: EXIT_USAGE, message: msg.to_string() }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: msg.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "bnml", version, about = "Gradient descent with batch normalization: margin dynamics and reference solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its trace, final state and optional plot.
    Train(TrainArgs),
    /// Run the randomized property suites.
    Verify(VerifyArgs),
    /// Test error of the uniform- and max-margin classifiers on synthetic examples.
    Example(ExampleArgs),
    /// Fit log D against log^2 t on a trace.
    Ratefit(RatefitArgs),
    /// Run the reference solvers on a dataset.
    Solve(SolveArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config with keys experiment, dataset, train, harness, seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// gaussian, example1, example2 or file:<path>.
    #[arg(long, value_parser = clap::value_parser!(DataSource))]
    pub data: Option<DataSource>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Patches per sample.
    #[arg(long = "P")]
    pub patches: Option<usize>,
    /// Noise level for the synthetic examples.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Center the synthetic examples (gaussian and file data are used as is).
    #[arg(long)]
    pub center: bool,
}

impl clap::builder::ValueParserFactory for DataSource {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<DataSource>())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    BnLinear,
    BnCnn,
    Plain,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::BnLinear => ModelKind::BnLinear,
            ModelArg::BnCnn => ModelKind::BnCnn,
            ModelArg::Plain => ModelKind::Plain,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub gamma0: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Also write an SVG of the per-sample margins against t.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Identities,
    Inequalities,
    Gradients,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Identities => Suite::Identities,
            SuiteArg::Inequalities => Suite::Inequalities,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub suite: Option<SuiteArg>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Debug: perturb the analytic gradient so the gradient checks must fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct ExampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// 1: signal plus orthogonal noise; 2: strong/weak mixture.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub which: Option<u8>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "P")]
    pub patches: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Monte-Carlo test samples per seed.
    #[arg(long)]
    pub mc: Option<usize>,
    /// Independent repetitions.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RatefitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trace CSV to fit; without it a run is trained from the flags below.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Fraction of logged rows in the fit window.
    #[arg(long)]
    pub tail: Option<f64>,
    /// Fit window covering the last k decades of t; overrides --tail.
    #[arg(long)]
    pub decades: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub solver: Option<SolverChoice>,
}

impl ValueEnum for SolverChoice {
    fn value_variants<'a>() -> &'a [Self] {
        &[SolverChoice::Uniform, SolverChoice::Max, SolverChoice::Both]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SolverChoice::Uniform => "uniform",
            SolverChoice::Max => "max",
            SolverChoice::Both => "both",
        }))
    }
}

impl CommonArgs {
    fn base(&self, experiment: Experiment) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::base(self.config.as_deref(), experiment)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let ds = &mut cfg.dataset;
        if let Some(s) = &self.data {
            ds.source = s.clone();
        }
        if let Some(n) = self.n {
            ds.n = n;
        }
        if self.d.is_some() {
            ds.d = self.d;
        }
        if let Some(p) = self.patches {
            ds.patches = p;
        }
        if self.sigma.is_some() {
            ds.sigma = self.sigma;
        }
        ds.center |= self.center;
    }
}

impl OptimArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(m) = self.model {
            t.model = m.into();
        }
        if let Some(v) = self.eta {
            t.eta = v;
        }
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.init_scale {
            t.init_scale = v;
        }
        if let Some(v) = self.gamma0 {
            t.gamma0 = v;
        }
        if let Some(v) = self.log_every {
            t.log_every = v;
        }
    }
}

impl Command {
    /// Merged configuration: defaults, then the config file, then flags.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let cfg = match self {
            Command::Train(a) => {
                let mut c = a.common.base(Experiment::Train)?;
                a.data.apply(&mut c);
                a.optim.apply(&mut c);
                c
            }
            Command::Verify(a) => {
                let mut c = a.common.base(Experiment::Verify)?;
                if let Some(s) = a.suite {
                    c.harness.suite = s.into();
                }
                if let Some(t) = a.trials {
                    c.harness.trials = t;
                }
                c.harness.corrupt_gradient |= a.corrupt_gradient;
                c
            }
            Command::Example(a) => {
                let mut c = a.common.base(Experiment::Example)?;
                if let Some(w) = a.which {
                    c.dataset.source = if w == 1 { DataSource::Example1 } else { DataSource::Example2 };
                } else if c.dataset.source == DataSource::Gaussian {
                    c.dataset.source = DataSource::Example1;
                }
                if let Some(n) = a.n {
                    c.dataset.n = n;
                }
                if a.d.is_some() {
                    c.dataset.d = a.d;
                }
                if let Some(p) = a.patches {
                    c.dataset.patches = p;
                }
                if a.sigma.is_some() {
                    c.dataset.sigma = a.sigma;
                }
                if let Some(m) = a.mc {
                    c.harness.mc = m;
                }
                if let Some(k) = a.seeds {
                    c.harness.seeds = k;
                }
                c
            }
            Command::Ratefit(a) => {
                let mut c = a.common.base(Experiment::Ratefit)?;
                a.data.apply(&mut c);
                a.optim.apply(&mut c);
                if let Some(t) = a.tail {
                    c.harness.tail = t;
                }
                if a.decades.is_some() {
                    c.harness.decades = a.decades;
                }
                c
            }
            Command::Solve(a) => {
                let mut c = a.common.base(Experiment::Solve)?;
                a.data.apply(&mut c);
                if let Some(s) = a.solver {
                    c.harness.solver = s;
                }
                c
            }
        };
        cfg.finish()
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Train(a) => &a.common,
            Command::Verify(a) => &a.common,
            Command::Example(a) => &a.common,
            Command::Ratefit(a) => &a.common,
            Command::Solve(a) => &a.common,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn execute(command: &Command) -> Result<i32, CliError> {
    bnml_core::harness::configure_threads().map_err(CliError::usage)?;
    let cfg = command.effective_config()?;
    let out = commands::Outputs::new(command.common().out.clone());
    match command {
        Command::Train(a) => commands::train(&cfg, &out, a.plot),
        Command::Verify(_) => commands::verify(&cfg, &out),
        Command::Example(_) => commands::example(&cfg, &out),
        Command::Ratefit(a) => commands::ratefit(&cfg, &out, a.trace.as_deref()),
        Command::Solve(_) => commands::solve(&cfg, &out),
    }
}
