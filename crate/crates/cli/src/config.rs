//! Run configuration: JSON file, command-line overrides and the merged
//! effective configuration echoed next to every output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bnml_core::dataset::{
    gen_example1, gen_example2, gen_gaussian_patches, Example1Config, Example2Config,
};
use bnml_core::verify::Suite;
use bnml_core::{Dataset, Rng, TestSampler, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Train,
    Verify,
    Example,
    Ratefit,
    Solve,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Train => "train",
            Experiment::Verify => "verify",
            Experiment::Example => "example",
            Experiment::Ratefit => "ratefit",
            Experiment::Solve => "solve",
        };
        f.write_str(s)
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Gaussian,
    Example1,
    Example2,
    File(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(DataSource::Gaussian),
            "example1" => Ok(DataSource::Example1),
            "example2" => Ok(DataSource::Example2),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(DataSource::File(PathBuf::from(p))),
                _ => Err(format!(
                    "unknown data source '{s}' (expected gaussian, example1, example2 or file:<path>)"
                )),
            },
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Gaussian => f.write_str("gaussian"),
            DataSource::Example1 => f.write_str("example1"),
            DataSource::Example2 => f.write_str("example2"),
            DataSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    Uniform,
    Max,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n: usize,
    /// Defaults: 1000 for `gaussian`, `2n` for `example1`, `⌈n² ln n⌉` for
    /// `example2`.
    pub d: Option<usize>,
    pub patches: usize,
    /// Noise level of the synthetic examples; regime scaling when absent.
    pub sigma: Option<f64>,
    /// Empirically center the synthetic examples, which are raw by default.
    pub center: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { source: DataSource::Gaussian, n: 50, d: None, patches: 1, sigma: None, center: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessOptions {
    /// Rate-fit window as a fraction of logged rows.
    pub tail: f64,
    /// Rate-fit window spanning this many decades of `t`; overrides `tail`.
    pub decades: Option<f64>,
    pub mc: usize,
    pub seeds: usize,
    pub suite: Suite,
    pub trials: usize,
    pub corrupt_gradient: bool,
    pub solver: SolverChoice,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            tail: 0.5,
            decades: None,
            mc: 10_000,
            seeds: 1,
            suite: Suite::All,
            trials: 100,
            corrupt_gradient: false,
            solver: SolverChoice::Both,
        }
    }
}

/// Everything a command needs. `train.seed` always equals `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub harness: HarnessOptions,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Config file (or defaults) for `experiment`; a file naming another
    /// experiment is rejected.
    pub fn base(path: Option<&Path>, experiment: Experiment) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        match cfg.experiment {
            Some(e) if e != experiment => {
                return Err(CliError::usage(format!(
                    "config file is for '{e}', not '{experiment}'"
                )))
            }
            _ => cfg.experiment = Some(experiment),
        }
        Ok(cfg)
    }

    /// Final consistency pass after flags are applied.
    pub fn finish(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.train.validate().map_err(CliError::usage)?;
        if self.dataset.n == 0 || self.dataset.patches == 0 {
            return Err(CliError::usage("n and P must be at least 1"));
        }
        let h = &self.harness;
        if !(h.tail > 0.0 && h.tail <= 1.0) {
            return Err(CliError::usage(format!("tail must lie in (0, 1], got {}", h.tail)));
        }
        if let Some(k) = h.decades {
            if !(k > 0.0 && k.is_finite()) {
                return Err(CliError::usage(format!("decades must be positive, got {k}")));
            }
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        bnml_core::io::to_json(self)
    }

    pub fn example1(&self) -> Result<Example1Config, CliError> {
        let ds = &self.dataset;
        let mut cfg = Example1Config::regime_scale(ds.n, ds.patches);
        if let Some(d) = ds.d {
            let norm = 20.0 * ((ds.patches * d) as f64).sqrt();
            cfg.d = d;
            cfg.u = vec![0.0; d];
            if d > 0 {
                cfg.u[0] = 1.0;
            }
            cfg.sigma = norm;
        }
        if let Some(s) = ds.sigma {
            cfg.sigma = s;
        }
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }

    pub fn example2(&self) -> Result<Example2Config, CliError> {
        let ds = &self.dataset;
        if ds.patches != 1 && ds.patches != 2 {
            return Err(CliError::usage("example2 data always has P = 2 patches"));
        }
        let mut cfg = Example2Config::default_scaling(ds.n);
        if let Some(d) = ds.d {
            if d < 2 {
                return Err(CliError::usage("example2 needs d >= 2"));
            }
            cfg.d = d;
            cfg.u.resize(d, 0.0);
            cfg.v.resize(d, 0.0);
            cfg.sigma = (d as f64).powf(-0.5);
        }
        if let Some(s) = ds.sigma {
            cfg.sigma = s;
        }
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }

    fn maybe_center(&self, data: Dataset) -> Dataset {
        if self.dataset.center {
            data.centered()
        } else {
            data
        }
    }

    /// Training data for this run, drawn from `Rng::new(seed)`. The test
    /// sampler is present for the synthetic examples.
    pub fn dataset(&self) -> Result<(Dataset, Option<TestSampler>), CliError> {
        let mut rng = Rng::new(self.seed);
        let ds = &self.dataset;
        match &ds.source {
            DataSource::Gaussian => {
                let d = ds.d.unwrap_or(1000);
                let data = gen_gaussian_patches(&mut rng, ds.n, ds.patches, d)
                    .map_err(CliError::usage)?;
                Ok((data, None))
            }
            DataSource::Example1 => {
                let (data, s) = gen_example1(&mut rng, &self.example1()?).map_err(CliError::usage)?;
                Ok((self.maybe_center(data), Some(s)))
            }
            DataSource::Example2 => {
                let (data, s) = gen_example2(&mut rng, &self.example2()?).map_err(CliError::usage)?;
                Ok((self.maybe_center(data), Some(s)))
            }
            DataSource::File(p) => {
                let data = Dataset::load_csv(p)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                Ok((data, None))
            }
        }
    }
}
