//! Run configuration, read from TOML.
//!
//! ```toml
//! task = "qp"
//! variants = ["dc3", "nn"]
//! seeds = [0, 1, 2, 3, 4]
//! output = "runs/qp"
//!
//! [problem]
//! n = 100
//! n_eq = 50
//! n_ineq = 50
//!
//! [data]
//! instances = 10000
//!
//! [train]
//! epochs = 1000
//! ```
//!
//! Every `[train]` key is optional and overrides the task's per-variant
//! defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dc3::dc3::{Dc3Config, Variant};
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qp,
    Nonconvex,
    Acopf,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Qp => "qp",
            Task::Nonconvex => "nonconvex",
            Task::Acopf => "acopf",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qp" => Ok(Task::Qp),
            "nonconvex" => Ok(Task::Nonconvex),
            "acopf" => Ok(Task::Acopf),
            _ => Err(BenchError::Config(format!("unknown task `{s}` (expected qp, nonconvex or acopf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_half")]
    pub n_eq: usize,
    #[serde(default = "default_half")]
    pub n_ineq: usize,
    #[serde(default = "default_family_seed")]
    pub family_seed: u64,
    /// MATPOWER case for `acopf`; the bundled case57 when absent.
    #[serde(default)]
    pub case: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Total instances, split 10:1:1 into train, validation and test.
    pub instances: Option<usize>,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_g: Option<f64>,
    pub lambda_h: Option<f64>,
    pub corr_lr: Option<f64>,
    pub corr_momentum: Option<f64>,
    pub corr_tol: Option<f64>,
    pub t_train: Option<usize>,
    pub t_test: Option<usize>,
    pub hidden: Option<usize>,
    pub dropout: Option<f64>,
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Multi-start count of the barrier solver.
    pub barrier_starts: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "ProblemConfig::default")]
    pub problem: ProblemConfig,
    #[serde(default = "DataConfig::default")]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "ReferenceConfig::default")]
    pub reference: ReferenceConfig,
}

fn default_n() -> usize {
    100
}
fn default_half() -> usize {
    50
}
fn default_family_seed() -> u64 {
    1
}
fn default_data_seed() -> u64 {
    2
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { n: default_n(), n_eq: default_half(), n_ineq: default_half(), family_seed: 1, case: None }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { instances: None, seed: default_data_seed() }
    }
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { enabled: true, barrier_starts: None }
    }
}

impl RunConfig {
    /// A configuration with the task's default sizes and all nine variants.
    pub fn for_task(task: Task) -> Self {
        RunConfig {
            task,
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            seeds: vec![0],
            output: default_output().join(task.as_str()),
            problem: ProblemConfig::default(),
            data: DataConfig::default(),
            train: TrainOverrides::default(),
            reference: ReferenceConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.parsed_variants()?;
        if self.task != Task::Acopf {
            let p = &self.problem;
            if p.n == 0 || p.n_eq == 0 || p.n_ineq == 0 {
                return bad("problem dimensions must be positive".into());
            }
            if p.n_eq >= p.n {
                return bad(format!("n_eq = {} must be below n = {}", p.n_eq, p.n));
            }
        }
        if self.instances() < 12 {
            return bad("at least 12 instances are needed for a 10:1:1 split".into());
        }
        Ok(())
    }

    pub fn parsed_variants(&self) -> Result<Vec<Variant>, BenchError> {
        self.variants
            .iter()
            .map(|s| Variant::parse(s).ok_or_else(|| BenchError::Config(format!("unknown variant `{s}`"))))
            .collect()
    }

    /// Instance count, defaulting to 10000 for the synthetic tasks and
    /// 1200 for power flow.
    pub fn instances(&self) -> usize {
        self.data.instances.unwrap_or(match self.task {
            Task::Acopf => 1200,
            _ => 10_000,
        })
    }

    /// Task defaults for `variant` with the `[train]` overrides applied.
    pub fn dc3_config(&self, variant: Variant) -> Result<Dc3Config, BenchError> {
        let mut c = match self.task {
            Task::Acopf => Dc3Config::acopf_defaults(variant),
            _ => Dc3Config::qp_defaults(variant),
        };
        let t = &self.train;
        macro_rules! apply {
            ($($f:ident),*) => {$( if let Some(v) = t.$f { c.$f = v; } )*};
        }
        apply!(epochs, batch_size, lr, lambda_g, lambda_h, corr_lr, corr_momentum, corr_tol, t_train, t_test, hidden, dropout, eval_every);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("task = \"qp\"\nvariants = [\"dc3\"]\nseeds = [0]\n").unwrap();
        assert_eq!((c.problem.n, c.problem.n_eq, c.problem.n_ineq), (100, 50, 50));
        assert_eq!(c.instances(), 10_000);
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("task = \"acopf\"\nvariants = [\"dc3\"]\nseeds = [0]\n[train]\nepochs = 7\nt_test = 3\n")
            .unwrap();
        let d = c.dc3_config(Variant::Dc3).unwrap();
        assert_eq!((d.epochs, d.t_test, d.t_train), (7, 3, 5));
        assert_eq!(c.instances(), 1200);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::parse("task = \"qp\"\nvariants = []\nseeds = [0]\n").is_err());
        assert!(RunConfig::parse("task = \"qp\"\nvariants = [\"dc3\"]\nseeds = []\n").is_err());
        assert!(RunConfig::parse("task = \"qp\"\nvariants = [\"bogus\"]\nseeds = [0]\n").is_err());
        assert!(RunConfig::parse("task = \"lp\"\nvariants = [\"dc3\"]\nseeds = [0]\n").is_err());
        assert!(RunConfig::parse("task = \"qp\"\nvariants = [\"dc3\"]\nseeds = [0]\n[problem]\nn_eq = 0\n").is_err());
    }
}
