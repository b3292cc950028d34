//! Config-driven experiment runner behind the `philab` binary.
//!
//! A run takes one JSON [`ExperimentConfig`], produces a [`Report`] whose
//! numbers are split into `analytic` and `empirical` sections, and writes it
//! with any CSV tables into `<run root>/<command>-<config hash>/`.

mod commands;

pub use commands::{
    budget_row, cmd_budget, cmd_cost, cmd_enumerate, cmd_gap, cmd_hierarchy, cmd_report, cmd_specloop,
    default_cost_rows, structural_summary, BudgetParams, BudgetRow, CostRow, BUDGET_TABLE,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::EstimatorSpec;
use crate::grammar::{Grammar, GrammarSpec};
use crate::instance::Instance;
use crate::metrics::{DEFAULT_ALPHA, DEFAULT_RESAMPLES};
use crate::samplers::{KernelSpec, DEFAULT_GAMMA};
use crate::toylm::{LmSpec, DEFAULT_CAP};

pub const SCHEMA_VERSION: u32 = 1;
pub const RUN_ROOT_ENV: &str = "PHILAB_RUN_ROOT";
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum SamplerSpec {
    AnalyticOnly,
    Ancestral,
    Speculative {
        #[serde(default = "default_gamma")]
        gamma: usize,
        target: KernelSpec,
    },
}

fn default_gamma() -> usize {
    DEFAULT_GAMMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Overrides the run root from the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_root: Option<PathBuf>,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default)]
    pub dump_samples: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { run_root: None, csv: true, dump_samples: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grammar: GrammarSpec,
    pub lm: LmSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_lm: Option<LmSpec>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerSpec,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Length cap `T`; defaults to `n` for budget grammars and to
    /// `max(32, longest string)` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// `(n, K, p1)` settings for `budget`; empty means the configured grammar.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budget_rows: Vec<BudgetParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cost_rows: Vec<CostRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_baseline_tok_s: Option<f64>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_estimators() -> Vec<EstimatorSpec> {
    vec![EstimatorSpec::Uniform, EstimatorSpec::OneStepCheap, EstimatorSpec::OneStepTrue, EstimatorSpec::ExactTable]
}

fn default_sampler() -> SamplerSpec {
    SamplerSpec::Ancestral
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ExperimentConfig {
    pub fn new(grammar: GrammarSpec, lm: LmSpec) -> Self {
        Self {
            grammar,
            lm,
            draft_lm: None,
            estimators: default_estimators(),
            sampler: default_sampler(),
            samples: DEFAULT_SAMPLES,
            seeds: default_seeds(),
            cap: None,
            resamples: DEFAULT_RESAMPLES,
            alpha: DEFAULT_ALPHA,
            budget_rows: Vec::new(),
            cost_rows: Vec::new(),
            ar_baseline_tok_s: None,
            output: OutputSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("seeds must be non-empty".into()));
        }
        if self.samples == 0 && self.sampler != SamplerSpec::AnalyticOnly {
            return Err(Error::InvalidSpec("samples must be at least 1 when sampling".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec("alpha must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn effective_cap(&self) -> Result<usize> {
        if let Some(cap) = self.cap {
            return Ok(cap);
        }
        Ok(match self.grammar {
            GrammarSpec::BudgetDfa { n, .. } => n,
            _ => Grammar::new(self.grammar.clone())?.max_length().max(DEFAULT_CAP),
        })
    }

    /// The instance for one seed of the sweep.
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        Instance::new(self.grammar.clone(), self.lm.with_seed(seed), self.effective_cap()?)
    }

    /// Hex SHA-256 of the canonical JSON, ignoring where output goes.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.run_root = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn run_root(&self) -> PathBuf {
        self.output
            .run_root
            .clone()
            .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub analytic: BTreeMap<String, Value>,
    pub empirical: BTreeMap<String, Value>,
    pub audits: Vec<Audit>,
    /// The only field allowed to differ between reruns of the same config.
    pub wall_clock_ms: f64,
    #[serde(skip)]
    pub tables: BTreeMap<String, Vec<u8>>,
}

impl Report {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            analytic: BTreeMap::new(),
            empirical: BTreeMap::new(),
            audits: Vec::new(),
            wall_clock_ms: 0.0,
            tables: BTreeMap::new(),
        }
    }

    pub fn analytic(&mut self, key: &str, value: impl Serialize) {
        self.analytic.insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn empirical(&mut self, key: &str, value: impl Serialize) {
        self.empirical.insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn audit(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.audits.push(Audit { name: name.to_string(), passed, detail: detail.into() });
    }

    pub fn table(&mut self, file: &str, bytes: Vec<u8>) {
        self.tables.insert(file.to_string(), bytes);
    }

    pub fn passed(&self) -> bool {
        self.audits.iter().all(|a| a.passed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.run_root().join(format!("{}-{}", self.command, &self.config_hash[..16]))
    }

    /// Writes `report.json` and any CSV tables; returns the run directory.
    pub fn write(&self) -> Result<PathBuf> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        if self.config.output.csv {
            for (name, bytes) in &self.tables {
                std::fs::write(dir.join(name), bytes)?;
            }
        }
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::new(GrammarSpec::Dyck { depth: 3, length: 8 }, LmSpec::seeded(0, 1))
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(
            r#"{"grammar":{"variant":"Dyck","depth":3,"length":8},"lm":{"variant":"Bernoulli","p1":0.5}}"#,
        );
        // Bernoulli is only defined for the budget vocabulary, but parsing is independent of that.
        let c = c.unwrap();
        assert_eq!(c.samples, 10_000);
        assert_eq!(c.resamples, 500);
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.seeds, vec![0]);
    }

    #[test]
    fn hash_ignores_run_root() {
        let a = cfg();
        let mut b = cfg();
        b.output.run_root = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.samples = 5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.samples = 0;
        assert!(c.validate().is_err());
        c.sampler = SamplerSpec::AnalyticOnly;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn budget_cap_defaults_to_n() {
        let c = ExperimentConfig::new(GrammarSpec::BudgetDfa { n: 8, k: 4 }, LmSpec::Bernoulli { p1: 0.6 });
        assert_eq!(c.effective_cap().unwrap(), 8);
        assert_eq!(cfg().effective_cap().unwrap(), 32);
    }
}
