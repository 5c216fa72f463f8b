//! Configurable end-to-end runs over the simulated network.
//!
//! A scenario is one TOML document. Every run is a pure function of the document, so the
//! files it produces are byte-identical across runs with the same seed.

mod autoresearch;
mod economy;
mod storage;
mod training;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{LedgerConfig, ScoreWeights};
use crate::simnet::{LinkPolicy, SimError};
use crate::tier::{Tier, TierTable};

pub use autoresearch::{run_autoloop, AutoloopSection, LabKind};
pub use economy::{run_ledger, LedgerSection};
pub use storage::{run_storage, FailureBatch, RandomFailures, StorageSection};
pub use training::{run_diloco, Crash, DilocoSection, Weighting};

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// TOML syntax or schema error; the message carries line and column.
    #[error("config error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("scenario failed: {0}")]
    Runtime(String),
}

impl ScenarioError {
    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        ScenarioError::Runtime(e.to_string())
    }

    pub(crate) fn invalid(e: impl std::fmt::Display) -> Self {
        ScenarioError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub tier: Tier,
    pub region: String,
    pub read_mbps: f64,
    pub write_mbps: f64,
    pub bond: u64,
}

impl Default for NodeSpec {
    fn default() -> Self {
        Self {
            id: String::new(),
            tier: Tier::GpuCompute,
            region: "region-0".into(),
            read_mbps: 200.0,
            write_mbps: 100.0,
            bond: 1000,
        }
    }
}

/// Axis weights for the contribution score, as decimals summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisWeights {
    pub data_quality: f64,
    pub training_compute: f64,
    pub model_quality: f64,
}

/// Tier multipliers and every reward parameter, in one place.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Economics {
    pub tiers: BTreeMap<Tier, f64>,
    pub ledger: LedgerConfig,
    pub axis_weights: Option<AxisWeights>,
}

impl Economics {
    pub fn tier_table(&self) -> Result<TierTable, ScenarioError> {
        TierTable::from_overrides(&self.tiers).map_err(ScenarioError::Invalid)
    }

    /// Equal thirds unless weights are configured.
    pub fn score_weights(&self) -> Result<ScoreWeights, ScenarioError> {
        match self.axis_weights {
            None => Ok(ScoreWeights::default()),
            Some(a) => ScoreWeights::new(a.data_quality, a.training_compute, a.model_quality)
                .map_err(ScenarioError::invalid),
        }
    }

    pub fn multipliers(&self, nodes: &[NodeSpec]) -> Result<BTreeMap<String, BigRational>, ScenarioError> {
        let table = self.tier_table()?;
        Ok(nodes
            .iter()
            .map(|n| (n.id.clone(), table.multiplier(n.tier).clone()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: LinkPolicy,
    #[serde(default)]
    pub economics: Economics,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    pub diloco: Option<DilocoSection>,
    pub storage: Option<StorageSection>,
    pub ledger: Option<LedgerSection>,
    pub autoloop: Option<AutoloopSection>,
}

fn default_name() -> String {
    "scenario".into()
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.network.validate()?;
        self.economics.tier_table()?;
        self.economics.score_weights()?;
        self.economics.ledger.slash.validate().map_err(ScenarioError::invalid)?;
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if n.id.is_empty() {
                return Err(ScenarioError::Invalid("node with empty id".into()));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(ScenarioError::Invalid(format!("duplicate node {}", n.id)));
            }
        }
        Ok(())
    }

    /// The configured roster, or `count` generated nodes spread over `regions`.
    pub(crate) fn roster(&self, count: usize, regions: usize, tier: Tier) -> Vec<NodeSpec> {
        if !self.nodes.is_empty() {
            return self.nodes.clone();
        }
        (0..count)
            .map(|i| NodeSpec {
                id: format!("node-{i:02}"),
                tier,
                region: format!("region-{}", i % regions.max(1)),
                ..NodeSpec::default()
            })
            .collect()
    }
}

/// Files produced by a run plus any invariant violations observed along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub files: BTreeMap<String, String>,
    pub summary: serde_json::Value,
    pub violations: Vec<String>,
}

impl RunReport {
    pub(crate) fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            files: BTreeMap::new(),
            summary: serde_json::Value::Null,
            violations: Vec::new(),
        }
    }

    pub(crate) fn file(&mut self, name: &str, content: String) {
        self.files.insert(name.to_string(), content);
    }

    pub(crate) fn finish(mut self, summary: serde_json::Value) -> Self {
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        self.files.insert("summary.json".into(), text);
        self.summary = summary;
        self
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            fs::write(dir.join(name), content)?;
        }
        Ok(())
    }
}

/// Formats a float for CSV output with a fixed number of digits.
pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.9}")
}
