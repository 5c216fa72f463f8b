//! The improvement loop on either the toy classification lab or a scripted score sequence.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RunReport, Scenario, ScenarioError};
use crate::autoloop::{
    run_autoresearch, AutoloopOutcome, AutoloopParams, ConvergenceParams, Lab, ScriptedLab, ToyLab,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabKind {
    Toy,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoloopSection {
    pub lab: LabKind,
    pub epsilon: f64,
    pub patience: usize,
    pub max_versions: usize,
    pub max_strategies: usize,
    /// Toy lab: training rows (evaluation and holdout get half each) and label noise.
    pub rows: usize,
    pub noise: f64,
    /// Scripted lab: best score reached at each version, and the baseline score.
    pub scores: Vec<f64>,
    pub baseline_score: f64,
}

impl Default for AutoloopSection {
    fn default() -> Self {
        Self {
            lab: LabKind::Toy,
            epsilon: 0.005,
            patience: 2,
            max_versions: 20,
            max_strategies: 8,
            rows: 600,
            noise: 0.03,
            scores: Vec::new(),
            baseline_score: 0.0,
        }
    }
}

fn report<M>(scenario: &Scenario, out: &AutoloopOutcome<M>, extra: serde_json::Value) -> RunReport {
    let mut r = RunReport::new(&scenario.name);
    r.file("history.csv", out.history_csv());
    r.file(
        "versions.jsonl",
        out.history.iter().map(|v| v.to_json_line() + "\n").collect(),
    );
    r.file(
        "knowledge.jsonl",
        out.knowledge
            .entries()
            .iter()
            .map(|i| serde_json::to_string(i).expect("insight serializes") + "\n")
            .collect(),
    );
    let last = out.history.last();
    let mut summary = json!({
        "name": scenario.name,
        "seed": scenario.seed,
        "stop": out.stop,
        "versions": out.history.len(),
        "baseline_score": out.baseline_score,
        "best_score": out.best_score,
        "best_family": last.map(|v| v.best_family.clone()),
        "holdout_score": last.map(|v| v.holdout_score),
        "knowledge_entries": out.knowledge.len(),
        "violations": [],
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
        obj.extend(more);
    }
    r.finish(summary)
}

fn monotone<M>(out: &AutoloopOutcome<M>) -> Vec<String> {
    let scores = out.best_scores();
    let mut v = Vec::new();
    if scores.windows(2).any(|w| w[1] < w[0]) || scores.first().is_some_and(|s| *s < out.baseline_score) {
        v.push("best score decreased between versions".to_string());
    }
    v
}

pub fn run_autoloop(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let cfg = scenario
        .autoloop
        .as_ref()
        .ok_or_else(|| ScenarioError::Invalid("missing [autoloop] section".into()))?;
    let params = AutoloopParams {
        convergence: ConvergenceParams::new(cfg.epsilon, cfg.patience).map_err(ScenarioError::invalid)?,
        max_versions: cfg.max_versions,
        max_strategies: cfg.max_strategies,
    };
    match cfg.lab {
        LabKind::Toy => {
            if cfg.rows < 8 {
                return Err(ScenarioError::Invalid("toy lab needs at least 8 rows".into()));
            }
            let mut lab = ToyLab::pivot(scenario.seed, cfg.rows, cfg.noise);
            let out = run_autoresearch(&mut lab, &params).map_err(ScenarioError::invalid)?;
            let families: Vec<String> = out.history.iter().map(|v| v.best_family.clone()).collect();
            let baseline = lab.baseline();
            let baseline_family = lab.family(&baseline);
            let mut r = report(
                scenario,
                &out,
                json!({"baseline_family": baseline_family, "family_by_version": families}),
            );
            r.violations = monotone(&out);
            Ok(r)
        }
        LabKind::Scripted => {
            if cfg.scores.is_empty() {
                return Err(ScenarioError::Invalid("scripted lab needs scores".into()));
            }
            let mut lab = ScriptedLab {
                scores: cfg.scores.clone(),
                baseline: cfg.baseline_score,
            };
            let out = run_autoresearch(&mut lab, &params).map_err(ScenarioError::invalid)?;
            let mut r = report(scenario, &out, json!({}));
            r.violations = monotone(&out);
            Ok(r)
        }
    }
}
