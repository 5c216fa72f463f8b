//! Error-driven research loop.
//!
//! Each version analyses the failures of the current best model, asks the lab for a set of
//! strategies aimed at those failures, sweeps their configurations, keeps the best model
//! seen so far and records an insight. The loop stops once `p` consecutive versions each
//! improve the best score by less than `epsilon`, when no untried configuration remains,
//! or at the version budget.

mod toy;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use toy::{Dataset, ToyConfig, ToyLab, ToyModel, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutoloopError {
    #[error("no strategy offers any configuration")]
    EmptyConfigSpace,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    pub epsilon: f64,
    pub patience: usize,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            patience: 2,
        }
    }
}

impl ConvergenceParams {
    pub fn new(epsilon: f64, patience: usize) -> Result<Self, AutoloopError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) || patience == 0 {
            return Err(AutoloopError::InvalidParams(format!(
                "need epsilon > 0 and patience >= 1, got {epsilon} and {patience}"
            )));
        }
        Ok(Self { epsilon, patience })
    }
}

/// True iff each of the last `patience` score deltas is below `epsilon`.
pub fn convergence_check(scores: &[f64], params: &ConvergenceParams) -> bool {
    if scores.len() < params.patience + 1 {
        return false;
    }
    scores
        .windows(2)
        .rev()
        .take(params.patience)
        .all(|w| w[1] - w[0] < params.epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub group: String,
    pub count: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePattern {
    None,
    Underfit,
    GroupConcentrated,
    Residual,
}

impl fmt::Display for FailurePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailurePattern::None => "none",
            FailurePattern::Underfit => "underfit",
            FailurePattern::GroupConcentrated => "group_concentrated",
            FailurePattern::Residual => "residual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureModeReport {
    /// Per-example misclassification flags on the evaluation set.
    pub errors: Vec<bool>,
    pub groups: Vec<GroupStat>,
    pub error_rate: f64,
}

impl FailureModeReport {
    pub fn from_flags(errors: Vec<bool>, group_of: &[String]) -> Self {
        let mut groups: Vec<GroupStat> = Vec::new();
        for (e, g) in errors.iter().zip(group_of) {
            let stat = match groups.iter_mut().find(|s| &s.group == g) {
                Some(s) => s,
                None => {
                    groups.push(GroupStat {
                        group: g.clone(),
                        count: 0,
                        errors: 0,
                        error_rate: 0.0,
                    });
                    groups.last_mut().expect("just pushed")
                }
            };
            stat.count += 1;
            stat.errors += usize::from(*e);
        }
        for g in &mut groups {
            g.error_rate = g.errors as f64 / g.count as f64;
        }
        groups.sort_by(|a, b| a.group.cmp(&b.group));
        let n = errors.len().max(1);
        let error_rate = errors.iter().filter(|e| **e).count() as f64 / n as f64;
        Self {
            errors,
            groups,
            error_rate,
        }
    }

    pub fn failures(&self) -> usize {
        self.errors.iter().filter(|e| **e).count()
    }

    /// Error-rate spread above 0.2 between groups is concentrated; otherwise an overall
    /// rate above 0.2 is underfitting, and anything else is residual.
    pub fn pattern(&self) -> FailurePattern {
        if self.failures() == 0 {
            return FailurePattern::None;
        }
        let rates = self.groups.iter().map(|g| g.error_rate);
        let hi = rates.clone().fold(f64::MIN, f64::max);
        let lo = rates.fold(f64::MAX, f64::min);
        if hi - lo > 0.2 {
            FailurePattern::GroupConcentrated
        } else if self.error_rate > 0.2 {
            FailurePattern::Underfit
        } else {
            FailurePattern::Residual
        }
    }

    pub fn worst_group(&self) -> Option<&GroupStat> {
        self.groups
            .iter()
            .max_by(|a, b| a.error_rate.total_cmp(&b.error_rate).then_with(|| b.group.cmp(&a.group)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy<C> {
    pub name: String,
    pub configs: Vec<C>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Insight {
    pub version: usize,
    pub pattern: FailurePattern,
    pub strategy: String,
    pub config: String,
    pub score: f64,
    pub margin: f64,
    pub adopted: bool,
}

/// Append-only record of insights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<Insight>,
}

impl KnowledgeBase {
    pub fn push(&mut self, insight: Insight) {
        self.entries.push(insight);
    }

    pub fn entries(&self) -> &[Insight] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The pluggable parts of the loop.
pub trait Lab {
    type Model: Clone;
    type Config: Clone + fmt::Debug;

    fn baseline(&mut self) -> Self::Model;
    fn error_analysis(&self, model: &Self::Model) -> FailureModeReport;
    fn design_strategies(
        &self,
        report: &FailureModeReport,
        knowledge: &KnowledgeBase,
    ) -> Vec<Strategy<Self::Config>>;
    fn train(&mut self, strategy: &str, config: &Self::Config) -> Self::Model;
    /// Score on the evaluation set used for selection.
    fn score(&self, model: &Self::Model) -> f64;
    /// Score on the reserved split never used for selection.
    fn holdout_score(&self, model: &Self::Model) -> f64;
    fn family(&self, model: &Self::Model) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoloopParams {
    pub convergence: ConvergenceParams,
    pub max_versions: usize,
    pub max_strategies: usize,
}

impl Default for AutoloopParams {
    fn default() -> Self {
        Self {
            convergence: ConvergenceParams::default(),
            max_versions: 20,
            max_strategies: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub strategy: String,
    pub config: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VersionRecord {
    pub version: usize,
    pub pattern: FailurePattern,
    pub strategies: Vec<String>,
    pub trials: Vec<Trial>,
    pub version_best: Trial,
    pub best_score: f64,
    pub best_family: String,
    pub holdout_score: f64,
    pub knowledge_size: usize,
}

impl VersionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("version record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Exhausted,
    Budget,
}

#[derive(Debug, Clone)]
pub struct AutoloopOutcome<M> {
    pub best: M,
    pub best_score: f64,
    pub baseline_score: f64,
    pub knowledge: KnowledgeBase,
    pub history: Vec<VersionRecord>,
    pub stop: StopReason,
}

impl<M> AutoloopOutcome<M> {
    pub fn best_scores(&self) -> Vec<f64> {
        self.history.iter().map(|v| v.best_score).collect()
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("version,pattern,strategies,trials,version_best_strategy,version_best_score,best_score,best_family,holdout_score\n");
        for v in &self.history {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{},{:.6}\n",
                v.version,
                v.pattern,
                v.strategies.len(),
                v.trials.len(),
                v.version_best.strategy,
                v.version_best.score,
                v.best_score,
                v.best_family,
                v.holdout_score
            ));
        }
        s
    }
}

pub fn run_autoresearch<L: Lab>(
    lab: &mut L,
    params: &AutoloopParams,
) -> Result<AutoloopOutcome<L::Model>, AutoloopError> {
    if params.max_versions == 0 || params.max_strategies == 0 {
        return Err(AutoloopError::InvalidParams(
            "max_versions and max_strategies must be positive".into(),
        ));
    }
    ConvergenceParams::new(params.convergence.epsilon, params.convergence.patience)?;

    let mut best = lab.baseline();
    let baseline_score = lab.score(&best);
    let mut best_score = baseline_score;
    let mut knowledge = KnowledgeBase::default();
    let mut history: Vec<VersionRecord> = Vec::new();
    let mut tried: BTreeSet<(String, String)> = BTreeSet::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut stop = StopReason::Budget;

    for version in 1..=params.max_versions {
        let report = lab.error_analysis(&best);
        let pattern = report.pattern();
        let mut strategies = lab.design_strategies(&report, &knowledge);
        strategies.truncate(params.max_strategies);

        let mut trials = Vec::new();
        let mut version_best: Option<(Trial, L::Model)> = None;
        for s in &strategies {
            for c in &s.configs {
                let key = (s.name.clone(), format!("{c:?}"));
                if !tried.insert(key.clone()) {
                    continue;
                }
                let model = lab.train(&s.name, c);
                let trial = Trial {
                    strategy: key.0,
                    config: key.1,
                    score: lab.score(&model),
                };
                if version_best.as_ref().is_none_or(|(b, _)| trial.score > b.score) {
                    version_best = Some((trial.clone(), model));
                }
                trials.push(trial);
            }
        }
        let Some((vbest, vmodel)) = version_best else {
            if version == 1 {
                return Err(AutoloopError::EmptyConfigSpace);
            }
            stop = StopReason::Exhausted;
            break;
        };
        let margin = vbest.score - best_score;
        let adopted = vbest.score > best_score;
        if adopted {
            best = vmodel;
            best_score = vbest.score;
        }
        knowledge.push(Insight {
            version,
            pattern,
            strategy: vbest.strategy.clone(),
            config: vbest.config.clone(),
            score: vbest.score,
            margin,
            adopted,
        });
        scores.push(best_score);
        history.push(VersionRecord {
            version,
            pattern,
            strategies: strategies.iter().map(|s| s.name.clone()).collect(),
            trials,
            version_best: vbest,
            best_score,
            best_family: lab.family(&best),
            holdout_score: lab.holdout_score(&best),
            knowledge_size: knowledge.len(),
        });
        if convergence_check(&scores, &params.convergence) {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(AutoloopOutcome {
        best,
        best_score,
        baseline_score,
        knowledge,
        history,
        stop,
    })
}

/// A lab that replays a fixed score per version; for exercising the stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedLab {
    pub scores: Vec<f64>,
    pub baseline: f64,
}

impl ScriptedLab {
    pub fn new(scores: Vec<f64>) -> Self {
        Self {
            scores,
            baseline: 0.0,
        }
    }
}

impl Lab for ScriptedLab {
    type Model = (usize, f64);
    type Config = usize;

    fn baseline(&mut self) -> Self::Model {
        (0, self.baseline)
    }

    fn error_analysis(&self, model: &Self::Model) -> FailureModeReport {
        let wrong = ((1.0 - model.1).clamp(0.0, 1.0) * 100.0).round() as usize;
        let flags: Vec<bool> = (0..100).map(|i| i < wrong).collect();
        FailureModeReport::from_flags(flags, &vec!["all".to_string(); 100])
    }

    fn design_strategies(&self, _: &FailureModeReport, knowledge: &KnowledgeBase) -> Vec<Strategy<usize>> {
        let next = knowledge.len() + 1;
        if next > self.scores.len() {
            return Vec::new();
        }
        vec![Strategy {
            name: format!("scripted-{next}"),
            configs: vec![next],
        }]
    }

    fn train(&mut self, _: &str, config: &usize) -> Self::Model {
        (*config, self.scores[*config - 1])
    }

    fn score(&self, model: &Self::Model) -> f64 {
        model.1
    }

    fn holdout_score(&self, model: &Self::Model) -> f64 {
        model.1
    }

    fn family(&self, model: &Self::Model) -> String {
        format!("scripted-{}", model.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule_examples() {
        let p = ConvergenceParams::new(0.001, 2).unwrap();
        assert!(convergence_check(&[0.95, 0.9505, 0.9508], &p));
        assert!(!convergence_check(&[0.95, 0.9505, 0.9525], &p));
        assert!(!convergence_check(&[0.95, 0.9505], &p));
        assert!(!convergence_check(&[0.95], &p));
        assert!(ConvergenceParams::new(0.0, 2).is_err());
        assert!(ConvergenceParams::new(0.1, 0).is_err());
    }

    #[test]
    fn scripted_run_stops_after_version_four() {
        let mut lab = ScriptedLab::new(vec![0.90, 0.95, 0.9505, 0.9508, 0.99, 0.999]);
        let params = AutoloopParams {
            convergence: ConvergenceParams::new(0.001, 2).unwrap(),
            ..Default::default()
        };
        let out = run_autoresearch(&mut lab, &params).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.best_scores(), [0.90, 0.95, 0.9505, 0.9508]);
    }

    #[test]
    fn single_config_runs_one_version() {
        let mut lab = ScriptedLab::new(vec![0.7]);
        let out = run_autoresearch(&mut lab, &AutoloopParams::default()).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.stop, StopReason::Exhausted);
        assert_eq!(out.best.1, 0.7);
    }

    #[test]
    fn empty_bank_is_an_error() {
        let mut lab = ScriptedLab::new(vec![]);
        assert_eq!(
            run_autoresearch(&mut lab, &AutoloopParams::default()).unwrap_err(),
            AutoloopError::EmptyConfigSpace
        );
    }

    #[test]
    fn best_score_never_drops() {
        let mut lab = ScriptedLab::new(vec![0.5, 0.8, 0.6, 0.9, 0.1, 0.95]);
        let out = run_autoresearch(&mut lab, &AutoloopParams::default()).unwrap();
        let b = out.best_scores();
        assert!(b.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(out.best.1, 0.95);
        assert!(out.history.windows(2).all(|w| w[1].knowledge_size > w[0].knowledge_size));
    }

    #[test]
    fn report_patterns() {
        let groups: Vec<String> = (0..100).map(|i| if i < 50 { "a" } else { "b" }.to_string()).collect();
        let none = FailureModeReport::from_flags(vec![false; 100], &groups);
        assert_eq!(none.pattern(), FailurePattern::None);
        let uniform = FailureModeReport::from_flags((0..100).map(|i| i % 2 == 0).collect(), &groups);
        assert_eq!(uniform.pattern(), FailurePattern::Underfit);
        let conc = FailureModeReport::from_flags((0..100).map(|i| i >= 60).collect(), &groups);
        assert_eq!(conc.pattern(), FailurePattern::GroupConcentrated);
        assert_eq!(conc.worst_group().unwrap().group, "b");
        let small = FailureModeReport::from_flags((0..100).map(|i| i % 20 == 0).collect(), &groups);
        assert_eq!(small.pattern(), FailurePattern::Residual);
    }
}
