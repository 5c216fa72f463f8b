//! Synthetic classification lab with a linear family and a tree family.
//!
//! Labels follow `x0 > 0` where `x2 <= 0` and `x0 * x1 > 0` elsewhere, with a little
//! label noise. Linear models get the first half right and the second half at chance,
//! so their errors concentrate in one group; trees fit both halves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FailureModeReport, FailurePattern, KnowledgeBase, Lab, Strategy};
use crate::quantcore::{inner_step_mut, loss_and_gradient, AdamWConfig, InnerOptimizerState, LossKind, Params, ToyTask};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample<R: Rng>(rng: &mut R, n: usize, noise: f64) -> Self {
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let clean = if x[2] <= 0.0 { x[0] > 0.0 } else { x[0] * x[1] > 0.0 };
            labels.push(clean ^ rng.gen_bool(noise));
            features.push(x);
        }
        Self { features, labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tree {
    Leaf(bool),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> bool {
        match self {
            Tree::Leaf(v) => *v,
            Tree::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// CART with Gini impurity; ties keep the first candidate in (feature, threshold) order.
    pub fn fit(data: &Dataset, max_depth: usize, min_leaf: usize) -> Self {
        let idx: Vec<usize> = (0..data.len()).collect();
        grow(data, &idx, max_depth, min_leaf.max(1))
    }
}

fn majority(data: &Dataset, idx: &[usize]) -> bool {
    let pos = idx.iter().filter(|&&i| data.labels[i]).count();
    2 * pos > idx.len()
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn grow(data: &Dataset, idx: &[usize], depth: usize, min_leaf: usize) -> Tree {
    let pos = idx.iter().filter(|&&i| data.labels[i]).count();
    if depth == 0 || pos == 0 || pos == idx.len() || idx.len() < 2 * min_leaf {
        return Tree::Leaf(majority(data, idx));
    }
    let n = idx.len();
    let parent = gini(pos, n);
    let mut best: Option<(f64, usize, f64)> = None;
    let cols = data.features[idx[0]].len();
    for f in 0..cols {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| data.features[a][f].total_cmp(&data.features[b][f]).then(a.cmp(&b)));
        let mut left_pos = 0;
        for split in 1..n {
            left_pos += usize::from(data.labels[order[split - 1]]);
            let (lo, hi) = (data.features[order[split - 1]][f], data.features[order[split]][f]);
            if lo == hi || split < min_leaf || n - split < min_leaf {
                continue;
            }
            let impurity = (split as f64 * gini(left_pos, split)
                + (n - split) as f64 * gini(pos - left_pos, n - split))
                / n as f64;
            if best.is_none_or(|(b, _, _)| impurity < b) {
                best = Some((impurity, f, (lo + hi) / 2.0));
            }
        }
    }
    match best {
        Some((impurity, feature, threshold)) if impurity < parent => {
            let (l, r): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| data.features[i][feature] <= threshold);
            Tree::Split {
                feature,
                threshold,
                left: Box::new(grow(data, &l, depth - 1, min_leaf)),
                right: Box::new(grow(data, &r, depth - 1, min_leaf)),
            }
        }
        _ => Tree::Leaf(majority(data, idx)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyConfig {
    Linear { lr: f64, steps: usize, weight_decay: f64 },
    GroupLinear { lr: f64, steps: usize },
    Tree { max_depth: usize, min_leaf: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyModel {
    Constant(bool),
    Linear(Params<f64>),
    GroupLinear { feature: usize, low: Params<f64>, high: Params<f64> },
    Tree(Tree),
}

fn with_bias(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

fn linear_predict(w: &Params<f64>, x: &[f64]) -> bool {
    with_bias(x).iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() > 0.0
}

fn fit_logistic(data: &Dataset, lr: f64, steps: usize, weight_decay: f64) -> Params<f64> {
    let cols = data.features.first().map_or(0, Vec::len) + 1;
    if data.is_empty() {
        return Params::zeros(cols);
    }
    let task = ToyTask::new(
        data.features.iter().map(|x| with_bias(x)).collect(),
        data.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect(),
        LossKind::Logistic,
    )
    .expect("rectangular data");
    let mut w = Params::zeros(cols);
    let mut opt = InnerOptimizerState::new(
        cols,
        AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        },
    );
    for _ in 0..steps {
        let (_, g) = loss_and_gradient(&w, &task).expect("shapes match");
        inner_step_mut(&mut w, &g, &mut opt).expect("shapes match");
    }
    w
}

impl ToyModel {
    pub fn predict(&self, x: &[f64]) -> bool {
        match self {
            ToyModel::Constant(v) => *v,
            ToyModel::Linear(w) => linear_predict(w, x),
            ToyModel::GroupLinear { feature, low, high } => {
                linear_predict(if x[*feature] <= 0.0 { low } else { high }, x)
            }
            ToyModel::Tree(t) => t.predict(x),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ToyModel::Constant(_) => "constant",
            ToyModel::Linear(_) | ToyModel::GroupLinear { .. } => "linear",
            ToyModel::Tree(_) => "tree",
        }
    }
}

pub fn balanced_accuracy(model: &ToyModel, data: &Dataset) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let yhat = model.predict(x);
        if y {
            p += 1;
            tp += usize::from(yhat);
        } else {
            n += 1;
            tn += usize::from(!yhat);
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (rate(tp, p) + rate(tn, n)) / 2.0
}

/// Train / evaluation / holdout splits drawn once from a seed.
#[derive(Debug, Clone)]
pub struct ToyLab {
    pub train: Dataset,
    pub eval: Dataset,
    pub holdout: Dataset,
    pub bucket_feature: usize,
}

impl ToyLab {
    pub fn pivot(seed: u64, rows: usize, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = Dataset::sample(&mut rng, rows, noise);
        let eval = Dataset::sample(&mut rng, rows / 2, noise);
        let holdout = Dataset::sample(&mut rng, rows / 2, noise);
        Self {
            train,
            eval,
            holdout,
            bucket_feature: 2,
        }
    }

    fn group(&self, x: &[f64]) -> String {
        let f = self.bucket_feature;
        if x[f] <= 0.0 {
            format!("x{f}<=0")
        } else {
            format!("x{f}>0")
        }
    }
}

impl Lab for ToyLab {
    type Model = ToyModel;
    type Config = ToyConfig;

    fn baseline(&mut self) -> ToyModel {
        ToyModel::Constant(majority(&self.train, &(0..self.train.len()).collect::<Vec<_>>()))
    }

    fn error_analysis(&self, model: &ToyModel) -> FailureModeReport {
        let flags = self
            .eval
            .features
            .iter()
            .zip(&self.eval.labels)
            .map(|(x, &y)| model.predict(x) != y)
            .collect();
        let groups: Vec<String> = self.eval.features.iter().map(|x| self.group(x)).collect();
        FailureModeReport::from_flags(flags, &groups)
    }

    fn design_strategies(&self, report: &FailureModeReport, _: &KnowledgeBase) -> Vec<Strategy<ToyConfig>> {
        let lin = |lr, steps, weight_decay| ToyConfig::Linear { lr, steps, weight_decay };
        let tree = |max_depth, min_leaf| ToyConfig::Tree { max_depth, min_leaf };
        let s = |name: &str, configs: Vec<ToyConfig>| Strategy {
            name: name.to_string(),
            configs,
        };
        match report.pattern() {
            FailurePattern::None => Vec::new(),
            FailurePattern::Underfit => vec![
                s("logistic", vec![lin(0.05, 300, 0.0), lin(0.1, 300, 0.0)]),
                s("logistic-l2", vec![lin(0.05, 300, 0.1), lin(0.05, 300, 0.5)]),
                s("logistic-long", vec![lin(0.02, 1500, 0.0)]),
            ],
            FailurePattern::GroupConcentrated => vec![
                s("per-group-logistic", vec![ToyConfig::GroupLinear { lr: 0.05, steps: 300 }]),
                s("tree-shallow", vec![tree(2, 5), tree(3, 5)]),
                s("tree-deep", vec![tree(5, 5), tree(6, 5)]),
            ],
            FailurePattern::Residual => vec![
                s("tree-pruned", vec![tree(4, 10), tree(5, 20), tree(6, 10)]),
                s("tree-deep", vec![tree(7, 5), tree(8, 3)]),
                s("tree-fine", vec![tree(10, 1)]),
            ],
        }
    }

    fn train(&mut self, _: &str, config: &ToyConfig) -> ToyModel {
        match *config {
            ToyConfig::Linear { lr, steps, weight_decay } => {
                ToyModel::Linear(fit_logistic(&self.train, lr, steps, weight_decay))
            }
            ToyConfig::GroupLinear { lr, steps } => {
                let f = self.bucket_feature;
                let split = |low: bool| {
                    let (features, labels) = self
                        .train
                        .features
                        .iter()
                        .zip(&self.train.labels)
                        .filter(|(x, _)| (x[f] <= 0.0) == low)
                        .map(|(x, y)| (x.clone(), *y))
                        .unzip();
                    Dataset { features, labels }
                };
                ToyModel::GroupLinear {
                    feature: f,
                    low: fit_logistic(&split(true), lr, steps, 0.0),
                    high: fit_logistic(&split(false), lr, steps, 0.0),
                }
            }
            ToyConfig::Tree { max_depth, min_leaf } => ToyModel::Tree(Tree::fit(&self.train, max_depth, min_leaf)),
        }
    }

    fn score(&self, model: &ToyModel) -> f64 {
        balanced_accuracy(model, &self.eval)
    }

    fn holdout_score(&self, model: &ToyModel) -> f64 {
        balanced_accuracy(model, &self.holdout)
    }

    fn family(&self, model: &ToyModel) -> String {
        model.family().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoloop::{run_autoresearch, AutoloopParams, ConvergenceParams};

    #[test]
    fn tree_fits_separable_data() {
        let data = Dataset {
            features: (0..20).map(|i| vec![i as f64]).collect(),
            labels: (0..20).map(|i| i >= 7).collect(),
        };
        let t = Tree::fit(&data, 3, 1);
        assert_eq!(t.depth(), 1);
        assert!(data.features.iter().zip(&data.labels).all(|(x, &y)| t.predict(x) == y));
    }

    #[test]
    fn constant_predictor_errs_evenly() {
        let lab = ToyLab::pivot(11, 4000, 0.0);
        let r = lab.error_analysis(&ToyModel::Constant(true));
        assert_eq!(r.groups.len(), 2);
        for g in &r.groups {
            // 50% with a 4-sigma binomial band
            let band = 4.0 * (0.25 / g.count as f64).sqrt();
            assert!((g.error_rate - 0.5).abs() < band, "{g:?}");
        }
        assert_eq!(r, lab.error_analysis(&ToyModel::Constant(true)));
    }

    #[test]
    fn perfect_model_has_no_failures() {
        let mut lab = ToyLab::pivot(5, 400, 0.0);
        lab.eval = Dataset {
            features: vec![vec![1.0, 1.0, -1.0], vec![-1.0, 1.0, -1.0]],
            labels: vec![true, false],
        };
        let r = lab.error_analysis(&ToyModel::Linear(Params::new(vec![1.0, 0.0, 0.0, 0.0])));
        assert_eq!(r.failures(), 0);
        assert_eq!(r.pattern(), FailurePattern::None);
    }

    #[test]
    fn pivot_from_linear_to_tree() {
        let mut lab = ToyLab::pivot(1, 600, 0.03);
        let params = AutoloopParams {
            convergence: ConvergenceParams::new(0.005, 2).unwrap(),
            max_versions: 10,
            max_strategies: 8,
        };
        let out = run_autoresearch(&mut lab, &params).unwrap();
        let fams: Vec<&str> = out.history.iter().map(|v| v.best_family.as_str()).collect();
        assert_eq!(fams[0], "linear");
        assert!(fams.contains(&"tree"), "{fams:?}");
        assert_eq!(out.best.family(), "tree");
        assert!(out.best_score > 0.85);
        assert!(out.history.iter().all(|v| (3..=8).contains(&v.strategies.len())));
    }
}
