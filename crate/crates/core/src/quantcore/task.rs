//! Linear toy tasks with exact analytic gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::Params;
use super::QuantError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1 / 2n) * sum (x.w - y)^2`
    SquaredError,
    /// `(1 / n) * sum log(1 + exp(x.w)) - y * x.w`, labels in {0, 1}
    Logistic,
}

/// Row-major design matrix plus targets for a linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask<T> {
    inputs: Vec<T>,
    cols: usize,
    targets: Vec<T>,
    pub loss: LossKind,
}

impl<T: Scalar> ToyTask<T> {
    pub fn new(
        inputs: Vec<Vec<T>>,
        targets: Vec<T>,
        loss: LossKind,
    ) -> Result<Self, QuantError> {
        if inputs.len() != targets.len() {
            return Err(QuantError::RowMismatch {
                rows: inputs.len(),
                targets: targets.len(),
            });
        }
        let cols = inputs.first().map_or(0, Vec::len);
        if let Some(bad) = inputs.iter().find(|r| r.len() != cols) {
            return Err(QuantError::DimensionMismatch {
                expected: cols,
                actual: bad.len(),
            });
        }
        Ok(Self {
            inputs: inputs.into_iter().flatten().collect(),
            cols,
            targets,
            loss,
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.inputs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn predict_raw(&self, w: &Params<T>, i: usize) -> T {
        self.row(i)
            .iter()
            .zip(w.iter())
            .fold(T::zero(), |acc, (x, w)| acc + *x * *w)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(idx.len() * self.cols);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Self {
            inputs,
            cols: self.cols,
            targets,
            loss: self.loss,
        }
    }

    /// Concatenates tasks with identical width and loss.
    pub fn concat(parts: &[Self]) -> Result<Self, QuantError> {
        let first = parts.first().ok_or(QuantError::Empty)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for p in parts {
            if p.cols != first.cols {
                return Err(QuantError::DimensionMismatch {
                    expected: first.cols,
                    actual: p.cols,
                });
            }
            inputs.extend_from_slice(&p.inputs);
            targets.extend_from_slice(&p.targets);
        }
        Ok(Self {
            inputs,
            cols: first.cols,
            targets,
            loss: first.loss,
        })
    }

    pub fn with_targets(&self, targets: Vec<T>) -> Result<Self, QuantError> {
        if targets.len() != self.rows() {
            return Err(QuantError::RowMismatch {
                rows: self.rows(),
                targets: targets.len(),
            });
        }
        Ok(Self {
            targets,
            ..self.clone()
        })
    }

    /// Synthetic linear regression: `y = X w* + noise`, features ~ N(0, 1).
    /// Returns the task and the generating weights.
    pub fn synthetic_regression<R: Rng>(
        rng: &mut R,
        rows: usize,
        cols: usize,
        noise: f64,
    ) -> (Self, Params<T>) {
        let truth: Vec<T> = (0..cols).map(|_| T::lit(standard_normal(rng))).collect();
        let mut inputs = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        for _ in 0..rows {
            let x: Vec<T> = (0..cols).map(|_| T::lit(standard_normal(rng))).collect();
            let y = x
                .iter()
                .zip(&truth)
                .fold(T::zero(), |acc, (a, b)| acc + *a * *b)
                + T::lit(noise * standard_normal(rng));
            inputs.push(x);
            targets.push(y);
        }
        let task = Self::new(inputs, targets, LossKind::SquaredError).expect("consistent shape");
        (task, Params::new(truth))
    }

    /// Synthetic logistic task with labels drawn from the model's own probabilities.
    pub fn synthetic_logistic<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> (Self, Params<T>) {
        let truth: Vec<f64> = (0..cols).map(|_| standard_normal(rng)).collect();
        let mut inputs = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        for _ in 0..rows {
            let x: Vec<f64> = (0..cols).map(|_| standard_normal(rng)).collect();
            let z: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let y = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
            inputs.push(x.into_iter().map(T::lit).collect());
            targets.push(T::lit(y));
        }
        let task = Self::new(inputs, targets, LossKind::Logistic).expect("consistent shape");
        (task, Params::new(truth.into_iter().map(T::lit).collect()))
    }
}

/// Numerically stable `log(1 + exp(z))`.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn loss<T: Scalar>(w: &Params<T>, task: &ToyTask<T>) -> Result<T, QuantError> {
    loss_and_gradient(w, task).map(|(l, _)| l)
}

pub fn loss_and_gradient<T: Scalar>(
    w: &Params<T>,
    task: &ToyTask<T>,
) -> Result<(T, Params<T>), QuantError> {
    if w.len() != task.cols {
        return Err(QuantError::DimensionMismatch {
            expected: task.cols,
            actual: w.len(),
        });
    }
    let n = task.rows();
    if n == 0 {
        return Err(QuantError::Empty);
    }
    let nf = T::lit(n as f64);
    let mut grad = Params::zeros(w.len());
    let mut total = T::zero();
    for i in 0..n {
        let z = task.predict_raw(w, i);
        let y = task.targets[i];
        let residual = match task.loss {
            LossKind::SquaredError => {
                let r = z - y;
                total += r * r / T::lit(2.0);
                r
            }
            LossKind::Logistic => {
                total += softplus(z) - y * z;
                sigmoid(z) - y
            }
        };
        for (g, x) in grad.as_mut_slice().iter_mut().zip(task.row(i)) {
            *g += residual * *x;
        }
    }
    for g in grad.as_mut_slice() {
        *g /= nf;
    }
    Ok((total / nf, grad))
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Central finite differences, h = 1e-5.
    fn fd_gradient(w: &Params<f64>, task: &ToyTask<f64>) -> Vec<f64> {
        let h = 1e-5;
        (0..w.len())
            .map(|j| {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus[j] += h;
                minus[j] -= h;
                (loss(&plus, task).unwrap() - loss(&minus, task).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (reg, _) = ToyTask::<f64>::synthetic_regression(&mut rng, 40, 5, 0.3);
            let (log, _) = ToyTask::<f64>::synthetic_logistic(&mut rng, 40, 5);
            for task in [reg, log] {
                let w = Params::new((0..5).map(|_| standard_normal(&mut rng)).collect());
                let (_, g) = loss_and_gradient(&w, &task).unwrap();
                for (a, b) in g.iter().zip(fd_gradient(&w, &task)) {
                    assert!(rel_err(*a, b) < 1e-5, "seed {seed}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn least_squares_solution_is_stationary() {
        // 2x2 system solved in closed form; square X makes the residual vanish.
        let task = ToyTask::new(
            vec![vec![2.0f64, 1.0], vec![1.0, 3.0], vec![0.0, 0.0]],
            vec![5.0, 10.0, 0.0],
            LossKind::SquaredError,
        )
        .unwrap();
        let w = Params::new(vec![1.0, 3.0]);
        let (l, g) = loss_and_gradient(&w, &task).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.norm_inf() <= 1e-9);
    }

    #[test]
    fn doubling_targets_doubles_gradient_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (task, _) = ToyTask::<f64>::synthetic_regression(&mut rng, 30, 4, 0.1);
        let doubled = task
            .with_targets(task.targets().iter().map(|y| 2.0 * y).collect())
            .unwrap();
        let w = Params::zeros(4);
        let (_, g1) = loss_and_gradient(&w, &task).unwrap();
        let (_, g2) = loss_and_gradient(&w, &doubled).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let task = ToyTask::new(vec![vec![1.0, 2.0]], vec![1.0], LossKind::SquaredError).unwrap();
        let err = loss_and_gradient(&Params::zeros(3), &task).unwrap_err();
        assert!(matches!(err, QuantError::DimensionMismatch { expected: 2, actual: 3 }));
        assert!(ToyTask::new(vec![vec![1.0f64]], vec![], LossKind::Logistic).is_err());
    }
}
