//! One-vs-rest perceptron with explicit, library-independent defaults.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_epochs: usize,
    pub tol: f64,
    pub no_change_epochs: usize,
    pub learning_rate: f64,
    pub shuffle_each_epoch: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            tol: 1e-3,
            no_change_epochs: 5,
            learning_rate: 1.0,
            shuffle_each_epoch: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.max_epochs == 0 {
            return Err(ProbeError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(ProbeError::Config(format!("tol must be >= 0, got {}", self.tol)));
        }
        if self.no_change_epochs == 0 {
            return Err(ProbeError::Config("no_change_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProbeError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// Distinct training labels in ascending order; head `c` scores `classes[c]`.
    pub classes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub epochs_run: usize,
    /// Every head met the stopping rule before `max_epochs`.
    pub converged: bool,
}

#[inline]
fn score(w: &[f64], b: f64, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for (wk, xk) in w.iter().zip(x) {
        s += wk * xk;
    }
    s + b
}

fn check_rows<R: AsRef<[f64]>>(x: &[R], dim: usize) -> Result<(), ProbeError> {
    for (i, row) in x.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(ProbeError::DimMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite(i));
        }
    }
    Ok(())
}

/// Train one perceptron head per class on a shared per-epoch sample order.
///
/// A head updates on every sample it scores on the wrong side (or on the
/// boundary) and stops once its epoch loss has failed to drop below
/// `best_loss - tol` for `no_change_epochs` epochs in a row.
pub fn train_perceptron<R: AsRef<[f64]>>(x: &[R], y: &[usize], config: &ProbeConfig) -> Result<LinearProbe, ProbeError> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(ProbeError::Config(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let dim = x[0].as_ref().len();
    check_rows(x, dim)?;

    let k = classes.len();
    let eta = config.learning_rate;
    let targets: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect())
        .collect();
    let mut weights = vec![vec![0.0; dim]; k];
    let mut biases = vec![0.0; k];
    let mut best_loss = vec![f64::INFINITY; k];
    let mut stale = vec![0usize; k];
    let mut active = vec![true; k];

    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        epochs_run = epoch;
        for c in 0..k {
            if !active[c] {
                continue;
            }
            let (w, b, t) = (&mut weights[c], &mut biases[c], &targets[c]);
            let mut loss = 0.0;
            for &i in &order {
                let xi = x[i].as_ref();
                let margin = t[i] * score(w, *b, xi);
                if margin <= 0.0 {
                    loss -= margin;
                    let step = eta * t[i];
                    for (wk, xk) in w.iter_mut().zip(xi) {
                        *wk += step * xk;
                    }
                    *b += step;
                }
            }
            if loss > best_loss[c] - config.tol {
                stale[c] += 1;
            } else {
                stale[c] = 0;
            }
            if loss < best_loss[c] {
                best_loss[c] = loss;
            }
            if stale[c] >= config.no_change_epochs {
                active[c] = false;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
    }
    Ok(LinearProbe {
        classes,
        weights,
        biases,
        epochs_run,
        converged: !active.iter().any(|&a| a),
    })
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Highest-scoring class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ProbeError> {
        if x.len() != self.dim() {
            return Err(ProbeError::DimMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, (w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let s = score(w, b, x);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        Ok(self.classes[best])
    }

    /// Fraction of rows predicted exactly.
    pub fn evaluate<R: AsRef<[f64]>>(&self, x: &[R], y: &[usize]) -> Result<f64, ProbeError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(ProbeError::EmptySplit("evaluation set".into()));
        }
        let mut correct = 0usize;
        for (row, &label) in x.iter().zip(y) {
            correct += (self.predict(row.as_ref())? == label) as usize;
        }
        Ok(correct as f64 / x.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn separable_two_class() {
        let x = pts(&[[2.0, 1.0], [3.0, 2.0], [-1.0, -2.0], [-2.0, -1.0]]);
        let y = vec![1, 1, 0, 0];
        let probe = train_perceptron(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.evaluate(&x, &y).unwrap(), 1.0);
        assert!(probe.epochs_run <= 10, "epochs {}", probe.epochs_run);
        assert!(probe.converged);
    }

    #[test]
    fn xor_terminates_by_patience() {
        let x = pts(&[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        let y = vec![0, 0, 1, 1];
        let probe = train_perceptron(&x, &y, &ProbeConfig::default()).unwrap();
        assert!(probe.evaluate(&x, &y).unwrap() <= 0.75);
        assert!(probe.epochs_run < 1000);
        assert!(probe.converged);
    }

    #[test]
    fn single_class_and_bad_rows() {
        let x = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(
            train_perceptron(&x, &[3, 3], &ProbeConfig::default()),
            Err(ProbeError::SingleClass)
        ));
        let ragged = vec![vec![0.0, 1.0], vec![1.0]];
        assert!(matches!(
            train_perceptron(&ragged, &[0, 1], &ProbeConfig::default()),
            Err(ProbeError::DimMismatch { .. })
        ));
        let nan = vec![vec![0.0, 1.0], vec![f64::NAN, 1.0]];
        assert!(matches!(
            train_perceptron(&nan, &[0, 1], &ProbeConfig::default()),
            Err(ProbeError::NonFinite(1))
        ));
    }

    #[test]
    fn single_update_raises_score_by_norm_plus_one() {
        let x = vec![vec![0.5, -2.0, 1.5]];
        let y = vec![4];
        let mut probe = LinearProbe {
            classes: vec![4],
            weights: vec![vec![0.0; 3]],
            biases: vec![0.0],
            epochs_run: 0,
            converged: false,
        };
        // one manual epoch of the update rule with eta = 1, t = +1
        let before = score(&probe.weights[0], probe.biases[0], &x[0]);
        for (w, xk) in probe.weights[0].iter_mut().zip(&x[0]) {
            *w += xk;
        }
        probe.biases[0] += 1.0;
        let after = score(&probe.weights[0], probe.biases[0], &x[0]);
        let norm2: f64 = x[0].iter().map(|v| v * v).sum();
        assert!((after - before - (norm2 + 1.0)).abs() < 1e-12);
        assert_eq!(probe.predict(&x[0]).unwrap(), y[0]);
    }

    #[test]
    fn tie_rule_and_dominant_class() {
        let zero = LinearProbe {
            classes: vec![2, 5, 7],
            weights: vec![vec![0.0; 2]; 3],
            biases: vec![0.0; 3],
            epochs_run: 0,
            converged: true,
        };
        assert_eq!(zero.predict(&[3.0, -1.0]).unwrap(), 2);
        let dominant = LinearProbe {
            weights: vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![1.0, 1.0]],
            ..zero.clone()
        };
        assert_eq!(dominant.predict(&[0.3, 2.0]).unwrap(), 5);
        assert!(matches!(zero.predict(&[1.0]), Err(ProbeError::DimMismatch { .. })));
    }

    #[test]
    fn orthogonal_offset_does_not_change_prediction() {
        let probe = LinearProbe {
            classes: vec![0, 1],
            weights: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            biases: vec![0.1, -0.2],
            epochs_run: 0,
            converged: true,
        };
        for x in [[0.3, 0.1, 0.0], [-1.0, 2.0, 5.0], [0.0, 0.0, 0.0]] {
            let mut shifted = x;
            shifted[2] += 123.0;
            assert_eq!(probe.predict(&x).unwrap(), probe.predict(&shifted).unwrap());
        }
    }

    #[test]
    fn reproducible() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64 - 3.0, (i % 5) as f64]).collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = ProbeConfig { seed: 11, ..Default::default() };
        assert_eq!(train_perceptron(&x, &y, &cfg).unwrap(), train_perceptron(&x, &y, &cfg).unwrap());
    }
}
