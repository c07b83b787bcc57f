use serde::{Deserialize, Serialize};

use super::RolloutBatch;

/// Running per-agent mean and variance of value targets.
///
/// With a normaliser the critic predicts in normalised units. Rollout values
/// are mapped back to raw units before advantage estimation, and the value
/// loss compares normalised predictions with normalised targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNorm {
    pub beta: f64,
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
    debias: f64,
}

const DEBIAS_FLOOR: f64 = 1e-5;
const VAR_FLOOR: f64 = 1e-2;

impl ValueNorm {
    pub fn new(n_agents: usize, beta: f64) -> Self {
        ValueNorm {
            beta,
            mean: vec![0.0; n_agents],
            mean_sq: vec![0.0; n_agents],
            debias: 0.0,
        }
    }

    /// Folds one batch of per-agent targets `rows[r][i]` into the statistics.
    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let k = rows.len() as f64;
        let w = 1.0 - self.beta;
        for i in 0..self.mean.len() {
            let m = rows.iter().map(|r| r[i]).sum::<f64>() / k;
            let sq = rows.iter().map(|r| r[i] * r[i]).sum::<f64>() / k;
            self.mean[i] = self.beta * self.mean[i] + w * m;
            self.mean_sq[i] = self.beta * self.mean_sq[i] + w * sq;
        }
        self.debias = self.beta * self.debias + w;
    }

    /// Debiased `(mean, std)` for agent `i`; the identity before any update.
    pub fn mean_std(&self, i: usize) -> (f64, f64) {
        if self.debias == 0.0 {
            return (0.0, 1.0);
        }
        let d = self.debias.max(DEBIAS_FLOOR);
        let mean = self.mean[i] / d;
        let var = (self.mean_sq[i] / d - mean * mean).max(VAR_FLOOR);
        (mean, var.sqrt())
    }

    pub fn normalize(&self, i: usize, x: f64) -> f64 {
        let (m, s) = self.mean_std(i);
        (x - m) / s
    }

    pub fn denormalize(&self, i: usize, x: f64) -> f64 {
        let (m, s) = self.mean_std(i);
        x * s + m
    }

    /// Maps critic outputs stored in a fresh batch (values and bootstraps) to raw units.
    pub fn denormalize_batch(&self, batch: &mut RolloutBatch) {
        let rows = batch.values.iter_mut().chain(batch.bootstrap.iter_mut().flatten());
        for row in rows {
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.denormalize(i, *v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_before_any_update() {
        let norm = ValueNorm::new(2, 0.99);
        assert_eq!(norm.mean_std(1), (0.0, 1.0));
        assert_eq!(norm.normalize(0, 3.5), 3.5);
        let mut empty = norm.clone();
        empty.update(&[]);
        assert_eq!(empty.denormalize(0, -2.0), -2.0);
    }

    #[test]
    fn single_update_is_fully_debiased() {
        let mut norm = ValueNorm::new(2, 0.99999);
        norm.update(&[vec![1.0, 10.0], vec![3.0, 10.0]]);
        let (m, s) = norm.mean_std(0);
        assert!((m - 2.0).abs() < 1e-9);
        assert!((s - 1.0).abs() < 1e-9);
        // constant targets hit the variance floor, agents stay separate
        let (m, s) = norm.mean_std(1);
        assert!((m - 10.0).abs() < 1e-9);
        assert!((s - VAR_FLOOR.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn statistics_track_an_exponential_average() {
        let beta = 0.5;
        let mut norm = ValueNorm::new(1, beta);
        norm.update(&[vec![2.0]]);
        norm.update(&[vec![4.0]]);
        // weights 0.25 and 0.5 over a debias mass of 0.75
        let (m, s) = norm.mean_std(0);
        let mean = (0.25 * 2.0 + 0.5 * 4.0) / 0.75;
        let sq = (0.25 * 4.0 + 0.5 * 16.0) / 0.75;
        assert!((m - mean).abs() < 1e-12);
        assert!((s - (sq - mean * mean).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalize_round_trips() {
        let mut norm = ValueNorm::new(3, 0.9);
        norm.update(&[vec![1.0, -4.0, 0.5], vec![7.0, 2.0, 0.25]]);
        for i in 0..3 {
            for x in [-3.0, 0.0, 0.125, 42.0] {
                assert!((norm.denormalize(i, norm.normalize(i, x)) - x).abs() < 1e-12);
            }
        }
    }
}
