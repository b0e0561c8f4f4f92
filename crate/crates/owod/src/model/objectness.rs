//! Gaussian objectness model: a running mean and covariance over the
//! embeddings of known-matched queries, queried through the Mahalanobis
//! distance and the energy-score likelihood `exp(-T * d_M^2)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky, solve_lower, spd_inverse};
use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectnessModel {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    /// EMA retention factor: `new = momentum * old + (1 - momentum) * batch`.
    pub momentum: f64,
    /// Ridge added to the covariance before inversion.
    pub epsilon: f64,
    pub temperature: f64,
    /// False until the first batch of statistics arrives; the first update
    /// adopts the batch statistics outright.
    pub initialized: bool,
}

impl ObjectnessModel {
    pub fn new(dim: usize, momentum: f64, epsilon: f64, temperature: f64) -> Self {
        assert!(momentum > 0.0 && momentum <= 1.0);
        assert!(epsilon > 0.0 || momentum > 0.0);
        Self {
            mean: Array1::zeros(dim),
            cov: Array2::eye(dim),
            momentum,
            epsilon,
            temperature,
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn regularized_cov(&self) -> Array2<f64> {
        let mut c = self.cov.clone();
        for i in 0..c.nrows() {
            c[[i, i]] += self.epsilon;
        }
        c
    }

    /// Mahalanobis distance `sqrt((q-mu)^T (Sigma + eps I)^-1 (q-mu))`.
    pub fn mahalanobis(&self, q: &ArrayView1<f64>) -> Result<f64> {
        Ok(self.mahalanobis_squared(q)?.sqrt())
    }

    pub fn mahalanobis_squared(&self, q: &ArrayView1<f64>) -> Result<f64> {
        let l = cholesky(&self.regularized_cov())?;
        let diff = q - &self.mean;
        let y = solve_lower(&l, &diff);
        Ok(y.iter().map(|v| v * v).sum())
    }

    /// Objectness likelihood `exp(-T * d_M^2)` in `(0, 1]`.
    pub fn likelihood(&self, q: &ArrayView1<f64>) -> Result<f64> {
        Ok((-self.temperature * self.mahalanobis_squared(q)?).exp())
    }

    /// `(Sigma + eps I)^-1`, used as a constant matrix inside loss graphs.
    pub fn precision(&self) -> Result<Array2<f64>> {
        spd_inverse(&self.regularized_cov())
    }

    /// Fold one batch of matched-query embeddings `[n, dim]` into the
    /// running statistics. An empty batch is a no-op; the first non-empty
    /// batch initializes the statistics to the batch statistics.
    pub fn update(&mut self, batch: &Array2<f64>) {
        let n = batch.nrows();
        if n == 0 {
            return;
        }
        let mean = batch.mean_axis(Axis(0)).unwrap();
        let mut cov = Array2::<f64>::zeros((self.dim(), self.dim()));
        for row in batch.rows() {
            let d = &row - &mean;
            for i in 0..self.dim() {
                for j in 0..self.dim() {
                    cov[[i, j]] += d[i] * d[j];
                }
            }
        }
        cov /= n as f64;
        if !self.initialized {
            self.mean = mean;
            self.cov = cov;
            self.initialized = true;
        } else {
            let m = self.momentum;
            self.mean = m * &self.mean + (1.0 - m) * &mean;
            self.cov = m * &self.cov + (1.0 - m) * &cov;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn distance_zero_at_mean() {
        let om = ObjectnessModel::new(3, 0.9, 1e-4, 1.3);
        let q = Array1::zeros(3);
        assert_eq!(om.mahalanobis(&q.view()).unwrap(), 0.0);
    }

    #[test]
    fn unit_covariance_unit_step() {
        let mut om = ObjectnessModel::new(3, 0.9, 1e-12, 1.3);
        om.mean = arr1(&[0.5, -1.0, 2.0]);
        om.cov = Array2::eye(3);
        let q = arr1(&[1.5, -1.0, 2.0]);
        let d = om.mahalanobis(&q.view()).unwrap();
        assert!((d - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_covariance_matches_direct_formula() {
        let mut om = ObjectnessModel::new(2, 0.9, 0.0, 1.3);
        om.mean = arr1(&[1.0, 2.0]);
        om.cov = arr2(&[[4.0, 0.0], [0.0, 9.0]]);
        om.epsilon = 0.0;
        let q = arr1(&[2.0, 4.0]);
        // (1)^2/4 + (2)^2/9 = 0.6944...
        let d2 = om.mahalanobis_squared(&q.view()).unwrap();
        assert!((d2 - 0.6944444444444444).abs() < 1e-12);
        assert!((om.mahalanobis(&q.view()).unwrap() - 0.8333333333333334).abs() < 1e-12);
    }

    #[test]
    fn likelihood_values() {
        let mut om = ObjectnessModel::new(1, 0.9, 0.0, 1.3);
        om.mean = arr1(&[0.0]);
        om.cov = arr2(&[[1.0]]);
        let at_mean = om.likelihood(&arr1(&[0.0]).view()).unwrap();
        assert_eq!(at_mean, 1.0);
        // d^2 = 1
        let one = om.likelihood(&arr1(&[1.0]).view()).unwrap();
        assert!((one - 0.2725317930340126).abs() < 1e-15);
        // d^2 = 10 with T = 1.3 -> exp(-13) < 1e-5
        let far = om.likelihood(&arr1(&[10.0f64.sqrt()]).view()).unwrap();
        assert!(far < 1e-5);
        assert!((far - 2.2603294069810542e-6).abs() < 1e-18);
    }

    #[test]
    fn first_update_adopts_batch_statistics() {
        let mut om = ObjectnessModel::new(2, 1.0, 1e-4, 1.3);
        let batch = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        om.update(&batch);
        assert_eq!(om.mean, arr1(&[2.0, 3.0]));
        // population covariance of the two points
        assert!((om.cov[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((om.cov[[1, 1]] - 1.0).abs() < 1e-12);
        assert!((om.cov[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut om = ObjectnessModel::new(2, 0.9, 1e-4, 1.3);
        let before = om.clone();
        om.update(&Array2::zeros((0, 2)));
        assert_eq!(om.mean, before.mean);
        assert_eq!(om.cov, before.cov);
        assert!(!om.initialized);
    }

    #[test]
    fn ema_recurrence_two_batches() {
        let mut om = ObjectnessModel::new(2, 0.9, 1e-4, 1.3);
        let b1 = arr2(&[[2.0, 0.0], [4.0, 2.0]]);
        let b2 = arr2(&[[10.0, 10.0], [12.0, 14.0]]);
        om.update(&b1);
        let mu1 = om.mean.clone();
        om.update(&b2);
        let mean2 = arr1(&[11.0, 12.0]);
        let expected = 0.9 * &mu1 + 0.1 * &mean2;
        assert!((&om.mean - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn covariance_stays_positive_definite_over_many_updates() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut om = ObjectnessModel::new(6, 0.9, 1e-4, 1.3);
        for _ in 0..1000 {
            let n = rng.gen_range(1..5);
            let batch =
                Array2::from_shape_simple_fn((n, 6), || rng.gen_range(-3.0..3.0));
            om.update(&batch);
            assert!(cholesky(&om.regularized_cov()).is_ok());
        }
    }
}
