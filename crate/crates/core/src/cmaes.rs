//! Minimal ask/tell CMA-ES.
//!
//! The archive emitters rank candidates by archive improvement rather than
//! raw objective value, so this implementation takes an externally supplied
//! ranking in `tell` instead of sorting fitnesses itself. Standard Hansen
//! parameter settings throughout.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::pose::normal_sample;

#[derive(Debug, Clone)]
pub struct CmaEs {
    dim: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: u64,
}

impl CmaEs {
    pub fn new(mean: DVector<f64>, sigma0: f64, lambda: usize) -> Self {
        let dim = mean.len();
        let n = dim as f64;
        assert!(lambda >= 2, "population must be at least 2");
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu =
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Self {
            dim,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            mean,
            sigma: sigma0,
            cov: DMatrix::identity(dim, dim),
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            generation: 0,
        }
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn sqrt_cov(&self) -> DMatrix<f64> {
        let eigen = nalgebra::SymmetricEigen::new(self.cov.clone());
        let sqrt_vals = eigen.eigenvalues.map(|v| v.max(1e-20).sqrt());
        &eigen.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
    }

    fn inv_sqrt_cov(&self) -> DMatrix<f64> {
        let eigen = nalgebra::SymmetricEigen::new(self.cov.clone());
        let inv_vals = eigen.eigenvalues.map(|v| 1.0 / v.max(1e-20).sqrt());
        &eigen.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eigen.eigenvectors.transpose()
    }

    /// Samples the population `x_k = mean + sigma * B D z_k`.
    pub fn ask<R: Rng>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let bd = self.sqrt_cov();
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| normal_sample(rng));
                &self.mean + self.sigma * &bd * z
            })
            .collect()
    }

    /// Distribution update from the sampled population and a ranking of its
    /// indices, best first. Uses the top `mu` entries.
    pub fn tell(&mut self, samples: &[DVector<f64>], ranked: &[usize]) {
        assert_eq!(samples.len(), self.lambda);
        assert!(ranked.len() >= self.mu);

        let old_mean = self.mean.clone();
        let mut new_mean = DVector::zeros(self.dim);
        for (w, &idx) in self.weights.iter().zip(ranked.iter()) {
            new_mean += *w * &samples[idx];
        }

        let c_inv_sqrt = self.inv_sqrt_cov();
        let mean_shift = (&new_mean - &old_mean) / self.sigma;

        self.p_sigma = (1.0 - self.c_sigma) * &self.p_sigma
            + (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt() * &c_inv_sqrt * &mean_shift;

        let gen_factor = 1.0 - (1.0 - self.c_sigma).powi(2 * (self.generation as i32 + 1));
        let p_sigma_norm = self.p_sigma.norm();
        let h_sigma = if p_sigma_norm
            < (1.4 + 2.0 / (self.dim as f64 + 1.0)) * self.chi_n * gen_factor.sqrt()
        {
            1.0
        } else {
            0.0
        };

        self.p_c = (1.0 - self.c_c) * &self.p_c
            + h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt() * &mean_shift;

        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, &idx) in self.weights.iter().zip(ranked.iter()) {
            let y = (&samples[idx] - &old_mean) / self.sigma;
            rank_mu += *w * &y * y.transpose();
        }

        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        let base = 1.0 - self.c_1 - self.c_mu + self.c_1 * delta_h;
        self.cov = base * &self.cov
            + self.c_1 * &self.p_c * self.p_c.transpose()
            + self.c_mu * rank_mu;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (p_sigma_norm / self.chi_n - 1.0)).exp();
        self.mean = new_mean;
        self.generation += 1;

        if !self.sigma.is_finite() || self.mean.iter().any(|v| !v.is_finite()) {
            // collapse to a signal the emitters treat as a restart condition
            self.sigma = 0.0;
        }
    }
}
