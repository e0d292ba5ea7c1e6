use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;

/// Per-step retention `alpha`, cumulative product `gamma` and log-SNR
/// `lambda` for diffusion times `1..=T`.
///
/// Tables are stored 0-based; the accessors take the diffusion time itself.
/// `gamma(0)` is defined as 1 so a final reverse step to time 0 returns the
/// clean prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `1..=T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::param("diffusion time T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let span = (timesteps - 1).max(1) as f64;
        let betas = (0..timesteps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span);
        Ok(Self::from_alphas(betas.map(|b| 1.0 - b).collect()))
    }

    fn from_alphas(alpha: Vec<f64>) -> Self {
        let gamma = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let lambda = alpha.iter().map(|a| a.ln() - (1.0 - a).ln()).collect();
        Self { alpha, gamma, lambda }
    }

    /// Maximum diffusion time `T`.
    pub fn max_time(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    pub fn gamma(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.gamma[tau - 1]
        }
    }

    pub fn lambda(&self, tau: usize) -> f64 {
        self.lambda[tau - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub(crate) fn check_time(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.max_time() {
            return Err(Error::input(format!(
                "diffusion time {tau} outside 1..={}",
                self.max_time()
            )));
        }
        Ok(())
    }

    /// `count` reverse-process times evenly spaced over `1..=T`, ending at `T`,
    /// in ascending order.
    pub fn strided_times(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.max_time();
        if count == 0 || count > t {
            return Err(Error::param(format!(
                "DDIM step count must lie in 1..={t}, got {count}"
            )));
        }
        Ok((1..=count).map(|k| (2 * k * t + count) / (2 * count)).collect())
    }

    /// `(tau, tau_prev)` pairs of a strided reverse trajectory, from `T` down to 0.
    pub fn reverse_pairs(&self, count: usize) -> Result<Vec<(usize, usize)>> {
        let times = self.strided_times(count)?;
        Ok((0..times.len())
            .rev()
            .map(|i| (times[i], if i == 0 { 0 } else { times[i - 1] }))
            .collect())
    }

    /// Writes the `tau,alpha,gamma,lambda` table.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "tau,alpha,gamma,lambda")?;
        for tau in 1..=self.max_time() {
            writeln!(
                out,
                "{tau},{:e},{:e},{:e}",
                self.alpha(tau),
                self.gamma(tau),
                self.lambda(tau)
            )?;
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}
