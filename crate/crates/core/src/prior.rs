//! Closed-form posterior-mean denoising under an isotropic Gaussian-mixture
//! prior.
//!
//! With `x0 ~ sum_i w_i N(mu_i, s2 I)` and the forward channel
//! `x = sqrt(g) x0 + sqrt(1 - g) eps`, every component stays Gaussian:
//! `x | i ~ N(sqrt(g) mu_i, v I)` with `v = g s2 + 1 - g`. The posterior mean
//! is the responsibility-weighted average of the per-component posterior
//! means `mu_i + (s2 sqrt(g) / v) (x - sqrt(g) mu_i)`. Frames along axis 0 of
//! a latent tensor are treated as independent draws.

use ndarray::{Array2, Array4, ArrayView1, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{Conditioning, Denoiser, LatentTensor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    /// `k x d`, one row per component.
    means: Array2<f64>,
    sigma2: f64,
    frame_shape: (usize, usize, usize),
}

impl GaussianMixture {
    /// `weights` are normalised to sum to one. `means` holds one
    /// `C x H x W` frame per component along axis 0.
    pub fn new(weights: Vec<f64>, means: Array4<f64>, sigma2: f64) -> Result<Self> {
        let (k, c, h, w) = means.dim();
        if k == 0 || weights.len() != k {
            return Err(Error::input(format!(
                "{} weights for {k} mixture components",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::param("mixture weights must be positive"));
        }
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::param(format!("mixture variance must be >= 0, got {sigma2}")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::input("mixture means must be finite"));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        let means = means
            .into_shape_with_order((k, c * h * w))
            .map_err(|e| Error::input(e.to_string()))?;
        Ok(Self {
            weights,
            means,
            sigma2,
            frame_shape: (c, h, w),
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> ArrayView1<'_, f64> {
        self.means.row(i)
    }

    /// Component means as `k x C x H x W` frames.
    pub fn means(&self) -> Array4<f64> {
        let (c, h, w) = self.frame_shape;
        self.means
            .clone()
            .into_shape_with_order((self.components(), c, h, w))
            .expect("means are stored contiguously")
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frame_shape
    }

    fn check_latent(&self, x: &LatentTensor) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c * h * w != self.dim() {
            return Err(Error::input(format!(
                "latent frames have {} elements, mixture dimension is {}",
                c * h * w,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Posterior component probabilities for one noisy frame.
    pub fn responsibilities(&self, x: ArrayView1<'_, f64>, gamma: f64) -> Vec<f64> {
        let root_g = gamma.sqrt();
        let var = gamma * self.sigma2 + 1.0 - gamma;
        let logits: Vec<f64> = self
            .means
            .rows()
            .into_iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let sq = Zip::from(&x)
                    .and(&mu)
                    .fold(0.0, |acc, &xv, &m| acc + (xv - root_g * m).powi(2));
                w.ln() - sq / (2.0 * var)
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let norm: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / norm).collect()
    }
}

/// `E[x0 | x_tau]` for each frame of `x`.
pub fn gmm_posterior_x0(
    x: &LatentTensor,
    tau: usize,
    schedule: &NoiseSchedule,
    gmm: &GaussianMixture,
) -> Result<LatentTensor> {
    gmm.check_latent(x)?;
    let gamma = schedule.gamma(tau);
    let root_g = gamma.sqrt();
    let var = gamma * gmm.sigma2 + 1.0 - gamma;
    let gain = gmm.sigma2 * root_g / var;
    let shrink = 1.0 - gmm.sigma2 * gamma / var;

    let (n, c, h, w) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .map_err(|e| Error::input(e.to_string()))?;
    let mut out = Array2::<f64>::zeros((n, c * h * w));
    for (xf, mut of) in flat.rows().into_iter().zip(out.rows_mut()) {
        let resp = gmm.responsibilities(xf, gamma);
        let mut mixed = ndarray::Array1::<f64>::zeros(gmm.dim());
        for (r, mu) in resp.iter().zip(gmm.means.rows()) {
            mixed.scaled_add(*r, &mu);
        }
        Zip::from(&mut of)
            .and(&mixed)
            .and(&xf)
            .for_each(|o, &m, &xv| *o = shrink * m + gain * xv);
    }
    out.into_shape_with_order((n, c, h, w))
        .map_err(|e| Error::input(e.to_string()))
}

/// Noise estimate for which `predict_x0` returns the posterior mean.
pub fn gmm_epsilon(
    x: &LatentTensor,
    tau: usize,
    schedule: &NoiseSchedule,
    gmm: &GaussianMixture,
) -> Result<LatentTensor> {
    if tau == 0 {
        return Err(Error::input("noise estimate undefined at diffusion time 0"));
    }
    schedule.check_time(tau)?;
    let x0 = gmm_posterior_x0(x, tau, schedule, gmm)?;
    let gamma = schedule.gamma(tau);
    let (root_g, root_1mg) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    Ok(Zip::from(x).and(&x0).map_collect(|&xv, &m| (xv - root_g * m) / root_1mg))
}

/// One draw, shaped `1 x C x H x W`.
pub fn sample_gmm(gmm: &GaussianMixture, seed: u64) -> LatentTensor {
    sample_gmm_batch(gmm, 1, &mut rng::seeded(seed))
}

/// `n` independent draws stacked along axis 0.
pub fn sample_gmm_batch<R: Rng>(gmm: &GaussianMixture, n: usize, rng: &mut R) -> LatentTensor {
    let (c, h, w) = gmm.frame_shape;
    let sigma = gmm.sigma2.sqrt();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for mut frame in out.outer_iter_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = gmm.components() - 1;
        for (i, w) in gmm.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                component = i;
                break;
            }
        }
        let mu = gmm.means.row(component);
        for (v, m) in frame.iter_mut().zip(mu.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *v = m + sigma * z;
        }
    }
    out
}

/// [`Denoiser`] backed by the exact mixture posterior. Conditioning and the
/// guidance scale are ignored.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub gmm: GaussianMixture,
    pub schedule: NoiseSchedule,
}

impl GmmDenoiser {
    pub fn new(gmm: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }
}

impl Denoiser for GmmDenoiser {
    fn evaluate(
        &self,
        x: &LatentTensor,
        _cond: &Conditioning,
        tau: usize,
        _guidance_scale: f64,
    ) -> Result<LatentTensor> {
        gmm_epsilon(x, tau, &self.schedule, &self.gmm)
    }

    fn is_concurrent(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_diffuse, predict_x0};
    use proptest::prelude::*;

    fn normal(shape: (usize, usize, usize, usize), seed: u64) -> LatentTensor {
        let mut r = rng::seeded(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut r))
    }

    fn two_modes(scale: f64, sigma2: f64) -> GaussianMixture {
        let mut means = Array4::zeros((2, 1, 2, 2));
        means.index_axis_mut(ndarray::Axis(0), 0).fill(scale);
        means.index_axis_mut(ndarray::Axis(0), 1).fill(-scale);
        GaussianMixture::new(vec![1.0, 1.0], means, sigma2).unwrap()
    }

    #[test]
    fn point_prior_returns_its_mean() {
        let s = NoiseSchedule::default();
        let means = Array4::from_shape_vec((1, 1, 1, 3), vec![0.2, -0.4, 0.9]).unwrap();
        let gmm = GaussianMixture::new(vec![1.0], means, 0.0).unwrap();
        for seed in 0..5 {
            let x = normal((2, 1, 1, 3), seed);
            let got = gmm_posterior_x0(&x, 100 + 100 * seed as usize, &s, &gmm).unwrap();
            for frame in got.outer_iter() {
                let v: Vec<f64> = frame.iter().copied().collect();
                assert_eq!(v, vec![0.2, -0.4, 0.9]);
            }
        }
    }

    #[test]
    fn single_gaussian_matches_scalar_posterior() {
        let s = NoiseSchedule::default();
        let (mu, s2) = (0.7, 0.3);
        let means = Array4::from_elem((1, 1, 1, 1), mu);
        let gmm = GaussianMixture::new(vec![1.0], means, s2).unwrap();
        for (tau, xv) in [(1usize, 0.4), (250, -1.3), (999, 2.2)] {
            let g = s.gamma(tau);
            // x0 | x ~ N, precision 1/s2 + g/(1-g)
            let precision = 1.0 / s2 + g / (1.0 - g);
            let expected = (mu / s2 + g.sqrt() * xv / (1.0 - g)) / precision;
            let x = Array4::from_elem((1, 1, 1, 1), xv);
            let got = gmm_posterior_x0(&x, tau, &s, &gmm).unwrap()[[0, 0, 0, 0]];
            assert!((got - expected).abs() < 1e-12, "tau {tau}: {got} vs {expected}");
        }
    }

    #[test]
    fn symmetric_modes_cancel_at_origin() {
        let s = NoiseSchedule::default();
        let gmm = two_modes(1.5, 0.1);
        let x = Array4::zeros((1, 1, 2, 2));
        let got = gmm_posterior_x0(&x, 500, &s, &gmm).unwrap();
        assert!(got.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn point_prior_recovers_noise_exactly() {
        let s = NoiseSchedule::default();
        let means = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, -0.25]).unwrap();
        let gmm = GaussianMixture::new(vec![1.0], means.clone(), 0.0).unwrap();
        let eps = normal((1, 1, 1, 2), 3);
        let x = forward_diffuse(&means, 321, &eps, &s).unwrap();
        let got = gmm_epsilon(&x, 321, &s, &gmm).unwrap();
        for (a, b) in got.iter().zip(eps.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_field_saturates_to_nearest_mode() {
        let s = NoiseSchedule::default();
        let gmm = two_modes(1.0, 0.01);
        let x = Array4::from_elem((1, 1, 2, 2), 1e6);
        let eps = gmm_epsilon(&x, 10, &s, &gmm).unwrap();
        assert!(eps.iter().all(|v| v.is_finite()));
        let r = gmm.responsibilities(x.as_slice().unwrap().into(), s.gamma(10));
        assert_eq!(r, vec![1.0, 0.0]);
        let x0 = gmm_posterior_x0(&x.mapv(|v| -v), 10, &s, &gmm).unwrap();
        assert!(x0.iter().all(|v| v.is_finite() && *v < 0.0));
    }

    #[test]
    fn epsilon_rejects_time_zero_and_bad_dimension() {
        let s = NoiseSchedule::default();
        let gmm = two_modes(1.0, 0.1);
        let x = Array4::zeros((1, 1, 2, 2));
        assert!(matches!(gmm_epsilon(&x, 0, &s, &gmm), Err(Error::InvalidInput(_))));
        let wrong = Array4::zeros((1, 1, 3, 2));
        assert!(matches!(gmm_posterior_x0(&wrong, 5, &s, &gmm), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn point_prior_sampling_is_constant() {
        let means = Array4::from_shape_vec((1, 1, 1, 2), vec![0.1, 0.2]).unwrap();
        let gmm = GaussianMixture::new(vec![1.0], means.clone(), 0.0).unwrap();
        for seed in 0..10 {
            assert_eq!(sample_gmm(&gmm, seed), means);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let gmm = two_modes(1.0, 0.5);
        assert_eq!(sample_gmm(&gmm, 77), sample_gmm(&gmm, 77));
        assert_ne!(sample_gmm(&gmm, 77), sample_gmm(&gmm, 78));
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let mut means = Array4::zeros((2, 1, 1, 1));
        means[[0, 0, 0, 0]] = -10.0;
        means[[1, 0, 0, 0]] = 10.0;
        let gmm = GaussianMixture::new(vec![0.3, 0.7], means, 1.0).unwrap();
        let n = 100_000;
        let draws = sample_gmm_batch(&gmm, n, &mut rng::seeded(2024));
        let first = draws.iter().filter(|v| **v < 0.0).count() as f64;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((first - 0.3 * n as f64).abs() <= 3.0 * sd, "{first}");
    }

    #[test]
    fn weights_are_normalised() {
        let gmm = GaussianMixture::new(vec![2.0, 6.0], Array4::zeros((2, 1, 1, 1)), 1.0).unwrap();
        assert!((gmm.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(gmm.weights(), &[0.25, 0.75]);
        assert!(GaussianMixture::new(vec![1.0, 0.0], Array4::zeros((2, 1, 1, 1)), 1.0).is_err());
        assert!(GaussianMixture::new(vec![1.0], Array4::zeros((1, 1, 1, 1)), -1.0).is_err());
    }

    proptest! {
        #[test]
        fn tweedie_identity(tau in 1usize..=1000, seed in any::<u64>(), s2 in 0.0f64..2.0) {
            let s = NoiseSchedule::default();
            let gmm = two_modes(1.3, s2);
            let x = normal((3, 1, 2, 2), seed).mapv(|v| 2.0 * v);
            let eps = gmm_epsilon(&x, tau, &s, &gmm).unwrap();
            let lhs = predict_x0(&x, &eps, tau, &s).unwrap();
            let rhs = gmm_posterior_x0(&x, tau, &s, &gmm).unwrap();
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            }
        }
    }
}
