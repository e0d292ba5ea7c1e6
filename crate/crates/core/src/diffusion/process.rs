//! Closed-form forward diffusion and the deterministic DDIM reverse step.

use ndarray::{Array4, Zip};

use super::model::{Conditioning, Denoiser};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Latent tensor, `N x C x H x W`; axis 0 indexes frames.
pub type LatentTensor = Array4<f64>;

fn same_shape(a: &LatentTensor, b: &LatentTensor, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!(
            "{what}: shape {:?} does not match {:?}",
            b.dim(),
            a.dim()
        )));
    }
    Ok(())
}

/// `sqrt(gamma) * x0 + sqrt(1 - gamma) * noise` at time `tau`.
pub fn forward_diffuse(
    x0: &LatentTensor,
    tau: usize,
    noise: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_time(tau)?;
    same_shape(x0, noise, "noise")?;
    let g = schedule.gamma(tau);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// One step of the single-step kernel: `sqrt(alpha) * x + sqrt(1 - alpha) * noise`.
pub fn forward_step(
    x_prev: &LatentTensor,
    tau: usize,
    noise: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_time(tau)?;
    same_shape(x_prev, noise, "noise")?;
    let alpha = schedule.alpha(tau);
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    Ok(Zip::from(x_prev).and(noise).map_collect(|&x, &e| a * x + b * e))
}

/// Clean-sample estimate `(x - sqrt(1 - gamma) * eps) / sqrt(gamma)`.
pub fn predict_x0(
    x: &LatentTensor,
    eps: &LatentTensor,
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_time(tau)?;
    same_shape(x, eps, "noise estimate")?;
    let g = schedule.gamma(tau);
    let (root_g, root_1mg) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(Zip::from(x).and(eps).map_collect(|&x, &e| (x - root_1mg * e) / root_g))
}

/// Deterministic DDIM step from `tau` to `tau_prev < tau`, reusing `eps` as
/// the noise direction.
pub fn ddim_step(
    x: &LatentTensor,
    eps: &LatentTensor,
    tau: usize,
    tau_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    if tau_prev >= tau {
        return Err(Error::input(format!(
            "DDIM step must decrease time, got {tau} -> {tau_prev}"
        )));
    }
    let x0 = predict_x0(x, eps, tau, schedule)?;
    Ok(renoise(&x0, eps, tau_prev, schedule))
}

/// `sqrt(gamma) * x0 + sqrt(1 - gamma) * eps` at `tau` (which may be 0).
pub(crate) fn renoise(
    x0: &LatentTensor,
    eps: &LatentTensor,
    tau: usize,
    schedule: &NoiseSchedule,
) -> LatentTensor {
    let g = schedule.gamma(tau);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e)
}

/// Unguided strided DDIM sampling from `x_t` over `steps` evenly spaced times.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    x_t: &LatentTensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
) -> Result<LatentTensor> {
    let mut x = x_t.clone();
    for (tau, tau_prev) in schedule.reverse_pairs(steps)? {
        let eps = denoiser.evaluate(&x, cond, tau, guidance_scale)?;
        x = ddim_step(&x, &eps, tau, tau_prev, schedule)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(shape: (usize, usize, usize, usize), seed: u64) -> LatentTensor {
        let mut r = rng::seeded(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut r))
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = schedule();
        let x0 = normal((1, 2, 3, 3), 1);
        let zero = Array4::zeros(x0.raw_dim());
        let g = s.gamma(300);
        assert_eq!(forward_diffuse(&x0, 300, &zero, &s).unwrap(), x0.mapv(|v| g.sqrt() * v));
        let eps = normal((1, 2, 3, 3), 2);
        assert_eq!(
            forward_diffuse(&zero, 300, &eps, &s).unwrap(),
            eps.mapv(|v| (1.0 - g).sqrt() * v)
        );
    }

    #[test]
    fn predict_x0_with_zero_noise_estimate() {
        let s = schedule();
        let x = normal((2, 1, 2, 2), 3);
        let zero = Array4::zeros(x.raw_dim());
        let g = s.gamma(10);
        let got = predict_x0(&x, &zero, 10, &s).unwrap();
        assert_eq!(got, x.mapv(|v| v / g.sqrt()));
    }

    #[test]
    fn predict_x0_matches_scalar_formula() {
        let s = schedule();
        let tau = s.max_time() / 2;
        let x = normal((1, 3, 4, 4), 4);
        let eps = normal((1, 3, 4, 4), 5);
        let got = predict_x0(&x, &eps, tau, &s).unwrap();
        let gamma: f64 = (1..=tau).map(|j| s.alpha(j)).product();
        for (i, (&xv, &ev)) in x.iter().zip(eps.iter()).enumerate() {
            let expected = (xv - (1.0 - gamma).sqrt() * ev) / gamma.sqrt();
            let actual = got.as_slice().unwrap()[i];
            assert!((actual - expected).abs() < 1e-12, "{actual} vs {expected}");
        }
    }

    #[test]
    fn time_and_shape_errors() {
        let s = schedule();
        let x = normal((1, 1, 2, 2), 1);
        let y = normal((1, 1, 2, 3), 1);
        assert!(forward_diffuse(&x, 0, &x, &s).is_err());
        assert!(forward_diffuse(&x, 1001, &x, &s).is_err());
        assert!(forward_diffuse(&x, 5, &y, &s).is_err());
        assert!(predict_x0(&x, &x, 0, &s).is_err());
        assert!(ddim_step(&x, &x, 5, 5, &s).is_err());
        assert!(ddim_step(&x, &x, 5, 9, &s).is_err());
    }

    #[test]
    fn step_to_zero_is_clean_prediction() {
        let s = schedule();
        let x = normal((1, 1, 4, 4), 6);
        let eps = normal((1, 1, 4, 4), 7);
        assert_eq!(
            ddim_step(&x, &eps, 40, 0, &s).unwrap(),
            predict_x0(&x, &eps, 40, &s).unwrap()
        );
    }

    #[test]
    fn oracle_noise_lands_on_forward_marginal() {
        let s = schedule();
        let x0 = normal((1, 2, 4, 4), 8);
        let eps = normal((1, 2, 4, 4), 9);
        let x_t = forward_diffuse(&x0, 720, &eps, &s).unwrap();
        let stepped = ddim_step(&x_t, &eps, 720, 333, &s).unwrap();
        let direct = forward_diffuse(&x0, 333, &eps, &s).unwrap();
        for (a, b) in stepped.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_step() {
        let s = schedule();
        let x = normal((1, 1, 3, 3), 10);
        let eps = normal((1, 1, 3, 3), 11);
        let a = ddim_step(&x, &eps, 500, 100, &s).unwrap();
        let b = ddim_step(&x, &eps, 500, 100, &s).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn forward_then_predict_inverts(tau in 1usize..=1000, seed in any::<u64>()) {
            let s = schedule();
            let x0 = normal((1, 1, 3, 3), seed);
            let eps = normal((1, 1, 3, 3), seed ^ 0x5555);
            let x_t = forward_diffuse(&x0, tau, &eps, &s).unwrap();
            let back = predict_x0(&x_t, &eps, tau, &s).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn strided_step_composes(hi in 3usize..=1000, frac_mid in 0.01f64..0.99, frac_lo in 0.0f64..0.99, seed in any::<u64>()) {
            let s = schedule();
            let mid = ((hi as f64 * frac_mid) as usize).clamp(1, hi - 1);
            let lo = ((mid as f64 * frac_lo) as usize).min(mid - 1);
            let x = normal((1, 1, 2, 2), seed);
            let eps = normal((1, 1, 2, 2), seed.wrapping_add(1));
            let direct = ddim_step(&x, &eps, hi, lo, &s).unwrap();
            let via = ddim_step(&ddim_step(&x, &eps, hi, mid, &s).unwrap(), &eps, mid, lo, &s).unwrap();
            for (a, b) in direct.iter().zip(via.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
