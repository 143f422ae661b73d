//! Closed-form forward noising, the noise-prediction loss and the x0
//! reconstruction implied by an epsilon prediction.

use super::model::{BackwardResult, DenoiserModel};
use super::schedule::NoiseSchedule;
use crate::error::{CoreError, Result};
use ndarray::{Array1, Array3};

/// Closed-form marginal of the forward chain:
/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_sample(
    x0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    s: &NoiseSchedule,
) -> Result<Array3<f64>> {
    if t >= s.len() {
        return Err(CoreError::config(format!("forward_sample: t={t} out of range (T={})", s.len())));
    }
    if eps.dim() != x0.dim() {
        return Err(CoreError::shape(format!(
            "forward_sample: eps shape {:?} != x0 shape {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let a = s.signal_scale(t);
    let b = s.noise_scale(t);
    Ok(x0.mapv(|v| a * v) + eps.mapv(|v| b * v))
}

/// x0 reconstruction from a noisy input and an epsilon prediction:
/// `(x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t])`.
pub fn x0_from_eps(x_t: &Array3<f64>, eps_hat: &Array3<f64>, t: usize, s: &NoiseSchedule) -> Array3<f64> {
    let a = s.signal_scale(t);
    let b = s.noise_scale(t);
    let inv_a = 1.0 / a;
    ndarray::Zip::from(x_t).and(eps_hat).map_collect(|&xv, &ev| (xv - b * ev) * inv_a)
}

pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let n = a.len() as f64;
    ndarray::Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / n
}

/// Training objective at step t: `omega[t] * mean((eps - eps_hat)^2)` with
/// the prediction evaluated at the closed-form noisy input.
pub fn loss_eps(
    model: &DenoiserModel,
    x0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    cond: Option<&Array1<f64>>,
    s: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, s)?;
    let eps_hat = model.predict_eps(&x_t, t, cond, &[]);
    finite_or_err(&eps_hat, t)?;
    Ok(s.omega(t) * mse(eps, &eps_hat))
}

/// Like [`loss_eps`] but also backpropagates, returning the loss, the
/// parameter gradients and the gradient wrt the pooled text embedding.
pub fn loss_eps_with_grads(
    model: &DenoiserModel,
    x0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    cond: Option<&Array1<f64>>,
    s: &NoiseSchedule,
) -> Result<(f64, BackwardResult)> {
    let x_t = forward_sample(x0, t, eps, s)?;
    let (eps_hat, cache) = model.forward_cached(&x_t, t, cond, &[]);
    finite_or_err(&eps_hat, t)?;
    let n = eps_hat.len() as f64;
    let w = s.omega(t);
    let loss = w * mse(eps, &eps_hat);
    let gout = ndarray::Zip::from(&eps_hat)
        .and(eps)
        .map_collect(|&p, &e| 2.0 * w * (p - e) / n);
    Ok((loss, model.backward(&cache, &gout)))
}

pub(crate) fn finite_or_err(a: &Array3<f64>, t: usize) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numeric(format!("non-finite model output at step {t}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ArchConfig;
    use crate::rng::{normal_array3, rng_from_seed};
    use approx::assert_abs_diff_eq;

    #[test]
    fn alpha_bar_one_returns_x0_exactly() {
        let s = NoiseSchedule::from_betas_test_mode(vec![0.0, 0.0]).unwrap();
        let mut rng = rng_from_seed(0);
        let x0 = normal_array3(&mut rng, (1, 4, 4));
        let eps = normal_array3(&mut rng, (1, 4, 4));
        let out = forward_sample(&x0, 1, &eps, &s).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn alpha_bar_zero_returns_eps_exactly() {
        // Repeated near-one betas underflow the alpha_bar product to exactly 0.
        let s = NoiseSchedule::from_betas_test_mode(vec![1.0 - f64::EPSILON; 21]).unwrap();
        let last = s.len() - 1;
        assert_eq!(s.alpha_bar(last), 0.0);
        let mut rng = rng_from_seed(0);
        let x0 = normal_array3(&mut rng, (1, 4, 4));
        let eps = normal_array3(&mut rng, (1, 4, 4));
        let out = forward_sample(&x0, last, &eps, &s).unwrap();
        assert_eq!(out, eps);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = NoiseSchedule::fast();
        let x0 = Array3::zeros((1, 4, 4));
        let eps = Array3::zeros((1, 4, 5));
        assert!(forward_sample(&x0, 0, &eps, &s).is_err());
        let eps_ok = Array3::zeros((1, 4, 4));
        assert!(forward_sample(&x0, 50, &eps_ok, &s).is_err());
    }

    #[test]
    fn x0_reconstruction_inverts_forward() {
        let s = NoiseSchedule::fast();
        let mut rng = rng_from_seed(1);
        let x0 = normal_array3(&mut rng, (2, 6, 6));
        let eps = normal_array3(&mut rng, (2, 6, 6));
        let xt = forward_sample(&x0, 20, &eps, &s).unwrap();
        let rec = x0_from_eps(&xt, &eps, 20, &s);
        for (a, b) in rec.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn loss_zero_when_model_output_equals_eps() {
        // Instead of hardwiring a model, evaluate the loss formula around the
        // model's own prediction used as "eps": mse(eps_hat, eps_hat) = 0.
        let arch = ArchConfig { in_channels: 1, out_channels: 1, base_channels: 2, levels: 1, time_dim: 4, cond_dim: 4, vocab_size: 4 };
        let model = DenoiserModel::new(&arch, 0).unwrap();
        let mut rng = rng_from_seed(5);
        let x_t = normal_array3(&mut rng, (1, 8, 8));
        let eps_hat = model.predict_eps(&x_t, 3, None, &[]);
        assert_eq!(mse(&eps_hat, &eps_hat), 0.0);
    }
}
