//! Oracle tests for the diffusion math.
//!
//! The iterated one-step chain below is written independently of
//! `forward_sample` and acts as the reference for the closed-form marginal.

use crackforge_core::diffusion::{
    forward_sample, loss_eps, loss_eps_with_grads, ArchConfig, DenoiserModel, NoiseSchedule,
};
use crackforge_core::nn::gradcheck;
use crackforge_core::nn::store::ParamId;
use crackforge_core::rng::{normal_array3, rng_from_seed};
use ndarray::Array3;

/// Iterates the one-step forward transition `x_t = sqrt(1-beta_t) x_{t-1} +
/// sqrt(beta_t) z_t` from x_0 up to and including step `t`.
fn iterated_chain(
    x0: &Array3<f64>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut crackforge_core::rng::SeededRng,
) -> Array3<f64> {
    let mut x = x0.clone();
    for step in 0..=t {
        let keep = (1.0 - s.beta(step)).sqrt();
        let noise = s.beta(step).sqrt();
        let z = normal_array3(rng, x.dim());
        x = x.mapv(|v| keep * v) + z.mapv(|v| noise * v);
    }
    x
}

fn fixed_x0() -> Array3<f64> {
    Array3::from_shape_fn((1, 4, 4), |(_, y, x)| 0.1 + 0.05 * (y * 4 + x) as f64)
}

#[test]
fn closed_form_matches_iterated_chain_within_3_se() {
    let s = NoiseSchedule::fast();
    let x0 = fixed_x0();
    let trials = 10_000usize;
    for &t in &[0usize, 24, 49] {
        let mut rng = rng_from_seed(2000 + t as u64);
        let n_px = x0.len();
        let mut sums = vec![0.0f64; n_px];
        let mut sq_sums = vec![0.0f64; n_px];
        for _ in 0..trials {
            let xt = iterated_chain(&x0, t, &s, &mut rng);
            for (i, v) in xt.iter().enumerate() {
                sums[i] += v;
                sq_sums[i] += v * v;
            }
        }
        let n = trials as f64;
        let cf_var = 1.0 - s.alpha_bar(t);
        let cf_std = cf_var.sqrt();
        for (i, x0v) in x0.iter().enumerate() {
            let cf_mean = s.signal_scale(t) * x0v;
            let mc_mean = sums[i] / n;
            let mc_var = sq_sums[i] / n - mc_mean * mc_mean;
            let se_mean = cf_std / n.sqrt();
            let se_var = cf_var * (2.0 / (n - 1.0)).sqrt();
            assert!(
                (mc_mean - cf_mean).abs() <= 3.0 * se_mean.max(1e-12),
                "t={t} px={i}: mean {mc_mean} vs {cf_mean} (3se={})",
                3.0 * se_mean
            );
            assert!(
                (mc_var - cf_var).abs() <= 3.0 * se_var.max(1e-12),
                "t={t} px={i}: var {mc_var} vs {cf_var} (3se={})",
                3.0 * se_var
            );
        }
    }
}

#[test]
fn terminal_marginal_is_unit_gaussian_for_default_schedule() {
    let s = NoiseSchedule::full();
    let x0 = fixed_x0();
    let t = s.len() - 1;
    let trials = 10_000usize;
    let mut rng = rng_from_seed(77);
    let n_px = x0.len();
    let mut sums = vec![0.0f64; n_px];
    let mut sq_sums = vec![0.0f64; n_px];
    for _ in 0..trials {
        let eps = normal_array3(&mut rng, x0.dim());
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        for (i, v) in xt.iter().enumerate() {
            sums[i] += v;
            sq_sums[i] += v * v;
        }
    }
    let n = trials as f64;
    for i in 0..n_px {
        let mean = sums[i] / n;
        let var = sq_sums[i] / n - mean * mean;
        assert!(mean.abs() < 0.05, "px {i}: |mean|={} >= 0.05", mean.abs());
        assert!((var - 1.0).abs() < 0.1, "px {i}: |var-1|={}", (var - 1.0).abs());
    }
}

#[test]
fn zero_model_loss_is_one_in_expectation() {
    // Zeroing every parameter makes the epsilon prediction exactly zero, so
    // the per-element MSE against unit-Gaussian noise has expectation 1.
    let arch = ArchConfig { in_channels: 1, out_channels: 1, base_channels: 2, levels: 1, time_dim: 4, cond_dim: 4, vocab_size: 4 };
    let mut model = DenoiserModel::new(&arch, 0).unwrap();
    for i in 0..model.store.len() {
        model.store.get_mut(ParamId(i)).fill(0.0);
    }
    let s = NoiseSchedule::fast();
    let x0 = Array3::from_elem((1, 8, 8), 0.5);
    let mut rng = rng_from_seed(5);
    let trials = 10_000usize;
    let mut total = 0.0;
    for _ in 0..trials {
        let eps = normal_array3(&mut rng, x0.dim());
        total += loss_eps(&model, &x0, 10, &eps, None, &s).unwrap();
    }
    let mean = total / trials as f64;
    // Var of a per-draw loss (mean of 64 squared normals) is 2/64; SE scales
    // down by sqrt(trials).
    let se = (2.0 / 64.0f64 / trials as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean={mean}, 3se={}", 3.0 * se);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let arch = ArchConfig { in_channels: 1, out_channels: 1, base_channels: 2, levels: 1, time_dim: 4, cond_dim: 4, vocab_size: 4 };
    let model = DenoiserModel::new(&arch, 42).unwrap();
    let s = NoiseSchedule::fast();
    let mut rng = rng_from_seed(9);
    let x0 = normal_array3(&mut rng, (1, 8, 8)).mapv(|v| 0.3 * v + 0.5);
    let eps = normal_array3(&mut rng, (1, 8, 8));
    let t = 17;

    let (_, back) = loss_eps_with_grads(&model, &x0, t, &eps, None, &s).unwrap();

    // Rebuild a model around the perturbed store for each probe.
    let arch2 = arch.clone();
    let mut store = model.store.clone();
    let report = gradcheck::check(&mut store, &back.grads, 7, |st| {
        let mut probe = DenoiserModel::new(&arch2, 42).unwrap();
        probe.store = st.clone();
        loss_eps(&probe, &x0, t, &eps, None, &s).unwrap()
    });
    assert!(
        report.max_rel_error < 1e-4,
        "gradcheck: {} rel={} over {} checks",
        report.worst_param,
        report.max_rel_error,
        report.checked
    );
}

#[test]
fn short_training_reduces_loss() {
    // Tiny smoke check that the backward pass actually trains: 150 Adam steps
    // on a single image should cut the noise-prediction loss substantially.
    use crackforge_core::nn::optim::{Adam, Optimizer};
    let arch = ArchConfig { in_channels: 1, out_channels: 1, base_channels: 4, levels: 2, time_dim: 8, cond_dim: 4, vocab_size: 4 };
    let mut model = DenoiserModel::new(&arch, 7).unwrap();
    let s = NoiseSchedule::fast();
    let x0 = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y + x) % 2) as f64 * 0.8 + 0.1);
    let mut rng = rng_from_seed(21);
    let mut opt = Adam::new(2e-3);
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..150 {
        let t = rand::Rng::gen_range(&mut rng, 0..s.len());
        let eps = normal_array3(&mut rng, x0.dim());
        let (loss, back) = loss_eps_with_grads(&model, &x0, t, &eps, None, &s).unwrap();
        opt.step(&mut model.store, &back.grads);
        if step == 0 {
            first = loss;
        }
        last = loss;
    }
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}
