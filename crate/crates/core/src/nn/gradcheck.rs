//! Central-difference gradient verification.
//!
//! Perturbs stored parameters one scalar at a time and compares the resulting
//! finite-difference slope against an analytic gradient. Used by the test
//! suites; double precision keeps the comparison meaningful at 1e-4 relative.

use super::store::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Checks `grads` against central differences of `loss_fn`.
///
/// `stride` subsamples flat indices per parameter (1 = check everything).
/// The relative error guard floors the denominator so near-zero gradient
/// pairs compare absolutely.
pub fn check(
    store: &mut ParamStore,
    grads: &Grads,
    stride: usize,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    assert!(stride >= 1);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.get(id).len();
        for j in (0..n).step_by(stride) {
            let original = store.get(id).as_slice().unwrap()[j];
            let h = 1e-5 * original.abs().max(1.0);
            store.get_mut(id).as_slice_mut().unwrap()[j] = original + h;
            let lp = loss_fn(store);
            store.get_mut(id).as_slice_mut().unwrap()[j] = original - h;
            let lm = loss_fn(store);
            store.get_mut(id).as_slice_mut().unwrap()[j] = original;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.as_slice().unwrap()[j]);
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}] fd={} analytic={}", store.name(id), j, fd, an);
            }
            checked += 1;
        }
    }
    GradCheckReport { checked, max_rel_error: max_rel, worst_param: worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv2d, Linear};
    use crate::rng::rng_from_seed;
    use ndarray::{Array1, Array3};

    #[test]
    fn conv_and_linear_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(11);
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, &mut rng);
        let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| {
            0.3 * (c as f64 + 1.0) * ((y * 4 + xx) as f64 * 0.1 - 0.5)
        });

        // Loss: mean of squared conv output + squared linear output of the
        // pooled conv features. Exercises both layers' backward paths.
        let eval = |s: &ParamStore| -> f64 {
            let h = conv.forward(s, &x);
            let pooled = crate::nn::layers::global_avg_pool(&h);
            let z = lin.forward(s, &pooled);
            h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64
                + z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64
        };

        let mut grads = Grads::zeros_for(&store);
        {
            let h = conv.forward(&store, &x);
            let pooled = crate::nn::layers::global_avg_pool(&h);
            let z = lin.forward(&store, &pooled);
            let gz = Array1::from_shape_fn(z.len(), |i| 2.0 * z[i] / z.len() as f64);
            let gpooled = lin.backward(&store, &pooled, &gz, &mut grads);
            let (c, hh, ww) = h.dim();
            let mut gh = crate::nn::layers::global_avg_pool_backward(&gpooled, c, hh, ww);
            gh.zip_mut_with(&h, |g, &v| *g += 2.0 * v / (c * hh * ww) as f64);
            conv.backward(&store, &x, &gh, &mut grads);
        }

        let report = check(&mut store, &grads, 1, eval);
        assert!(
            report.max_rel_error < 1e-6,
            "gradcheck failed: {} rel={}",
            report.worst_param,
            report.max_rel_error
        );
    }
}
