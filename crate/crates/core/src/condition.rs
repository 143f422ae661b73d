//! Phase 2: train a hypernetwork that injects driver-conditioned residuals
//! into the frozen adapted model.
//!
//! The hypernetwork is a trainable copy of the base U-Net plus a small
//! convolutional driver stem and one zero-initialized 1x1 coupling projection
//! per decoder site. Zero couplings make the conditioned output equal the
//! unconditional one exactly at initialization; the frozen base's parameter
//! hash is recorded and re-verified throughout training.

use crate::diffusion::model::{ArchConfig, DenoiserModel, UNet};
use crate::diffusion::ops::{finite_or_err, forward_sample, mse, x0_from_eps};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::imgproc::resize_nearest;
use crate::nn::layers::Conv2d;
use crate::nn::optim::{AnyOptimizer, Optimizer};
use crate::nn::store::{Grads, ParamStore};
use crate::rng::{normal_array3, rng_from_seed, subseed};
use crate::text::{encode_prompt, Vocabulary};
use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::concept::{LossSpace, TrainingLog};

pub struct HyperNetwork {
    pub store: ParamStore,
    pub arch: ArchConfig,
    unet: UNet,
    stem: Conv2d,
    couplers: Vec<Conv2d>,
    /// Decoder-site indices that receive residuals (deepest first).
    pub injection_sites: Vec<usize>,
    /// Content hash of the frozen base this hypernetwork belongs to.
    pub base_hash: String,
}

impl HyperNetwork {
    pub fn clone_network(&self) -> Self {
        HyperNetwork {
            store: self.store.clone(),
            arch: self.arch.clone(),
            unet: self.unet.clone(),
            stem: self.stem.clone(),
            couplers: self.couplers.clone(),
            injection_sites: self.injection_sites.clone(),
            base_hash: self.base_hash.clone(),
        }
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }

    /// True iff every coupling parameter is exactly zero.
    pub fn couplings_are_zero(&self) -> bool {
        self.couplers.iter().all(|c| {
            self.store.get(c.w).iter().all(|&v| v == 0.0) && self.store.get(c.b).iter().all(|&v| v == 0.0)
        })
    }

    /// Runs the hypernetwork trunk and returns per-site residual maps
    /// (decoder order). Sites not in `injection_sites` get zero maps.
    pub fn residuals(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        cond: Option<&Array1<f64>>,
        driver_pixels: &Array3<f64>,
    ) -> Result<Vec<Array3<f64>>> {
        let (out, _) = self.forward_trunk(z_t, t, cond, driver_pixels)?;
        Ok(out)
    }

    fn forward_trunk(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        cond: Option<&Array1<f64>>,
        driver_pixels: &Array3<f64>,
    ) -> Result<(Vec<Array3<f64>>, HyperCache)> {
        let (_, h, w) = z_t.dim();
        let driver = align_driver(driver_pixels, h, w)?;
        let stem_out = self.stem.forward(&self.store, &driver);
        let (_, cache) = self.unet.forward(&self.store, z_t, t, cond, &[], Some(&stem_out));
        let mut residuals = Vec::with_capacity(self.arch.levels);
        for (i, coupler) in self.couplers.iter().enumerate() {
            if self.injection_sites.contains(&i) {
                residuals.push(coupler.forward(&self.store, &cache.dec_outputs[i]));
            } else {
                residuals.push(Array3::zeros(cache.dec_outputs[i].dim()));
            }
        }
        Ok((residuals, HyperCache { driver, cache }))
    }

    /// Backward from residual gradients into hypernetwork parameters.
    fn backward_trunk(&self, hc: &HyperCache, grad_residuals: &[Array3<f64>]) -> Grads {
        let mut grads = Grads::zeros_for(&self.store);
        let mut extra = Vec::with_capacity(self.arch.levels);
        for (i, coupler) in self.couplers.iter().enumerate() {
            if self.injection_sites.contains(&i) {
                extra.push(coupler.backward(&self.store, &hc.cache.dec_outputs[i], &grad_residuals[i], &mut grads));
            } else {
                extra.push(Array3::zeros(hc.cache.dec_outputs[i].dim()));
            }
        }
        // The hypernetwork's own conv_out output is unused; no gradient there.
        let (_, h, w) = hc.driver.dim();
        let gout_zero = Array3::zeros((self.arch.out_channels, h, w));
        let back = self.unet.backward(&self.store, &hc.cache, &gout_zero, &extra);
        grads.add_scaled(&back.grads, 1.0);
        self.stem.backward(&self.store, &hc.driver, &back.grad_stem_point, &mut grads);
        grads
    }
}

struct HyperCache {
    driver: Array3<f64>,
    cache: crate::diffusion::model::UNetCache,
}

/// Resizes driver pixels to the denoiser's spatial dims. Nearest-neighbor,
/// so palette colors survive exactly.
fn align_driver(driver_pixels: &Array3<f64>, h: usize, w: usize) -> Result<Array3<f64>> {
    let (c, dh, dw) = driver_pixels.dim();
    if c != 3 {
        return Err(CoreError::shape(format!("driver must be RGB, got {c} channels")));
    }
    if (dh, dw) == (h, w) {
        return Ok(driver_pixels.clone());
    }
    resize_nearest(driver_pixels, h, w)
}

/// Builds the hypernetwork layer structure over a fresh store. Couplers are
/// zeroed; everything else is seed-initialized. Checkpoint loading fills the
/// values afterwards.
pub(crate) fn hypernetwork_skeleton(
    arch: &ArchConfig,
    injection_sites: Vec<usize>,
    base_hash: String,
    seed: u64,
) -> HyperNetwork {
    let mut rng = rng_from_seed(subseed(seed, "hypernetwork-init", 0));
    let mut store = ParamStore::new();
    let unet = UNet::build(&mut store, "unet", arch, &mut rng);
    let stem = Conv2d::new(&mut store, "stem", 3, arch.base_channels, 3, &mut rng);
    let couplers: Vec<Conv2d> = arch
        .site_channels()
        .iter()
        .enumerate()
        .map(|(i, &ch)| Conv2d::new_zeroed(&mut store, &format!("couple{i}"), ch, ch, 1))
        .collect();
    HyperNetwork { store, arch: arch.clone(), unet, stem, couplers, injection_sites, base_hash }
}

/// Builds the hypernetwork for an adapted base model: backbone parameters are
/// copied bit-exactly, the driver stem is freshly initialized and every
/// coupling projection starts at exactly zero.
pub fn init_hypernetwork(adapted: &DenoiserModel, seed: u64) -> HyperNetwork {
    let arch = adapted.arch.clone();
    let sites = (0..arch.levels).collect();
    let mut hyper = hypernetwork_skeleton(&arch, sites, adapted.content_hash(), seed);
    // Overwrite the backbone copy with the base's values, name by name.
    for (name, value) in adapted.store.iter() {
        if name.starts_with("unet.") {
            let id = hyper.store.id_of(name).expect("hypernetwork backbone layout matches base");
            *hyper.store.get_mut(id) = value.clone();
        }
    }
    hyper
}

/// Conditioned epsilon prediction: base forward pass plus per-site additive
/// residuals computed by the hypernetwork from (z_t, t, c, driver).
pub fn conditioned_denoise_raw(
    frozen: &DenoiserModel,
    hyper: &HyperNetwork,
    z_t: &Array3<f64>,
    t: usize,
    cond: Option<&Array1<f64>>,
    cond_pixels: &Array3<f64>,
) -> Result<Array3<f64>> {
    let residuals = hyper.residuals(z_t, t, cond, cond_pixels)?;
    let eps_hat = frozen.predict_eps(z_t, t, cond, &residuals);
    finite_or_err(&eps_hat, t)?;
    Ok(eps_hat)
}

/// [`conditioned_denoise_raw`] with a [`crate::driver::DriverImage`] condition.
pub fn conditioned_denoise(
    frozen: &DenoiserModel,
    hyper: &HyperNetwork,
    z_t: &Array3<f64>,
    t: usize,
    cond: Option<&Array1<f64>>,
    driver: &crate::driver::DriverImage,
) -> Result<Array3<f64>> {
    conditioned_denoise_raw(frozen, hyper, z_t, t, cond, &driver.pixels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionTrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// "sgd" or "adam".
    pub optimizer: String,
    pub loss_space: LossSpace,
    pub divergence_threshold: f64,
    /// Base-hash verification cadence in steps (also verified at start/end).
    pub verify_every: usize,
}

impl Default for ConditionTrainingConfig {
    fn default() -> Self {
        ConditionTrainingConfig {
            steps: 200,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
            optimizer: "adam".to_string(),
            loss_space: LossSpace::X0,
            divergence_threshold: 1e6,
            verify_every: 50,
        }
    }
}

/// One training item: the target image, the conditioning pixels extracted
/// from that same image, and the prompt.
pub struct ConditionItem {
    pub image: Array3<f64>,
    pub cond_pixels: Array3<f64>,
    pub prompt: String,
}

/// Loss + hypernetwork gradients for one item.
fn condition_step(
    frozen: &DenoiserModel,
    hyper: &HyperNetwork,
    item: &ConditionItem,
    cond: &Array1<f64>,
    t: usize,
    eps: &Array3<f64>,
    s: &NoiseSchedule,
    loss_space: LossSpace,
    grads: &mut Grads,
) -> Result<f64> {
    let z_t = forward_sample(&item.image, t, eps, s)?;
    let (residuals, hc) = hyper.forward_trunk(&z_t, t, Some(cond), &item.cond_pixels)?;
    let (eps_hat, base_cache) = frozen.forward_cached(&z_t, t, Some(cond), &residuals);
    finite_or_err(&eps_hat, t)?;
    let n = eps_hat.len() as f64;
    let w = s.omega(t);
    let (loss, gout) = match loss_space {
        LossSpace::X0 => {
            let x_hat = x0_from_eps(&z_t, &eps_hat, t, s);
            let loss = w * mse(&x_hat, &item.image);
            let scale = -s.noise_scale(t) / s.signal_scale(t);
            let gout = ndarray::Zip::from(&x_hat)
                .and(&item.image)
                .map_collect(|&xh, &xv| 2.0 * w * (xh - xv) / n * scale);
            (loss, gout)
        }
        LossSpace::Eps => {
            let loss = w * mse(&eps_hat, eps);
            let gout = ndarray::Zip::from(&eps_hat).and(eps).map_collect(|&p, &e| 2.0 * w * (p - e) / n);
            (loss, gout)
        }
    };
    // Base parameters are frozen: its parameter gradients are dropped; only
    // the residual gradients continue into the hypernetwork.
    let base_back = frozen.backward(&base_cache, &gout);
    let hyper_grads = hyper.backward_trunk(&hc, &base_back.grad_residuals);
    grads.add_scaled(&hyper_grads, 1.0);
    Ok(loss)
}

/// Trains the hypernetwork against the frozen base. The base must be
/// bit-identical before and after; any detected mutation aborts immediately.
pub fn train_condition(
    frozen: &DenoiserModel,
    hyper: &HyperNetwork,
    data: &[ConditionItem],
    vocab: &Vocabulary,
    cfg: &ConditionTrainingConfig,
    s: &NoiseSchedule,
) -> Result<(HyperNetwork, TrainingLog)> {
    if data.is_empty() {
        return Err(CoreError::config("train_condition: no training items"));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::config("train_condition: batch_size must be positive"));
    }
    let Some(mut opt) = AnyOptimizer::from_kind(&cfg.optimizer, cfg.learning_rate) else {
        return Err(CoreError::config(format!("train_condition: unknown optimizer {}", cfg.optimizer)));
    };
    if frozen.content_hash() != hyper.base_hash {
        return Err(CoreError::Prerequisite(format!(
            "hypernetwork was built for base {} but got {}",
            &hyper.base_hash[..12],
            &frozen.content_hash()[..12]
        )));
    }
    let base_hash = hyper.base_hash.clone();
    let mut trained = hyper.clone_network();
    let mut log = TrainingLog::default();
    if cfg.steps == 0 {
        return Ok((trained, log));
    }
    let table = frozen.text_table();
    let mut rng = rng_from_seed(subseed(cfg.seed, "condition-train", 0));
    for step in 0..cfg.steps {
        let mut grads = Grads::zeros_for(&trained.store);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..data.len());
            let item = &data[idx];
            let cond = encode_prompt(&item.prompt, vocab, table.view())?.pooled();
            let t = rng.gen_range(0..s.len());
            let eps = normal_array3(&mut rng, item.image.dim());
            total += condition_step(frozen, &trained, item, &cond, t, &eps, s, cfg.loss_space, &mut grads)?;
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        let mean = total / cfg.batch_size as f64;
        if !mean.is_finite() || mean > cfg.divergence_threshold {
            return Err(CoreError::numeric(format!("train_condition: divergence at step {step} (loss {mean})")));
        }
        log.steps.push((mean, 0.0));
        opt.step(&mut trained.store, &grads);
        if cfg.verify_every > 0 && (step + 1) % cfg.verify_every == 0 && frozen.content_hash() != base_hash {
            return Err(CoreError::numeric(format!(
                "train_condition: frozen base mutated before step {}",
                step + 1
            )));
        }
    }
    if frozen.content_hash() != base_hash {
        return Err(CoreError::numeric("train_condition: frozen base mutated during training".to_string()));
    }
    Ok((trained, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::ParamId;

    fn setup() -> (DenoiserModel, Vocabulary, NoiseSchedule) {
        let vocab = Vocabulary::default_toy(8);
        let arch = ArchConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: 2,
            levels: 2,
            time_dim: 4,
            cond_dim: 8,
            vocab_size: vocab.len(),
        };
        (DenoiserModel::new(&arch, 1).unwrap(), vocab, NoiseSchedule::fast())
    }

    fn toy_driver_pixels() -> Array3<f64> {
        Array3::from_shape_fn((3, 8, 8), |(c, y, x)| if (y + x) % 2 == 0 { 50.0 / 255.0 } else { 0.0 } * (c as f64 + 1.0) / 3.0)
    }

    fn toy_items(n: usize) -> Vec<ConditionItem> {
        (0..n)
            .map(|i| ConditionItem {
                image: Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                    0.2 + 0.1 * ((c + y + x + i) % 4) as f64
                }),
                cond_pixels: toy_driver_pixels(),
                prompt: "an image of a [V] with a radial crack".to_string(),
            })
            .collect()
    }

    #[test]
    fn zero_init_is_identity_for_any_driver() {
        let (model, _vocab, _s) = setup();
        let hyper = init_hypernetwork(&model, 9);
        assert!(hyper.couplings_are_zero());
        assert_eq!(hyper.base_hash, model.content_hash());
        let z = crate::rng::normal_array3(&mut rng_from_seed(2), (3, 8, 8));
        let unconditional = model.predict_eps(&z, 5, None, &[]);
        for k in 0..3u64 {
            let driver = crate::rng::normal_array3(&mut rng_from_seed(100 + k), (3, 8, 8)).mapv(|v| v.abs() % 1.0);
            let conditioned = conditioned_denoise_raw(&model, &hyper, &z, 5, None, &driver).unwrap();
            assert_eq!(conditioned, unconditional);
        }
    }

    #[test]
    fn perturbing_one_coupling_weight_changes_output() {
        let (model, _vocab, _s) = setup();
        let mut hyper = init_hypernetwork(&model, 9);
        let z = crate::rng::normal_array3(&mut rng_from_seed(2), (3, 8, 8));
        let driver = toy_driver_pixels();
        let before = conditioned_denoise_raw(&model, &hyper, &z, 5, None, &driver).unwrap();
        let cid = hyper.store.id_of("couple1.weight").unwrap();
        hyper.store.get_mut(cid)[[0, 0, 0, 0]] = 0.5;
        let after = conditioned_denoise_raw(&model, &hyper, &z, 5, None, &driver).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn conditioned_output_is_deterministic() {
        let (model, _vocab, _s) = setup();
        let mut hyper = init_hypernetwork(&model, 9);
        let cid = hyper.store.id_of("couple0.weight").unwrap();
        hyper.store.get_mut(cid)[[0, 0, 0, 0]] = 0.3;
        let z = crate::rng::normal_array3(&mut rng_from_seed(2), (3, 8, 8));
        let driver = toy_driver_pixels();
        let a = conditioned_denoise_raw(&model, &hyper, &z, 5, None, &driver).unwrap();
        let b = conditioned_denoise_raw(&model, &hyper, &z, 5, None, &driver).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incompatible_driver_is_rejected() {
        let (model, _vocab, _s) = setup();
        let hyper = init_hypernetwork(&model, 9);
        let z = crate::rng::normal_array3(&mut rng_from_seed(2), (3, 8, 8));
        let bad = Array3::zeros((1, 8, 8));
        assert!(conditioned_denoise_raw(&model, &hyper, &z, 5, None, &bad).is_err());
        // Wrong spatial dims are fine: nearest-neighbor alignment.
        let other = Array3::zeros((3, 16, 16));
        assert!(conditioned_denoise_raw(&model, &hyper, &z, 5, None, &other).is_ok());
    }

    #[test]
    fn zero_steps_leaves_hyper_unchanged() {
        let (model, vocab, s) = setup();
        let hyper = init_hypernetwork(&model, 9);
        let cfg = ConditionTrainingConfig { steps: 0, ..Default::default() };
        let (out, log) = train_condition(&model, &hyper, &toy_items(2), &vocab, &cfg, &s).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(out.content_hash(), hyper.content_hash());
    }

    #[test]
    fn training_reduces_loss_and_preserves_base() {
        let (model, vocab, s) = setup();
        let hyper = init_hypernetwork(&model, 9);
        let base_hash_before = model.content_hash();
        let cfg = ConditionTrainingConfig {
            steps: 60,
            learning_rate: 3e-3,
            batch_size: 2,
            seed: 4,
            optimizer: "adam".to_string(),
            loss_space: LossSpace::Eps,
            ..Default::default()
        };
        let (trained, log) = train_condition(&model, &hyper, &toy_items(3), &vocab, &cfg, &s).unwrap();
        assert_eq!(model.content_hash(), base_hash_before);
        let first: f64 = log.steps[..5].iter().map(|(m, _)| m).sum::<f64>() / 5.0;
        let last: f64 = log.steps[log.steps.len() - 5..].iter().map(|(m, _)| m).sum::<f64>() / 5.0;
        assert!(last < first, "no improvement: {first} -> {last}");
        assert!(!trained.couplings_are_zero(), "couplings should have moved");
    }

    #[test]
    fn mismatched_base_is_rejected() {
        let (model, vocab, s) = setup();
        let hyper = init_hypernetwork(&model, 9);
        let other = DenoiserModel::new(&model.arch, 999).unwrap();
        let cfg = ConditionTrainingConfig::default();
        let err = train_condition(&other, &hyper, &toy_items(1), &vocab, &cfg, &s);
        assert!(matches!(err, Err(CoreError::Prerequisite(_))));
    }

    #[test]
    fn hyper_gradients_match_finite_differences() {
        let (model, vocab, s) = setup();
        let mut hyper = init_hypernetwork(&model, 9);
        // Nudge couplings off zero so gradients flow through every path.
        for i in 0..hyper.store.len() {
            let name = hyper.store.name(ParamId(i)).to_string();
            if name.starts_with("couple") && name.ends_with("weight") {
                let arr = hyper.store.get_mut(ParamId(i));
                let sh = arr.shape().to_vec();
                for o in 0..sh[0] {
                    arr[[o, o.min(sh[1] - 1), 0, 0]] = 0.05 * (o + 1) as f64;
                }
            }
        }
        let items = toy_items(1);
        let item = &items[0];
        let table = model.text_table();
        let cond = encode_prompt(&item.prompt, &vocab, table.view()).unwrap().pooled();
        let t = 13;
        let eps = crate::rng::normal_array3(&mut rng_from_seed(3), (3, 8, 8));

        let mut grads = Grads::zeros_for(&hyper.store);
        condition_step(&model, &hyper, item, &cond, t, &eps, &s, LossSpace::X0, &mut grads).unwrap();

        let mut store = hyper.store.clone();
        let arch = hyper.arch.clone();
        let sites = hyper.injection_sites.clone();
        let base_hash = hyper.base_hash.clone();
        let report = crate::nn::gradcheck::check(&mut store, &grads, 23, |st| {
            let probe = HyperNetwork {
                store: st.clone(),
                arch: arch.clone(),
                unet: hyper.unet.clone(),
                stem: hyper.stem.clone(),
                couplers: hyper.couplers.clone(),
                injection_sites: sites.clone(),
                base_hash: base_hash.clone(),
            };
            let z_t = forward_sample(&item.image, t, &eps, &s).unwrap();
            let residuals = probe.residuals(&z_t, t, Some(&cond), &item.cond_pixels).unwrap();
            let eps_hat = model.predict_eps(&z_t, t, Some(&cond), &residuals);
            let x_hat = x0_from_eps(&z_t, &eps_hat, t, &s);
            s.omega(t) * mse(&x_hat, &item.image)
        });
        assert!(
            report.max_rel_error < 1e-4,
            "gradcheck: {} rel={}",
            report.worst_param,
            report.max_rel_error
        );
    }
}
