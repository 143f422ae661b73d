//! Phase 1: adapt the denoiser to the new concept with class-specific prior
//! preservation.
//!
//! The prior set is generated once from the frozen pre-adaptation weights and
//! never regenerated mid-training. The combined objective reconstructs
//! concept images under the concept prompt and prior images under the
//! class-noun prompt, weighted by lambda. Both terms are x0-reconstruction
//! losses evaluated through the epsilon parameterization.

use crate::diffusion::model::{BackwardResult, DenoiserModel};
use crate::diffusion::ops::{finite_or_err, forward_sample, mse, x0_from_eps};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::nn::optim::{AnyOptimizer, Optimizer};
use crate::nn::store::Grads;
use crate::rng::{normal_array3, rng_from_seed, subseed};
use crate::text::{accumulate_table_grad, encode_prompt, PromptEmbedding, Vocabulary};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Images generated by the frozen pre-adaptation model under the class-noun
/// prompt, together with the seeds that produced them.
#[derive(Debug, Clone)]
pub struct PriorDataset {
    pub images: Vec<Array3<f64>>,
    pub prompt: String,
    pub seeds: Vec<u64>,
}

impl PriorDataset {
    pub fn empty(prompt: &str) -> Self {
        PriorDataset { images: Vec::new(), prompt: prompt.to_string(), seeds: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Pixel policy applied to generated prior images; recorded in manifests.
pub const PRIOR_CLAMP_POLICY: &str = "clamp_final_unit_range";

/// Samples `n` prior images from the frozen model. Deterministic per seed;
/// images are clamped to [0, 1].
pub fn generate_prior_set(
    frozen_model: &DenoiserModel,
    vocab: &Vocabulary,
    class_prompt: &str,
    n: usize,
    seed: u64,
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
) -> Result<PriorDataset> {
    let table = frozen_model.text_table();
    let embedding = encode_prompt(class_prompt, vocab, table.view())?;
    let cond = embedding.pooled();
    let seeds: Vec<u64> = (0..n as u64).map(|i| subseed(seed, "prior-set", i)).collect();
    let mut images = Vec::with_capacity(n);
    for &s in &seeds {
        let mut img = crate::diffusion::sampler::ancestral_sample(frozen_model, schedule, Some(&cond), s, shape)?;
        crate::imgproc::clamp01(&mut img);
        images.push(img);
    }
    Ok(PriorDataset { images, prompt: class_prompt.to_string(), seeds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpace {
    /// Reconstruction loss on the implied x0 (the written objective).
    X0,
    /// Equivalent epsilon-space loss; better conditioned at high noise.
    Eps,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptTrainingConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub prior_set_size: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// "sgd" (default) or "adam".
    pub optimizer: String,
    pub loss_space: LossSpace,
    /// When set, only the [V] row of the text table receives updates.
    pub freeze_template_rows: bool,
    pub divergence_threshold: f64,
}

impl Default for ConceptTrainingConfig {
    fn default() -> Self {
        ConceptTrainingConfig {
            lambda: 1.0,
            steps: 200,
            learning_rate: 1e-4,
            prior_set_size: 0,
            seed: 0,
            batch_size: 4,
            optimizer: "sgd".to_string(),
            loss_space: LossSpace::X0,
            freeze_template_rows: false,
            divergence_threshold: 1e6,
        }
    }
}

impl ConceptTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(CoreError::config("concept: lambda must be >= 0"));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(CoreError::config("concept: batch_size and learning_rate must be positive"));
        }
        if AnyOptimizer::from_kind(&self.optimizer, self.learning_rate).is_none() {
            return Err(CoreError::config(format!("concept: unknown optimizer {}", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// (reconstruction term, prior term) per step.
    pub steps: Vec<(f64, f64)>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,main_loss,prior_loss\n");
        for (i, (m, p)) in self.steps.iter().enumerate() {
            out.push_str(&format!("{i},{m},{p}\n"));
        }
        out
    }
}

/// One x0-reconstruction term: `omega[t] * mean((x0_hat - x)^2)` with
/// `x0_hat` reconstructed from the epsilon prediction at the closed-form
/// noisy input.
pub fn reconstruction_term(
    model: &DenoiserModel,
    x: &Array3<f64>,
    cond: &PromptEmbedding,
    t: usize,
    eps: &Array3<f64>,
    s: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_sample(x, t, eps, s)?;
    let pooled = cond.pooled();
    let eps_hat = model.predict_eps(&z_t, t, Some(&pooled), &[]);
    finite_or_err(&eps_hat, t)?;
    let x_hat = x0_from_eps(&z_t, &eps_hat, t, s);
    Ok(s.omega(t) * mse(&x_hat, x))
}

/// Combined prior-preservation objective:
/// reconstruction term on (x, c) at t plus lambda times the same term on
/// (x_pr, c_pr) at t_prime. Errors on negative lambda.
#[allow(clippy::too_many_arguments)]
pub fn prior_preservation_loss(
    model: &DenoiserModel,
    x: &Array3<f64>,
    c: &PromptEmbedding,
    x_pr: &Array3<f64>,
    c_pr: &PromptEmbedding,
    t: usize,
    t_prime: usize,
    eps: &Array3<f64>,
    eps_prime: &Array3<f64>,
    lambda: f64,
    s: &NoiseSchedule,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(CoreError::config("prior_preservation_loss: lambda must be >= 0"));
    }
    let main = reconstruction_term(model, x, c, t, eps, s)?;
    let prior = reconstruction_term(model, x_pr, c_pr, t_prime, eps_prime, s)?;
    Ok(main + lambda * prior)
}

/// Loss + gradients for one reconstruction term. Scatters the text-table
/// gradient into the model's table entry inside `grads`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reconstruction_term_with_grads(
    model: &DenoiserModel,
    x: &Array3<f64>,
    cond: &PromptEmbedding,
    t: usize,
    eps: &Array3<f64>,
    s: &NoiseSchedule,
    loss_space: LossSpace,
    grads: &mut Grads,
) -> Result<f64> {
    let z_t = forward_sample(x, t, eps, s)?;
    let pooled = cond.pooled();
    let (eps_hat, cache) = model.forward_cached(&z_t, t, Some(&pooled), &[]);
    finite_or_err(&eps_hat, t)?;
    let n = eps_hat.len() as f64;
    let w = s.omega(t);
    let (loss, gout) = match loss_space {
        LossSpace::X0 => {
            let x_hat = x0_from_eps(&z_t, &eps_hat, t, s);
            let loss = w * mse(&x_hat, x);
            // d x_hat / d eps_hat = -noise_scale / signal_scale.
            let scale = -s.noise_scale(t) / s.signal_scale(t);
            let gout = ndarray::Zip::from(&x_hat)
                .and(x)
                .map_collect(|&xh, &xv| 2.0 * w * (xh - xv) / n * scale);
            (loss, gout)
        }
        LossSpace::Eps => {
            let loss = w * mse(&eps_hat, eps);
            let gout = ndarray::Zip::from(&eps_hat).and(eps).map_collect(|&p, &e| 2.0 * w * (p - e) / n);
            (loss, gout)
        }
    };
    let back: BackwardResult = model.backward(&cache, &gout);
    grads.add_scaled(&back.grads, 1.0);
    // Route the pooled-conditioning gradient into the text table rows.
    let table_id = model.text_table_id();
    let dims = model.store.get(table_id).shape().to_vec();
    let mut scatter = ndarray::Array2::zeros((dims[0], dims[1]));
    accumulate_table_grad(cond, &back.grad_cond, &mut scatter);
    grads.accumulate(table_id, scatter.into_dyn());
    Ok(loss)
}

fn zero_frozen_rows(model: &DenoiserModel, vocab: &Vocabulary, grads: &mut Grads) {
    let table_id = model.text_table_id();
    let Some(slot) = grads.get_mut(table_id) else { return };
    let v_row = vocab.index_of(crate::text::RARE_TOKEN).expect("[V] in vocabulary");
    let mut g = slot.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
    for r in 0..g.nrows() {
        if r != v_row {
            g.row_mut(r).fill(0.0);
        }
    }
}

/// Fine-tunes a copy of the model on the concept images. Returns the adapted
/// model and the per-step loss curves; the input model is untouched.
///
/// Determinism: the main term consumes one RNG stream and the prior term an
/// independent one, so runs with different lambda share identical main-term
/// draws for the same seed.
pub fn learn_concept(
    model: &DenoiserModel,
    concept_images: &[Array3<f64>],
    concept_prompt: &str,
    prior: &PriorDataset,
    vocab: &Vocabulary,
    cfg: &ConceptTrainingConfig,
    s: &NoiseSchedule,
) -> Result<(DenoiserModel, TrainingLog)> {
    cfg.validate()?;
    if concept_images.is_empty() {
        return Err(CoreError::config("learn_concept: no concept images"));
    }
    let mut adapted = model.clone_model();
    let mut log = TrainingLog::default();
    if cfg.steps == 0 {
        return Ok((adapted, log));
    }
    let prior_active = cfg.lambda > 0.0 && !prior.is_empty();
    let mut opt = AnyOptimizer::from_kind(&cfg.optimizer, cfg.learning_rate).unwrap();
    let mut rng_main = rng_from_seed(subseed(cfg.seed, "concept-main", 0));
    let mut rng_prior = rng_from_seed(subseed(cfg.seed, "concept-prior", 0));

    for step in 0..cfg.steps {
        // Prompts are re-encoded each step because the table rows train.
        let table = adapted.text_table();
        let c = encode_prompt(concept_prompt, vocab, table.view())?;
        let c_pr = encode_prompt(&prior.prompt, vocab, table.view())?;

        let mut grads = Grads::zeros_for(&adapted.store);
        let mut main_total = 0.0;
        let mut prior_total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng_main.gen_range(0..concept_images.len());
            let t = rng_main.gen_range(0..s.len());
            let eps = normal_array3(&mut rng_main, concept_images[idx].dim());
            main_total += reconstruction_term_with_grads(
                &adapted,
                &concept_images[idx],
                &c,
                t,
                &eps,
                s,
                cfg.loss_space,
                &mut grads,
            )?;
            if prior_active {
                let pidx = rng_prior.gen_range(0..prior.len());
                let tp = rng_prior.gen_range(0..s.len());
                let eps_p = normal_array3(&mut rng_prior, prior.images[pidx].dim());
                let mut prior_grads = Grads::zeros_for(&adapted.store);
                prior_total += reconstruction_term_with_grads(
                    &adapted,
                    &prior.images[pidx],
                    &c_pr,
                    tp,
                    &eps_p,
                    s,
                    cfg.loss_space,
                    &mut prior_grads,
                )?;
                grads.add_scaled(&prior_grads, cfg.lambda);
            }
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        if cfg.freeze_template_rows {
            zero_frozen_rows(&adapted, vocab, &mut grads);
        }
        let main_mean = main_total / cfg.batch_size as f64;
        let prior_mean = prior_total / cfg.batch_size as f64;
        let total = main_mean + cfg.lambda * prior_mean;
        if !total.is_finite() || total > cfg.divergence_threshold {
            return Err(CoreError::numeric(format!(
                "learn_concept: divergence at step {step} (loss {total})"
            )));
        }
        log.steps.push((main_mean, prior_mean));
        opt.step(&mut adapted.store, &grads);
    }
    Ok((adapted, log))
}

/// Plain fine-tuning loop, written independently of [`learn_concept`]. With
/// lambda = 0 and an empty prior set the two must produce bitwise-identical
/// loss sequences and parameters for the same seed.
pub fn finetune_reconstruction(
    model: &DenoiserModel,
    images: &[Array3<f64>],
    prompt: &str,
    vocab: &Vocabulary,
    cfg: &ConceptTrainingConfig,
    s: &NoiseSchedule,
) -> Result<(DenoiserModel, TrainingLog)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(CoreError::config("finetune: no images"));
    }
    let mut tuned = model.clone_model();
    let mut log = TrainingLog::default();
    let mut opt = AnyOptimizer::from_kind(&cfg.optimizer, cfg.learning_rate).unwrap();
    let mut rng = rng_from_seed(subseed(cfg.seed, "concept-main", 0));
    for step in 0..cfg.steps {
        let table = tuned.text_table();
        let c = encode_prompt(prompt, vocab, table.view())?;
        let mut grads = Grads::zeros_for(&tuned.store);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..images.len());
            let t = rng.gen_range(0..s.len());
            let eps = normal_array3(&mut rng, images[idx].dim());
            total +=
                reconstruction_term_with_grads(&tuned, &images[idx], &c, t, &eps, s, cfg.loss_space, &mut grads)?;
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        if cfg.freeze_template_rows {
            zero_frozen_rows(&tuned, vocab, &mut grads);
        }
        let mean = total / cfg.batch_size as f64;
        if !mean.is_finite() || mean > cfg.divergence_threshold {
            return Err(CoreError::numeric(format!("finetune: divergence at step {step} (loss {mean})")));
        }
        log.steps.push((mean, 0.0));
        opt.step(&mut tuned.store, &grads);
    }
    Ok((tuned, log))
}

/// Mean x0-reconstruction loss of the prior set under the class-noun prompt,
/// with fixed draws per seed. Used to compare runs.
pub fn eval_prior_loss(
    model: &DenoiserModel,
    prior: &PriorDataset,
    vocab: &Vocabulary,
    seed: u64,
    s: &NoiseSchedule,
) -> Result<f64> {
    if prior.is_empty() {
        return Ok(0.0);
    }
    let table = model.text_table();
    let c_pr = encode_prompt(&prior.prompt, vocab, table.view())?;
    let mut rng = rng_from_seed(subseed(seed, "prior-eval", 0));
    let mut total = 0.0;
    let mut count = 0usize;
    for img in &prior.images {
        for _ in 0..4 {
            let t = rng.gen_range(0..s.len());
            let eps = normal_array3(&mut rng, img.dim());
            total += reconstruction_term(model, img, &c_pr, t, &eps, s)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
