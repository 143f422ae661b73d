//! Self-annotated synthesis: drivers built from defect-free images plus
//! arbitrary masks condition the sampler, and each output image inherits the
//! driver's masks as its ground-truth annotations.
//!
//! The inpainting baseline shares the machinery but conditions on the
//! full-resolution source image with palette masks pasted (background kept,
//! no coarsening); it exists for the variety comparison only.

use crate::condition::{ConditionItem, HyperNetwork};
use crate::dataset::sadf::SadfPair;
use crate::dataset::{AnnotatedDataset, Category, DatasetImage};
use crate::diffusion::model::DenoiserModel;
use crate::diffusion::sampler::ancestral_sample_with;
use crate::diffusion::schedule::NoiseSchedule;
use crate::driver::{extract_driver, DriverConfig, DriverImage};
use crate::error::{CoreError, Result};
use crate::rng::subseed;
use crate::text::{build_prompt, encode_prompt, PromptTemplate, Vocabulary};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MAX_SAMPLES_PER_DRIVER: usize = 15;

#[derive(Debug, Clone)]
pub struct SynthesisJob {
    pub driver: DriverImage,
    pub prompt: String,
    pub samples_per_driver: usize,
    pub seeds: Vec<u64>,
}

impl SynthesisJob {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_driver == 0 || self.samples_per_driver > MAX_SAMPLES_PER_DRIVER {
            return Err(CoreError::config(format!(
                "synthesis: samples_per_driver must lie in 1..={MAX_SAMPLES_PER_DRIVER}, got {}",
                self.samples_per_driver
            )));
        }
        if self.seeds.len() != self.samples_per_driver {
            return Err(CoreError::config("synthesis: one seed per sample required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CoreError::config("synthesis: seeds must be distinct"));
        }
        Ok(())
    }
}

/// How the conditioning pixels are built from (image, masks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Dimmed coarse topology + palette masks (the main pipeline).
    TopologicalDriver,
    /// Source image with palette masks pasted (baseline).
    InpaintOverlay,
}

/// Conditioning pixels for the inpainting baseline: the source image with
/// palette colors pasted inside the masks, background untouched.
pub fn inpaint_condition(image: &Array3<f64>, masks: &[(Array2<u8>, u32)], cfg: &DriverConfig) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    for (mask, class_id) in masks {
        if mask.dim() != (h, w) {
            return Err(CoreError::shape("inpaint_condition: mask dims differ from image"));
        }
        let color = cfg
            .color_of(*class_id)
            .ok_or_else(|| CoreError::config(format!("inpaint_condition: unknown class {class_id}")))?;
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] != 0 {
                    for ch in 0..3 {
                        out[(ch, y, x)] = f64::from(color[ch]) / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Prompt for a set of mask classes: distinct class names in first-appearance
/// order, joined with "and".
pub fn prompt_for_masks(masks: &[(Array2<u8>, u32)], categories: &[Category], vocab: &Vocabulary) -> Result<String> {
    let mut names: Vec<String> = Vec::new();
    for (_, class_id) in masks {
        let name = categories
            .iter()
            .find(|c| c.id == *class_id)
            .map(|c| c.name.clone())
            .ok_or_else(|| CoreError::config(format!("prompt_for_masks: unknown category {class_id}")))?;
        if !names.contains(&name) {
            names.push(name);
        }
    }
    build_prompt(PromptTemplate::ConceptWithCrack, &names, vocab)
}

/// One conditioned ancestral sample, clamped to [0, 1].
pub fn conditioned_sample(
    base: &DenoiserModel,
    hyper: &HyperNetwork,
    cond: &ndarray::Array1<f64>,
    cond_pixels: &Array3<f64>,
    schedule: &NoiseSchedule,
    seed: u64,
    shape: (usize, usize, usize),
) -> Result<Array3<f64>> {
    let mut failure: Option<CoreError> = None;
    let mut out = ancestral_sample_with(
        &mut |x, t| match crate::condition::conditioned_denoise_raw(base, hyper, x, t, Some(cond), cond_pixels) {
            Ok(eps) => eps,
            Err(e) => {
                failure = Some(e);
                Array3::from_elem(x.dim(), f64::NAN)
            }
        },
        schedule,
        seed,
        shape,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    if let Ok(img) = &mut out {
        crate::imgproc::clamp01(img);
    }
    out
}

/// Samples the job: one image per seed, each paired with the driver's mask
/// regions as annotations. Parallel across seeds; outputs in seed order.
pub fn synthesize(
    base: &DenoiserModel,
    hyper: &HyperNetwork,
    job: &SynthesisJob,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
) -> Result<Vec<(Array3<f64>, Vec<(Array2<u8>, u32)>)>> {
    job.validate()?;
    if base.content_hash() != hyper.base_hash {
        return Err(CoreError::Prerequisite(format!(
            "synthesize: hypernetwork was trained against base {}, got {}",
            &hyper.base_hash[..12],
            &base.content_hash()[..12]
        )));
    }
    let table = base.text_table();
    let cond = encode_prompt(&job.prompt, vocab, table.view())?.pooled();
    let (_, h, w) = job.driver.pixels.dim();
    let shape = (base.arch.in_channels, h, w);
    let samples: Result<Vec<Array3<f64>>> = job
        .seeds
        .par_iter()
        .map(|&seed| conditioned_sample(base, hyper, &cond, &job.driver.pixels, schedule, seed, shape))
        .collect();
    Ok(samples?
        .into_iter()
        .map(|img| (img, job.driver.mask_regions.clone()))
        .collect())
}

/// Where a synthetic image came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: u64,
    pub source_image_id: u64,
    pub seed: u64,
    pub prompt: String,
    pub condition_mode: ConditionMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub samples_per_driver: usize,
    pub seed: u64,
    pub mode: ConditionMode,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { samples_per_driver: 5, seed: 0, mode: ConditionMode::TopologicalDriver }
    }
}

/// Runs synthesis over all SADF pairs and assembles a valid annotated
/// dataset. Per-pair failures are collected; the partial dataset stays valid.
pub fn synthesize_dataset(
    base: &DenoiserModel,
    hyper: &HyperNetwork,
    pairs: &[SadfPair],
    driver_cfg: &DriverConfig,
    cfg: &SynthesisConfig,
    categories: &[Category],
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
) -> Result<(AnnotatedDataset, Vec<ProvenanceRecord>, Vec<String>)> {
    let mut ds = AnnotatedDataset::new(categories.to_vec());
    let mut provenance = Vec::new();
    let mut failures = Vec::new();
    let mut next_image_id = 1u64;
    let mut next_ann_id = 1u64;
    for (pi, pair) in pairs.iter().enumerate() {
        let attempt = (|| -> Result<Vec<(Array3<f64>, Vec<(Array2<u8>, u32)>, u64)>> {
            let (cond_pixels, regions) = match cfg.mode {
                ConditionMode::TopologicalDriver => {
                    let driver = extract_driver(&pair.image, &pair.masks, driver_cfg, &format!("sadf-{}", pair.image_id))?;
                    (driver.pixels.clone(), driver.mask_regions.clone())
                }
                ConditionMode::InpaintOverlay => {
                    let px = inpaint_condition(&pair.image, &pair.masks, driver_cfg)?;
                    (px, crate::driver::resolve_overlaps(&pair.masks))
                }
            };
            let prompt = prompt_for_masks(&pair.masks, categories, vocab)?;
            let job = SynthesisJob {
                driver: DriverImage {
                    pixels: cond_pixels,
                    mask_regions: regions,
                    provenance: crate::driver::DriverProvenance {
                        source_id: format!("sadf-{}", pair.image_id),
                        config_hash: driver_cfg.content_hash(),
                    },
                },
                prompt: prompt.clone(),
                samples_per_driver: cfg.samples_per_driver,
                seeds: (0..cfg.samples_per_driver as u64)
                    .map(|k| subseed(cfg.seed, "synthesize", pi as u64 * 1000 + k))
                    .collect(),
            };
            // Same sampling path for both modes; only the conditioning
            // pixels differ.
            let outputs = synthesize(base, hyper, &job, vocab, schedule)?;
            Ok(outputs
                .into_iter()
                .zip(job.seeds.iter())
                .map(|((img, masks), &seed)| (img, masks, seed))
                .collect())
        })();
        match attempt {
            Err(e) => failures.push(format!("pair {pi} (image {}): {e}", pair.image_id)),
            Ok(outputs) => {
                let prompt = prompt_for_masks(&pair.masks, categories, vocab)?;
                for (img, masks, seed) in outputs {
                    let (_, h, w) = img.dim();
                    let image_id = next_image_id;
                    next_image_id += 1;
                    ds.add_image(DatasetImage {
                        id: image_id,
                        file_name: format!("syn_{image_id:06}.png"),
                        width: w,
                        height: h,
                        pixels: Some(img),
                    })?;
                    for (mask, class_id) in masks {
                        if mask.iter().any(|&v| v != 0) {
                            ds.add_annotation(next_ann_id, image_id, class_id, mask)?;
                            next_ann_id += 1;
                        }
                    }
                    provenance.push(ProvenanceRecord {
                        image_id,
                        source_image_id: pair.image_id,
                        seed,
                        prompt: prompt.clone(),
                        condition_mode: cfg.mode,
                    });
                }
            }
        }
    }
    ds.validate()?;
    Ok((ds, provenance, failures))
}

/// Training items for phase 2: drivers extracted from the very images being
/// reconstructed.
pub fn driver_condition_items(
    ds: &AnnotatedDataset,
    driver_cfg: &DriverConfig,
    vocab: &Vocabulary,
) -> Result<Vec<ConditionItem>> {
    condition_items(ds, driver_cfg, vocab, ConditionMode::TopologicalDriver)
}

/// Training items for the inpainting baseline.
pub fn inpaint_condition_items(
    ds: &AnnotatedDataset,
    driver_cfg: &DriverConfig,
    vocab: &Vocabulary,
) -> Result<Vec<ConditionItem>> {
    condition_items(ds, driver_cfg, vocab, ConditionMode::InpaintOverlay)
}

fn condition_items(
    ds: &AnnotatedDataset,
    driver_cfg: &DriverConfig,
    vocab: &Vocabulary,
    mode: ConditionMode,
) -> Result<Vec<ConditionItem>> {
    let mut items = Vec::new();
    for (id, img) in &ds.images {
        let Some(pixels) = &img.pixels else {
            return Err(CoreError::Prerequisite(format!("image {id} has no pixels attached")));
        };
        let anns = ds.annotations_of(*id);
        if anns.is_empty() {
            continue;
        }
        let masks: Vec<(Array2<u8>, u32)> = anns.iter().map(|a| (a.mask.clone(), a.category_id)).collect();
        let cond_pixels = match mode {
            ConditionMode::TopologicalDriver => {
                extract_driver(pixels, &masks, driver_cfg, &format!("train-{id}"))?.pixels
            }
            ConditionMode::InpaintOverlay => inpaint_condition(pixels, &masks, driver_cfg)?,
        };
        let prompt = prompt_for_masks(&masks, &ds.categories, vocab)?;
        items.push(ConditionItem { image: pixels.clone(), cond_pixels, prompt });
    }
    if items.is_empty() {
        return Err(CoreError::config("condition_items: no annotated images"));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::init_hypernetwork;
    use crate::diffusion::model::ArchConfig;

    fn setup() -> (DenoiserModel, HyperNetwork, Vocabulary, NoiseSchedule, DriverConfig) {
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
        let model = DenoiserModel::new(&arch, 1).unwrap();
        let hyper = init_hypernetwork(&model, 2);
        let fast = NoiseSchedule::from_betas_test_mode(vec![0.05; 6]).unwrap();
        let cfg = DriverConfig { downscale_factor: 2, threshold_window: 3, ..Default::default() };
        (model, hyper, vocab, fast, cfg)
    }

    fn toy_driver(cfg: &DriverConfig) -> DriverImage {
        let img = Array3::from_shape_fn((3, 16, 16), |(_, y, x)| ((y * x) % 7) as f64 / 7.0);
        let mut mask = Array2::zeros((16, 16));
        for k in 3..9 {
            mask[(k, 8)] = 1;
        }
        extract_driver(&img, &[(mask, 1)], cfg, "t0").unwrap()
    }

    #[test]
    fn one_seed_gives_one_pair_with_identical_mask() {
        let (model, hyper, vocab, s, cfg) = setup();
        let driver = toy_driver(&cfg);
        let job = SynthesisJob {
            driver: driver.clone(),
            prompt: "an image of a [V] with a radial crack".to_string(),
            samples_per_driver: 1,
            seeds: vec![11],
        };
        let out = synthesize(&model, &hyper, &job, &vocab, &s).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, driver.mask_regions);
    }

    #[test]
    fn sixteen_samples_rejected() {
        let (_, _, _, _, cfg) = setup();
        let job = SynthesisJob {
            driver: toy_driver(&cfg),
            prompt: "p".to_string(),
            samples_per_driver: 16,
            seeds: (0..16).collect(),
        };
        assert!(job.validate().is_err());
        let ok = SynthesisJob {
            driver: toy_driver(&cfg),
            prompt: "p".to_string(),
            samples_per_driver: 15,
            seeds: (0..15).collect(),
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn distinct_seeds_give_distinct_images() {
        let (model, hyper, vocab, s, cfg) = setup();
        let job = SynthesisJob {
            driver: toy_driver(&cfg),
            prompt: "an image of a [V]".to_string(),
            samples_per_driver: 3,
            seeds: vec![1, 2, 3],
        };
        let out = synthesize(&model, &hyper, &job, &vocab, &s).unwrap();
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let d: f64 = ndarray::Zip::from(&out[i].0).and(&out[j].0).fold(0.0, |a, &x, &y| a + (x - y).abs());
                assert!(d > 0.0, "samples {i} and {j} identical");
            }
        }
        // Rerun with same seeds is bit-identical.
        let again = synthesize(&model, &hyper, &job, &vocab, &s).unwrap();
        for (a, b) in out.iter().zip(again.iter()) {
            assert_eq!(a.0, b.0);
        }
    }

    #[test]
    fn hash_mismatch_rejected() {
        let (model, _, vocab, s, cfg) = setup();
        let other = DenoiserModel::new(&model.arch, 99).unwrap();
        let hyper = init_hypernetwork(&other, 2);
        let job = SynthesisJob {
            driver: toy_driver(&cfg),
            prompt: "an image of a [V]".to_string(),
            samples_per_driver: 1,
            seeds: vec![0],
        };
        assert!(matches!(synthesize(&model, &hyper, &job, &vocab, &s), Err(CoreError::Prerequisite(_))));
    }

    #[test]
    fn inpaint_condition_keeps_background_and_paints_masks() {
        let cfg = DriverConfig::default();
        let img = Array3::from_shape_fn((3, 12, 12), |(c, y, x)| ((c + y + x) % 5) as f64 / 5.0);
        let mut mask = Array2::zeros((12, 12));
        mask[(4, 4)] = 1;
        mask[(4, 5)] = 1;
        let out = inpaint_condition(&img, &[(mask.clone(), 2)], &cfg).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                if mask[(y, x)] != 0 {
                    assert_eq!(out[(0, y, x)], 0.0);
                    assert_eq!(out[(1, y, x)], 1.0);
                    assert_eq!(out[(2, y, x)], 0.0);
                } else {
                    for ch in 0..3 {
                        assert_eq!(out[(ch, y, x)], img[(ch, y, x)]);
                    }
                }
            }
        }
    }

    #[test]
    fn multi_class_prompt_joins_with_and() {
        let vocab = Vocabulary::default_toy(8);
        let cats = crate::dataset::toy::toy_categories();
        let m = Array2::from_elem((4, 4), 1u8);
        let masks = vec![(m.clone(), 1u32), (m.clone(), 4u32), (m, 1u32)];
        let p = prompt_for_masks(&masks, &cats, &vocab).unwrap();
        assert_eq!(p, "an image of a [V] with a radial and curved crack");
    }

    #[test]
    fn dataset_synthesis_produces_valid_coco() {
        let (model, hyper, vocab, s, cfg) = setup();
        let cats = crate::dataset::toy::toy_categories();
        let mut mask = Array2::zeros((16, 16));
        for k in 2..10 {
            mask[(8, k)] = 1;
        }
        let pairs: Vec<SadfPair> = (0..3)
            .map(|i| SadfPair {
                image_id: 1_000_000 + i,
                image: Array3::from_shape_fn((3, 16, 16), |(_, y, x)| ((y + x + i as usize) % 6) as f64 / 6.0),
                masks: vec![(mask.clone(), (i % 5) as u32 + 1)],
                provenance: vec![],
            })
            .collect();
        let syn_cfg = SynthesisConfig { samples_per_driver: 2, seed: 5, mode: ConditionMode::TopologicalDriver };
        let (ds, prov, failures) =
            synthesize_dataset(&model, &hyper, &pairs, &cfg, &syn_cfg, &cats, &vocab, &s).unwrap();
        assert!(failures.is_empty(), "{failures:?}");
        assert_eq!(ds.images.len(), 6);
        assert_eq!(prov.len(), 6);
        ds.validate().unwrap();
        // Annotation masks equal the driver masks bit-exactly.
        for ann in ds.annotations.values() {
            assert_eq!(ann.mask, mask);
        }
        // Determinism end to end.
        let (ds2, _, _) = synthesize_dataset(&model, &hyper, &pairs, &cfg, &syn_cfg, &cats, &vocab, &s).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn empty_pair_list_gives_empty_dataset() {
        let (model, hyper, vocab, s, cfg) = setup();
        let cats = crate::dataset::toy::toy_categories();
        let syn_cfg = SynthesisConfig::default();
        let (ds, prov, failures) =
            synthesize_dataset(&model, &hyper, &[], &cfg, &syn_cfg, &cats, &vocab, &s).unwrap();
        assert!(ds.images.is_empty() && prov.is_empty() && failures.is_empty());
    }
}
