//! SADF construction: pair held-out defect-free images with arbitrary defect
//! masks for synthesis-time conditioning.

use super::augment::{warp_mask, AugmentParams};
use crate::error::{CoreError, Result};
use crate::rng::{rng_from_seed, subseed};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Sample masks from the annotated pool with small affine + boundary
    /// jitter.
    RandomPerturbed,
    /// Load masks verbatim from files.
    External,
}

impl FromStr for MaskStrategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_perturbed" => Ok(MaskStrategy::RandomPerturbed),
            "external" => Ok(MaskStrategy::External),
            "generative" | "network" | "model" => Err(CoreError::OutOfScope(
                "mask generation by another network is not part of this pipeline".to_string(),
            )),
            other => Err(CoreError::config(format!("unknown mask strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SadfConfig {
    pub strategy: MaskStrategy,
    /// Masks pasted per defect-free image.
    pub masks_per_image: usize,
    /// Rotation jitter in degrees.
    pub jitter_angle_deg: f64,
    /// Translation jitter in pixels.
    pub jitter_translate: f64,
    /// Probability of flipping each boundary pixel.
    pub boundary_flip_prob: f64,
    /// Directory of external mask PNGs (strategy = external).
    pub external_dir: Option<PathBuf>,
}

impl Default for SadfConfig {
    fn default() -> Self {
        SadfConfig {
            strategy: MaskStrategy::RandomPerturbed,
            masks_per_image: 1,
            jitter_angle_deg: 10.0,
            jitter_translate: 5.0,
            boundary_flip_prob: 0.12,
            external_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SadfProvenance {
    pub image_id: u64,
    /// Pool annotation id (random_perturbed) or file name (external).
    pub mask_source: String,
    pub perturb_seed: u64,
}

/// One conditioning pair: a defect-free image plus pasted masks.
#[derive(Debug, Clone)]
pub struct SadfPair {
    pub image_id: u64,
    pub image: Array3<f64>,
    pub masks: Vec<(Array2<u8>, u32)>,
    pub provenance: Vec<SadfProvenance>,
}

/// Boundary pixels: mask pixels with at least one 4-neighbor outside the
/// mask (or on the image border).
fn boundary(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask[(y - 1, x)] == 0
                || mask[(y + 1, x)] == 0
                || mask[(y, x - 1)] == 0
                || mask[(y, x + 1)] == 0;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Small affine + boundary jitter. Magnitude 0 returns the mask unchanged.
pub fn perturb_mask(mask: &Array2<u8>, cfg: &SadfConfig, seed: u64) -> Array2<u8> {
    if cfg.jitter_angle_deg == 0.0 && cfg.jitter_translate == 0.0 && cfg.boundary_flip_prob == 0.0 {
        return mask.clone();
    }
    let mut rng = rng_from_seed(seed);
    let params = AugmentParams {
        angle_deg: rng.gen_range(-cfg.jitter_angle_deg..=cfg.jitter_angle_deg),
        translate: (
            rng.gen_range(-cfg.jitter_translate..=cfg.jitter_translate),
            rng.gen_range(-cfg.jitter_translate..=cfg.jitter_translate),
        ),
        ..AugmentParams::identity()
    };
    let mut out = warp_mask(mask, &params);
    if cfg.boundary_flip_prob > 0.0 {
        // Flip boundary pixels both ways so the expected area stays put.
        let outer: Vec<(usize, usize)> = {
            let (h, w) = out.dim();
            let mut ring = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if out[(y, x)] == 0 {
                        let touches = (y > 0 && out[(y - 1, x)] != 0)
                            || (y + 1 < h && out[(y + 1, x)] != 0)
                            || (x > 0 && out[(y, x - 1)] != 0)
                            || (x + 1 < w && out[(y, x + 1)] != 0);
                        if touches {
                            ring.push((y, x));
                        }
                    }
                }
            }
            ring
        };
        for (y, x) in boundary(&out) {
            if rng.gen_bool(cfg.boundary_flip_prob) {
                out[(y, x)] = 0;
            }
        }
        for (y, x) in outer {
            if rng.gen_bool(cfg.boundary_flip_prob) {
                out[(y, x)] = 1;
            }
        }
    }
    // Degenerate jitter outcomes fall back to the unperturbed mask.
    if out.iter().all(|&v| v == 0) {
        return mask.clone();
    }
    out
}

/// Builds SADF pairs. `mask_pool` entries are (annotation id, bitmap,
/// class id); external strategy reads PNG masks from `cfg.external_dir`
/// instead (class id round-robins over the palette classes).
pub fn build_sadf(
    defect_free: &[(u64, Array3<f64>)],
    mask_pool: &[(u64, Array2<u8>, u32)],
    cfg: &SadfConfig,
    seed: u64,
) -> Result<Vec<SadfPair>> {
    if defect_free.is_empty() {
        return Err(CoreError::config("build_sadf: defect-free pool is empty"));
    }
    match cfg.strategy {
        MaskStrategy::RandomPerturbed => {
            if mask_pool.is_empty() {
                return Err(CoreError::config("build_sadf: mask pool is empty"));
            }
            let mut out = Vec::with_capacity(defect_free.len());
            for (k, (image_id, image)) in defect_free.iter().enumerate() {
                let mut rng = rng_from_seed(subseed(seed, "sadf-pick", k as u64));
                let (_, h, w) = image.dim();
                let mut masks = Vec::new();
                let mut provenance = Vec::new();
                for m in 0..cfg.masks_per_image {
                    let (ann_id, mask, class_id) = &mask_pool[rng.gen_range(0..mask_pool.len())];
                    if mask.dim() != (h, w) {
                        return Err(CoreError::shape(format!(
                            "build_sadf: pool mask {ann_id} dims {:?} differ from image {h}x{w}",
                            mask.dim()
                        )));
                    }
                    let pseed = subseed(seed, "sadf-perturb", (k * 31 + m) as u64);
                    masks.push((perturb_mask(mask, cfg, pseed), *class_id));
                    provenance.push(SadfProvenance {
                        image_id: *image_id,
                        mask_source: format!("annotation:{ann_id}"),
                        perturb_seed: pseed,
                    });
                }
                out.push(SadfPair { image_id: *image_id, image: image.clone(), masks, provenance });
            }
            Ok(out)
        }
        MaskStrategy::External => {
            let dir = cfg
                .external_dir
                .as_ref()
                .ok_or_else(|| CoreError::config("build_sadf: external strategy needs external_dir"))?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CoreError::config(format!("build_sadf: no PNG masks under {}", dir.display())));
            }
            let n_classes = crate::driver::default_palette().len() as u32;
            let mut out = Vec::with_capacity(defect_free.len());
            for (k, (image_id, image)) in defect_free.iter().enumerate() {
                let mut rng = rng_from_seed(subseed(seed, "sadf-ext", k as u64));
                let (_, h, w) = image.dim();
                let mut masks = Vec::new();
                let mut provenance = Vec::new();
                for m in 0..cfg.masks_per_image {
                    let file = &files[rng.gen_range(0..files.len())];
                    let mask = crate::imgproc::load_mask_png(file)?;
                    if mask.dim() != (h, w) {
                        return Err(CoreError::shape(format!(
                            "build_sadf: external mask {} is {:?}, image is {h}x{w}",
                            file.display(),
                            mask.dim()
                        )));
                    }
                    if mask.iter().all(|&v| v == 0) {
                        return Err(CoreError::Validation(vec![format!(
                            "build_sadf: external mask {} is empty",
                            file.display()
                        )]));
                    }
                    let class_id = (m as u32 % n_classes) + 1;
                    masks.push((mask, class_id));
                    provenance.push(SadfProvenance {
                        image_id: *image_id,
                        mask_source: file.file_name().unwrap().to_string_lossy().to_string(),
                        perturb_seed: 0,
                    });
                }
                out.push(SadfPair { image_id: *image_id, image: image.clone(), masks, provenance });
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_mask(size: usize) -> Array2<u8> {
        let mut m = Array2::zeros((size, size));
        for y in 10..18 {
            for x in 12..17 {
                m[(y, x)] = 1;
            }
        }
        m
    }

    fn free_images(n: usize, size: usize) -> Vec<(u64, Array3<f64>)> {
        (0..n as u64)
            .map(|i| (1_000_000 + i, Array3::from_elem((3, size, size), 0.5 + 0.01 * i as f64)))
            .collect()
    }

    #[test]
    fn strategy_parsing_rejects_network_generation() {
        assert_eq!(MaskStrategy::from_str("random_perturbed").unwrap(), MaskStrategy::RandomPerturbed);
        assert_eq!(MaskStrategy::from_str("external").unwrap(), MaskStrategy::External);
        let err = MaskStrategy::from_str("network").unwrap_err();
        assert!(matches!(err, CoreError::OutOfScope(_)));
    }

    #[test]
    fn zero_magnitude_perturbation_is_identity() {
        let cfg = SadfConfig {
            jitter_angle_deg: 0.0,
            jitter_translate: 0.0,
            boundary_flip_prob: 0.0,
            ..Default::default()
        };
        let mask = blob_mask(32);
        assert_eq!(perturb_mask(&mask, &cfg, 5), mask);
    }

    #[test]
    fn fixed_seed_gives_identical_pairings() {
        let pool = vec![(7u64, blob_mask(32), 2u32)];
        let imgs = free_images(4, 32);
        let a = build_sadf(&imgs, &pool, &SadfConfig::default(), 3).unwrap();
        let b = build_sadf(&imgs, &pool, &SadfConfig::default(), 3).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.masks.len(), y.masks.len());
            for ((ma, ca), (mb, cb)) in x.masks.iter().zip(y.masks.iter()) {
                assert_eq!(ma, mb);
                assert_eq!(ca, cb);
            }
        }
    }

    #[test]
    fn perturbed_area_stays_within_twenty_percent() {
        let cfg = SadfConfig::default();
        let mask = blob_mask(32);
        let area = mask.iter().filter(|&&v| v != 0).count() as f64;
        for draw in 0..100u64 {
            let p = perturb_mask(&mask, &cfg, 1000 + draw);
            let pa = p.iter().filter(|&&v| v != 0).count() as f64;
            let rel = (pa - area).abs() / area;
            assert!(rel <= 0.20, "draw {draw}: area changed by {:.1}%", rel * 100.0);
        }
    }

    #[test]
    fn empty_pools_are_rejected() {
        let pool = vec![(7u64, blob_mask(32), 2u32)];
        assert!(build_sadf(&[], &pool, &SadfConfig::default(), 0).is_err());
        assert!(build_sadf(&free_images(2, 32), &[], &SadfConfig::default(), 0).is_err());
    }

    #[test]
    fn external_masks_load_verbatim_and_bounds_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mask = blob_mask(32);
        crate::imgproc::save_mask_png(&mask, &dir.path().join("m0.png")).unwrap();
        let cfg = SadfConfig {
            strategy: MaskStrategy::External,
            external_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let pairs = build_sadf(&free_images(2, 32), &[], &cfg, 0).unwrap();
        assert_eq!(pairs[0].masks[0].0, mask);
        // Mismatched size is an error.
        let err = build_sadf(&free_images(1, 16), &[], &cfg, 0);
        assert!(err.is_err());
    }
}
