//! Offline augmentation: crop/zoom, roto-translation, noise and contrast,
//! with masks co-transformed through the same geometry.

use crate::error::{CoreError, Result};
use crate::rng::{rng_from_seed, subseed, SeededRng};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// One sampled augmentation. Identity parameters reproduce the source
/// bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Rotation in degrees about the image center.
    pub angle_deg: f64,
    /// Translation in pixels.
    pub translate: (f64, f64),
    /// Crop scale in (0, 1]; the crop is resized back to the source size.
    pub crop_scale: f64,
    /// Crop offset as a fraction of the slack, in [0, 1].
    pub crop_offset: (f64, f64),
    pub noise_std: f64,
    pub contrast: f64,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            translate: (0.0, 0.0),
            crop_scale: 1.0,
            crop_offset: (0.0, 0.0),
            noise_std: 0.0,
            contrast: 1.0,
            noise_seed: 0,
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.translate == (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub variants: usize,
    pub max_angle_deg: f64,
    pub max_translate: f64,
    pub crop_scale_range: (f64, f64),
    pub max_noise_std: f64,
    pub contrast_range: (f64, f64),
    /// Retries before a mask-erasing crop makes the variant get skipped.
    pub retry_bound: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            variants: 10,
            max_angle_deg: 15.0,
            max_translate: 4.0,
            crop_scale_range: (0.82, 1.0),
            max_noise_std: 0.02,
            contrast_range: (0.85, 1.15),
            retry_bound: 5,
        }
    }
}

/// Inverse-mapped affine warp (rotation about the center plus translation).
pub fn warp_affine(image: &Array3<f64>, params: &AugmentParams, interp: Interp) -> Array3<f64> {
    if params.is_rigid_identity() {
        return image.clone();
    }
    let (c, h, w) = image.dim();
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse map: undo translation, then rotate backwards.
            let ty = y as f64 - params.translate.0 - cy;
            let tx = x as f64 - params.translate.1 - cx;
            let sy = cy + ty * cos - tx * sin;
            let sx = cx + ty * sin + tx * cos;
            match interp {
                Interp::Nearest => {
                    let (ry, rx) = (sy.round(), sx.round());
                    if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                        for ch in 0..c {
                            out[(ch, y, x)] = image[(ch, ry as usize, rx as usize)];
                        }
                    }
                }
                Interp::Bilinear => {
                    if sy >= 0.0 && sx >= 0.0 && sy <= (h - 1) as f64 && sx <= (w - 1) as f64 {
                        let y0 = sy.floor() as usize;
                        let x0 = sx.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let wy = sy - y0 as f64;
                        let wx = sx - x0 as f64;
                        for ch in 0..c {
                            out[(ch, y, x)] = image[(ch, y0, x0)] * (1.0 - wy) * (1.0 - wx)
                                + image[(ch, y0, x1)] * (1.0 - wy) * wx
                                + image[(ch, y1, x0)] * wy * (1.0 - wx)
                                + image[(ch, y1, x1)] * wy * wx;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn warp_mask(mask: &Array2<u8>, params: &AugmentParams) -> Array2<u8> {
    let (h, w) = mask.dim();
    let as_image = Array3::from_shape_fn((1, h, w), |(_, y, x)| f64::from(mask[(y, x)]));
    let warped = warp_affine(&as_image, params, Interp::Nearest);
    Array2::from_shape_fn((h, w), |(y, x)| u8::from(warped[(0, y, x)] > 0.5))
}

fn crop_resize(image: &Array3<f64>, params: &AugmentParams, interp: Interp) -> Result<Array3<f64>> {
    if params.crop_scale >= 1.0 {
        return Ok(image.clone());
    }
    let (_, h, w) = image.dim();
    let ch = ((h as f64) * params.crop_scale).round().max(4.0) as usize;
    let cw = ((w as f64) * params.crop_scale).round().max(4.0) as usize;
    let oy = ((h - ch) as f64 * params.crop_offset.0).round() as usize;
    let ox = ((w - cw) as f64 * params.crop_offset.1).round() as usize;
    let cropped = image.slice(ndarray::s![.., oy..oy + ch, ox..ox + cw]).to_owned();
    match interp {
        Interp::Bilinear => crate::imgproc::resize(&cropped, h, w),
        Interp::Nearest => crate::imgproc::resize_nearest(&cropped, h, w),
    }
}

/// Applies the full augmentation to an image and its masks. Masks follow the
/// identical geometry (nearest-neighbor); photometric steps touch the image
/// only.
pub fn apply_augment(
    image: &Array3<f64>,
    masks: &[(Array2<u8>, u32)],
    params: &AugmentParams,
) -> Result<(Array3<f64>, Vec<(Array2<u8>, u32)>)> {
    let mut img = warp_affine(image, params, Interp::Bilinear);
    img = crop_resize(&img, params, Interp::Bilinear)?;
    let mut out_masks = Vec::with_capacity(masks.len());
    for (mask, class_id) in masks {
        let warped = warp_mask(mask, params);
        let (h, w) = warped.dim();
        let as_img = Array3::from_shape_fn((1, h, w), |(_, y, x)| f64::from(warped[(y, x)]));
        let resized = crop_resize(&as_img, params, Interp::Nearest)?;
        out_masks.push((Array2::from_shape_fn((h, w), |(y, x)| u8::from(resized[(0, y, x)] > 0.5)), *class_id));
    }
    if params.noise_std > 0.0 {
        let mut rng = rng_from_seed(params.noise_seed);
        let noise = crate::rng::normal_array3(&mut rng, img.dim()).mapv(|v| v * params.noise_std);
        img += &noise;
    }
    if params.contrast != 1.0 {
        img.mapv_inplace(|v| (v - 0.5) * params.contrast + 0.5);
    }
    if params.noise_std > 0.0 || params.contrast != 1.0 {
        crate::imgproc::clamp01(&mut img);
    }
    Ok((img, out_masks))
}

/// Draws `cfg.variants` independently seeded augmentations. Variants whose
/// crop erases an entire mask are retried up to the bound, then skipped with
/// a warning.
pub fn augment(
    image: &Array3<f64>,
    masks: &[(Array2<u8>, u32)],
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<(Array3<f64>, Vec<(Array2<u8>, u32)>, AugmentParams)>> {
    let (_, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(CoreError::shape("augment: empty image"));
    }
    let mut out = Vec::with_capacity(cfg.variants);
    for v in 0..cfg.variants {
        let mut accepted = None;
        for attempt in 0..=cfg.retry_bound {
            let mut rng: SeededRng = rng_from_seed(subseed(seed, "augment", (v * 101 + attempt) as u64));
            let params = AugmentParams {
                angle_deg: rng.gen_range(-cfg.max_angle_deg..=cfg.max_angle_deg),
                translate: (
                    rng.gen_range(-cfg.max_translate..=cfg.max_translate),
                    rng.gen_range(-cfg.max_translate..=cfg.max_translate),
                ),
                crop_scale: rng.gen_range(cfg.crop_scale_range.0..=cfg.crop_scale_range.1),
                crop_offset: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
                noise_std: rng.gen_range(0.0..=cfg.max_noise_std),
                contrast: rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1),
                noise_seed: subseed(seed, "augment-noise", (v * 101 + attempt) as u64),
            };
            let (img, warped_masks) = apply_augment(image, masks, &params)?;
            let erased = warped_masks.iter().any(|(m, _)| m.iter().all(|&v| v == 0));
            if !erased {
                accepted = Some((img, warped_masks, params));
                break;
            }
        }
        match accepted {
            Some(item) => out.push(item),
            None => log::warn!("augment: variant {v} erased a mask after {} retries; skipped", cfg.retry_bound),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image() -> Array3<f64> {
        Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c + 1) * (y * 16 + x)) as f64 % 97.0 / 97.0)
    }

    fn toy_mask() -> Array2<u8> {
        let mut m = Array2::zeros((16, 16));
        for k in 4..9 {
            m[(k, 7)] = 1;
        }
        m
    }

    #[test]
    fn identity_params_reproduce_source_exactly() {
        let img = toy_image();
        let masks = vec![(toy_mask(), 1u32)];
        let (out, out_masks) = apply_augment(&img, &masks, &AugmentParams::identity()).unwrap();
        assert_eq!(out, img);
        assert_eq!(out_masks[0].0, masks[0].0);
    }

    #[test]
    fn rotation_90_preserves_mask_pixel_count() {
        let mask = toy_mask();
        let params = AugmentParams { angle_deg: 90.0, ..AugmentParams::identity() };
        let warped = warp_mask(&mask, &params);
        assert_eq!(warped.iter().filter(|&&v| v != 0).count(), mask.iter().filter(|&&v| v != 0).count());
        // Rotating back recovers the original.
        let back = warp_mask(&warped, &AugmentParams { angle_deg: -90.0, ..AugmentParams::identity() });
        assert_eq!(back, mask);
    }

    #[test]
    fn image_and_mask_share_geometry() {
        // A delta image transformed with nearest-neighbor must match the
        // transformed mask exactly.
        let mask = toy_mask();
        let delta = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| f64::from(mask[(y, x)]));
        let params = AugmentParams {
            angle_deg: 23.0,
            translate: (1.5, -2.0),
            ..AugmentParams::identity()
        };
        let warped_img = warp_affine(&delta, &params, Interp::Nearest);
        let warped_mask = warp_mask(&mask, &params);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(warped_img[(0, y, x)] > 0.5, warped_mask[(y, x)] != 0, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn ten_variants_are_pairwise_distinct() {
        let img = toy_image();
        let masks = vec![(toy_mask(), 1u32)];
        let variants = augment(&img, &masks, 7, &AugmentConfig::default()).unwrap();
        assert_eq!(variants.len(), 10);
        for i in 0..variants.len() {
            for j in i + 1..variants.len() {
                let d: f64 = ndarray::Zip::from(&variants[i].0)
                    .and(&variants[j].0)
                    .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
                assert!(d > 0.0, "variants {i} and {j} identical");
            }
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = toy_image();
        let masks = vec![(toy_mask(), 1u32)];
        let a = augment(&img, &masks, 9, &AugmentConfig::default()).unwrap();
        let b = augment(&img, &masks, 9, &AugmentConfig::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.2, y.2);
        }
    }
}
