//! Topological driver extraction.
//!
//! A driver is built deterministically from an image and its defect masks:
//! downscale (area mean) -> grayscale -> quantize to 8 bit -> adaptive
//! threshold (local mean minus C) -> upscale (nearest) -> dim to the 0..50
//! range -> paint palette-colored masks -> normalize to [0, 1].
//!
//! Thresholding happens on the quantized downscaled grayscale, so source
//! perturbations too small to move any downscaled 8-bit value leave the
//! driver bit-identical.

use crate::error::{CoreError, Result};
use crate::hash::Hasher;
use crate::imgproc::{downscale_area, luma, pad_reflect_to_multiple, reflect_index, upscale_nearest};
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, silu_backward, silu_map, AvgPool2, Conv2d, Linear};
use crate::nn::optim::{Adam, Optimizer};
use crate::nn::store::{Grads, ParamStore};
use crate::rng::{rng_from_seed, subseed};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BACKGROUND_CEILING: u8 = 50;

/// Five well-separated palette colors, indexed by category id (1-based).
pub fn default_palette() -> Vec<(u32, [u8; 3])> {
    vec![
        (1, [255, 0, 0]),
        (2, [0, 255, 0]),
        (3, [0, 128, 255]),
        (4, [255, 255, 0]),
        (5, [255, 0, 255]),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriverConfig {
    pub downscale_factor: usize,
    /// Odd window size for the local mean, in downscaled pixels.
    pub threshold_window: usize,
    /// Offset C subtracted from the local mean, in [0,1] units.
    pub threshold_offset: f64,
    /// Maximum background channel value, in 8-bit units.
    pub background_ceiling: u8,
    pub palette: Vec<(u32, [u8; 3])>,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            downscale_factor: 8,
            threshold_window: 7,
            threshold_offset: 5.0 / 255.0,
            background_ceiling: DEFAULT_BACKGROUND_CEILING,
            palette: default_palette(),
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downscale_factor == 0 {
            return Err(CoreError::config("driver: downscale_factor must be >= 1"));
        }
        if self.threshold_window < 3 || self.threshold_window % 2 == 0 {
            return Err(CoreError::config("driver: threshold_window must be odd and >= 3"));
        }
        for (i, (_, a)) in self.palette.iter().enumerate() {
            if *a.iter().max().unwrap() <= 100 {
                return Err(CoreError::config(format!(
                    "driver: palette color {i} too dim (max channel must exceed 100)"
                )));
            }
            for (j, (_, b)) in self.palette.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(CoreError::config(format!("driver: palette colors {i} and {j} identical")));
                }
            }
        }
        Ok(())
    }

    pub fn color_of(&self, class_id: u32) -> Option<[u8; 3]> {
        self.palette.iter().find(|(id, _)| *id == class_id).map(|(_, c)| *c)
    }

    pub fn content_hash(&self) -> String {
        let mut h = Hasher::new();
        h.update_str(&serde_json::to_string(self).expect("config serializes"));
        h.finish_hex()
    }
}

/// RGB conditioning image plus the exact mask regions painted into it.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverImage {
    /// (3, H, W) pixels in [0, 1].
    pub pixels: Array3<f64>,
    /// Disjoint mask bitmaps with their class ids (overlaps resolved: later
    /// masks win).
    pub mask_regions: Vec<(Array2<u8>, u32)>,
    pub provenance: DriverProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverProvenance {
    pub source_id: String,
    pub config_hash: String,
}

impl DriverImage {
    /// Checks the structural invariants: background ceiling outside masks,
    /// exact palette colors inside, disjoint regions.
    pub fn validate(&self, cfg: &DriverConfig) -> Result<()> {
        let (_, h, w) = self.pixels.dim();
        let ceiling = f64::from(cfg.background_ceiling) / 255.0 + 1e-6;
        let mut covered = Array2::<u8>::zeros((h, w));
        for (mask, class_id) in &self.mask_regions {
            if mask.dim() != (h, w) {
                return Err(CoreError::shape("driver: mask region dims differ from pixels"));
            }
            let color = cfg
                .color_of(*class_id)
                .ok_or_else(|| CoreError::config(format!("driver: class {class_id} not in palette")))?;
            for y in 0..h {
                for x in 0..w {
                    if mask[(y, x)] != 0 {
                        if covered[(y, x)] != 0 {
                            return Err(CoreError::Validation(vec![format!(
                                "driver: overlapping mask regions at ({y},{x})"
                            )]));
                        }
                        covered[(y, x)] = 1;
                        for ch in 0..3 {
                            let expect = f64::from(color[ch]) / 255.0;
                            if self.pixels[(ch, y, x)] != expect {
                                return Err(CoreError::Validation(vec![format!(
                                    "driver: pixel ({y},{x}) ch{ch} = {} differs from palette {expect}",
                                    self.pixels[(ch, y, x)]
                                )]));
                            }
                        }
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if covered[(y, x)] == 0 {
                    for ch in 0..3 {
                        if self.pixels[(ch, y, x)] > ceiling {
                            return Err(CoreError::Validation(vec![format!(
                                "driver: background pixel ({y},{x}) ch{ch} = {} above ceiling",
                                self.pixels[(ch, y, x)]
                            )]));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Symmetric (edge-repeating) reflection for window indices.
fn reflect_signed(i: isize, len: usize) -> usize {
    if i < 0 {
        ((-i - 1) as usize).min(len - 1)
    } else if (i as usize) < len {
        i as usize
    } else {
        reflect_index(i as usize, len)
    }
}

/// Coarse binary topology map ({0, 255} at source resolution).
///
/// Foreground where the quantized downscaled grayscale exceeds its local
/// window mean by more than C (strict; ties go to background), so constant
/// regions binarize to background and locally bright structure to foreground.
pub fn extract_topology(image: &Array3<f64>, cfg: &DriverConfig) -> Result<Array2<u8>> {
    cfg.validate()?;
    let (_, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(CoreError::shape("extract_topology: empty image"));
    }
    let gray = luma(image);
    let padded = pad_reflect_to_multiple(&gray, cfg.downscale_factor);
    let down = downscale_area(&padded, cfg.downscale_factor);
    let (dh, dw) = down.dim();
    if cfg.threshold_window > dh || cfg.threshold_window > dw {
        return Err(CoreError::config(format!(
            "extract_topology: window {} larger than downscaled image {dh}x{dw}",
            cfg.threshold_window
        )));
    }
    // Quantize to the 8-bit grid; all threshold decisions happen on integers
    // plus a fixed offset, making the map robust to sub-quantization noise.
    let q = down.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round());
    let r = cfg.threshold_window as isize / 2;
    let c_units = cfg.threshold_offset * 255.0;
    let mut binary = Array2::<u8>::zeros((dh, dw));
    for y in 0..dh {
        for x in 0..dw {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = reflect_signed(y as isize + dy, dh);
                for dx in -r..=r {
                    let xx = reflect_signed(x as isize + dx, dw);
                    acc += q[(yy, xx)];
                }
            }
            let mean = acc / (cfg.threshold_window * cfg.threshold_window) as f64;
            binary[(y, x)] = if q[(y, x)] - c_units > mean { 255 } else { 0 };
        }
    }
    let up = upscale_nearest(&binary.mapv(f64::from), cfg.downscale_factor);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] = up[(y, x)] as u8;
        }
    }
    Ok(out)
}

/// Resolves overlapping masks: later masks win; earlier regions lose the
/// contested pixels. Empty results are kept (area can drop to zero).
pub fn resolve_overlaps(masks: &[(Array2<u8>, u32)]) -> Vec<(Array2<u8>, u32)> {
    let mut out: Vec<(Array2<u8>, u32)> = Vec::with_capacity(masks.len());
    for (i, (mask, class_id)) in masks.iter().enumerate() {
        let mut region = mask.mapv(|v| u8::from(v != 0));
        for (later, _) in masks.iter().skip(i + 1) {
            ndarray::Zip::from(&mut region).and(later).for_each(|r, &l| {
                if l != 0 {
                    *r = 0;
                }
            });
        }
        out.push((region, *class_id));
    }
    out
}

/// Assembles the driver: dimmed topology replicated to RGB, palette-colored
/// masks painted on top (input order, later wins), all in [0, 1].
pub fn compose_driver(
    topology: &Array2<u8>,
    masks: &[(Array2<u8>, u32)],
    cfg: &DriverConfig,
    source_id: &str,
) -> Result<DriverImage> {
    cfg.validate()?;
    let (h, w) = topology.dim();
    let ceiling = f64::from(cfg.background_ceiling);
    let mut pixels = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            // {0,255} -> {0,ceiling} -> [0,1].
            let v = f64::from(topology[(y, x)]) / 255.0 * ceiling / 255.0;
            for ch in 0..3 {
                pixels[(ch, y, x)] = v;
            }
        }
    }
    for (mask, class_id) in masks {
        if mask.dim() != (h, w) {
            return Err(CoreError::shape(format!(
                "compose_driver: mask dims {:?} differ from topology {:?}",
                mask.dim(),
                topology.dim()
            )));
        }
        let color = cfg
            .color_of(*class_id)
            .ok_or_else(|| CoreError::config(format!("compose_driver: unknown class id {class_id}")))?;
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] != 0 {
                    for ch in 0..3 {
                        pixels[(ch, y, x)] = f64::from(color[ch]) / 255.0;
                    }
                }
            }
        }
    }
    let driver = DriverImage {
        pixels,
        mask_regions: resolve_overlaps(masks),
        provenance: DriverProvenance { source_id: source_id.to_string(), config_hash: cfg.content_hash() },
    };
    driver.validate(cfg)?;
    Ok(driver)
}

/// Convenience: topology extraction plus mask painting in one call.
pub fn extract_driver(
    image: &Array3<f64>,
    masks: &[(Array2<u8>, u32)],
    cfg: &DriverConfig,
    source_id: &str,
) -> Result<DriverImage> {
    let topology = extract_topology(image, cfg)?;
    compose_driver(&topology, masks, cfg, source_id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindnessReport {
    pub train_count: usize,
    pub test_count: usize,
    pub accuracy: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Trains a small binary CNN to tell defective-origin drivers from
/// defect-free-origin drivers and reports held-out accuracy. PASS means the
/// probe cannot do much better than chance (accuracy <= 0.5 + margin).
pub fn driver_origin_blindness_check(
    defective: &[DriverImage],
    defect_free: &[DriverImage],
    margin: f64,
    seed: u64,
) -> Result<BlindnessReport> {
    if defective.len() < 10 || defect_free.len() < 10 {
        return Err(CoreError::config(format!(
            "origin blindness probe needs >= 10 drivers per set, got {} and {}",
            defective.len(),
            defect_free.len()
        )));
    }
    // Stratified 70/30 split, shuffled per set.
    fn split_set<'a>(
        tag: &str,
        drivers: &'a [DriverImage],
        label: f64,
        seed: u64,
        train: &mut Vec<(&'a DriverImage, f64)>,
        test: &mut Vec<(&'a DriverImage, f64)>,
    ) {
        let mut idx: Vec<usize> = (0..drivers.len()).collect();
        idx.shuffle(&mut rng_from_seed(subseed(seed, tag, 0)));
        let n_train = (drivers.len() * 7) / 10;
        for (k, &i) in idx.iter().enumerate() {
            if k < n_train {
                train.push((&drivers[i], label));
            } else {
                test.push((&drivers[i], label));
            }
        }
    }
    let mut train: Vec<(&DriverImage, f64)> = Vec::new();
    let mut test: Vec<(&DriverImage, f64)> = Vec::new();
    split_set("blind-defective", defective, 1.0, seed, &mut train, &mut test);
    split_set("blind-free", defect_free, 0.0, seed, &mut train, &mut test);

    let mut net = BinaryCnn::new(subseed(seed, "blind-net", 0));
    net.train(&train, 60, 3e-3, subseed(seed, "blind-train", 0))?;
    let mut correct = 0usize;
    for (drv, label) in &test {
        let p = net.predict(&drv.pixels);
        if (p > 0.5) == (*label > 0.5) {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    Ok(BlindnessReport {
        train_count: train.len(),
        test_count: test.len(),
        accuracy,
        margin,
        pass: accuracy <= 0.5 + margin,
    })
}

/// Tiny fixed-architecture binary classifier used by the probe.
pub struct BinaryCnn {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl BinaryCnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, "probe.conv1", 3, 6, 3, &mut rng);
        let conv2 = Conv2d::new(&mut store, "probe.conv2", 6, 12, 3, &mut rng);
        let head = Linear::new(&mut store, "probe.head", 12, 1, &mut rng);
        BinaryCnn { store, conv1, conv2, head }
    }

    fn logits(&self, x: &Array3<f64>) -> (f64, CnnCache) {
        let h1 = self.conv1.forward(&self.store, x);
        let a1 = silu_map(&h1);
        let p1 = AvgPool2::forward(&a1);
        let h2 = self.conv2.forward(&self.store, &p1);
        let a2 = silu_map(&h2);
        let p2 = AvgPool2::forward(&a2);
        let pooled = global_avg_pool(&p2);
        let logit = self.head.forward(&self.store, &pooled)[0];
        (logit, CnnCache { x: x.clone(), h1, p1, h2, p2_dim: p2.dim(), pooled })
    }

    pub fn predict(&self, x: &Array3<f64>) -> f64 {
        let (logit, _) = self.logits(x);
        1.0 / (1.0 + (-logit).exp())
    }

    fn backward(&self, cache: &CnnCache, g_logit: f64, grads: &mut Grads) {
        let g_pooled = self.head.backward(&self.store, &cache.pooled, &Array1::from_vec(vec![g_logit]), grads);
        let (c, h, w) = cache.p2_dim;
        let g_p2 = global_avg_pool_backward(&g_pooled, c, h, w);
        let g_a2 = AvgPool2::backward(&g_p2);
        let g_h2 = silu_backward(&cache.h2, &g_a2);
        let g_p1 = self.conv2.backward(&self.store, &cache.p1, &g_h2, grads);
        let g_a1 = AvgPool2::backward(&g_p1);
        let g_h1 = silu_backward(&cache.h1, &g_a1);
        self.conv1.backward(&self.store, &cache.x, &g_h1, grads);
    }

    pub fn train(&mut self, data: &[(&DriverImage, f64)], epochs: usize, lr: f64, seed: u64) -> Result<()> {
        let mut opt = Adam::new(lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = rng_from_seed(seed);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(8) {
                let mut grads = Grads::zeros_for(&self.store);
                for &i in chunk {
                    let (drv, label) = data[i];
                    let (logit, cache) = self.logits(&drv.pixels);
                    let p = 1.0 / (1.0 + (-logit).exp());
                    // BCE gradient wrt logit.
                    let g = (p - label) / chunk.len() as f64;
                    self.backward(&cache, g, &mut grads);
                }
                opt.step(&mut self.store, &grads);
            }
        }
        Ok(())
    }
}

struct CnnCache {
    x: Array3<f64>,
    h1: Array3<f64>,
    p1: Array3<f64>,
    h2: Array3<f64>,
    p2_dim: (usize, usize, usize),
    pooled: Array1<f64>,
}
