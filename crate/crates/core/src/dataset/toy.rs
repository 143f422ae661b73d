//! Procedural crack-texture dataset.
//!
//! Backgrounds are panel grids / louver stripes with ellipses, an
//! illumination gradient and fine noise, floored well above black so cracks
//! always have headroom. Defective images carry 1-2 dark crack polylines;
//! each crack's exact pixels are recorded as an instance annotation. The
//! five classes differ by orientation/curvature so class-conditional prompts
//! mean something.

use super::{AnnotatedDataset, Category, DatasetImage};
use crate::error::{CoreError, Result};
use crate::imgproc::quantize_u8;
use crate::rng::{rng_from_seed, subseed, SeededRng};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDatasetConfig {
    pub image_size: usize,
    pub n_defective: usize,
    pub n_defect_free: usize,
    /// Inclusive thickness range in pixels.
    pub crack_thickness: (usize, usize),
    /// Crack length range as a fraction of the image side.
    pub crack_length: (f64, f64),
    /// How much darker than the local background median a crack pixel is,
    /// in [0,1] units.
    pub crack_contrast: f64,
    /// Curvature range for the curved class (perpendicular offset fraction).
    pub crack_curvature: (f64, f64),
    pub cracks_per_image: (usize, usize),
    pub texture_seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            image_size: 64,
            n_defective: 60,
            n_defect_free: 30,
            crack_thickness: (1, 2),
            crack_length: (0.45, 0.85),
            crack_contrast: 0.22,
            crack_curvature: (0.18, 0.32),
            cracks_per_image: (1, 2),
            texture_seed: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(CoreError::config("toy: image_size must be >= 16"));
        }
        if self.crack_thickness.0 == 0 || self.crack_thickness.0 > self.crack_thickness.1 {
            return Err(CoreError::config("toy: invalid thickness range"));
        }
        if !(0.0 < self.crack_contrast && self.crack_contrast < 0.3) {
            return Err(CoreError::config("toy: crack_contrast must lie in (0, 0.3)"));
        }
        if self.cracks_per_image.0 == 0 || self.cracks_per_image.0 > self.cracks_per_image.1 {
            return Err(CoreError::config("toy: invalid cracks_per_image range"));
        }
        Ok(())
    }
}

pub fn toy_categories() -> Vec<Category> {
    ["radial", "axial", "diagonal", "curved", "branched"]
        .iter()
        .enumerate()
        .map(|(i, name)| Category { id: i as u32 + 1, name: (*name).to_string() })
        .collect()
}

/// Background floor: cracks sit `crack_contrast` below the local median, so
/// backgrounds never get dark enough to swallow them.
const BG_FLOOR: f64 = 0.30;
const BG_CEIL: f64 = 0.95;

fn background(size: usize, rng: &mut SeededRng) -> Array3<f64> {
    let mut gray = Array2::<f64>::zeros((size, size));
    let style: u8 = rng.gen_range(0..3);
    let base: f64 = rng.gen_range(0.45..0.75);
    match style {
        0 => {
            // Panel grid with per-panel brightness and dark seams.
            let cols = rng.gen_range(2..=4usize);
            let rows = rng.gen_range(2..=4usize);
            let mut col_edges = vec![0usize];
            for k in 1..cols {
                col_edges.push(k * size / cols + rng.gen_range(0..size / 8) - size / 16);
            }
            col_edges.push(size);
            let mut row_edges = vec![0usize];
            for k in 1..rows {
                row_edges.push(k * size / rows + rng.gen_range(0..size / 8) - size / 16);
            }
            row_edges.push(size);
            let mut panel_values = Vec::new();
            for _ in 0..rows * cols {
                panel_values.push(base + rng.gen_range(-0.13..0.13));
            }
            for y in 0..size {
                let ri = row_edges.iter().take(rows).filter(|&&e| y >= e).count().saturating_sub(1);
                for x in 0..size {
                    let ci = col_edges.iter().take(cols).filter(|&&e| x >= e).count().saturating_sub(1);
                    gray[(y, x)] = panel_values[ri * cols + ci];
                }
            }
            // Seams.
            for &e in row_edges.iter().skip(1).take(rows - 1) {
                for x in 0..size {
                    gray[(e.min(size - 1), x)] -= 0.12;
                }
            }
            for &e in col_edges.iter().skip(1).take(cols - 1) {
                for y in 0..size {
                    gray[(y, e.min(size - 1))] -= 0.12;
                }
            }
        }
        1 => {
            // Louver-like horizontal stripes.
            let period = rng.gen_range(6..=12usize);
            let mut stripe_values = Vec::new();
            for _ in 0..size / period + 2 {
                stripe_values.push(base + rng.gen_range(-0.14..0.14));
            }
            for y in 0..size {
                let s = y / period;
                let v = stripe_values[s];
                for x in 0..size {
                    gray[(y, x)] = v;
                }
                if y % period == 0 && y > 0 {
                    for x in 0..size {
                        gray[(y, x)] -= 0.10;
                    }
                }
            }
        }
        _ => {
            // Vertical stripes.
            let period = rng.gen_range(6..=12usize);
            let mut stripe_values = Vec::new();
            for _ in 0..size / period + 2 {
                stripe_values.push(base + rng.gen_range(-0.14..0.14));
            }
            for x in 0..size {
                let v = stripe_values[x / period];
                for y in 0..size {
                    gray[(y, x)] = v;
                }
                if x % period == 0 && x > 0 {
                    for y in 0..size {
                        gray[(y, x)] -= 0.10;
                    }
                }
            }
        }
    }
    // Ellipses (ports/rivets).
    for _ in 0..rng.gen_range(0..=2usize) {
        let cy = rng.gen_range(0.2..0.8) * size as f64;
        let cx = rng.gen_range(0.2..0.8) * size as f64;
        let ay = rng.gen_range(0.05..0.16) * size as f64;
        let ax = rng.gen_range(0.05..0.16) * size as f64;
        let delta: f64 = rng.gen_range(-0.10..0.10);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 - cy) / ay;
                let dx = (x as f64 - cx) / ax;
                if dy * dy + dx * dx <= 1.0 {
                    gray[(y, x)] += delta;
                }
            }
        }
    }
    // Illumination gradient + fine noise.
    let gdir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let gamp: f64 = rng.gen_range(0.0..0.08);
    let tint = [rng.gen_range(0.92..1.0), rng.gen_range(0.92..1.0), rng.gen_range(0.92..1.0)];
    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 / size as f64 - 0.5) * gdir.cos() + (y as f64 / size as f64 - 0.5) * gdir.sin();
            let noise: f64 = rng.gen_range(-0.02..0.02);
            let v = (gray[(y, x)] + gamp * u + noise).clamp(BG_FLOOR, BG_CEIL);
            for ch in 0..3 {
                out[(ch, y, x)] = quantize_u8((v * tint[ch]).clamp(BG_FLOOR, BG_CEIL));
            }
        }
    }
    out
}

/// Crack centerline samples for a class, or None when the walk leaves the
/// canvas too early.
fn crack_path(class_id: u32, size: usize, cfg: &ToyDatasetConfig, rng: &mut SeededRng) -> Vec<(f64, f64)> {
    let length = rng.gen_range(cfg.crack_length.0..cfg.crack_length.1) * size as f64;
    let n = (length * 2.0) as usize;
    let margin = 3.0;
    let start_range = margin..(size as f64 - margin);
    let (sy, sx) = (rng.gen_range(start_range.clone()), rng.gen_range(start_range));
    let mut pts = Vec::with_capacity(n);
    match class_id {
        4 => {
            // Quadratic bezier arc.
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (ey, ex) = (sy + length * theta.sin(), sx + length * theta.cos());
            let bend = rng.gen_range(cfg.crack_curvature.0..cfg.crack_curvature.1) * length;
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let (my, mx) = ((sy + ey) / 2.0, (sx + ex) / 2.0);
            let (py, px) = (my + side * bend * theta.cos(), mx - side * bend * theta.sin());
            for k in 0..n {
                let t = k as f64 / (n - 1) as f64;
                let y = (1.0 - t) * (1.0 - t) * sy + 2.0 * (1.0 - t) * t * py + t * t * ey;
                let x = (1.0 - t) * (1.0 - t) * sx + 2.0 * (1.0 - t) * t * px + t * t * ex;
                pts.push((y, x));
            }
        }
        5 => {
            // Branched: main walk plus a fork from the midpoint.
            let main = walk(sy, sx, rng.gen_range(0.0..std::f64::consts::TAU), length, n, rng);
            let (fy, fx) = main[main.len() / 2];
            let fork_angle: f64 = rng.gen_range(0.5..1.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let base_angle = {
                let (ay, ax) = main[main.len() / 2 + 1.min(main.len() - 1 - main.len() / 2)];
                (ay - fy).atan2(ax - fx)
            };
            let branch = walk(fy, fx, base_angle + fork_angle, length * 0.45, n / 2, rng);
            pts.extend(main);
            pts.extend(branch);
        }
        _ => {
            let angle = match class_id {
                1 => std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.15..0.15), // vertical
                2 => rng.gen_range(-0.15..0.15),                               // horizontal
                _ => {
                    // diagonal, either way
                    let base = if rng.gen_bool(0.5) { 0.25 } else { 0.75 };
                    base * std::f64::consts::PI + rng.gen_range(-0.15..0.15)
                }
            };
            pts = walk(sy, sx, angle, length, n, rng);
        }
    }
    pts
}

fn walk(sy: f64, sx: f64, angle: f64, length: f64, n: usize, rng: &mut SeededRng) -> Vec<(f64, f64)> {
    let step = length / n as f64;
    let mut pts = Vec::with_capacity(n);
    let (mut y, mut x, mut a) = (sy, sx, angle);
    for _ in 0..n {
        pts.push((y, x));
        a += rng.gen_range(-0.12..0.12);
        y += step * a.sin();
        x += step * a.cos();
    }
    pts
}

/// Stamps the centerline into a bitmap with the given thickness, clipped to
/// the canvas.
fn stamp_mask(pts: &[(f64, f64)], thickness: usize, size: usize) -> Array2<u8> {
    let mut mask = Array2::zeros((size, size));
    let r0 = (thickness - 1) / 2;
    let r1 = thickness / 2;
    for &(y, x) in pts {
        let (yy, xx) = (y.round() as isize, x.round() as isize);
        for dy in -(r0 as isize)..=(r1 as isize) {
            for dx in -(r0 as isize)..=(r1 as isize) {
                let (py, px) = (yy + dy, xx + dx);
                if py >= 0 && px >= 0 && (py as usize) < size && (px as usize) < size {
                    mask[(py as usize, px as usize)] = 1;
                }
            }
        }
    }
    mask
}

/// Lower median of the non-crack 8-bit values in a window around (y, x).
fn local_background_median(
    channel: &ndarray::ArrayView2<'_, f64>,
    exclude: &Array2<u8>,
    y: usize,
    x: usize,
) -> u8 {
    let (h, w) = channel.dim();
    let mut vals: Vec<u8> = Vec::with_capacity(81);
    let r = 4isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (py, px) = (y as isize + dy, x as isize + dx);
            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w && exclude[(py as usize, px as usize)] == 0
            {
                vals.push((channel[(py as usize, px as usize)] * 255.0).round() as u8);
            }
        }
    }
    if vals.is_empty() {
        return (BG_FLOOR * 255.0) as u8;
    }
    vals.sort_unstable();
    vals[(vals.len() - 1) / 2]
}

/// Darkens the crack pixels: each becomes the local background median minus
/// the configured contrast (8-bit exact).
fn paint_crack(image: &mut Array3<f64>, mask: &Array2<u8>, all_cracks: &Array2<u8>, contrast: f64) {
    let contrast_u8 = (contrast * 255.0).round() as i32;
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != 0 {
                for ch in 0..3 {
                    let med = local_background_median(&image.index_axis(ndarray::Axis(0), ch), all_cracks, y, x);
                    let v = (i32::from(med) - contrast_u8).max(0) as u8;
                    image[(ch, y, x)] = f64::from(v) / 255.0;
                }
            }
        }
    }
}

/// Generates (defective dataset with annotations, defect-free dataset with
/// none). Deterministic per seed. Defect-free image ids start at 1_000_000.
pub fn generate_toy_dataset(cfg: &ToyDatasetConfig) -> Result<(AnnotatedDataset, AnnotatedDataset)> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut defective = AnnotatedDataset::new(toy_categories());
    let mut ann_id = 1u64;
    for i in 0..cfg.n_defective {
        let mut rng = rng_from_seed(subseed(cfg.texture_seed, "toy-defective", i as u64));
        let mut img = background(size, &mut rng);
        let n_cracks = rng.gen_range(cfg.cracks_per_image.0..=cfg.cracks_per_image.1);
        let mut all_cracks: Array2<u8> = Array2::zeros((size, size));
        let mut planned: Vec<(Array2<u8>, u32)> = Vec::new();
        for _ in 0..n_cracks {
            for _attempt in 0..4 {
                let class_id = rng.gen_range(1..=5u32);
                let thickness = rng.gen_range(cfg.crack_thickness.0..=cfg.crack_thickness.1);
                let pts = crack_path(class_id, size, cfg, &mut rng);
                let mask = stamp_mask(&pts, thickness, size);
                let area = mask.iter().filter(|&&v| v != 0).count();
                let overlaps = ndarray::Zip::from(&mask).and(&all_cracks).fold(false, |acc, &m, &a| {
                    acc || (m != 0 && a != 0)
                });
                if area >= size / 2 && !overlaps {
                    all_cracks.zip_mut_with(&mask, |a, &m| *a |= m);
                    planned.push((mask, class_id));
                    break;
                }
            }
        }
        for (mask, _) in &planned {
            paint_crack(&mut img, mask, &all_cracks, cfg.crack_contrast);
        }
        let image_id = i as u64 + 1;
        defective.add_image(DatasetImage {
            id: image_id,
            file_name: format!("{image_id:06}.png"),
            width: size,
            height: size,
            pixels: Some(img),
        })?;
        for (mask, class_id) in planned {
            defective.add_annotation(ann_id, image_id, class_id, mask)?;
            ann_id += 1;
        }
    }

    let mut defect_free = AnnotatedDataset::new(toy_categories());
    for i in 0..cfg.n_defect_free {
        let mut rng = rng_from_seed(subseed(cfg.texture_seed, "toy-free", i as u64));
        let img = background(size, &mut rng);
        let image_id = 1_000_000 + i as u64;
        defect_free.add_image(DatasetImage {
            id: image_id,
            file_name: format!("df_{image_id:07}.png"),
            width: size,
            height: size,
            pixels: Some(img),
        })?;
    }
    defective.validate()?;
    defect_free.validate()?;
    Ok((defective, defect_free))
}

/// Audit helper: maximum violation of the "crack pixels sit at least
/// `contrast` below the local background median" guarantee, in 8-bit units.
/// Zero means every crack pixel honors it.
pub fn darkness_violation(ds: &AnnotatedDataset, contrast: f64) -> f64 {
    let contrast_u8 = (contrast * 255.0).round() as i32;
    let mut worst = 0i32;
    for ann in ds.annotations.values() {
        let img = ds.images[&ann.image_id].pixels.as_ref().expect("pixels attached");
        // Union of crack masks on this image (exclusion zone for the median).
        let mut all: Array2<u8> = Array2::zeros(ann.mask.dim());
        for other in ds.annotations.values().filter(|a| a.image_id == ann.image_id) {
            all.zip_mut_with(&other.mask, |a, &m| *a |= m);
        }
        let (h, w) = ann.mask.dim();
        for y in 0..h {
            for x in 0..w {
                if ann.mask[(y, x)] != 0 {
                    for ch in 0..3 {
                        let med =
                            local_background_median(&img.index_axis(ndarray::Axis(0), ch), &all, y, x);
                        let crack = (img[(ch, y, x)] * 255.0).round() as i32;
                        let deficit = crack + contrast_u8 - i32::from(med);
                        worst = worst.max(deficit);
                    }
                }
            }
        }
    }
    f64::from(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_defective_gives_empty_annotations() {
        let cfg = ToyDatasetConfig { n_defective: 0, n_defect_free: 2, image_size: 32, ..Default::default() };
        let (def, free) = generate_toy_dataset(&cfg).unwrap();
        assert!(def.annotations.is_empty());
        assert_eq!(free.images.len(), 2);
    }

    #[test]
    fn same_seed_identical_datasets() {
        let cfg = ToyDatasetConfig { n_defective: 3, n_defect_free: 2, image_size: 32, ..Default::default() };
        let (a, af) = generate_toy_dataset(&cfg).unwrap();
        let (b, bf) = generate_toy_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(af, bf);
        let cfg2 = ToyDatasetConfig { texture_seed: 1, ..cfg };
        let (c, _) = generate_toy_dataset(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cracks_are_darker_than_local_median_by_contrast() {
        let cfg = ToyDatasetConfig { n_defective: 6, n_defect_free: 0, image_size: 48, ..Default::default() };
        let (def, _) = generate_toy_dataset(&cfg).unwrap();
        assert!(!def.annotations.is_empty());
        let violation = darkness_violation(&def, cfg.crack_contrast);
        assert!(violation <= 0.0, "worst deficit {violation} 8-bit units");
    }

    #[test]
    fn every_image_has_annotations_and_valid_structure() {
        let cfg = ToyDatasetConfig { n_defective: 5, n_defect_free: 0, image_size: 40, ..Default::default() };
        let (def, _) = generate_toy_dataset(&cfg).unwrap();
        def.validate().unwrap();
        for &id in def.images.keys() {
            assert!(!def.annotations_of(id).is_empty(), "image {id} has no cracks");
        }
        // Pixel values quantized to the 8-bit grid and inside [0,1].
        for img in def.images.values() {
            let px = img.pixels.as_ref().unwrap();
            assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(px.iter().all(|&v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
        }
    }

    #[test]
    fn class_geometry_is_distinguishable() {
        // Radial cracks span more rows than columns; axial the reverse.
        let cfg = ToyDatasetConfig { n_defective: 40, n_defect_free: 0, image_size: 48, ..Default::default() };
        let (def, _) = generate_toy_dataset(&cfg).unwrap();
        let mut seen = [false; 5];
        for ann in def.annotations.values() {
            seen[(ann.category_id - 1) as usize] = true;
            let [_, _, w, h] = [ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]];
            match ann.category_id {
                1 => assert!(h > w, "radial crack should be tall: {:?}", ann.bbox),
                2 => assert!(w > h, "axial crack should be wide: {:?}", ann.bbox),
                _ => {}
            }
        }
        assert!(seen.iter().all(|&s| s), "all five classes appear in 40 images");
    }
}
