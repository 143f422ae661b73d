//! Image tensor helpers.
//!
//! Images are `Array3<f64>` in channel-major (C, H, W) layout with values in
//! [0, 1]. Masks are `Array2<u8>` with values in {0, 1}. PNG is the only disk
//! format (lossless, deterministic bytes for a given pixel buffer).

use crate::error::{CoreError, Result};
use ndarray::{Array2, Array3, Zip};
use std::path::Path;

/// Luma weights used for every grayscale conversion in the pipeline.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luma(image: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = image.dim();
    match c {
        1 => image.index_axis(ndarray::Axis(0), 0).to_owned(),
        3 => {
            let mut out = Array2::zeros((h, w));
            for (ch, wgt) in LUMA_WEIGHTS.iter().enumerate() {
                Zip::from(&mut out)
                    .and(&image.index_axis(ndarray::Axis(0), ch))
                    .for_each(|o, &v| *o += wgt * v);
            }
            out
        }
        _ => panic!("luma expects 1 or 3 channels, got {c}"),
    }
}

pub fn clamp01(image: &mut Array3<f64>) {
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Quantizes [0,1] to the 8-bit grid and back, i.e. the value the PNG round
/// trip would produce.
pub fn quantize_u8(v: f64) -> f64 {
    ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0
}

/// Reflect-pads (symmetric, edge not repeated) so both dimensions become
/// multiples of `factor`.
pub fn pad_reflect_to_multiple(gray: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = gray.dim();
    let nh = h.div_ceil(factor) * factor;
    let nw = w.div_ceil(factor) * factor;
    if nh == h && nw == w {
        return gray.clone();
    }
    let mut out = Array2::zeros((nh, nw));
    for y in 0..nh {
        let sy = reflect_index(y, h);
        for x in 0..nw {
            out[(y, x)] = gray[(sy, reflect_index(x, w))];
        }
    }
    out
}

/// Mirror indexing for out-of-range coordinates (…2 1 0 | 0 1 2… style with
/// the edge repeated once, matching clamped reflection for small overruns).
pub fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        let over = i - len;
        len - 1 - over.min(len - 1)
    }
}

/// Area-mean downscale of a single-channel image by an integer factor.
pub fn downscale_area(gray: &Array2<f64>, factor: usize) -> Array2<f64> {
    assert!(factor >= 1);
    let (h, w) = gray.dim();
    assert!(h % factor == 0 && w % factor == 0, "pad before downscaling");
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += gray[(y * factor + dy, x * factor + dx)];
            }
        }
        acc * norm
    })
}

/// Nearest-neighbor upscale of a single-channel image by an integer factor.
pub fn upscale_nearest(gray: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = gray.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| gray[(y / factor, x / factor)])
}

/// Resizes a (C,H,W) image to `(target_h, target_w)`.
///
/// Integer-factor shrinking uses exact area averaging; everything else uses
/// bilinear sampling. Same-size inputs are returned untouched so identity
/// resizes are bit-exact.
pub fn resize(image: &Array3<f64>, target_h: usize, target_w: usize) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if h == 0 || w == 0 || target_h == 0 || target_w == 0 {
        return Err(CoreError::shape("resize: zero-dimension image"));
    }
    if h == target_h && w == target_w {
        return Ok(image.clone());
    }
    if h % target_h == 0 && w % target_w == 0 && h / target_h == w / target_w {
        let factor = h / target_h;
        let mut out = Array3::zeros((c, target_h, target_w));
        for ch in 0..c {
            let plane = image.index_axis(ndarray::Axis(0), ch).to_owned();
            out.index_axis_mut(ndarray::Axis(0), ch)
                .assign(&downscale_area(&plane, factor));
        }
        return Ok(out);
    }
    let mut out = Array3::zeros((c, target_h, target_w));
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    for ch in 0..c {
        for y in 0..target_h {
            // Pixel-center alignment.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..target_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = image[(ch, y0, x0)];
                let v01 = image[(ch, y0, x1)];
                let v10 = image[(ch, y1, x0)];
                let v11 = image[(ch, y1, x1)];
                out[(ch, y, x)] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize for images whose exact pixel values must survive
/// (palette-colored drivers, masks rendered as images).
pub fn resize_nearest(image: &Array3<f64>, target_h: usize, target_w: usize) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if h == 0 || w == 0 || target_h == 0 || target_w == 0 {
        return Err(CoreError::shape("resize_nearest: zero-dimension image"));
    }
    if h == target_h && w == target_w {
        return Ok(image.clone());
    }
    let mut out = Array3::zeros((c, target_h, target_w));
    for ch in 0..c {
        for y in 0..target_h {
            let sy = (y * h) / target_h;
            for x in 0..target_w {
                let sx = (x * w) / target_w;
                out[(ch, y, x)] = image[(ch, sy, sx)];
            }
        }
    }
    Ok(out)
}

pub fn save_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 1 && c != 3 {
        return Err(CoreError::shape(format!("save_png expects 1 or 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push((image[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let color = if c == 1 { image::ColorType::L8 } else { image::ColorType::Rgb8 };
    image::save_buffer(path, &buf, w as u32, h as u32, color)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = f64::from(px.0[ch]) / 255.0;
        }
    }
    Ok(out)
}

pub fn save_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = Array3::from_shape_fn((1, h, w), |(_, y, x)| f64::from(mask[(y, x)].min(1)));
    save_png(&img, path)
}

pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = load_png(path)?;
    let (_, h, w) = img.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| u8::from(img[(0, y, x)] > 0.5)))
}
