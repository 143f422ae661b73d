//! Input preprocessing: resize to the working resolution, values in [0, 1].

use crate::error::{CoreError, Result};
use ndarray::Array3;

/// Resizes to `target x target` (area averaging for integer shrinks,
/// bilinear otherwise) and clamps into [0, 1]. Inputs already at the target
/// size and range pass through unchanged.
pub fn preprocess(image: &Array3<f64>, target: usize) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    if h == 0 || w == 0 || target == 0 {
        return Err(CoreError::shape("preprocess: zero-dimension image"));
    }
    let mut out = crate::imgproc::resize(image, target, target)?;
    if out.iter().any(|v| !(0.0..=1.0).contains(v)) {
        crate::imgproc::clamp01(&mut out);
    }
    Ok(out)
}

/// Converts raw 8-bit intensities (0..=255) into the [0, 1] tensor.
pub fn from_u8_intensities(raw: &Array3<u8>) -> Array3<f64> {
    raw.mapv(|v| f64::from(v) / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3 as A3;

    #[test]
    fn already_target_size_in_range_is_unchanged() {
        let img = A3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y + x) % 5) as f64 / 5.0);
        let out = preprocess(&img, 8).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn all_255_becomes_all_one() {
        let raw = A3::from_elem((3, 4, 4), 255u8);
        let img = from_u8_intensities(&raw);
        let out = preprocess(&img, 4).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn factor_two_downscale_is_exact_block_mean() {
        let img = A3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64 / 16.0);
        let out = preprocess(&img, 2).unwrap();
        assert_abs_diff_eq!(out[(0, 0, 0)], (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[(0, 1, 1)], (10.0 + 11.0 + 14.0 + 15.0) / 4.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = A3::zeros((3, 4, 4));
        assert!(preprocess(&img, 0).is_err());
    }
}
