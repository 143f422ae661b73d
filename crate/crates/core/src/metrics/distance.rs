//! Mean pairwise L2 distance between images, in 0-255 pixel units.

use crate::error::{CoreError, Result};
use ndarray::Array3;

/// Euclidean distance between two images with values mapped to 0-255.
pub fn l2_distance(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape(format!("l2: shapes {:?} vs {:?}", a.dim(), b.dim())));
    }
    let ssq = ndarray::Zip::from(a).and(b).fold(0.0, |acc, &x, &y| {
        let d = (x - y) * 255.0;
        acc + d * d
    });
    Ok(ssq.sqrt())
}

/// Mean over all unordered pairs.
pub fn pairwise_l2(images: &[Array3<f64>]) -> Result<f64> {
    if images.len() < 2 {
        return Err(CoreError::config("pairwise_l2: need at least two images"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += l2_distance(&images[i], &images[j])?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
