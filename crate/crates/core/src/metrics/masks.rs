//! Pixel-mask overlap metrics: IoU and normalized symmetric Hausdorff
//! distance.
//!
//! IoU is returned in [0, 1]; report layers scale by 100 for table output.
//! HD is the symmetric Hausdorff distance between boundary point sets,
//! normalized by the image diagonal so empty-vs-nonempty maps to exactly 1.0.

use crate::error::{CoreError, Result};
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapOutcome {
    pub value: f64,
    /// Both masks empty: IoU 1.0 / HD 0.0 by convention.
    pub degenerate: bool,
}

pub fn iou(a: &Array2<u8>, b: &Array2<u8>) -> Result<OverlapOutcome> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape("iou: shape mismatch"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let (x, y) = (x != 0, y != 0);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    });
    if union == 0 {
        log::warn!("iou: both masks empty, 1.0 by convention");
        return Ok(OverlapOutcome { value: 1.0, degenerate: true });
    }
    Ok(OverlapOutcome { value: inter as f64 / union as f64, degenerate: false })
}

/// Boundary points: mask pixels adjacent (4-neighborhood) to background or
/// the image border.
fn boundary_points(mask: &Array2<u8>) -> Vec<(f64, f64)> {
    let (h, w) = mask.dim();
    let mut pts = Vec::new();
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
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn directed_hausdorff(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ay, ax) in from {
        let mut best = f64::INFINITY;
        for &(by, bx) in to {
            let d = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        worst = worst.max(best);
    }
    worst
}

pub fn hausdorff(a: &Array2<u8>, b: &Array2<u8>) -> Result<OverlapOutcome> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape("hausdorff: shape mismatch"));
    }
    let pa = boundary_points(a);
    let pb = boundary_points(b);
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => {
            log::warn!("hausdorff: both masks empty, 0.0 by convention");
            Ok(OverlapOutcome { value: 0.0, degenerate: true })
        }
        (true, false) | (false, true) => Ok(OverlapOutcome { value: 1.0, degenerate: false }),
        (false, false) => {
            let (h, w) = a.dim();
            let diag = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt().max(1.0);
            let d = directed_hausdorff(&pa, &pb).max(directed_hausdorff(&pb, &pa));
            Ok(OverlapOutcome { value: (d / diag).min(1.0), degenerate: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| u8::from(y >= y0 && y < y1 && x >= x0 && x < x1))
    }

    #[test]
    fn identical_nonempty_masks() {
        let m = rect(10, 10, 2, 6, 3, 8);
        let i = iou(&m, &m).unwrap();
        assert_eq!(i.value, 1.0);
        let h = hausdorff(&m, &m).unwrap();
        assert_eq!(h.value, 0.0);
        // Reported on the paper scale: 100 and 0.
        assert_eq!(i.value * 100.0, 100.0);
    }

    #[test]
    fn disjoint_masks_have_zero_iou() {
        let a = rect(10, 10, 0, 3, 0, 3);
        let b = rect(10, 10, 6, 9, 6, 9);
        assert_eq!(iou(&a, &b).unwrap().value, 0.0);
    }

    #[test]
    fn half_overlap_hand_case() {
        let a = rect(8, 8, 0, 4, 0, 4); // 16 px
        let b = rect(8, 8, 0, 4, 2, 6); // 16 px, overlap 8
        assert_abs_diff_eq!(iou(&a, &b).unwrap().value, 8.0 / 24.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_vs_nonempty_hd_is_one() {
        let empty = Array2::zeros((12, 12));
        let m = rect(12, 12, 4, 7, 4, 7);
        assert_eq!(hausdorff(&empty, &m).unwrap().value, 1.0);
        assert_eq!(hausdorff(&m, &empty).unwrap().value, 1.0);
    }

    #[test]
    fn both_empty_conventions() {
        let a = Array2::zeros((6, 6));
        let b = Array2::zeros((6, 6));
        let i = iou(&a, &b).unwrap();
        assert_eq!((i.value, i.degenerate), (1.0, true));
        let h = hausdorff(&a, &b).unwrap();
        assert_eq!((h.value, h.degenerate), (0.0, true));
    }

    #[test]
    fn hausdorff_hand_case_single_pixels() {
        // Two single pixels at distance 5 in a 9x13 image; diagonal =
        // sqrt(8^2 + 12^2) = sqrt(208).
        let mut a = Array2::zeros((9, 13));
        a[(1, 1)] = 1;
        let mut b = Array2::zeros((9, 13));
        b[(4, 5)] = 1;
        let expect = 5.0 / 208.0f64.sqrt();
        assert_abs_diff_eq!(hausdorff(&a, &b).unwrap().value, expect, epsilon = 1e-12);
    }

    #[test]
    fn symmetry_and_range() {
        let a = rect(16, 16, 1, 9, 2, 7);
        let b = rect(16, 16, 6, 14, 8, 15);
        assert_eq!(iou(&a, &b).unwrap().value, iou(&b, &a).unwrap().value);
        let hab = hausdorff(&a, &b).unwrap().value;
        let hba = hausdorff(&b, &a).unwrap().value;
        assert_eq!(hab, hba);
        assert!((0.0..=1.0).contains(&hab));
    }
}
