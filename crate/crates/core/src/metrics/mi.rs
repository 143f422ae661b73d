//! Mutual information of the joint grayscale-intensity histogram.

use crate::error::{CoreError, Result};
use crate::imgproc::luma;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiUnits {
    Nats,
    Bits,
}

#[derive(Debug, Clone, Copy)]
pub struct MiOutcome {
    pub value: f64,
    /// Set when either image is constant (single occupied bin); the value is
    /// 0 by convention then.
    pub degenerate: bool,
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// MI between the grayscale intensity distributions of two same-shape images.
pub fn mutual_information(a: &Array3<f64>, b: &Array3<f64>, bins: usize, units: MiUnits) -> Result<MiOutcome> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape("mutual_information: shape mismatch"));
    }
    if bins < 2 {
        return Err(CoreError::config("mutual_information: bins must be >= 2"));
    }
    let ga = luma(a);
    let gb = luma(b);
    let n = ga.len() as f64;
    let mut joint = vec![0.0f64; bins * bins];
    for (x, y) in ga.iter().zip(gb.iter()) {
        joint[bin_of(*x, bins) * bins + bin_of(*y, bins)] += 1.0;
    }
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let degenerate =
        pa.iter().filter(|&&p| p > 0.0).count() <= 1 || pb.iter().filter(|&&p| p > 0.0).count() <= 1;
    if degenerate {
        log::warn!("mutual_information: constant image, MI = 0 by convention");
        return Ok(MiOutcome { value: 0.0, degenerate: true });
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    if units == MiUnits::Bits {
        mi /= std::f64::consts::LN_2;
    }
    Ok(MiOutcome { value: mi.max(0.0), degenerate: false })
}

/// Histogram entropy of a single image's grayscale intensities.
pub fn intensity_entropy(a: &Array3<f64>, bins: usize, units: MiUnits) -> Result<f64> {
    if bins < 2 {
        return Err(CoreError::config("intensity_entropy: bins must be >= 2"));
    }
    let ga = luma(a);
    let n = ga.len() as f64;
    let mut hist = vec![0.0f64; bins];
    for v in ga.iter() {
        hist[bin_of(*v, bins)] += 1.0;
    }
    let mut h = 0.0;
    for c in hist {
        let p = c / n;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(match units {
        MiUnits::Nats => h,
        MiUnits::Bits => h / std::f64::consts::LN_2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3 as A3;

    #[test]
    fn self_mi_equals_entropy() {
        let img = A3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 8 + x) % 16) as f64 / 16.0);
        let mi = mutual_information(&img, &img, 16, MiUnits::Nats).unwrap();
        let h = intensity_entropy(&img, 16, MiUnits::Nats).unwrap();
        assert_abs_diff_eq!(mi.value, h, epsilon = 1e-12);
    }

    #[test]
    fn independent_noise_has_near_zero_mi() {
        let mut rng = crate::rng::rng_from_seed(5);
        let a = A3::from_shape_simple_fn((1, 64, 64), || rand::Rng::gen_range(&mut rng, 0.0..1.0));
        let mut rng2 = crate::rng::rng_from_seed(6);
        let b = A3::from_shape_simple_fn((1, 64, 64), || rand::Rng::gen_range(&mut rng2, 0.0..1.0));
        let mi = mutual_information(&a, &b, 16, MiUnits::Nats).unwrap();
        assert!(mi.value < 0.05, "mi = {}", mi.value);
    }

    #[test]
    fn hand_computed_two_level_case() {
        // a: top half dark, bottom half bright. b: left half dark, right
        // bright, except the corners align 6/16 + 6/16 of the mass on the
        // diagonal. Joint counts: (0,0)=6, (0,1)=2, (1,0)=2, (1,1)=6.
        let mut a = A3::zeros((1, 4, 4));
        let mut b = A3::zeros((1, 4, 4));
        let pattern_a = [
            [0, 0, 0, 0],
            [0, 0, 0, 0],
            [1, 1, 1, 1],
            [1, 1, 1, 1],
        ];
        let pattern_b = [
            [0, 0, 0, 1],
            [0, 0, 0, 1],
            [1, 0, 1, 1],
            [1, 0, 1, 1],
        ];
        for y in 0..4 {
            for x in 0..4 {
                a[(0, y, x)] = pattern_a[y][x] as f64 * 0.9;
                b[(0, y, x)] = pattern_b[y][x] as f64 * 0.9;
            }
        }
        // Marginals 8/8; joint (0,0)=6,(0,1)=2,(1,0)=2,(1,1)=6.
        // MI = 2*(6/16)ln((6/16)/(1/4)) + 2*(2/16)ln((2/16)/(1/4))
        //    = 0.75 ln 1.5 + 0.25 ln 0.5 = 0.13081203...
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let mi = mutual_information(&a, &b, 2, MiUnits::Nats).unwrap();
        assert_abs_diff_eq!(mi.value, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(mi.value, 0.130812035941137, epsilon = 1e-12);
        // Bits conversion.
        let mib = mutual_information(&a, &b, 2, MiUnits::Bits).unwrap();
        assert_abs_diff_eq!(mib.value, expect / std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn constant_images_flagged_with_zero() {
        let a = A3::from_elem((1, 4, 4), 0.5);
        let b = A3::from_shape_fn((1, 4, 4), |(_, y, _)| y as f64 / 4.0);
        let mi = mutual_information(&a, &b, 8, MiUnits::Nats).unwrap();
        assert_eq!(mi.value, 0.0);
        assert!(mi.degenerate);
    }

    #[test]
    fn symmetry() {
        let mut rng = crate::rng::rng_from_seed(9);
        let a = A3::from_shape_simple_fn((3, 8, 8), || rand::Rng::gen_range(&mut rng, 0.0..1.0));
        let b = A3::from_shape_simple_fn((3, 8, 8), || rand::Rng::gen_range(&mut rng, 0.0..1.0));
        let ab = mutual_information(&a, &b, 8, MiUnits::Nats).unwrap().value;
        let ba = mutual_information(&b, &a, 8, MiUnits::Nats).unwrap().value;
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }
}
