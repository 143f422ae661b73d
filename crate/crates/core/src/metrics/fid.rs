//! Frechet distance between Gaussian fits of two feature sets:
//! `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
//!
//! The trace of the cross-covariance square root is computed through the
//! symmetric form `sqrt(S1)^T S2 sqrt(S1)` with a cyclic Jacobi
//! eigendecomposition, so no LAPACK dependency is needed at D <= 64.

use crate::error::{CoreError, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Sample mean and covariance (ddof = 1).
pub fn mean_cov(features: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = features.dim();
    assert!(n >= 2, "need at least two samples for a covariance");
    let mut mean = Array1::zeros(d);
    for row in features.outer_iter() {
        mean += &row;
    }
    mean /= n as f64;
    let mut cov = Array2::zeros((d, d));
    for row in features.outer_iter() {
        let centered = &row - &mean;
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * norm;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigh(sym: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = sym.nrows();
    if sym.ncols() != d {
        return Err(CoreError::shape("jacobi: matrix must be square"));
    }
    let mut a = sym.clone();
    let mut v = Array2::eye(d);
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.diag().iter().map(|x| x.abs()).sum::<f64>()) {
            return Ok((a.diag().to_owned(), v));
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(CoreError::numeric("jacobi: no convergence within sweep budget"))
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// from numerical noise are clamped to zero).
fn sqrtm_psd(sym: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = jacobi_eigh(sym)?;
    let d = vals.len();
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += s * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    Ok(out)
}

fn regularized(cov: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = cov.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    out
}

/// FID between two feature matrices (rows = samples). Symmetric in its
/// arguments up to floating-point noise and non-negative within tolerance.
pub fn fid(features_a: ArrayView2<'_, f64>, features_b: ArrayView2<'_, f64>) -> Result<f64> {
    if features_a.ncols() != features_b.ncols() {
        return Err(CoreError::shape("fid: feature dims differ"));
    }
    if features_a.nrows() < 2 || features_b.nrows() < 2 {
        return Err(CoreError::config("fid: need at least two samples per side"));
    }
    let (mu1, cov1) = mean_cov(features_a);
    let (mu2, cov2) = mean_cov(features_b);
    let mean_term: f64 = mu1.iter().zip(mu2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let scale = (cov1.diag().sum() + cov2.diag().sum()).max(1e-12) / (2.0 * cov1.nrows() as f64);

    let mut eps = 1e-10 * scale;
    for _ in 0..10 {
        let c1 = regularized(&cov1, eps);
        let c2 = regularized(&cov2, eps);
        match trace_sqrt_product(&c1, &c2) {
            Ok(tr) => {
                let value = mean_term + c1.diag().sum() + c2.diag().sum() - 2.0 * tr;
                return Ok(value);
            }
            Err(_) => {
                eps *= 10.0;
            }
        }
    }
    Err(CoreError::numeric("fid: covariance square root failed after regularization retries"))
}

/// Tr((S1 S2)^{1/2}) via the similarity-equivalent symmetric product.
fn trace_sqrt_product(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<f64> {
    let s1 = sqrtm_psd(c1)?;
    let inner = s1.dot(c2).dot(&s1);
    // Symmetrize against round-off before the eigensolve.
    let sym = (&inner + &inner.t()) * 0.5;
    let (vals, _) = jacobi_eigh(&sym)?;
    Ok(vals.iter().map(|v| v.max(0.0).sqrt()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array2, rng_from_seed};
    use approx::assert_abs_diff_eq;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric matrix with eigenvalues 5 and 1 (rotation of diag(5,1)).
        let a = ndarray::arr2(&[[3.0, 2.0], [2.0, 3.0]]);
        let (vals, vecs) = jacobi_eigh(&a).unwrap();
        let mut v: Vec<f64> = vals.to_vec();
        v.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 5.0, epsilon = 1e-12);
        // Reconstruction: V diag(vals) V^T == A.
        let mut rec: Array2<f64> = Array2::zeros((2, 2));
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rec[(i, j)] += vals[k] * vecs[(i, k)] * vecs[(j, k)];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(rec[(i, j)], a[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_feature_sets_give_zero() {
        let f = normal_array2(&mut rng_from_seed(0), (200, 8));
        let v = fid(f.view(), f.view()).unwrap();
        assert!(v.abs() < 1e-6, "fid(A,A) = {v}");
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let mut rng = rng_from_seed(1);
        let a = normal_array2(&mut rng, (300, 6));
        let b = normal_array2(&mut rng, (300, 6)).mapv(|v| 1.5 * v + 0.3);
        let ab = fid(a.view(), b.view()).unwrap();
        let ba = fid(b.view(), a.view()).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-8);
        assert!(ab > -1e-9);
    }

    #[test]
    fn shifted_gaussians_approach_squared_offset() {
        // Unit-covariance Gaussians offset by d: FID -> ||d||^2.
        let n = 10_000;
        let d = 8;
        let mut rng = rng_from_seed(42);
        let a = normal_array2(&mut rng, (n, d));
        let offset: Vec<f64> = (0..d).map(|k| 0.5 + 0.1 * k as f64).collect();
        let mut b = normal_array2(&mut rng, (n, d));
        for mut row in b.outer_iter_mut() {
            for k in 0..d {
                row[k] += offset[k];
            }
        }
        let expect: f64 = offset.iter().map(|v| v * v).sum();
        let got = fid(a.view(), b.view()).unwrap();
        let rel = (got - expect).abs() / expect;
        assert!(rel < 0.05, "fid {got} vs ||d||^2 {expect} (rel {rel})");
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = Array2::zeros((10, 4));
        let b = Array2::zeros((10, 5));
        assert!(fid(a.view(), b.view()).is_err());
    }
}
