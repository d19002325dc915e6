//! Truncated SVD for the small dense matrices produced by the model.
//!
//! The decomposition goes through the symmetric eigenproblem of whichever
//! Gram matrix is smaller (`ZᵀZ` when `n >= d`, else `ZZᵀ`), solved with the
//! cyclic Jacobi method.

use super::array::{dot, NumericArray};
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix, eigenvalues in non-increasing order.
///
/// Returns `(eigenvalues, vectors)` where `vectors.row(i)` is the unit
/// eigenvector of `eigenvalues[i]`.
pub fn symmetric_eigen(a: &NumericArray) -> Result<(Vec<f64>, NumericArray)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension {
            op: "symmetric_eigen",
            left: a.shape().to_vec(),
            right: vec![n, n],
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    let mut m = a.data().to_vec();
    // columns of `v` accumulate the rotations
    let mut v = NumericArray::identity(n).into_data();

    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += m[p * n + q] * m[p * n + q];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k * n + p];
                        let mkq = m[k * n + q];
                        m[k * n + p] = c * mkp - s * mkq;
                        m[k * n + q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p * n + k];
                        let mqk = m[q * n + k];
                        m[p * n + k] = c * mpk - s * mqk;
                        m[q * n + k] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = NumericArray::zeros(&[n, n]);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(r, k, v[k * n + i]);
        }
    }
    Ok((values, vectors))
}

/// Leading `k` singular triplets of an `n x d` matrix.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// Non-increasing, length `k`.
    pub singular_values: Vec<f64>,
    /// `n x k`, orthonormal columns where the singular value is nonzero.
    pub left: NumericArray,
    /// `k x d`, unit rows where the singular value is nonzero.
    pub right: NumericArray,
}

impl TruncatedSvd {
    /// Rows of `ΣVᵀ`: principal axes scaled by their singular values.
    pub fn scores(&self) -> NumericArray {
        let mut out = self.right.clone();
        for (i, &s) in self.singular_values.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        out
    }

    /// `UΣVᵀ` restricted to the kept components.
    pub fn reconstruct(&self) -> NumericArray {
        let (n, d, k) = (self.left.rows(), self.right.cols(), self.singular_values.len());
        let scores = self.scores();
        let mut out = NumericArray::zeros(&[n, d]);
        for i in 0..n {
            for c in 0..k {
                let u = self.left.get(i, c);
                if u == 0.0 {
                    continue;
                }
                let row = scores.row(c);
                out.row_mut(i).iter_mut().zip(row).for_each(|(o, s)| *o += u * s);
            }
        }
        out
    }
}

/// Leading `k` components of `z`, with the sign of each right singular vector
/// fixed so that its first nonzero entry is non-negative.
pub fn svd_parts(z: &NumericArray, k: usize) -> Result<TruncatedSvd> {
    let (n, d) = (z.rows(), z.cols());
    if n == 0 || d == 0 {
        return Err(Error::Empty("truncated_svd input"));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidRank { k, rows: n, cols: d });
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("truncated_svd input".into()));
    }

    let mut singular_values = Vec::with_capacity(k);
    let mut left = NumericArray::zeros(&[n, k]);
    let mut right = NumericArray::zeros(&[k, d]);
    let zt = z.transpose();
    let tol = 1e-13 * z.frobenius_norm().max(f64::MIN_POSITIVE);

    if n >= d {
        let (_, vecs) = symmetric_eigen(&zt.matmul(z)?)?;
        for c in 0..k {
            let v = vecs.row(c);
            // u σ = Z v
            let zv: Vec<f64> = (0..n).map(|i| dot(z.row(i), v)).collect();
            let sigma = zv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sigma = if sigma > tol { sigma } else { 0.0 };
            singular_values.push(sigma);
            if sigma > 0.0 {
                right.row_mut(c).copy_from_slice(v);
                for i in 0..n {
                    left.set(i, c, zv[i] / sigma);
                }
            }
        }
    } else {
        let (_, vecs) = symmetric_eigen(&z.matmul(&zt)?)?;
        for c in 0..k {
            let u = vecs.row(c);
            // σ v = Zᵀ u
            let sv: Vec<f64> = (0..d).map(|j| dot(zt.row(j), u)).collect();
            let sigma = sv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sigma = if sigma > tol { sigma } else { 0.0 };
            singular_values.push(sigma);
            if sigma > 0.0 {
                for j in 0..d {
                    right.set(c, j, sv[j] / sigma);
                }
                for i in 0..n {
                    left.set(i, c, u[i]);
                }
            }
        }
    }

    for c in 0..k {
        let flip = right
            .row(c)
            .iter()
            .find(|x| x.abs() > 1e-12)
            .is_some_and(|&x| x < 0.0);
        if flip {
            right.row_mut(c).iter_mut().for_each(|x| *x = -*x);
            for i in 0..n {
                let u = left.get(i, c);
                left.set(i, c, -u);
            }
        }
    }

    Ok(TruncatedSvd {
        singular_values,
        left,
        right,
    })
}

/// Top-`k` rows of `ΣVᵀ` for `z = UΣVᵀ`, shape `k x d`.
pub fn truncated_svd(z: &NumericArray, k: usize) -> Result<NumericArray> {
    Ok(svd_parts(z, k)?.scores())
}
