//! Dense f64 linear algebra for the prior geometry.
//!
//! Everything here is deliberately dependency-free and deterministic: the
//! rotation matrices must reconstruct bit-identically from a seed, so we keep
//! the factorization under our own control instead of linking a BLAS whose
//! kernel selection could vary between hosts.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Result of a Householder QR factorization of a square matrix.
pub struct QrFactors {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    /// Number of non-trivial reflections applied. `det(Q) = (-1)^reflections`
    /// exactly, since each Householder reflection has determinant -1.
    pub reflections: usize,
}

/// Householder QR of a square matrix. `A = Q R` with `Q` orthogonal.
///
/// Row-major friendly formulation: each reflection is applied as two passes of
/// row axpys, so the inner loops run over contiguous slices.
pub fn qr(a: &Array2<f64>) -> Result<QrFactors> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Shape(format!(
            "qr expects a square non-empty matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    // Force row-major storage: the reflection kernel reads rows as slices,
    // and e.g. a transposed view materializes as column-major.
    let mut r = a.as_standard_layout().into_owned();
    // Reflection vectors, each stored with its column offset.
    let mut vs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n.saturating_sub(1));

    for j in 0..n.saturating_sub(1) {
        // v = x - alpha e1 over the trailing column x = R[j.., j].
        let mut v: Vec<f64> = (j..n).map(|i| r[(i, j)]).collect();
        let norm_x = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            continue; // column already zero; degenerate, caller checks R diag
        }
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_v == 0.0 {
            continue;
        }
        for x in &mut v {
            *x /= norm_v;
        }

        apply_reflection_left(&mut r, j, j, &v);
        // Forced exact zeros below the diagonal keep later sign reads clean.
        r[(j, j)] = alpha;
        for i in j + 1..n {
            r[(i, j)] = 0.0;
        }
        vs.push((j, v));
    }

    // Q = H_1 ... H_m I, applied in reverse.
    let mut q = Array2::<f64>::eye(n);
    for (j, v) in vs.iter().rev() {
        apply_reflection_left(&mut q, *j, 0, v);
    }

    Ok(QrFactors {
        q,
        r,
        reflections: vs.len(),
    })
}

/// In-place `M[j.., col0..] = (I - 2 v v^T) M[j.., col0..]`.
fn apply_reflection_left(m: &mut Array2<f64>, row0: usize, col0: usize, v: &[f64]) {
    let n = m.nrows();
    let width = m.ncols() - col0;
    // w = M[row0.., col0..]^T v, accumulated row by row.
    let mut w = vec![0.0f64; width];
    for (i, vi) in v.iter().enumerate() {
        let row = m.row(row0 + i);
        let row = &row.to_slice().expect("row-major layout")[col0..];
        for (wk, rk) in w.iter_mut().zip(row) {
            *wk += vi * rk;
        }
    }
    for i in 0..n - row0 {
        let vi2 = 2.0 * v[i];
        let mut row = m.row_mut(row0 + i);
        let row = &mut row.as_slice_mut().expect("row-major layout")[col0..];
        for (rk, wk) in row.iter_mut().zip(&w) {
            *rk -= vi2 * wk;
        }
    }
}

/// Determinant via LU with partial pivoting. Independent of the QR path.
pub fn lu_det(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "lu_det expects a square matrix");
    let mut m = a.clone();
    let mut det = 1.0f64;
    for k in 0..n {
        let mut pivot = k;
        let mut best = m[(k, k)].abs();
        for i in k + 1..n {
            let v = m[(i, k)].abs();
            if v > best {
                best = v;
                pivot = i;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if pivot != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(pivot, j)];
                m[(pivot, j)] = tmp;
            }
            det = -det;
        }
        det *= m[(k, k)];
        let inv = 1.0 / m[(k, k)];
        for i in k + 1..n {
            let factor = m[(i, k)] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                let sub = factor * m[(k, j)];
                m[(i, j)] -= sub;
            }
        }
    }
    det
}

/// `max |A^T A - I|`, the orthogonality residual.
pub fn orthogonality_residual(a: &Array2<f64>) -> f64 {
    let gram = a.t().dot(a);
    let n = a.ncols();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn matvec(m: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    m.dot(v)
}

pub fn l2_norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn qr_reconstructs_input() {
        let a = array![[2.0, -1.0, 3.0], [0.5, 4.0, -2.0], [1.0, 1.0, 1.0]];
        let f = qr(&a).unwrap();
        let recon = f.q.dot(&f.r);
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(orthogonality_residual(&f.q) < 1e-13);
    }

    #[test]
    fn qr_r_is_upper_triangular() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let f = qr(&a).unwrap();
        assert_eq!(f.r[(1, 0)], 0.0);
    }

    #[test]
    fn reflection_parity_matches_lu_det() {
        let a = array![
            [0.3, 0.7, 0.1, 0.9],
            [0.2, 0.5, 0.8, 0.4],
            [0.9, 0.1, 0.6, 0.2],
            [0.4, 0.8, 0.3, 0.7]
        ];
        let f = qr(&a).unwrap();
        let parity = if f.reflections % 2 == 0 { 1.0 } else { -1.0 };
        let det_q = lu_det(&f.q);
        assert!((det_q - parity).abs() < 1e-10, "det {det_q} parity {parity}");
    }

    #[test]
    fn lu_det_known_values() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert!((lu_det(&a) + 2.0).abs() < 1e-14);
        let eye = Array2::<f64>::eye(5);
        assert!((lu_det(&eye) - 1.0).abs() < 1e-14);
        let singular = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(lu_det(&singular).abs() < 1e-14);
    }
}
