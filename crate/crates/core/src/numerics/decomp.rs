//! Symmetric eigendecomposition, SVD, and SPD inverse square root.
//!
//! Cyclic Jacobi for the symmetric eigenproblem and one-sided Jacobi for the
//! SVD: simple, accurate, and entirely adequate at the dimensions this crate
//! works with (h ≤ 64, matrices ≤ 256). All outputs follow a fixed sign
//! convention (largest-magnitude entry of each vector nonnegative) so
//! decompositions are reproducible in tests.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
/// Asymmetry tolerated on inputs declared symmetric (covariance matrices).
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigendecomposition of a symmetric matrix: `a = q · diag(λ) · qᵀ` with
/// eigenvalues sorted descending and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// The input is symmetrized as `(a + aᵀ)/2` before decomposition; inputs with
/// asymmetry above 1e-8 are rejected since callers only pass covariance-like
/// matrices.
pub fn sym_eig(a: &Matrix) -> Result<EigDecomposition> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "sym_eig requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    a.ensure_finite("sym_eig input")?;
    let asym = a.asymmetry();
    if asym >= SYMMETRY_TOL {
        return Err(Error::Precondition(format!(
            "sym_eig input asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}"
        )));
    }

    let n = a.rows();
    let mut work = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut q = Matrix::identity(n);

    let scale = work.frobenius_norm();
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += work.get(i, j) * work.get(i, j);
            }
        }
        if off.sqrt() <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                jacobi_rotate(&mut work, &mut q, p, r);
            }
        }
    }
    if !converged {
        // One more measurement after the final sweep.
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += work.get(i, j) * work.get(i, j);
            }
        }
        if off.sqrt() > tol {
            return Err(Error::Convergence { what: "jacobi eigendecomposition", iterations: MAX_SWEEPS });
        }
    }

    let mut eigenvalues: Vec<f64> = (0..n).map(|i| work.get(i, i)).collect();
    sort_descending(&mut eigenvalues, &mut q);
    fix_column_signs(&mut q, None);
    Ok(EigDecomposition { eigenvalues, eigenvectors: q })
}

/// One cyclic-Jacobi rotation zeroing `work[p][r]`, accumulated into `q`.
fn jacobi_rotate(work: &mut Matrix, q: &mut Matrix, p: usize, r: usize) {
    let apr = work.get(p, r);
    if apr == 0.0 {
        return;
    }
    let app = work.get(p, p);
    let arr = work.get(r, r);
    let tau = (arr - app) / (2.0 * apr);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = work.rows();
    work.set(p, p, app - t * apr);
    work.set(r, r, arr + t * apr);
    work.set(p, r, 0.0);
    work.set(r, p, 0.0);
    for i in 0..n {
        if i != p && i != r {
            let aip = work.get(i, p);
            let air = work.get(i, r);
            let new_p = c * aip - s * air;
            let new_r = s * aip + c * air;
            work.set(i, p, new_p);
            work.set(p, i, new_p);
            work.set(i, r, new_r);
            work.set(r, i, new_r);
        }
    }
    for i in 0..q.rows() {
        let qip = q.get(i, p);
        let qir = q.get(i, r);
        q.set(i, p, c * qip - s * qir);
        q.set(i, r, s * qip + c * qir);
    }
}

/// Sorts values descending, permuting the columns of `vectors` alongside.
fn sort_descending(values: &mut [f64], vectors: &mut Matrix) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());
    let sorted_values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    values.copy_from_slice(&sorted_values);
    let old = vectors.clone();
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..vectors.rows() {
            vectors.set(i, new_col, old.get(i, old_col));
        }
    }
}

/// Makes the largest-magnitude entry of each column nonnegative. When
/// `paired` is given, its corresponding column is flipped together (singular
/// vector pairs must flip jointly to preserve the product).
fn fix_column_signs(m: &mut Matrix, mut paired: Option<&mut Matrix>) {
    for j in 0..m.cols() {
        let mut best = 0;
        let mut best_abs = 0.0;
        for i in 0..m.rows() {
            let v = m.get(i, j).abs();
            if v > best_abs {
                best_abs = v;
                best = i;
            }
        }
        if m.get(best, j) < 0.0 {
            for i in 0..m.rows() {
                let v = -m.get(i, j);
                m.set(i, j, v);
            }
            if let Some(other) = paired.as_deref_mut() {
                for i in 0..other.rows() {
                    let v = -other.get(i, j);
                    other.set(i, j, v);
                }
            }
        }
    }
}

/// `a^{-1/2}` for a symmetric PSD matrix, with eigenvalues clamped to `floor`
/// before the inverse square root. Eigenvalues below `-10·floor` indicate a
/// genuinely indefinite input and are rejected; small negatives from round-off
/// are absorbed by the clamp.
pub fn inv_sqrt_spd(a: &Matrix, floor: f64) -> Result<Matrix> {
    if floor <= 0.0 {
        return Err(Error::Range(format!("inv_sqrt_spd floor must be positive, got {floor}")));
    }
    let eig = sym_eig(a)?;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -10.0 * floor {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min });
    }
    let n = a.rows();
    let inv_roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(floor).sqrt())
        .collect();
    // out[i][j] = Σ_k q[i][k] · d[k] · q[j][k]; the summation order is identical
    // for (i,j) and (j,i), so the result is exactly symmetric.
    let q = &eig.eigenvectors;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for (k, &d) in inv_roots.iter().enumerate() {
                s += q.get(i, k) * d * q.get(j, k);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// Thin singular value decomposition `a = u · diag(d) · vᵀ`.
///
/// For an m×n input with m ≥ n, `u` is m×n and `v` is n×n, both with
/// orthonormal columns; singular values are nonnegative and sorted
/// descending. Wide inputs are handled by decomposing the transpose.
pub fn svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    a.ensure_finite("svd input")?;
    if a.rows() < a.cols() {
        let (u, d, v) = svd(&a.transpose())?;
        return Ok((v, d, u));
    }
    let m = a.rows();
    let n = a.cols();
    if n == 0 {
        return Ok((Matrix::zeros(m, 0), Vec::new(), Matrix::zeros(0, 0)));
    }

    // One-sided Jacobi: orthogonalize the columns of `w` by plane rotations,
    // accumulating them into `v`.
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let eps = 1e-15;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q_col in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q_col);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q_col);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q_col, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q_col);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q_col, s * vp + c * vq);
                }
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence { what: "one-sided jacobi svd", iterations: MAX_SWEEPS });
    }

    let mut singular: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w.get(i, j) * w.get(i, j)).sum::<f64>().sqrt())
        .collect();

    // Sort descending, permuting w and v columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| singular[j].partial_cmp(&singular[i]).unwrap());
    let w_old = w.clone();
    let v_old = v.clone();
    let d_old = singular.clone();
    for (new_col, &old_col) in order.iter().enumerate() {
        singular[new_col] = d_old[old_col];
        for i in 0..m {
            w.set(i, new_col, w_old.get(i, old_col));
        }
        for i in 0..n {
            v.set(i, new_col, v_old.get(i, old_col));
        }
    }

    // Normalize columns into u; complete the basis for null directions.
    let sigma_max = singular.first().copied().unwrap_or(0.0);
    let rank_tol = sigma_max * (m.max(n) as f64) * 1e-15;
    let mut u = Matrix::zeros(m, n);
    for (j, &sigma) in singular.iter().enumerate() {
        if sigma > rank_tol && sigma > 0.0 {
            let inv = 1.0 / sigma;
            for i in 0..m {
                u.set(i, j, w.get(i, j) * inv);
            }
        } else {
            complete_column(&mut u, j);
        }
    }

    fix_column_signs(&mut u, Some(&mut v));
    Ok((u, singular, v))
}

/// Fills column `j` of `u` with a unit vector orthogonal to columns 0..j,
/// found by Gram-Schmidt over the standard basis.
fn complete_column(u: &mut Matrix, j: usize) {
    let m = u.rows();
    for candidate in 0..m {
        let mut v: Vec<f64> = vec![0.0; m];
        v[candidate] = 1.0;
        for prev in 0..j {
            let dot: f64 = (0..m).map(|i| v[i] * u.get(i, prev)).sum();
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= dot * u.get(i, prev);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for (i, vi) in v.iter().enumerate() {
                u.set(i, j, vi / norm);
            }
            return;
        }
    }
    unreachable!("fewer than rows orthogonal directions");
}
