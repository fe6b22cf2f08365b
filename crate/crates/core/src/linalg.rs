//! Small dense 64-bit linear algebra: matrix exponential, LU determinant,
//! one-sided Jacobi singular values and power iteration. Matrices are
//! row-major `n×n` slices.

use crate::error::{Error, Result};

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

fn inf_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-18 Taylor
/// polynomial on the scaled matrix (`‖A/2^s‖∞ ≤ 1/2`).
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    let norm = inf_norm(a, n);
    if !norm.is_finite() {
        return vec![f64::INFINITY; n * n];
    }
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = 0.5f64.powi(s);
    let x: Vec<f64> = a.iter().map(|v| v * scale).collect();

    // Horner evaluation of Σ x^k / k!
    let mut result = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    for k in (1..=18).rev() {
        let mut next = matmul(&x, &result, n);
        for v in next.iter_mut() {
            *v /= k as f64;
        }
        for i in 0..n {
            next[i * n + i] += 1.0;
        }
        result = next;
    }
    for _ in 0..s {
        result = matmul(&result, &result, n);
    }
    result
}

/// Sign and `ln|det|` from LU factorization with partial pivoting.
/// A zero pivot yields sign 0 and `ln|det| = -inf`.
pub fn log_det(a: &[f64], n: usize) -> (i8, f64) {
    let mut m = a.to_vec();
    let mut sign = 1i8;
    let mut log_abs = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        let pv = m[pivot * n + col];
        if pv == 0.0 {
            return (0, f64::NEG_INFINITY);
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
            }
            sign = -sign;
        }
        if pv < 0.0 {
            sign = -sign;
        }
        log_abs += pv.abs().ln();
        for r in col + 1..n {
            let factor = m[r * n + col] / pv;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
        }
    }
    (sign, log_abs)
}

/// Singular values in descending order via one-sided Jacobi rotations.
pub fn singular_values(a: &[f64], n: usize) -> Result<Vec<f64>> {
    const MAX_SWEEPS: usize = 500;
    // columns of u are rotated until mutually orthogonal
    let mut u = a.to_vec();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (up, uq) = (u[i * n + p], u[i * n + q]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / denom);
                if gamma.abs() <= f64::EPSILON * denom {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (up, uq) = (u[i * n + p], u[i * n + q]);
                    u[i * n + p] = c * up - s * uq;
                    u[i * n + q] = s * up + c * uq;
                }
            }
        }
        if off <= 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("one-sided Jacobi SVD"));
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| u[i * n + j] * u[i * n + j]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Dominant eigenvalue by power iteration (Rayleigh quotient of the final
/// iterate). Returns `None` when the iterate collapses to zero.
pub fn dominant_eigenvalue(a: &[f64], n: usize, iters: usize) -> Option<f64> {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Some(lambda)
}
