//! Small dense symmetric linear algebra on row-major `f64` matrices.

use alloc::vec;
use alloc::vec::Vec;

const MAX_SWEEPS: usize = 100;

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
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

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

pub fn frobenius(a: &[f64]) -> f64 {
    libm::sqrt(a.iter().map(|v| v * v).sum())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = frobenius(&m).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if libm::sqrt(off) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
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
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// `V f(diag) V^T` for a symmetric matrix.
pub fn symmetric_apply(a: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (vals, v) = symmetric_eigen(a, n);
    let fv: Vec<f64> = vals.into_iter().map(f).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| v[i * n + k] * fv[k] * v[j * n + k]).sum();
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from rounding are clamped to zero.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Vec<f64> {
    symmetric_apply(a, n, |x| libm::sqrt(x.max(0.0)))
}

/// Square root of `s1 * s2` for symmetric positive definite inputs, via
/// `S^{1/2} (S^{1/2} s2 S^{1/2})^{1/2} S^{-1/2}` with `S = s1`.
pub fn sqrtm_product(s1: &[f64], s2: &[f64], n: usize) -> Vec<f64> {
    let h = sqrtm_psd(s1, n);
    let h_inv = symmetric_apply(s1, n, |x| if x > 0.0 { 1.0 / libm::sqrt(x) } else { 0.0 });
    let inner = sqrtm_psd(&matmul(&matmul(&h, s2, n), &h, n), n);
    matmul(&matmul(&h, &inner, n), &h_inv, n)
}

/// `Tr((s1 s2)^{1/2})` through the symmetric form, which is PSD.
pub fn trace_sqrt_product(s1: &[f64], s2: &[f64], n: usize) -> f64 {
    let h = sqrtm_psd(s1, n);
    let inner = matmul(&matmul(&h, s2, n), &h, n);
    let (vals, _) = symmetric_eigen(&inner, n);
    vals.into_iter().map(|x| libm::sqrt(x.max(0.0))).sum()
}
