//! Dense row-major `d×d` helpers on flat slices.
//!
//! Jacobian propagation runs once per path and step; these avoid allocating
//! a matrix object in the inner loops.

use nalgebra::DMatrix;

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out = a · b`.
pub fn matmul_into(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

pub fn matmul(d: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    matmul_into(d, a, b, &mut out);
    out
}

/// `y = a · x`.
pub fn matvec(d: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|k| a[i * d + k] * x[k]).sum())
        .collect()
}

pub fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm via nalgebra's SVD.
pub fn operator_norm(d: usize, m: &[f64]) -> f64 {
    to_dmatrix(d, m).singular_values().max()
}

pub fn to_dmatrix(d: usize, m: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, m)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}
