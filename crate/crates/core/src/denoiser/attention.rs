//! Decoupled dual attention: `Attn(Q, K, V) + lambda * Attn(Q, K', V')`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`, row-wise.
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::DimensionMismatch { expected: q.ncols(), got: k.ncols() });
    }
    if k.nrows() != v.nrows() {
        return Err(Error::DimensionMismatch { expected: k.nrows(), got: v.nrows() });
    }
    if k.nrows() == 0 {
        return Err(Error::Empty("attention keys"));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q * k.transpose() * scale;
    for mut row in scores.row_iter_mut() {
        let m = row.max();
        row.apply(|s| *s = (*s - m).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(scores * v)
}

pub fn dual_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    k2: &DMatrix<f64>,
    v2: &DMatrix<f64>,
    lambda_ipa: f64,
) -> Result<DMatrix<f64>> {
    if v.ncols() != v2.ncols() {
        return Err(Error::DimensionMismatch { expected: v.ncols(), got: v2.ncols() });
    }
    let base = attention(q, k, v)?;
    let prompt = attention(q, k2, v2)?;
    Ok(base + prompt * lambda_ipa)
}
