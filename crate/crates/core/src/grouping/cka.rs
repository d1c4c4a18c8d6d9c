use nalgebra::DMatrix;

use crate::error::{reject, Result};

/// Linear CKA between two feature matrices with the same rows.
///
/// `‖AᵀB‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F)` on column-centered features.
pub fn cka_linear(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return reject(format!("feature row counts differ: {} vs {}", a.nrows(), b.nrows()));
    }
    if a.nrows() < 2 {
        return reject("CKA needs at least two samples");
    }
    let center = |m: &DMatrix<f64>| {
        let mut m = m.clone();
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        m
    };
    let (ac, bc) = (center(a), center(b));
    let aa = (ac.transpose() * &ac).norm();
    let bb = (bc.transpose() * &bc).norm();
    if aa == 0.0 || bb == 0.0 {
        return reject("features have zero variance");
    }
    let ab = (ac.transpose() * &bc).norm_squared();
    Ok((ab / (aa * bb)).clamp(0.0, 1.0))
}

/// Row-major `n × d` slice to a matrix.
pub fn features_matrix(rows: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, data.len() / rows.max(1), data)
}
