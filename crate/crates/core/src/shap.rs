//! Exact Shapley attributions for the (affine) PLSR model.
//!
//! Under feature independence the Shapley value of feature `j` for an
//! affine model collapses to `coefficients_j * (x_j - background_mean_j)`,
//! so attributions are closed-form: no sampling, no approximation error.

use crate::chemometrics::{ChemError, PlsrModel};
use ndarray::Array2;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("background matrix is empty")]
    EmptyBackground,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("width {got} does not match model width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Per-instance attributions plus the ranked global importance list.
#[derive(Debug, Clone)]
pub struct ShapReport {
    pub wavelengths: Vec<f64>,
    /// N×B attribution matrix, one row per evaluated instance.
    pub phi: Array2<f64>,
    /// Mean model prediction over the background set.
    pub base_value: f64,
    /// `(wavelength, mean |phi|)` sorted by importance descending,
    /// ties by wavelength ascending.
    pub ranking: Vec<(f64, f64)>,
}

fn background_mean(model: &PlsrModel, background: &Array2<f64>) -> Result<Vec<f64>, ShapError> {
    if background.nrows() == 0 {
        return Err(ShapError::EmptyBackground);
    }
    if background.ncols() != model.coefficients.len() {
        return Err(ShapError::WidthMismatch {
            got: background.ncols(),
            expected: model.coefficients.len(),
        });
    }
    let n = background.nrows() as f64;
    Ok((0..background.ncols())
        .map(|j| background.column(j).sum() / n)
        .collect())
}

/// Exact Shapley attributions of one instance against a background set.
pub fn linear_shap(
    model: &PlsrModel,
    background: &Array2<f64>,
    x: &[f64],
) -> Result<Vec<f64>, ShapError> {
    if x.len() != model.coefficients.len() {
        return Err(ShapError::WidthMismatch {
            got: x.len(),
            expected: model.coefficients.len(),
        });
    }
    let bg_mean = background_mean(model, background)?;
    Ok(model
        .coefficients
        .iter()
        .zip(x)
        .zip(&bg_mean)
        .map(|((c, xi), bi)| c * (xi - bi))
        .collect())
}

/// Attributions for every instance of `eval_set` plus the mean-|phi|
/// importance ranking.
pub fn mean_abs_shap(
    model: &PlsrModel,
    background: &Array2<f64>,
    eval_set: &Array2<f64>,
) -> Result<ShapReport, ShapError> {
    if eval_set.nrows() == 0 {
        return Err(ShapError::EmptyEvalSet);
    }
    if eval_set.ncols() != model.coefficients.len() {
        return Err(ShapError::WidthMismatch {
            got: eval_set.ncols(),
            expected: model.coefficients.len(),
        });
    }
    let bg_mean = background_mean(model, background)?;
    let base_value = model.predict_one(&bg_mean)?;

    let b = model.coefficients.len();
    let mut phi = Array2::zeros((eval_set.nrows(), b));
    for (i, row) in eval_set.rows().into_iter().enumerate() {
        for j in 0..b {
            phi[[i, j]] = model.coefficients[j] * (row[j] - bg_mean[j]);
        }
    }
    let n = eval_set.nrows() as f64;
    let mut ranking: Vec<(f64, f64)> = (0..b)
        .map(|j| {
            let mean_abs = phi.column(j).iter().map(|v| v.abs()).sum::<f64>() / n;
            (model.wavelengths[j], mean_abs)
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.partial_cmp(&b.0).unwrap())
    });
    Ok(ShapReport {
        wavelengths: model.wavelengths.clone(),
        phi,
        base_value,
        ranking,
    })
}

/// Write the importance ranking as CSV.
pub fn write_importance_csv(report: &ShapReport, path: &Path) -> Result<(), ShapError> {
    let mut text = String::from("wavelength_nm,mean_abs_shap\n");
    for (w, v) in &report.ranking {
        text.push_str(&format!("{w},{v}\n"));
    }
    fs::write(path, text).map_err(|source| ShapError::Io {
        path: path.to_path_buf(),
        source,
    })
}
