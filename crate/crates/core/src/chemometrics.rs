//! Reference values, dataset splitting, partial least squares regression
//! and regression metrics.
//!
//! PLSR is fitted with NIPALS and Y-deflation. A fit keeps the whole
//! component path, so cross-validation can score every latent-variable
//! count from a single decomposition per fold.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

const NIPALS_TOL: f64 = 1e-10;
const NIPALS_MAX_ITER: usize = 500;
const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ChemError {
    #[error("dry weight {w_dry} g and total weight {w_total} g violate 0 <= dry <= total, total > 0")]
    BadWeights { w_dry: f64, w_total: f64 },
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("latent variable count {n_lv} out of range 1..={max}")]
    LvOutOfRange { n_lv: usize, max: usize },
    #[error("matrix width {got} does not match model width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("vectors have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("reference values have zero variance; r2 undefined")]
    ZeroVariance,
    #[error("rmsep must be positive, got {0}")]
    BadRmsep(f64),
    #[error("table invariant violated: {0}")]
    BadTable(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: cannot parse model/table: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
}

/// N samples × B wavelengths with ids and reference attribute values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraTable {
    pub ids: Vec<String>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub wavelengths: Vec<f64>,
}

impl SpectraTable {
    pub fn new(
        ids: Vec<String>,
        x: Array2<f64>,
        y: Vec<f64>,
        wavelengths: Vec<f64>,
    ) -> Result<Self, ChemError> {
        let (n, b) = x.dim();
        if ids.len() != n || y.len() != n {
            return Err(ChemError::BadTable(format!(
                "{} ids, {} reference values, {} spectra rows",
                ids.len(),
                y.len(),
                n
            )));
        }
        if wavelengths.len() != b {
            return Err(ChemError::BadTable(format!(
                "{} wavelengths for {} columns",
                wavelengths.len(),
                b
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ChemError::BadTable("non-finite value".into()));
        }
        Ok(Self {
            ids,
            x,
            y,
            wavelengths,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.x.ncols()
    }

    /// Table restricted to the given sample rows, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> SpectraTable {
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let x = self.x.select(Axis(0), rows);
        SpectraTable {
            ids,
            x,
            y,
            wavelengths: self.wavelengths.clone(),
        }
    }

    /// Table restricted to the given band columns, in the given order.
    pub fn subset_bands(&self, bands: &[usize]) -> SpectraTable {
        let wavelengths = bands.iter().map(|&b| self.wavelengths[b]).collect();
        let x = self.x.select(Axis(1), bands);
        SpectraTable {
            ids: self.ids.clone(),
            x,
            y: self.y.clone(),
            wavelengths,
        }
    }
}

/// Dry matter content in percent: `100 * w_dry / w_total`.
pub fn dry_matter_percent(w_dry: f64, w_total: f64) -> Result<f64, ChemError> {
    if !(w_total > 0.0) || !(0.0..=w_total).contains(&w_dry) {
        return Err(ChemError::BadWeights { w_dry, w_total });
    }
    Ok(100.0 * w_dry / w_total)
}

/// Disjoint train/validation/test index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Group sizes by largest-remainder rounding; ties go to the earlier group.
pub fn largest_remainder_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut sizes = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        let exact = n as f64 * ratios[i];
        sizes[i] = exact.floor() as usize;
        fracs[i] = (exact - exact.floor(), i);
        assigned += sizes[i];
    }
    let mut order = fracs;
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..n.saturating_sub(assigned) {
        sizes[order[k % 3].1] += 1;
    }
    sizes
}

/// Deterministic random split of `0..n` into train/validation/test.
pub fn random_split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, ChemError> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ChemError::BadRatios(ratios));
    }
    if n < 3 {
        return Err(ChemError::TooFewSamples { need: 3, got: n });
    }
    let sizes = largest_remainder_sizes(n, ratios);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = indices[..sizes[0]].to_vec();
    let validation = indices[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = indices[sizes[0] + sizes[1]..].to_vec();
    Ok(SplitAssignment {
        train,
        validation,
        test,
    })
}

/// Fitted PLSR model: prediction is `y_mean + (x - x_mean) . coefficients`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsrModel {
    pub wavelengths: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    pub coefficients: Vec<f64>,
    pub n_lv: usize,
}

impl PlsrModel {
    pub fn predict_one(&self, x: &[f64]) -> Result<f64, ChemError> {
        if x.len() != self.coefficients.len() {
            return Err(ChemError::WidthMismatch {
                got: x.len(),
                expected: self.coefficients.len(),
            });
        }
        let mut acc = self.y_mean;
        for i in 0..x.len() {
            acc += (x[i] - self.x_mean[i]) * self.coefficients[i];
        }
        Ok(acc)
    }
}

/// Full NIPALS decomposition up to some component count; keeps weights,
/// loadings, scores and the coefficient vector after each component.
#[derive(Debug, Clone)]
pub struct PlsrPath {
    pub wavelengths: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    /// X weights, one column per component.
    pub weights: Vec<Vec<f64>>,
    /// X loadings, one column per component.
    pub loadings: Vec<Vec<f64>>,
    /// Scores, one column per component.
    pub scores: Vec<Vec<f64>>,
    /// Y loading per component.
    pub y_loadings: Vec<f64>,
    /// Regression coefficients after 1, 2, ... components.
    pub coefficient_path: Vec<Vec<f64>>,
}

impl PlsrPath {
    /// Number of components actually extracted (rank may cut a request short).
    pub fn n_components(&self) -> usize {
        self.coefficient_path.len()
    }

    /// Model using the first `n_lv` components; counts beyond the achieved
    /// rank saturate at the last extracted component.
    pub fn model(&self, n_lv: usize) -> PlsrModel {
        assert!(n_lv >= 1, "n_lv must be at least 1");
        let lv = n_lv.min(self.n_components());
        PlsrModel {
            wavelengths: self.wavelengths.clone(),
            x_mean: self.x_mean.clone(),
            y_mean: self.y_mean,
            coefficients: self.coefficient_path[lv - 1].clone(),
            n_lv: lv,
        }
    }
}

fn check_lv(n_lv: usize, n: usize, b: usize) -> Result<(), ChemError> {
    let max = (n - 1).min(b);
    if n_lv == 0 || n_lv > max {
        return Err(ChemError::LvOutOfRange { n_lv, max });
    }
    Ok(())
}

/// NIPALS PLSR with Y-deflation, returning the whole component path.
pub fn fit_plsr_path(table: &SpectraTable, max_lv: usize) -> Result<PlsrPath, ChemError> {
    let n = table.n_samples();
    let b = table.n_bands();
    if n < 2 {
        return Err(ChemError::TooFewSamples { need: 2, got: n });
    }
    check_lv(max_lv, n, b)?;

    let x_mean: Vec<f64> = table
        .x
        .mean_axis(Axis(0))
        .expect("non-empty table")
        .to_vec();
    let y_mean = table.y.iter().sum::<f64>() / n as f64;
    let mut xd = table.x.clone();
    for mut row in xd.rows_mut() {
        for (v, m) in row.iter_mut().zip(&x_mean) {
            *v -= m;
        }
    }
    let mut yd = Array1::from_iter(table.y.iter().map(|v| v - y_mean));

    let mut path = PlsrPath {
        wavelengths: table.wavelengths.clone(),
        x_mean,
        y_mean,
        weights: Vec::new(),
        loadings: Vec::new(),
        scores: Vec::new(),
        y_loadings: Vec::new(),
        coefficient_path: Vec::new(),
    };
    // rotation columns r_a translate weights into coefficients on the
    // original (deflated-free) centered X
    let mut rotations: Vec<Vec<f64>> = Vec::new();
    let mut coef = vec![0.0f64; b];

    for _ in 0..max_lv {
        // inner NIPALS loop; for a single response it settles immediately
        let mut w = xd.t().dot(&yd);
        let mut norm = w.dot(&w).sqrt();
        if norm < RANK_EPS {
            break;
        }
        w /= norm;
        // u = Y q / (q'q) is a scalar multiple of y for a single response,
        // so the weight fixed point is reached after one recomputation
        for _ in 0..NIPALS_MAX_ITER {
            let mut w_next = xd.t().dot(&yd);
            norm = w_next.dot(&w_next).sqrt();
            if norm < RANK_EPS {
                break;
            }
            w_next /= norm;
            let delta = (&w_next - &w).iter().map(|d| d * d).sum::<f64>().sqrt();
            w = w_next;
            if delta < NIPALS_TOL {
                break;
            }
        }
        let t = xd.dot(&w);
        let tt = t.dot(&t);
        if tt < RANK_EPS {
            break;
        }
        let p = xd.t().dot(&t) / tt;
        let q = t.dot(&yd) / tt;

        // deflate
        for (mut row, &ti) in xd.rows_mut().into_iter().zip(t.iter()) {
            for (v, pj) in row.iter_mut().zip(p.iter()) {
                *v -= ti * pj;
            }
        }
        yd = &yd - &(&t * q);

        // rotation: r_a = w_a - sum_{j<a} (p_j . w_a) r_j
        let mut r: Vec<f64> = w.to_vec();
        for (rj, pj) in rotations.iter().zip(&path.loadings) {
            let dot: f64 = pj.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            for (ri, rji) in r.iter_mut().zip(rj) {
                *ri -= dot * rji;
            }
        }
        for (c, ri) in coef.iter_mut().zip(&r) {
            *c += q * ri;
        }

        path.weights.push(w.to_vec());
        path.loadings.push(p.to_vec());
        path.scores.push(t.to_vec());
        path.y_loadings.push(q);
        path.coefficient_path.push(coef.clone());
        rotations.push(r);
    }

    if path.coefficient_path.is_empty() {
        // X carries no covariance with y at all (e.g. constant y):
        // the model is the plain mean predictor with zero coefficients
        path.coefficient_path.push(vec![0.0; b]);
        path.weights.push(vec![0.0; b]);
        path.loadings.push(vec![0.0; b]);
        path.scores.push(vec![0.0; n]);
        path.y_loadings.push(0.0);
    }
    Ok(path)
}

/// Fit a PLSR model with (up to) `n_lv` latent variables.
pub fn fit_plsr(table: &SpectraTable, n_lv: usize) -> Result<PlsrModel, ChemError> {
    let path = fit_plsr_path(table, n_lv)?;
    Ok(path.model(n_lv))
}

/// Rowwise prediction for an N×B matrix.
pub fn predict_plsr(model: &PlsrModel, x: &Array2<f64>) -> Result<Vec<f64>, ChemError> {
    if x.ncols() != model.coefficients.len() {
        return Err(ChemError::WidthMismatch {
            got: x.ncols(),
            expected: model.coefficients.len(),
        });
    }
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let mut acc = model.y_mean;
            for i in 0..row.len() {
                acc += (row[i] - model.x_mean[i]) * model.coefficients[i];
            }
            acc
        })
        .collect())
}

/// RMSECV per latent-variable count via leave-one-out cross-validation.
/// Returns the parsimonious best count (smallest within 1e-12 of the
/// minimum) and the full curve.
pub fn select_lv_loocv(
    table: &SpectraTable,
    max_lv: usize,
) -> Result<(usize, Vec<f64>), ChemError> {
    let n = table.n_samples();
    if n < 3 {
        return Err(ChemError::TooFewSamples { need: 3, got: n });
    }
    // each fold fits on n-1 samples
    check_lv(max_lv, n - 1, table.n_bands())?;

    let mut sq_err = vec![0.0f64; max_lv];
    for held_out in 0..n {
        let rows: Vec<usize> = (0..n).filter(|&i| i != held_out).collect();
        let fold = table.subset_rows(&rows);
        let path = fit_plsr_path(&fold, max_lv)?;
        let x_held: Vec<f64> = table.x.row(held_out).to_vec();
        for lv in 1..=max_lv {
            let pred = path.model(lv).predict_one(&x_held)?;
            let err = pred - table.y[held_out];
            sq_err[lv - 1] += err * err;
        }
    }
    let rmsecv: Vec<f64> = sq_err.iter().map(|s| (s / n as f64).sqrt()).collect();
    let min = rmsecv.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_lv = rmsecv
        .iter()
        .position(|&v| v <= min + 1e-12)
        .expect("non-empty curve")
        + 1;
    Ok((best_lv, rmsecv))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub rmse: f64,
}

/// Coefficient of determination and root mean square error.
pub fn regression_metrics(y: &[f64], y_hat: &[f64]) -> Result<RegressionMetrics, ChemError> {
    if y.len() != y_hat.len() {
        return Err(ChemError::LengthMismatch {
            a: y.len(),
            b: y_hat.len(),
        });
    }
    if y.len() < 2 {
        return Err(ChemError::TooFewSamples {
            need: 2,
            got: y.len(),
        });
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if ss_tot == 0.0 {
        return Err(ChemError::ZeroVariance);
    }
    Ok(RegressionMetrics {
        r2: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n).sqrt(),
    })
}

/// Ratio of prediction to deviation: sample (n-1) standard deviation of
/// the test references over RMSEP.
pub fn rpd(y_test: &[f64], rmsep: f64) -> Result<f64, ChemError> {
    if !(rmsep > 0.0) {
        return Err(ChemError::BadRmsep(rmsep));
    }
    if y_test.len() < 2 {
        return Err(ChemError::TooFewSamples {
            need: 2,
            got: y_test.len(),
        });
    }
    let n = y_test.len() as f64;
    let mean = y_test.iter().sum::<f64>() / n;
    let var = y_test.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / rmsep)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_vec(s: &str, path: &Path) -> Result<Vec<f64>, ChemError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim().parse::<f64>().map_err(|_| ChemError::Parse {
                path: path.to_path_buf(),
                reason: format!("bad number `{p}`"),
            })
        })
        .collect()
}

/// Persist a model as plain-text `key = value` lines with comma vectors.
pub fn write_model(model: &PlsrModel, path: &Path) -> Result<(), ChemError> {
    let text = format!(
        "n_lv = {}\ny_mean = {}\nwavelengths = {}\nx_mean = {}\ncoefficients = {}\n",
        model.n_lv,
        model.y_mean,
        fmt_vec(&model.wavelengths),
        fmt_vec(&model.x_mean),
        fmt_vec(&model.coefficients),
    );
    fs::write(path, text).map_err(|source| ChemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a model written by [`write_model`].
pub fn read_model(path: &Path) -> Result<PlsrModel, ChemError> {
    let text = fs::read_to_string(path).map_err(|source| ChemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut n_lv = None;
    let mut y_mean = None;
    let mut wavelengths = None;
    let mut x_mean = None;
    let mut coefficients = None;
    for line in text.lines() {
        let Some(eq) = line.find('=') else { continue };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        match key {
            "n_lv" => {
                n_lv = Some(value.parse::<usize>().map_err(|_| ChemError::Parse {
                    path: path.to_path_buf(),
                    reason: format!("bad n_lv `{value}`"),
                })?)
            }
            "y_mean" => {
                y_mean = Some(value.parse::<f64>().map_err(|_| ChemError::Parse {
                    path: path.to_path_buf(),
                    reason: format!("bad y_mean `{value}`"),
                })?)
            }
            "wavelengths" => wavelengths = Some(parse_vec(value, path)?),
            "x_mean" => x_mean = Some(parse_vec(value, path)?),
            "coefficients" => coefficients = Some(parse_vec(value, path)?),
            _ => {}
        }
    }
    let missing = |field: &str| ChemError::Parse {
        path: path.to_path_buf(),
        reason: format!("missing field `{field}`"),
    };
    let model = PlsrModel {
        wavelengths: wavelengths.ok_or_else(|| missing("wavelengths"))?,
        x_mean: x_mean.ok_or_else(|| missing("x_mean"))?,
        y_mean: y_mean.ok_or_else(|| missing("y_mean"))?,
        coefficients: coefficients.ok_or_else(|| missing("coefficients"))?,
        n_lv: n_lv.ok_or_else(|| missing("n_lv"))?,
    };
    if model.x_mean.len() != model.coefficients.len()
        || model.wavelengths.len() != model.coefficients.len()
    {
        return Err(ChemError::Parse {
            path: path.to_path_buf(),
            reason: "vector lengths disagree".into(),
        });
    }
    Ok(model)
}

/// Write a spectra table as CSV: header `id,attribute,<wl...>`.
pub fn write_table_csv(table: &SpectraTable, path: &Path) -> Result<(), ChemError> {
    let mut text = String::from("id,attribute");
    for w in &table.wavelengths {
        text.push(',');
        text.push_str(&format!("{w}"));
    }
    text.push('\n');
    for i in 0..table.n_samples() {
        text.push_str(&table.ids[i]);
        text.push(',');
        text.push_str(&format!("{}", table.y[i]));
        for v in table.x.row(i) {
            text.push(',');
            text.push_str(&format!("{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| ChemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a spectra table written by [`write_table_csv`].
pub fn read_table_csv(path: &Path) -> Result<SpectraTable, ChemError> {
    let text = fs::read_to_string(path).map_err(|source| ChemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |reason: String| ChemError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "attribute" {
        return Err(parse_err("header must start with id,attribute".into()));
    }
    let wavelengths: Vec<f64> = cols[2..]
        .iter()
        .map(|c| {
            c.parse::<f64>()
                .map_err(|_| parse_err(format!("bad wavelength `{c}`")))
        })
        .collect::<Result<_, _>>()?;
    let b = wavelengths.len();
    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut flat = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != b + 2 {
            return Err(parse_err(format!(
                "row {}: {} fields, expected {}",
                ln + 2,
                parts.len(),
                b + 2
            )));
        }
        ids.push(parts[0].to_string());
        y.push(
            parts[1]
                .parse::<f64>()
                .map_err(|_| parse_err(format!("row {}: bad attribute", ln + 2)))?,
        );
        for p in &parts[2..] {
            flat.push(
                p.parse::<f64>()
                    .map_err(|_| parse_err(format!("row {}: bad value `{p}`", ln + 2)))?,
            );
        }
    }
    let n = ids.len();
    let x = Array2::from_shape_vec((n, b), flat)
        .map_err(|e| parse_err(format!("shape error: {e}")))?;
    SpectraTable::new(ids, x, y, wavelengths)
}
