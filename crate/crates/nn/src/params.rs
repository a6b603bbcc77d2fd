//! Named parameter tensors with seeded initialization and a flat text
//! serialization (name, shape, values).

use crate::tensor::{Tape, TensorError, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: cannot parse parameter file: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
    #[error("unknown parameter `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered name -> tensor map; iteration order is the BTreeMap order, so
/// everything derived from it is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamTensor>,
}

/// Uniform Glorot bound for the given fan pair.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        self.entries
            .insert(name.to_string(), ParamTensor { shape, values });
    }

    fn insert_uniform<R: Rng>(&mut self, name: &str, shape: Vec<usize>, bound: f64, rng: &mut R) {
        let n = shape.iter().product::<usize>();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, values);
    }

    /// Convolution kernel `[c_out, c_in, k, k]` plus zero bias.
    pub fn add_conv<R: Rng>(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut R) {
        let bound = glorot(c_in * k * k, c_out * k * k);
        self.insert_uniform(&format!("{name}.w"), vec![c_out, c_in, k, k], bound, rng);
        self.insert(&format!("{name}.b"), vec![c_out], vec![0.0; c_out]);
    }

    /// Depthwise 3x3 kernel `[c, 3, 3]`, no bias.
    pub fn add_depthwise<R: Rng>(&mut self, name: &str, c: usize, rng: &mut R) {
        let bound = glorot(9, 9);
        self.insert_uniform(&format!("{name}.w"), vec![c, 3, 3], bound, rng);
    }

    /// Dense matrix `[rows, cols]` applied as `W x`.
    pub fn add_matrix<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let bound = glorot(cols, rows);
        self.insert_uniform(&format!("{name}.w"), vec![rows, cols], bound, rng);
    }

    /// Dense matrix with a zero bias vector.
    pub fn add_linear<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        self.add_matrix(name, rows, cols, rng);
        self.insert(&format!("{name}.b"), vec![rows], vec![0.0; rows]);
    }

    /// Learnable scalar.
    pub fn add_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, vec![1], vec![value]);
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.values.len()).sum()
    }

    /// Insert every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BTreeMap<String, Var>, TensorError> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.entries {
            let var = tape.leaf(&tensor.shape, tensor.values.clone())?;
            vars.insert(name.clone(), var);
        }
        Ok(vars)
    }

    /// Read gradients back from a tape after backward.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
    ) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .keys()
            .map(|name| (name.clone(), tape.grad(vars[name]).to_vec()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), ParamError> {
        let mut text = String::new();
        for (name, tensor) in &self.entries {
            text.push_str(&format!("param {name}\n"));
            text.push_str("shape");
            for d in &tensor.shape {
                text.push_str(&format!(" {d}"));
            }
            text.push('\n');
            text.push_str("values");
            for v in &tensor.values {
                text.push_str(&format!(" {v}"));
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| ParamError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ParamError> {
        let text = fs::read_to_string(path).map_err(|source| ParamError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let err = |reason: String| ParamError::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut set = ParamSet::new();
        let mut name: Option<String> = None;
        let mut shape: Option<Vec<usize>> = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("param ") {
                name = Some(rest.trim().to_string());
                shape = None;
            } else if let Some(rest) = line.strip_prefix("shape") {
                let dims: Result<Vec<usize>, _> =
                    rest.split_whitespace().map(|t| t.parse()).collect();
                shape = Some(dims.map_err(|_| err(format!("bad shape line `{line}`")))?);
            } else if let Some(rest) = line.strip_prefix("values") {
                let vals: Result<Vec<f64>, _> =
                    rest.split_whitespace().map(|t| t.parse()).collect();
                let vals = vals.map_err(|_| err(format!("bad values line for {name:?}")))?;
                let n = name.take().ok_or_else(|| err("values before param".into()))?;
                let s = shape.take().ok_or_else(|| err("values before shape".into()))?;
                if s.iter().product::<usize>() != vals.len() {
                    return Err(err(format!(
                        "parameter {n}: {} values for shape {s:?}",
                        vals.len()
                    )));
                }
                set.insert(&n, s, vals);
            }
        }
        Ok(set)
    }
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
