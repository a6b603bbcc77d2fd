//! Toy-scale spectral reconstruction networks mapping an RGB tensor to a
//! multi-band reflectance tensor. Three architectures are provided:
//!
//! - `HscnnD` — a densely connected stack where block `k` consumes the
//!   concatenation of the stem and every previous block output, with a
//!   two-branch (1x1 + 3x3) path-widening fusion inside each block;
//! - `Hrnet` — a 4-level hierarchy over pixel-unshuffled inputs with
//!   residual dense blocks, global channel-attention blocks and
//!   shuffle-and-concat inter-level fusion;
//! - `MstPp` — stacked U-shaped stages of spectral-wise self-attention
//!   blocks, where attention is computed over channel tokens (a CxC
//!   matrix) rather than spatial positions.

mod hrnet;
mod hscnn;
mod mst;

pub use mst::{add_smsa_params, s_msa, SmsaTrace};

use crate::params::{init_rng, ParamSet};
use crate::tensor::{Tape, TensorError, Var};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    HscnnD,
    Hrnet,
    MstPp,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::HscnnD => "hscnn_d",
            Architecture::Hrnet => "hrnet",
            Architecture::MstPp => "mst_pp",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "hscnn_d" => Some(Architecture::HscnnD),
            "hrnet" => Some(Architecture::Hrnet),
            "mst_pp" => Some(Architecture::MstPp),
            _ => None,
        }
    }
}

/// Architecture descriptor; fully determines every parameter shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub base_channels: usize,
    /// number of dense blocks (HscnnD)
    pub dense_blocks: usize,
    /// dense growth channels (HscnnD blocks, Hrnet residual dense layers)
    pub growth: usize,
    /// residual block pairs per level (Hrnet)
    pub blocks_per_level: usize,
    /// stage count (MstPp)
    pub stages: usize,
    /// attention heads (MstPp)
    pub heads: usize,
    /// output band count
    pub output_bands: usize,
}

impl ModelSpec {
    pub fn hscnn_d_toy(output_bands: usize) -> Self {
        Self {
            architecture: Architecture::HscnnD,
            base_channels: 16,
            dense_blocks: 4,
            growth: 16,
            blocks_per_level: 1,
            stages: 1,
            heads: 1,
            output_bands,
        }
    }

    pub fn hrnet_toy(output_bands: usize) -> Self {
        Self {
            architecture: Architecture::Hrnet,
            base_channels: 16,
            dense_blocks: 1,
            growth: 8,
            blocks_per_level: 1,
            stages: 1,
            heads: 1,
            output_bands,
        }
    }

    pub fn mst_pp_toy(output_bands: usize) -> Self {
        Self {
            architecture: Architecture::MstPp,
            base_channels: 16,
            dense_blocks: 1,
            growth: 1,
            blocks_per_level: 1,
            stages: 2,
            heads: 2,
            output_bands,
        }
    }

    pub fn toy(architecture: Architecture, output_bands: usize) -> Self {
        match architecture {
            Architecture::HscnnD => Self::hscnn_d_toy(output_bands),
            Architecture::Hrnet => Self::hrnet_toy(output_bands),
            Architecture::MstPp => Self::mst_pp_toy(output_bands),
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.output_bands == 0 {
            return Err(NetError::BadSpec("output bands must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(NetError::BadSpec("base channels must be >= 1".into()));
        }
        match self.architecture {
            Architecture::HscnnD => {
                if self.dense_blocks == 0 || self.growth == 0 {
                    return Err(NetError::BadSpec("dense blocks and growth must be >= 1".into()));
                }
            }
            Architecture::Hrnet => {
                if self.base_channels % 4 != 0 {
                    return Err(NetError::BadSpec(
                        "hrnet base channels must be divisible by 4 (shuffle fusion)".into(),
                    ));
                }
                if self.blocks_per_level == 0 || self.growth == 0 {
                    return Err(NetError::BadSpec("hrnet depth knobs must be >= 1".into()));
                }
            }
            Architecture::MstPp => {
                if self.stages == 0 || self.heads == 0 {
                    return Err(NetError::BadSpec("stages and heads must be >= 1".into()));
                }
                if self.base_channels % self.heads != 0
                    || (2 * self.base_channels) % self.heads != 0
                {
                    return Err(NetError::BadSpec(format!(
                        "channels {} not divisible by {} heads at every level",
                        self.base_channels, self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input channel count of dense block `k` under the concatenation rule.
    pub fn hscnn_block_in_channels(&self, k: usize) -> usize {
        self.base_channels + k * self.growth
    }
}

pub type Binding = BTreeMap<String, Var>;

/// An architecture descriptor plus its learnable parameters.
#[derive(Debug, Clone)]
pub struct ReconNetwork {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl ReconNetwork {
    /// Build a network with seeded uniform initialization.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = init_rng(seed);
        let params = match spec.architecture {
            Architecture::HscnnD => hscnn::build_params(&spec, &mut rng),
            Architecture::Hrnet => hrnet::build_params(&spec, &mut rng),
            Architecture::MstPp => mst::build_params(&spec, &mut rng),
        };
        Ok(Self { spec, params })
    }

    /// Insert the parameters as tape leaves; reuse the binding for every
    /// forward pass on the same tape so gradients accumulate per batch.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding, NetError> {
        Ok(self.params.bind(tape)?)
    }

    /// Forward pass `[3,H,W] -> [output_bands,H,W]` with a prior binding.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        rgb: Var,
    ) -> Result<Var, NetError> {
        let shape = tape.shape(rgb);
        if shape.len() != 3 || shape[0] != 3 {
            return Err(NetError::Tensor(TensorError::ShapeMismatch(format!(
                "network input must be [3,H,W], got {shape:?}"
            ))));
        }
        match self.spec.architecture {
            Architecture::HscnnD => hscnn::forward(&self.spec, tape, binding, rgb),
            Architecture::Hrnet => hrnet::forward(&self.spec, tape, binding, rgb),
            Architecture::MstPp => mst::forward(&self.spec, tape, binding, rgb),
        }
    }

    /// Convenience inference on raw channel-major values.
    pub fn forward_values(
        &self,
        rgb: &[f64],
        height: usize,
        width: usize,
    ) -> Result<Vec<f64>, NetError> {
        let mut tape = Tape::new();
        let input = tape.leaf(&[3, height, width], rgb.to_vec())?;
        let binding = self.bind(&mut tape)?;
        let out = self.forward_bound(&mut tape, &binding, input)?;
        Ok(tape.values(out).to_vec())
    }
}

/// Exact parameter count and analytic forward multiply-accumulate count
/// for one `[3,H,W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEstimate {
    pub parameter_count: usize,
    pub macs: u64,
}

pub fn count_params_flops(spec: &ModelSpec, height: usize, width: usize) -> Result<CostEstimate, NetError> {
    let net = ReconNetwork::init(spec.clone(), 0)?;
    let mut tape = Tape::new();
    let input = tape.leaf(&[3, height, width], vec![0.0; 3 * height * width])?;
    let binding = net.bind(&mut tape)?;
    net.forward_bound(&mut tape, &binding, input)?;
    Ok(CostEstimate {
        parameter_count: net.params.total_values(),
        macs: tape.macs(),
    })
}
