//! Stacked U-shaped stages of spectral-wise self-attention.
//!
//! The attention operates over channel tokens: per head, Q/K/V are linear
//! projections of the `[C, HW]` feature matrix, Q and K are L2-normalized
//! along the spatial axis, and the softmax runs over the `C/N x C/N` Gram
//! matrix scaled by a learnable temperature. Head outputs are concatenated
//! and projected by a CxC matrix, plus a position term: a depthwise 3x3
//! convolution over V. Each stage is a two-level U (down/up by pixel
//! shuffle) of such attention blocks, and the stack carries a residual
//! from the embedding to the mapping convolution.

use super::{Binding, ModelSpec, NetError};
use crate::params::ParamSet;
use crate::tensor::{Padding, Tape, Var};
use rand_chacha::ChaCha12Rng;

/// Attention internals exposed for structural checks: one attention
/// matrix per head, each of shape `[dim/heads, dim/heads]`.
pub struct SmsaTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

pub fn add_smsa_params(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    heads: usize,
    rng: &mut ChaCha12Rng,
) {
    let head_dim = dim / heads;
    for j in 0..heads {
        params.add_matrix(&format!("{prefix}.q{j}"), head_dim, dim, rng);
        params.add_matrix(&format!("{prefix}.k{j}"), head_dim, dim, rng);
        params.add_matrix(&format!("{prefix}.v{j}"), head_dim, dim, rng);
        params.add_scalar(&format!("{prefix}.temp{j}"), 1.0);
    }
    params.add_matrix(&format!("{prefix}.proj"), dim, dim, rng);
    params.add_depthwise(&format!("{prefix}.pos"), dim, rng);
}

pub(super) fn build_params(spec: &ModelSpec, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut params = ParamSet::new();
    let c = spec.base_channels;
    params.add_conv("emb", c, 3, 3, rng);
    for s in 0..spec.stages {
        add_smsa_params(&mut params, &format!("st{s}.enc"), c, spec.heads, rng);
        params.add_conv(&format!("st{s}.down"), 2 * c, 4 * c, 1, rng);
        add_smsa_params(&mut params, &format!("st{s}.mid"), 2 * c, spec.heads, rng);
        params.add_conv(&format!("st{s}.up"), 4 * c, 2 * c, 1, rng);
        params.add_conv(&format!("st{s}.fuse"), c, 2 * c, 1, rng);
        add_smsa_params(&mut params, &format!("st{s}.dec"), c, spec.heads, rng);
    }
    params.add_conv("map", spec.output_bands, c, 3, rng);
    params
}

/// Spectral-wise multi-head self-attention on `x: [C,H,W]`.
pub fn s_msa(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<SmsaTrace, NetError> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let xm = tape.reshape(x, &[c, hw])?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut value_parts = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    let head_dim = c / heads;
    for j in 0..heads {
        let q = tape.matmul(binding[&format!("{prefix}.q{j}.w")], xm)?;
        let k = tape.matmul(binding[&format!("{prefix}.k{j}.w")], xm)?;
        let v = tape.matmul(binding[&format!("{prefix}.v{j}.w")], xm)?;
        let qn = tape.l2_normalize_rows(q)?;
        let kn = tape.l2_normalize_rows(k)?;
        let qt = tape.transpose(qn)?;
        let gram = tape.matmul(kn, qt)?;
        let scaled = tape.mul_scalar_var(gram, binding[&format!("{prefix}.temp{j}")])?;
        let attn = tape.softmax_last_axis(scaled)?;
        debug_assert_eq!(tape.shape(attn), &[head_dim, head_dim]);
        attention.push(attn);
        let out = tape.matmul(attn, v)?;
        head_outputs.push(tape.reshape(out, &[head_dim, h, w])?);
        value_parts.push(tape.reshape(v, &[head_dim, h, w])?);
    }

    let heads_cat = tape.concat_channels(&head_outputs)?;
    let heads_mat = tape.reshape(heads_cat, &[c, hw])?;
    let projected = tape.matmul(binding[&format!("{prefix}.proj.w")], heads_mat)?;
    let projected = tape.reshape(projected, &[c, h, w])?;

    let v_all = tape.concat_channels(&value_parts)?;
    let position = tape.depthwise_conv3x3(v_all, binding[&format!("{prefix}.pos.w")])?;

    let output = tape.add(projected, position)?;
    Ok(SmsaTrace { output, attention })
}

/// Residual spectral attention block.
fn sab(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, NetError> {
    let trace = s_msa(tape, binding, prefix, x, heads)?;
    Ok(tape.add(x, trace.output)?)
}

fn conv1x1(tape: &mut Tape, binding: &Binding, name: &str, x: Var) -> Result<Var, NetError> {
    Ok(tape.conv2d(
        x,
        binding[&format!("{name}.w")],
        binding[&format!("{name}.b")],
        Padding::Same,
    )?)
}

fn stage(
    spec: &ModelSpec,
    tape: &mut Tape,
    binding: &Binding,
    s: usize,
    x: Var,
) -> Result<Var, NetError> {
    let enc = sab(tape, binding, &format!("st{s}.enc"), x, spec.heads)?;
    let down = tape.pixel_unshuffle(enc, 2)?;
    let down = conv1x1(tape, binding, &format!("st{s}.down"), down)?;
    let mid = sab(tape, binding, &format!("st{s}.mid"), down, spec.heads)?;
    let up = conv1x1(tape, binding, &format!("st{s}.up"), mid)?;
    let up = tape.pixel_shuffle(up, 2)?;
    let cat = tape.concat_channels(&[up, enc])?;
    let fused = conv1x1(tape, binding, &format!("st{s}.fuse"), cat)?;
    sab(tape, binding, &format!("st{s}.dec"), fused, spec.heads)
}

pub(super) fn forward(
    spec: &ModelSpec,
    tape: &mut Tape,
    binding: &Binding,
    rgb: Var,
) -> Result<Var, NetError> {
    let emb = tape.conv2d(rgb, binding["emb.w"], binding["emb.b"], Padding::Same)?;
    let mut body = emb;
    for s in 0..spec.stages {
        body = stage(spec, tape, binding, s, body)?;
    }
    let res = tape.add(body, emb)?;
    Ok(tape.conv2d(res, binding["map.w"], binding["map.b"], Padding::Same)?)
}
