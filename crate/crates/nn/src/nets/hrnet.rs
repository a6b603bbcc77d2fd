//! Four-level hierarchical reconstruction network.
//!
//! Level `i` runs on the input pixel-unshuffled by `2^i`, so spatial
//! resolution halves per level while the total element count stays put.
//! Each level applies a head convolution, then `blocks_per_level` pairs
//! of a residual dense block (5 densely connected convolutions plus a
//! residual) and a residual global block (channel attention from a
//! two-layer perceptron over globally pooled features). The bottom level
//! appends a 1x1 tone convolution. Fusion shuffles the lower level up by
//! 2, concatenates and convolves back to the base channel count.

use super::{Binding, ModelSpec, NetError};
use crate::params::ParamSet;
use crate::tensor::{Padding, Tape, Var};
use rand_chacha::ChaCha12Rng;

const LEVELS: usize = 4;

pub(super) fn build_params(spec: &ModelSpec, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut params = ParamSet::new();
    let base = spec.base_channels;
    let g = spec.growth;
    let hidden = (base / 2).max(1);
    for level in 0..LEVELS {
        let in_ch = 3 * 4usize.pow(level as u32);
        params.add_conv(&format!("l{level}.head"), base, in_ch, 3, rng);
        for block in 0..spec.blocks_per_level {
            let p = format!("l{level}.b{block}");
            for j in 0..4 {
                params.add_conv(&format!("{p}.rdb.conv{}", j + 1), g, base + j * g, 3, rng);
            }
            params.add_conv(&format!("{p}.rdb.conv5"), base, base + 4 * g, 3, rng);
            params.add_conv(&format!("{p}.glob.conv"), base, base, 3, rng);
            params.add_linear(&format!("{p}.glob.fc1"), hidden, base, rng);
            params.add_linear(&format!("{p}.glob.fc2"), base, hidden, rng);
        }
    }
    params.add_conv("l3.tone", spec.base_channels, spec.base_channels, 1, rng);
    for level in 0..LEVELS - 1 {
        params.add_conv(&format!("fuse{level}"), base, base + base / 4, 3, rng);
    }
    params.add_conv("out", spec.output_bands, base, 3, rng);
    params
}

fn residual_dense_block(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var, NetError> {
    let mut layers = vec![x];
    for j in 1..=4 {
        let cat = tape.concat_channels(&layers)?;
        let conv = tape.conv2d(
            cat,
            binding[&format!("{prefix}.conv{j}.w")],
            binding[&format!("{prefix}.conv{j}.b")],
            Padding::Same,
        )?;
        layers.push(tape.relu(conv));
    }
    let cat = tape.concat_channels(&layers)?;
    let fused = tape.conv2d(
        cat,
        binding[&format!("{prefix}.conv5.w")],
        binding[&format!("{prefix}.conv5.b")],
        Padding::Same,
    )?;
    Ok(tape.add(x, fused)?)
}

fn residual_global_block(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var, NetError> {
    let conv = tape.conv2d(
        x,
        binding[&format!("{prefix}.conv.w")],
        binding[&format!("{prefix}.conv.b")],
        Padding::Same,
    )?;
    let t = tape.relu(conv);
    let base = tape.shape(t)[0];
    let hidden = tape.shape(binding[&format!("{prefix}.fc1.b")])[0];
    let pooled = tape.global_avg_pool(t)?;
    let col = tape.reshape(pooled, &[base, 1])?;
    let z1 = tape.matmul(binding[&format!("{prefix}.fc1.w")], col)?;
    let b1 = tape.reshape(binding[&format!("{prefix}.fc1.b")], &[hidden, 1])?;
    let z1 = tape.add(z1, b1)?;
    let z1 = tape.relu(z1);
    let z2 = tape.matmul(binding[&format!("{prefix}.fc2.w")], z1)?;
    let b2 = tape.reshape(binding[&format!("{prefix}.fc2.b")], &[base, 1])?;
    let z2 = tape.add(z2, b2)?;
    let gate_col = tape.sigmoid(z2);
    let gate = tape.reshape(gate_col, &[base])?;
    let attended = tape.channel_scale(t, gate)?;
    Ok(tape.add(x, attended)?)
}

pub(super) fn forward(
    spec: &ModelSpec,
    tape: &mut Tape,
    binding: &Binding,
    rgb: Var,
) -> Result<Var, NetError> {
    let mut level_out = Vec::with_capacity(LEVELS);
    for level in 0..LEVELS {
        let r = 1usize << level;
        let x = tape.pixel_unshuffle(rgb, r)?;
        let head = tape.conv2d(
            x,
            binding[&format!("l{level}.head.w")],
            binding[&format!("l{level}.head.b")],
            Padding::Same,
        )?;
        let mut h = tape.relu(head);
        for block in 0..spec.blocks_per_level {
            let p = format!("l{level}.b{block}");
            h = residual_dense_block(tape, binding, &format!("{p}.rdb"), h)?;
            h = residual_global_block(tape, binding, &format!("{p}.glob"), h)?;
        }
        if level == LEVELS - 1 {
            h = tape.conv2d(h, binding["l3.tone.w"], binding["l3.tone.b"], Padding::Same)?;
        }
        level_out.push(h);
    }

    let mut current = level_out[LEVELS - 1];
    for level in (0..LEVELS - 1).rev() {
        let up = tape.pixel_shuffle(current, 2)?;
        let cat = tape.concat_channels(&[level_out[level], up])?;
        let fused = tape.conv2d(
            cat,
            binding[&format!("fuse{level}.w")],
            binding[&format!("fuse{level}.b")],
            Padding::Same,
        )?;
        current = tape.relu(fused);
    }
    Ok(tape.conv2d(current, binding["out.w"], binding["out.b"], Padding::Same)?)
}
