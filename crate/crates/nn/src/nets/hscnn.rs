//! Densely connected reconstruction stack with path-widening fusion.
//!
//! Block `k` consumes `concat(f_0, ..., f_{k-1})` where `f_0` is the stem
//! output and each block emits `growth` channels through two parallel
//! branches (a 3x3 and a 1x1 convolution) summed and rectified.

use super::{Binding, ModelSpec, NetError};
use crate::params::ParamSet;
use crate::tensor::{Padding, Tape, Var};
use rand_chacha::ChaCha12Rng;

pub(super) fn build_params(spec: &ModelSpec, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut params = ParamSet::new();
    params.add_conv("stem", spec.base_channels, 3, 3, rng);
    for k in 0..spec.dense_blocks {
        let c_in = spec.hscnn_block_in_channels(k);
        params.add_conv(&format!("block{k}.wide3"), spec.growth, c_in, 3, rng);
        params.add_conv(&format!("block{k}.wide1"), spec.growth, c_in, 1, rng);
    }
    let c_final = spec.hscnn_block_in_channels(spec.dense_blocks);
    params.add_conv("out", spec.output_bands, c_final, 3, rng);
    params
}

pub(super) fn forward(
    spec: &ModelSpec,
    tape: &mut Tape,
    binding: &Binding,
    rgb: Var,
) -> Result<Var, NetError> {
    let stem = tape.conv2d(rgb, binding["stem.w"], binding["stem.b"], Padding::Same)?;
    let mut features = vec![tape.relu(stem)];
    for k in 0..spec.dense_blocks {
        let x = tape.concat_channels(&features)?;
        debug_assert_eq!(tape.shape(x)[0], spec.hscnn_block_in_channels(k));
        let wide3 = tape.conv2d(
            x,
            binding[&format!("block{k}.wide3.w")],
            binding[&format!("block{k}.wide3.b")],
            Padding::Same,
        )?;
        let wide1 = tape.conv2d(
            x,
            binding[&format!("block{k}.wide1.w")],
            binding[&format!("block{k}.wide1.b")],
            Padding::Same,
        )?;
        let fused = tape.add(wide3, wide1)?;
        features.push(tape.relu(fused));
    }
    let all = tape.concat_channels(&features)?;
    Ok(tape.conv2d(all, binding["out.w"], binding["out.b"], Padding::Same)?)
}
