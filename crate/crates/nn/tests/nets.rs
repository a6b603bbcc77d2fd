//! Structural and gradient checks for the three reconstruction networks.

use hyperspec_nn::nets::{
    count_params_flops, s_msa, Architecture, ModelSpec, ReconNetwork,
};
use hyperspec_nn::params::{init_rng, ParamSet};
use hyperspec_nn::tensor::{grad_check, Tape, TensorError};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

fn randv(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng: ChaCha12Rng = init_rng(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn all_three_forwards_are_shape_correct() {
    for arch in [Architecture::HscnnD, Architecture::Hrnet, Architecture::MstPp] {
        let net = ReconNetwork::init(ModelSpec::toy(arch, 7), 1).unwrap();
        for (h, w) in [(16usize, 16usize), (8, 24)] {
            let rgb = randv(3 * h * w, 2, 0.0, 1.0);
            let out = net.forward_values(&rgb, h, w).unwrap();
            assert_eq!(out.len(), 7 * h * w, "{arch:?} at {h}x{w}");
        }
    }
}

#[test]
fn forwards_are_deterministic() {
    for arch in [Architecture::HscnnD, Architecture::Hrnet, Architecture::MstPp] {
        let net = ReconNetwork::init(ModelSpec::toy(arch, 5), 3).unwrap();
        let rgb = randv(3 * 16 * 16, 4, 0.0, 1.0);
        let a = net.forward_values(&rgb, 16, 16).unwrap();
        let b = net.forward_values(&rgb, 16, 16).unwrap();
        assert_eq!(a, b);
        let again = ReconNetwork::init(ModelSpec::toy(arch, 5), 3).unwrap();
        assert_eq!(net.params, again.params);
    }
}

#[test]
fn hscnn_zero_final_layer_broadcasts_bias() {
    let mut net = ReconNetwork::init(ModelSpec::hscnn_d_toy(4), 5).unwrap();
    net.params.get_mut("out.w").values.fill(0.0);
    net.params.get_mut("out.b").values = vec![0.5, -1.0, 0.0, 2.0];
    let rgb = randv(3 * 8 * 8, 6, 0.0, 1.0);
    let out = net.forward_values(&rgb, 8, 8).unwrap();
    for band in 0..4 {
        for &v in &out[band * 64..(band + 1) * 64] {
            assert_eq!(v, net.params.get("out.b").values[band]);
        }
    }
}

#[test]
fn hscnn_block_inputs_follow_concat_growth_law() {
    for (blocks, growth, base) in [(4usize, 16usize, 16usize), (3, 8, 12), (6, 4, 8)] {
        let spec = ModelSpec {
            dense_blocks: blocks,
            growth,
            base_channels: base,
            ..ModelSpec::hscnn_d_toy(7)
        };
        let net = ReconNetwork::init(spec.clone(), 7).unwrap();
        for k in 0..blocks {
            let expect = base + k * growth;
            assert_eq!(spec.hscnn_block_in_channels(k), expect);
            let w3 = net.params.get(&format!("block{k}.wide3.w"));
            let w1 = net.params.get(&format!("block{k}.wide1.w"));
            assert_eq!(w3.shape, vec![growth, expect, 3, 3]);
            assert_eq!(w1.shape, vec![growth, expect, 1, 1]);
        }
        let out_w = net.params.get("out.w");
        assert_eq!(out_w.shape[1], base + blocks * growth);
    }
}

#[test]
fn hrnet_requires_divisibility_by_eight() {
    let net = ReconNetwork::init(ModelSpec::hrnet_toy(7), 8).unwrap();
    let rgb = randv(3 * 12 * 12, 9, 0.0, 1.0);
    assert!(matches!(
        net.forward_values(&rgb, 12, 12),
        Err(hyperspec_nn::nets::NetError::Tensor(TensorError::Divisibility(_)))
    ));
}

#[test]
fn hrnet_bottom_level_consumes_unshuffled_channels() {
    let net = ReconNetwork::init(ModelSpec::hrnet_toy(7), 10).unwrap();
    // pixel_unshuffle by 2^3 turns 3 channels into 3*64 at H/8 x W/8
    assert_eq!(net.params.get("l3.head.w").shape, vec![16, 192, 3, 3]);
    let mut tape = Tape::new();
    let rgb = tape.leaf(&[3, 16, 16], randv(3 * 256, 11, 0.0, 1.0)).unwrap();
    let down = tape.pixel_unshuffle(rgb, 8).unwrap();
    assert_eq!(tape.shape(down), &[192, 2, 2]);
}

#[test]
fn hrnet_global_block_paths_are_both_live() {
    let spec = ModelSpec::hrnet_toy(5);
    let base = ReconNetwork::init(spec.clone(), 12).unwrap();
    let rgb = randv(3 * 16 * 16, 13, 0.1, 1.0);
    let out_full = base.forward_values(&rgb, 16, 16).unwrap();

    // freezing the attention branch of every global block to zero must
    // change the output if that branch contributes
    let mut frozen = base.clone();
    for level in 0..4 {
        for name in ["conv.w", "conv.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
            frozen
                .params
                .get_mut(&format!("l{level}.b0.glob.{name}"))
                .values
                .fill(0.0);
        }
    }
    let out_frozen = frozen.forward_values(&rgb, 16, 16).unwrap();
    assert_ne!(out_full, out_frozen, "attention branch is dead");
    // with the branch frozen the shortcut still carries a finite signal
    assert!(out_frozen.iter().all(|v| v.is_finite()));
    assert!(out_frozen.iter().any(|&v| v != 0.0), "shortcut is dead");
}

#[test]
fn mst_parameter_count_scales_linearly_with_stages() {
    let count = |stages: usize| {
        let spec = ModelSpec {
            stages,
            ..ModelSpec::mst_pp_toy(7)
        };
        ReconNetwork::init(spec, 1).unwrap().params.total_values()
    };
    let (p1, p2, p3) = (count(1), count(2), count(3));
    assert_eq!(p2 - p1, p3 - p2, "per-stage parameter cost must be constant");
    assert!(p2 > p1);
}

#[test]
fn smsa_attention_is_spectral_and_row_stochastic() {
    let heads = 2;
    let (c, h, w) = (8usize, 5usize, 3usize);
    let mut params = ParamSet::new();
    let mut rng = init_rng(14);
    hyperspec_nn::nets::add_smsa_params(&mut params, "att", c, heads, &mut rng);
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape).unwrap();
    let x = tape.leaf(&[c, h, w], randv(c * h * w, 15, -1.0, 1.0)).unwrap();
    let trace = s_msa(&mut tape, &binding, "att", x, heads).unwrap();
    assert_eq!(tape.shape(trace.output), &[c, h, w]);
    assert_eq!(trace.attention.len(), heads);
    for attn in &trace.attention {
        // spectral: the matrix is (C/heads)^2, independent of H and W
        assert_eq!(tape.shape(*attn), &[c / heads, c / heads]);
        for row in tape.values(*attn).chunks_exact(c / heads) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }
}

/// Direct evaluation of the attention formula with plain vector math.
#[test]
fn smsa_matches_dense_enumeration() {
    let heads = 2;
    let (c, h, w) = (4usize, 2usize, 2usize);
    let hw = h * w;
    let d = c / heads;
    let mut params = ParamSet::new();
    let mut rng = init_rng(16);
    hyperspec_nn::nets::add_smsa_params(&mut params, "att", c, heads, &mut rng);
    let xv = randv(c * hw, 17, -1.0, 1.0);

    let mut tape = Tape::new();
    let binding = params.bind(&mut tape).unwrap();
    let x = tape.leaf(&[c, h, w], xv.clone()).unwrap();
    let trace = s_msa(&mut tape, &binding, "att", x, heads).unwrap();
    let got = tape.values(trace.output).to_vec();

    // reference computation
    let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    };
    let mut head_rows: Vec<Vec<f64>> = Vec::new();
    let mut v_rows: Vec<Vec<f64>> = Vec::new();
    for j in 0..heads {
        let q = matmul(&params.get(&format!("att.q{j}.w")).values, &xv, d, c, hw);
        let k = matmul(&params.get(&format!("att.k{j}.w")).values, &xv, d, c, hw);
        let v = matmul(&params.get(&format!("att.v{j}.w")).values, &xv, d, c, hw);
        let normalize = |m: &[f64]| -> Vec<f64> {
            let mut out = m.to_vec();
            for row in out.chunks_exact_mut(hw) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
            }
            out
        };
        let qn = normalize(&q);
        let kn = normalize(&k);
        // gram[i][l] = kn_i . qn_l
        let mut gram = vec![0.0; d * d];
        for i in 0..d {
            for l in 0..d {
                for p in 0..hw {
                    gram[i * d + l] += kn[i * hw + p] * qn[l * hw + p];
                }
            }
        }
        let temp = params.get(&format!("att.temp{j}")).values[0];
        for g in gram.iter_mut() {
            *g *= temp;
        }
        for row in gram.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        head_rows.push(matmul(&gram, &v, d, d, hw));
        v_rows.push(v);
    }
    let mut concat = Vec::new();
    for rows in &head_rows {
        concat.extend_from_slice(rows);
    }
    let projected = matmul(&params.get("att.proj.w").values, &concat, c, c, hw);
    // depthwise position conv over V
    let mut v_all = Vec::new();
    for rows in &v_rows {
        v_all.extend_from_slice(rows);
    }
    let pw = &params.get("att.pos.w").values;
    let mut position = vec![0.0; c * hw];
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += v_all[(ch * h + iy as usize) * w + ix as usize]
                            * pw[(ch * 3 + ky) * 3 + kx];
                    }
                }
                position[(ch * h + oy) * w + ox] = acc;
            }
        }
    }
    for i in 0..c * hw {
        let expect = projected[i] + position[i];
        assert!(
            (got[i] - expect).abs() < 1e-12,
            "voxel {i}: {} vs {expect}",
            got[i]
        );
    }
}

#[test]
fn every_network_gradient_matches_finite_differences() {
    for arch in [Architecture::HscnnD, Architecture::Hrnet, Architecture::MstPp] {
        let spec = ModelSpec::toy(arch, 4);
        let net = ReconNetwork::init(spec.clone(), 20).unwrap();
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
        let param_list: Vec<(Vec<usize>, Vec<f64>)> = net
            .params
            .iter()
            .map(|(_, t)| (t.shape.clone(), t.values.clone()))
            .collect();
        let rgb = randv(3 * 8 * 8, 21, 0.1, 1.0);
        let err = grad_check(&param_list, 1e-5, 96, |tape, vars| {
            let binding: BTreeMap<String, _> = names
                .iter()
                .cloned()
                .zip(vars.iter().cloned())
                .collect();
            let input = tape.leaf(&[3, 8, 8], rgb.clone())?;
            let out = net
                .forward_bound(tape, &binding, input)
                .map_err(|e| match e {
                    hyperspec_nn::nets::NetError::Tensor(t) => t,
                    other => TensorError::Invalid(other.to_string()),
                })?;
            let sq = tape.mul(out, out)?;
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{arch:?}: max relative error {err}");
    }
}

#[test]
fn cost_estimates_scale_and_order_correctly() {
    // a single 3x3 conv from 3 to 8 channels with bias
    let mut params = ParamSet::new();
    let mut rng = init_rng(22);
    params.add_conv("only", 8, 3, 3, &mut rng);
    assert_eq!(params.total_values(), 8 * 3 * 3 * 3 + 8);

    for arch in [Architecture::HscnnD, Architecture::Hrnet, Architecture::MstPp] {
        let spec = ModelSpec::toy(arch, 7);
        let small = count_params_flops(&spec, 16, 16).unwrap();
        let big = count_params_flops(&spec, 32, 32).unwrap();
        assert_eq!(small.parameter_count, big.parameter_count);
        if arch == Architecture::Hrnet {
            // the global blocks run constant-size MLPs regardless of area,
            // so the quadrupling law holds for the convolutional part only
            let gap = 4 * small.macs - big.macs;
            assert!(gap < small.macs / 100, "{arch:?}: gap {gap}");
        } else {
            assert_eq!(big.macs, 4 * small.macs, "{arch:?} macs must scale with area");
        }
    }

    let hscnn = count_params_flops(&ModelSpec::hscnn_d_toy(7), 16, 16).unwrap();
    let hrnet = count_params_flops(&ModelSpec::hrnet_toy(7), 16, 16).unwrap();
    let mst = count_params_flops(&ModelSpec::mst_pp_toy(7), 16, 16).unwrap();
    assert!(
        mst.parameter_count < hscnn.parameter_count
            && mst.parameter_count < hrnet.parameter_count,
        "mst {} hscnn {} hrnet {}",
        mst.parameter_count,
        hscnn.parameter_count,
        hrnet.parameter_count
    );
}
