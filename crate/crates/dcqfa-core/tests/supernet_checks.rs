//! Supernet behavior checks: agreement with a plain reference transformer
//! at full precision, bit-exact extraction equivalence, prefix weight
//! sharing, gradient masking, and the end-to-end STE gradient check.

use dcqfa_core::configspace::{LayerChoice, SearchSpace, SubnetConfig};
use dcqfa_core::env::Obs;
use dcqfa_core::numerics::Tensor;
use dcqfa_core::supernet::{ArchDims, QuantMode, Supernet, SupernetError};
use dcqfa_core::trainer::policy_loss_pass;
use dcqfa_core::Rng;
use rand::Rng as _;
use rand::SeedableRng;

fn default_space() -> SearchSpace {
    SearchSpace {
        layers: 4,
        mlp_ratios: vec![1, 2, 4],
        head_ratios: vec![0.5, 1.0],
        weight_bits: vec![4, 8, 16],
        act_bits: vec![4, 8, 16],
        min_active_layers: 1,
    }
}

fn random_obs(rng: &mut Rng, n: usize) -> Vec<Obs> {
    (0..n)
        .map(|_| {
            let mut o = [0.0f32; 6];
            for v in o.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            o
        })
        .collect()
}

/// Plain f64 transformer using the supernet's own weights: independent of
/// the tape machinery.
fn reference_forward(net: &Supernet, config: &SubnetConfig, obs: &[Obs]) -> Vec<f64> {
    let d = net.dims.d_model;
    let seq = net.dims.obs_tokens;
    let names = net.param_names();
    let get = |name: &str| -> Vec<f64> {
        let i = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
        net.params()[i].data().iter().map(|&v| v as f64).collect()
    };
    let ln = |x: &mut [f64], cols: usize| {
        for row in x.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + 1e-5f32 as f64).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    };
    let matmul = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                for j in 0..m {
                    out[i * m + j] += a[i * k + l] * b[l * m + j];
                }
            }
        }
        out
    };

    let embed = get("embed");
    let role = get("role");
    let batch = obs.len();
    let rows = batch * seq;
    // relative-geometry tokens, mirroring the policy's fixed re-encoding
    let mut tok = Vec::with_capacity(rows * 2);
    for o in obs {
        tok.push((o[2] - o[0]) as f64);
        tok.push((o[3] - o[1]) as f64);
        tok.push((o[4] - o[2]) as f64);
        tok.push((o[5] - o[3]) as f64);
        tok.push((o[2] - 0.5) as f64);
        tok.push((o[3] - 0.5) as f64);
    }
    let mut x = matmul(&tok, &embed, rows, 2, d);
    for r in 0..rows {
        for c in 0..d {
            x[r * d + c] += role[(r % seq) * d + c];
        }
    }

    for (l, choice) in config.layers.iter().enumerate() {
        if !choice.keep {
            continue;
        }
        let heads = ((choice.head_ratio * net.dims.max_heads as f64).ceil() as usize).max(1);
        let hd = heads * net.dims.head_dim;
        let rd = choice.mlp_ratio as usize * d;
        let full_w = net.dims.max_heads * net.dims.head_dim;
        let slice_cols = |w: &[f64], cols_full: usize, keep: usize| -> Vec<f64> {
            let rows_w = w.len() / cols_full;
            let mut out = Vec::with_capacity(rows_w * keep);
            for i in 0..rows_w {
                out.extend_from_slice(&w[i * cols_full..i * cols_full + keep]);
            }
            out
        };
        let wq = slice_cols(&get(&format!("layer{l}.wq")), full_w, hd);
        let wk = slice_cols(&get(&format!("layer{l}.wk")), full_w, hd);
        let wv = slice_cols(&get(&format!("layer{l}.wv")), full_w, hd);
        let wo_full = get(&format!("layer{l}.wo"));
        let wo = wo_full[..hd * d].to_vec();
        let r_max = *net.space.mlp_ratios.last().unwrap() as usize;
        let w1 = slice_cols(&get(&format!("layer{l}.w1")), r_max * d, rd);
        let w2_full = get(&format!("layer{l}.w2"));
        let w2 = w2_full[..rd * d].to_vec();

        let mut a_in = x.clone();
        ln(&mut a_in, d);
        let q = matmul(&a_in, &wq, rows, d, hd);
        let k = matmul(&a_in, &wk, rows, d, hd);
        let v = matmul(&a_in, &wv, rows, d, hd);
        let mut att = vec![0.0; rows * hd];
        let scale = 1.0 / (net.dims.head_dim as f64).sqrt();
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * net.dims.head_dim;
                for s1 in 0..seq {
                    let mut scores = vec![0.0; seq];
                    for (s2, sc) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for dd in 0..net.dims.head_dim {
                            dot += q[(b * seq + s1) * hd + c0 + dd]
                                * k[(b * seq + s2) * hd + c0 + dd];
                        }
                        *sc = dot * scale;
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for dd in 0..net.dims.head_dim {
                        let mut acc = 0.0;
                        for s2 in 0..seq {
                            acc += exps[s2] / sum * v[(b * seq + s2) * hd + c0 + dd];
                        }
                        att[(b * seq + s1) * hd + c0 + dd] = acc;
                    }
                }
            }
        }
        let o = matmul(&att, &wo, rows, hd, d);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let mut m_in = x.clone();
        ln(&mut m_in, d);
        let mut h1 = matmul(&m_in, &w1, rows, d, rd);
        for v in h1.iter_mut() {
            *v = 0.5 * *v * (1.0 + (0.7978845608028654 * (*v + 0.044715 * *v * *v * *v)).tanh());
        }
        let mo = matmul(&h1, &w2, rows, rd, d);
        for (xv, mv) in x.iter_mut().zip(&mo) {
            *xv += mv;
        }
    }

    ln(&mut x, d);
    let mut pooled = vec![0.0; batch * d];
    for b in 0..batch {
        for c in 0..d {
            for s in 0..seq {
                pooled[b * d + c] += x[(b * seq + s) * d + c] / seq as f64;
            }
        }
    }
    let head_w = get("head_w");
    let head_b = get("head_b");
    let mut out = matmul(&pooled, &head_w, batch, d, 2);
    for (i, v) in out.iter_mut().enumerate() {
        *v += head_b[i % 2];
    }
    out
}

#[test]
fn largest_full_precision_config_matches_the_reference_network() {
    let space = default_space();
    let net = Supernet::new(space.clone(), ArchDims::default(), 7).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let obs = random_obs(&mut rng, 8);
    let ours = net.forward_infer(&space.largest_config(), &obs).unwrap();
    let reference = reference_forward(&net, &space.largest_config(), &obs);
    for (a, b) in ours.data().iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn all_skip_config_is_the_pure_residual_path() {
    let space = SearchSpace { min_active_layers: 0, ..default_space() };
    let net = Supernet::new(space.clone(), ArchDims::default(), 9).unwrap();
    let mut rng = Rng::seed_from_u64(2);
    let obs = random_obs(&mut rng, 4);
    let empty = space.smallest_config();
    assert_eq!(empty.active_layers(), 0);
    let ours = net.forward_infer(&empty, &obs).unwrap();
    let reference = reference_forward(&net, &empty, &obs);
    for (a, b) in ours.data().iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn extracted_subnet_forward_is_bit_identical() {
    let space = default_space();
    let mut net = Supernet::new(space.clone(), ArchDims::default(), 21).unwrap();
    let mut rng = Rng::seed_from_u64(3);
    let calib = random_obs(&mut rng, 64);
    net.calibrate_activations(&calib, 4).unwrap();
    net.freeze_activation_quantizers();
    for _ in 0..150 {
        let config = space.sample_uniform(&mut rng);
        let obs = random_obs(&mut rng, 3);
        let full = net.forward_infer(&config, &obs).unwrap();
        let (sub, compact) = net.extract(&config).unwrap();
        let small = sub.forward_infer(&compact, &obs).unwrap();
        assert_eq!(full.data(), small.data(), "config {config:?}");
        // and the parameter count matches the analytic formula
        assert_eq!(sub.param_count_total(), net.subnet_param_count(&config));
    }
}

#[test]
fn extraction_param_counts_scale_with_the_menus() {
    let space = SearchSpace { mlp_ratios: vec![2, 4], ..default_space() };
    let net = Supernet::new(space.clone(), ArchDims::default(), 5).unwrap();
    let big = space.largest_config();
    assert_eq!(
        net.subnet_param_count(&big),
        net.param_count_total(),
        "largest config owns every parameter"
    );
    let mut halved = big.clone();
    for l in &mut halved.layers {
        l.mlp_ratio = 2;
    }
    let d = net.dims.d_model as u64;
    let per_block_full = 2 * 4 * d * d;
    let per_block_half = 2 * 2 * d * d;
    let diff = net.subnet_param_count(&big) - net.subnet_param_count(&halved);
    assert_eq!(diff, (per_block_full - per_block_half) * space.layers as u64);
    // the MLP share halves exactly
    assert_eq!(per_block_full, 2 * per_block_half);
}

#[test]
fn smaller_subnets_read_prefixes_of_larger_ones() {
    let space = default_space();
    let net = Supernet::new(space.clone(), ArchDims::default(), 11).unwrap();
    let big = space.largest_config();
    let mut small = big.clone();
    for l in &mut small.layers {
        l.mlp_ratio = 1;
        l.head_ratio = 0.5;
    }
    let (net_big, _) = net.extract(&big).unwrap();
    let (net_small, _) = net.extract(&small).unwrap();
    for (name, ps) in net_small.param_names().iter().zip(net_small.params()) {
        let pb_idx = net_big.param_names().iter().position(|n| n == name).unwrap();
        let pb = &net_big.params()[pb_idx];
        // every small weight must appear at the same (row, col) of the big one
        let (rs, cs) = (ps.rows(), ps.cols());
        let cb = pb.cols();
        for r in 0..rs {
            for c in 0..cs {
                assert_eq!(
                    ps.data()[r * cs + c],
                    pb.data()[r * cb + c],
                    "prefix sharing broken at {name}[{r},{c}]"
                );
            }
        }
    }
}

#[test]
fn gradients_stay_inside_the_active_slices() {
    let space = default_space();
    let mut net = Supernet::new(space.clone(), ArchDims::default(), 13).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let calib = random_obs(&mut rng, 32);
    net.calibrate_activations(&calib, 2).unwrap();
    net.freeze_activation_quantizers();
    for _ in 0..20 {
        let config = space.sample_uniform(&mut rng);
        let obs = random_obs(&mut rng, 6);
        let actions: Vec<[f32; 2]> =
            (0..6).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let (fwd, loss, _) =
            policy_loss_pass(&mut net, &config, &obs, &actions, QuantMode::Frozen).unwrap();
        let grads = fwd.tape.backward(loss).unwrap();
        let masks = net.active_param_mask(&config);
        let mut saw_nonzero = false;
        for (idx, leaf) in fwd.param_leaves() {
            let g = grads.grad(leaf).unwrap();
            for (gv, mv) in g.data().iter().zip(masks[idx].data()) {
                if *mv == 0.0 {
                    assert_eq!(*gv, 0.0, "gradient leaked outside the active slice");
                } else if *gv != 0.0 {
                    saw_nonzero = true;
                }
            }
        }
        assert!(saw_nonzero);
    }
}

#[test]
fn uncalibrated_quantizer_is_an_error() {
    let space = default_space();
    let net = Supernet::new(space.clone(), ArchDims::default(), 15).unwrap();
    let mut config = space.largest_config();
    for l in &mut config.layers {
        l.act_bits = 4;
    }
    let err = net.forward_infer(&config, &[[0.5; 6]]).unwrap_err();
    assert!(matches!(err, SupernetError::Quant(_)), "{err:?}");
}

#[test]
fn initialization_and_forward_are_deterministic() {
    let space = default_space();
    let a = Supernet::new(space.clone(), ArchDims::default(), 99).unwrap();
    let b = Supernet::new(space.clone(), ArchDims::default(), 99).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.data(), pb.data());
    }
    let obs = [[0.3f32, 0.4, 0.5, 0.6, 0.7, 0.8]];
    let o1 = a.forward_infer(&space.largest_config(), &obs).unwrap();
    let o2 = b.forward_infer(&space.largest_config(), &obs).unwrap();
    assert_eq!(o1.data(), o2.data());
}

/// End-to-end gradient check on a tiny supernet: analytic STE-masked
/// gradients against central finite differences of the surrogate loss
/// (quantization replaced by identity inside the clip mask).
#[test]
fn tiny_supernet_ste_gradients_match_surrogate_finite_differences() {
    let space = SearchSpace {
        layers: 2,
        mlp_ratios: vec![1, 2],
        head_ratios: vec![0.5, 1.0],
        weight_bits: vec![8, 16],
        act_bits: vec![8, 16],
        min_active_layers: 1,
    };
    let dims = ArchDims {
        d_model: 8,
        max_heads: 2,
        head_dim: 4,
        obs_tokens: 3,
        token_dim: 2,
        act_dim: 2,
    };
    let mut net = Supernet::new(space.clone(), dims, 31).unwrap();
    let mut rng = Rng::seed_from_u64(6);
    let calib = random_obs(&mut rng, 48);
    net.calibrate_activations(&calib, 3).unwrap();
    net.freeze_activation_quantizers();

    let config = SubnetConfig {
        layers: vec![
            LayerChoice {
                keep: true,
                mlp_ratio: 2,
                head_ratio: 1.0,
                weight_bits: 8,
                act_bits: 8,
            },
            LayerChoice {
                keep: true,
                mlp_ratio: 1,
                head_ratio: 0.5,
                weight_bits: 8,
                act_bits: 8,
            },
        ],
    };
    let obs = random_obs(&mut rng, 4);
    let actions: Vec<[f32; 2]> =
        (0..4).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();

    let (fwd, loss, _) =
        policy_loss_pass(&mut net, &config, &obs, &actions, QuantMode::Surrogate).unwrap();
    let grads = fwd.tape.backward(loss).unwrap();
    let analytic: Vec<(usize, Tensor)> = fwd
        .param_leaves()
        .map(|(idx, leaf)| (idx, grads.grad(leaf).unwrap().clone()))
        .collect();

    let h = 3e-3f32;
    let mut diff2 = 0.0f64;
    let mut norm2 = 0.0f64;
    for (idx, g) in &analytic {
        let numel = net.params()[*idx].numel();
        let stride = (numel / 10).max(1);
        for e in (0..numel).step_by(stride) {
            let orig = net.params()[*idx].data()[e];
            let eval = |net: &mut Supernet, v: f32| -> f64 {
                net.params_mut()[*idx].data_mut()[e] = v;
                let (_, _, l) =
                    policy_loss_pass(net, &config, &obs, &actions, QuantMode::Surrogate)
                        .unwrap();
                l
            };
            let lp = eval(&mut net, orig + h);
            let lm = eval(&mut net, orig - h);
            net.params_mut()[*idx].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let a = g.data()[e] as f64;
            diff2 += (a - fd) * (a - fd);
            norm2 += fd * fd;
        }
    }
    let rel = diff2.sqrt() / norm2.sqrt().max(1e-9);
    assert!(rel < 1e-3, "end-to-end STE relative error {rel}");
}
