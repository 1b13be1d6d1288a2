//! Gradient oracle: every differentiable primitive is checked against
//! central finite differences of an independent f64 shadow implementation,
//! 100 random cases each. The straight-through estimator is checked against
//! its defining mask instead (its true derivative is a step function).

use dcqfa_core::numerics::{Tape, Tensor, VarId};
use dcqfa_core::quant::QuantizerSpec;
use dcqfa_core::Rng;
use rand::Rng as _;
use rand::SeedableRng;

const FD_H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const CASES: usize = 100;

/// Independent f64 shadow of the primitives under test.
mod shadow {
    pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                for j in 0..m {
                    out[i * m + j] += a[i * k + l] * b[l * m + j];
                }
            }
        }
        out
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn softmax_lines(x: &[f64], line: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (li, chunk) in x.chunks(line).enumerate() {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = chunk.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out[li * line + j] = e / sum;
            }
        }
        out
    }

    pub fn layer_norm(x: &[f64], cols: usize, eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (ri, row) in x.chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[ri * cols + j] = (v - mean) * inv;
            }
        }
        out
    }

    /// Squared error summed over columns, averaged over rows.
    pub fn mse(pred: &[f64], target: &[f64], rows: usize) -> f64 {
        pred.iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / rows as f64
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Vec<f64> {
        let width = heads * head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * head_dim;
                for s1 in 0..seq {
                    let mut scores = vec![0.0; seq];
                    for (s2, sc) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for d in 0..head_dim {
                            dot += q[(b * seq + s1) * width + c0 + d]
                                * k[(b * seq + s2) * width + c0 + d];
                        }
                        *sc = dot * scale;
                    }
                    let probs = softmax_lines(&scores, seq);
                    for d in 0..head_dim {
                        let mut acc = 0.0;
                        for s2 in 0..seq {
                            acc += probs[s2] * v[(b * seq + s2) * width + c0 + d];
                        }
                        out[(b * seq + s1) * width + c0 + d] = acc;
                    }
                }
            }
        }
        out
    }
}

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Build the loss on a tape, backprop it, and compare every input gradient
/// against central differences of the f64 shadow loss.
fn fd_check(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
    shadow_loss: impl Fn(&[Vec<f64>]) -> f64,
    label: &str,
) {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "{label}: loss must be scalar");
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.grad(ids[which]).unwrap();
        let mut fd = vec![0.0f64; input.numel()];
        for e in 0..input.numel() {
            let mut plus = base.clone();
            plus[which][e] += FD_H;
            let mut minus = base.clone();
            minus[which][e] -= FD_H;
            fd[e] = (shadow_loss(&plus) - shadow_loss(&minus)) / (2.0 * FD_H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&fd)
            .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm.max(1e-8);
        assert!(
            rel < REL_TOL,
            "{label} input {which}: relative gradient error {rel}"
        );
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(101);
    for _ in 0..CASES {
        let (n, k, m) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_tensor(&mut rng, n, k);
        let b = rand_tensor(&mut rng, k, m);
        let w = rand_tensor(&mut rng, n, m);
        fd_check(
            &[a, b, w],
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1]).unwrap();
                tape.mse_loss(y, ids[2]).unwrap()
            },
            |xs| {
                let y = shadow::matmul(&xs[0], &xs[1], n, k, m);
                shadow::mse(&y, &xs[2], n)
            },
            "matmul",
        );
    }
}

#[test]
fn add_and_mul_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(102);
    for case in 0..CASES {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let a = rand_tensor(&mut rng, n, m);
        let b = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, n, m);
        let use_mul = case % 2 == 0;
        fd_check(
            &[a, b, w],
            |tape, ids| {
                let y = if use_mul {
                    tape.mul(ids[0], ids[1]).unwrap()
                } else {
                    tape.add(ids[0], ids[1]).unwrap()
                };
                tape.mse_loss(y, ids[2]).unwrap()
            },
            |xs| {
                let y: Vec<f64> = xs[0]
                    .iter()
                    .zip(&xs[1])
                    .map(|(x, z)| if use_mul { x * z } else { x + z })
                    .collect();
                shadow::mse(&y, &xs[2], n)
            },
            if use_mul { "mul" } else { "add" },
        );
    }
}

#[test]
fn add_bias_and_scale_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(103);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let x = rand_tensor(&mut rng, n, m);
        let bias = Tensor::vector((0..m).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
        let w = rand_tensor(&mut rng, n, m);
        let c: f32 = rng.gen_range(-1.5..1.5);
        fd_check(
            &[x, bias, w],
            |tape, ids| {
                let y = tape.add_bias(ids[0], ids[1]).unwrap();
                let y = tape.scale(y, c).unwrap();
                tape.mse_loss(y, ids[2]).unwrap()
            },
            |xs| {
                let y: Vec<f64> = xs[0]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v + xs[1][i % m]) * c as f64)
                    .collect();
                shadow::mse(&y, &xs[2], n)
            },
            "add_bias+scale",
        );
    }
}

#[test]
fn gelu_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(104);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let x = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, n, m);
        fd_check(
            &[x, w],
            |tape, ids| {
                let y = tape.gelu(ids[0]).unwrap();
                tape.mse_loss(y, ids[1]).unwrap()
            },
            |xs| {
                let y: Vec<f64> = xs[0].iter().map(|&v| shadow::gelu(v)).collect();
                shadow::mse(&y, &xs[1], n)
            },
            "gelu",
        );
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(105);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let x = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, n, m);
        fd_check(
            &[x, w],
            |tape, ids| {
                let y = tape.softmax(ids[0], 1).unwrap();
                tape.mse_loss(y, ids[1]).unwrap()
            },
            |xs| {
                let y = shadow::softmax_lines(&xs[0], m);
                shadow::mse(&y, &xs[1], n)
            },
            "softmax",
        );
    }
}

#[test]
fn softmax_axis0_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(106);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(2..5), rng.gen_range(1..5));
        let x = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, n, m);
        fd_check(
            &[x, w],
            |tape, ids| {
                let y = tape.softmax(ids[0], 0).unwrap();
                tape.mse_loss(y, ids[1]).unwrap()
            },
            |xs| {
                // transpose, softmax rows, transpose back
                let mut tr = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        tr[j * n + i] = xs[0][i * m + j];
                    }
                }
                let sm = shadow::softmax_lines(&tr, n);
                let mut y = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        y[i * m + j] = sm[j * n + i];
                    }
                }
                shadow::mse(&y, &xs[1], n)
            },
            "softmax-axis0",
        );
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(107);
    for _ in 0..CASES {
        // two-feature rows normalize to +-1 so their true gradient is
        // O(eps), below f32 resolution; start at three features
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(3..8));
        let x = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, n, m);
        let eps = 1e-5f32;
        fd_check(
            &[x, w],
            |tape, ids| {
                let y = tape.layer_norm(ids[0], eps).unwrap();
                tape.mse_loss(y, ids[1]).unwrap()
            },
            |xs| {
                let y = shadow::layer_norm(&xs[0], m, eps as f64);
                shadow::mse(&y, &xs[1], n)
            },
            "layer_norm",
        );
    }
}

#[test]
fn mse_loss_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(108);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let p = rand_tensor(&mut rng, n, m);
        let t = rand_tensor(&mut rng, n, m);
        fd_check(
            &[p, t],
            |tape, ids| tape.mse_loss(ids[0], ids[1]).unwrap(),
            |xs| shadow::mse(&xs[0], &xs[1], n),
            "mse_loss",
        );
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(109);
    for _ in 0..CASES {
        let batch = rng.gen_range(1..3);
        let seq = rng.gen_range(1..4);
        let heads = rng.gen_range(1..3);
        let head_dim = rng.gen_range(1..4);
        let rows = batch * seq;
        let width = heads * head_dim;
        let q = rand_tensor(&mut rng, rows, width);
        let k = rand_tensor(&mut rng, rows, width);
        let v = rand_tensor(&mut rng, rows, width);
        let w = rand_tensor(&mut rng, rows, width);
        fd_check(
            &[q, k, v, w],
            |tape, ids| {
                let y = tape
                    .attention(ids[0], ids[1], ids[2], batch, seq, heads, head_dim)
                    .unwrap();
                tape.mse_loss(y, ids[3]).unwrap()
            },
            |xs| {
                let y = shadow::attention(&xs[0], &xs[1], &xs[2], batch, seq, heads, head_dim);
                shadow::mse(&y, &xs[3], rows)
            },
            "attention",
        );
    }
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    // prefix_cols, prefix_rows, tile_rows, seq_mean composed into one graph
    let mut rng = Rng::seed_from_u64(110);
    for _ in 0..CASES {
        let (n, m) = (rng.gen_range(2..5), rng.gen_range(2..6));
        let keep_c = rng.gen_range(1..=m);
        let keep_r = rng.gen_range(1..=n);
        let reps = rng.gen_range(1..4);
        let x = rand_tensor(&mut rng, n, m);
        let w = rand_tensor(&mut rng, keep_r, keep_c);
        fd_check(
            &[x, w],
            |tape, ids| {
                let a = tape.prefix_cols(ids[0], keep_c).unwrap();
                let b = tape.prefix_rows(a, keep_r).unwrap();
                let t = tape.tile_rows(b, reps).unwrap();
                let y = tape.seq_mean(t, keep_r).unwrap();
                // y is [reps, keep_c]; tile target to match
                let tw = tape.tile_rows(ids[1], 1).unwrap();
                let yw = tape.seq_mean(tw, keep_r).unwrap();
                let yt = tape.tile_rows(yw, reps).unwrap();
                tape.mse_loss(y, yt).unwrap()
            },
            |xs| {
                // shadow of the same composition
                let sliced: Vec<f64> = (0..keep_r * keep_c)
                    .map(|i| xs[0][(i / keep_c) * m + (i % keep_c)])
                    .collect();
                let mut pooled = vec![0.0; keep_c];
                for r in 0..keep_r {
                    for c in 0..keep_c {
                        pooled[c] += sliced[r * keep_c + c] / keep_r as f64;
                    }
                }
                let y: Vec<f64> = (0..reps * keep_c).map(|i| pooled[i % keep_c]).collect();
                let mut wpool = vec![0.0; keep_c];
                for r in 0..keep_r {
                    for c in 0..keep_c {
                        wpool[c] += xs[1][r * keep_c + c] / keep_r as f64;
                    }
                }
                let yt: Vec<f64> = (0..reps * keep_c).map(|i| wpool[i % keep_c]).collect();
                shadow::mse(&y, &yt, reps)
            },
            "structural",
        );
    }
}

/// The STE is not finite-differentiable; its gradient contract is the clip
/// mask itself.
#[test]
fn fake_quant_backward_equals_the_ste_mask() {
    let mut rng = Rng::seed_from_u64(111);
    for _ in 0..CASES {
        let n = rng.gen_range(2..40);
        let bits = if rng.gen::<bool>() { 4u8 } else { 8 };
        let maxv: f32 = rng.gen_range(0.1..3.0);
        let xs: Vec<f32> = (0..n).map(|_| rng.gen_range(-6.0f32..6.0)).collect();

        let mut spec = QuantizerSpec::per_tensor(bits, 0.99).unwrap();
        spec.calibrate(&Tensor::vector(vec![maxv]));
        let scale = spec.scale().unwrap();
        let mask = spec.ste_mask(&Tensor::vector(xs.clone())).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.clone())).unwrap();
        let q = tape
            .fake_quant_per_tensor(x, scale, dcqfa_core::quant::qmax(bits), false)
            .unwrap();
        // loss = mse(q, 0) so upstream gradient is 2q/1
        let zero = tape.leaf(Tensor::zeros(&[n])).unwrap();
        let loss = tape.mse_loss(q, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.grad(x).unwrap();
        let gq = grads.grad(q).unwrap();
        for i in 0..n {
            let expected = gq.data()[i] * mask[i];
            assert!(
                (gx.data()[i] - expected).abs() < 1e-12,
                "STE gradient must be the masked upstream gradient"
            );
        }
    }
}
