//! Checks the forward pass against a naive, unbatched, per-head reference
//! implementation written entirely in f64 scalar loops. The reference shares
//! no code with the library's matrix kernels, and its index-loop style is
//! deliberate.
#![allow(clippy::needless_range_loop)]

use swm_core::model::{synthesize, LayerParams, Model, ModelConfig, PatchSpec};

fn reference_rmsnorm(x: &[f64], gamma: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter()
        .zip(gamma)
        .map(|(v, g)| v * inv * *g as f64)
        .collect()
}

/// Attention branch for one layer: per-position, per-head scalar loops.
fn reference_attention(model: &Model, layer: &LayerParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let seq = x.len();
    let d = model.config.d_model;
    let hd = model.head_dim();
    let heads = layer.wq.cols() / hd;
    let eps = model.config.norm_eps as f64;

    let normed: Vec<Vec<f64>> = x
        .iter()
        .map(|row| reference_rmsnorm(row, &layer.attn_norm_gamma, eps))
        .collect();
    let project = |w: &swm_core::tensor::Matrix, row: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|c| (0..d).map(|r| row[r] * w.get(r, c) as f64).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = normed.iter().map(|r| project(&layer.wq, r)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|r| project(&layer.wk, r)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|r| project(&layer.wv, r)).collect();

    let mut ctx = vec![vec![0.0f64; heads * hd]; seq];
    for h in 0..heads {
        let base = h * hd;
        for i in 0..seq {
            // Causal scores over positions 0..=i only.
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let dot: f64 = (0..hd).map(|c| q[i][base + c] * k[j][base + c]).sum();
                scores.push(dot / (hd as f64).sqrt());
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            for j in 0..=i {
                let w = exp[j] / sum;
                for c in 0..hd {
                    ctx[i][base + c] += w * v[j][base + c];
                }
            }
        }
    }
    // Output projection back to the model width.
    (0..seq)
        .map(|i| {
            (0..d)
                .map(|c| {
                    (0..heads * hd)
                        .map(|r| ctx[i][r] * layer.wo.get(r, c) as f64)
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn reference_ffn(model: &Model, layer: &LayerParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = model.config.d_model;
    let f = layer.w_gate.cols();
    let eps = model.config.norm_eps as f64;
    x.iter()
        .map(|row| {
            let normed = reference_rmsnorm(row, &layer.ffn_norm_gamma, eps);
            let mut act = vec![0.0f64; f];
            for (c, a) in act.iter_mut().enumerate() {
                let gate: f64 = (0..d)
                    .map(|r| normed[r] * layer.w_gate.get(r, c) as f64)
                    .sum();
                let up: f64 = (0..d)
                    .map(|r| normed[r] * layer.w_up.get(r, c) as f64)
                    .sum();
                *a = gate / (1.0 + (-gate).exp()) * up;
            }
            (0..d)
                .map(|c| (0..f).map(|r| act[r] * layer.w_down.get(r, c) as f64).sum())
                .collect()
        })
        .collect()
}

fn reference_states(model: &Model, tokens: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let d = model.config.d_model;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d)
                .map(|c| {
                    model.tok_embed.get(t as usize, c) as f64 + model.pos_embed.get(i, c) as f64
                })
                .collect()
        })
        .collect();
    let mut states = vec![x.clone()];
    for layer in &model.layers {
        let s = layer.residual_scale as f64;
        let attn = reference_attention(model, layer, &x);
        for (row, a) in x.iter_mut().zip(&attn) {
            for (v, add) in row.iter_mut().zip(a) {
                *v += s * add;
            }
        }
        let ffn = reference_ffn(model, layer, &x);
        for (row, f) in x.iter_mut().zip(&ffn) {
            for (v, add) in row.iter_mut().zip(f) {
                *v += s * add;
            }
        }
        states.push(x.clone());
    }
    states
}

fn six_layer_fixture() -> Model {
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        n_layers: 6,
        max_seq: 16,
        norm_eps: 1e-5,
    };
    synthesize(
        cfg,
        &[PatchSpec {
            start: 2,
            len: 2,
            epsilon: 1e-3,
        }],
        0.2,
        1234,
    )
    .unwrap()
}

#[test]
fn forward_matches_naive_reference_at_layer_three() {
    let model = six_layer_fixture();
    let tokens = [3u32, 17, 9, 0, 25, 31, 8, 14];
    let trace = model.forward(&tokens).unwrap();
    let reference = reference_states(&model, &tokens);

    let got = &trace.per_layer[3];
    let want = &reference[3];
    for i in 0..tokens.len() {
        for c in 0..model.config.d_model {
            let g = got.get(i, c) as f64;
            let w = want[i][c];
            let tol = 1e-5 * w.abs().max(1.0);
            assert!(
                (g - w).abs() <= tol,
                "x3[{i}][{c}]: forward {g} vs reference {w}"
            );
        }
    }
}

#[test]
fn residual_stream_decomposes_into_scaled_branches() {
    // x_{l+1} - x_l must equal residual_scale * (attention + ffn branch
    // outputs), with the branches recomputed by the naive reference.
    let model = six_layer_fixture();
    let tokens = [1u32, 2, 3, 4, 5];
    let trace = model.forward(&tokens).unwrap();

    for l in 0..model.layer_count() {
        let layer = &model.layers[l];
        let s = layer.residual_scale as f64;
        let x_l: Vec<Vec<f64>> = (0..tokens.len())
            .map(|i| {
                trace.per_layer[l]
                    .row(i)
                    .iter()
                    .map(|v| *v as f64)
                    .collect()
            })
            .collect();
        let attn = reference_attention(&model, layer, &x_l);
        let x_mid: Vec<Vec<f64>> = x_l
            .iter()
            .zip(&attn)
            .map(|(row, a)| row.iter().zip(a).map(|(v, add)| v + s * add).collect())
            .collect();
        let ffn = reference_ffn(&model, layer, &x_mid);

        for i in 0..tokens.len() {
            for c in 0..model.config.d_model {
                let got = trace.per_layer[l + 1].get(i, c) as f64 - x_l[i][c];
                let want = s * (attn[i][c] + ffn[i][c]);
                let tol = 1e-5 * want.abs().max(1.0);
                assert!(
                    (got - want).abs() <= tol,
                    "layer {l} delta[{i}][{c}]: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn logits_match_reference_head() {
    let model = six_layer_fixture();
    let tokens = [7u32, 8, 9];
    let trace = model.forward(&tokens).unwrap();
    let states = reference_states(&model, &tokens);
    let last = &states[model.layer_count()];
    let eps = model.config.norm_eps as f64;
    for (i, row) in last.iter().enumerate() {
        let normed = reference_rmsnorm(row, &model.final_norm_gamma, eps);
        for t in 0..model.config.vocab_size {
            let want: f64 = (0..model.config.d_model)
                .map(|r| normed[r] * model.lm_head.get(r, t) as f64)
                .sum();
            let got = trace.logits.get(i, t) as f64;
            let tol = 1e-5 * want.abs().max(1.0);
            assert!(
                (got - want).abs() <= tol,
                "logits[{i}][{t}]: {got} vs {want}"
            );
        }
    }
}
