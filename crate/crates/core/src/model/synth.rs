//! Synthetic model generation with controllable layer redundancy.
//!
//! Layers inside a declared patch share the patch-start layer's parameters
//! plus `epsilon`-scaled unit-variance perturbations. The patch-start layer
//! itself is drawn with strongly damped branch-output projections, so a
//! patch contributes almost nothing to the residual stream: repeated
//! near-identity layers are what makes the block mutually redundant, both in
//! the layer-similarity heatmap and for the merging engine. Ordinary layers
//! are drawn at full strength so the stream moves substantially between
//! patches.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::tensor::Matrix;

use super::{LayerParams, Model, ModelConfig, ModelError};

/// Gain on the branch-output projections (wo, w_down) of ordinary layers.
/// Sized so one layer moves the residual stream by a large fraction of its
/// norm at residual_scale 0.1, which de-correlates non-redundant layers.
const BRANCH_OUTPUT_GAIN: f32 = 24.0;

/// Branch-output damping for patch layers relative to ordinary layers.
/// Keeps a patch's contribution to the stream tiny, so every state inside
/// the patch stays close to the state at its entry.
const PATCH_OUTPUT_DAMP: f32 = 0.01;

/// A run of redundant layers: `len` layers starting at `start`, with each
/// non-start layer perturbed from the start layer by `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub start: usize,
    pub len: usize,
    pub epsilon: f32,
}

fn normal_matrix(rows: usize, cols: usize, sigma: f32, r: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            (z as f32) * sigma
        })
        .collect();
    Matrix::new(rows, cols, data).expect("length matches by construction")
}

fn sinusoidal_positions(max_seq: usize, d_model: usize) -> Matrix {
    let mut m = Matrix::zeros(max_seq, d_model);
    for p in 0..max_seq {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            m.set(p, j, v as f32);
        }
    }
    m
}

fn draw_layer(
    cfg: &ModelConfig,
    index: usize,
    residual_scale: f32,
    output_gain: f32,
    seed: u64,
) -> LayerParams {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let si = |name: &str| rng::rng(seed, name, index as u64);
    let in_sigma = 1.0 / (d as f32).sqrt();
    let out_sigma = output_gain / (d as f32).sqrt();
    let down_sigma = output_gain / (f as f32).sqrt();
    LayerParams {
        wq: normal_matrix(d, d, in_sigma, &mut si("wq")),
        wk: normal_matrix(d, d, in_sigma, &mut si("wk")),
        wv: normal_matrix(d, d, in_sigma, &mut si("wv")),
        wo: normal_matrix(d, d, out_sigma, &mut si("wo")),
        w_gate: normal_matrix(d, f, in_sigma, &mut si("w_gate")),
        w_up: normal_matrix(d, f, in_sigma, &mut si("w_up")),
        w_down: normal_matrix(f, d, down_sigma, &mut si("w_down")),
        attn_norm_gamma: vec![1.0; d],
        ffn_norm_gamma: vec![1.0; d],
        original_index: index,
        residual_scale,
    }
}

fn perturb_layer(base: &LayerParams, index: usize, epsilon: f32, seed: u64) -> LayerParams {
    let mut layer = base.clone();
    layer.original_index = index;
    if epsilon == 0.0 {
        // Exact copies: adding 0.0 * noise could flip signed zeros, so skip
        // the addition entirely to keep the bundle bitwise identical.
        return layer;
    }
    let mut r = rng::rng(seed, "patch-perturb", index as u64);
    let mut jitter = |data: &mut [f32]| {
        for v in data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += epsilon * z as f32;
        }
    };
    jitter(layer.wq.data_mut());
    jitter(layer.wk.data_mut());
    jitter(layer.wv.data_mut());
    jitter(layer.wo.data_mut());
    jitter(layer.w_gate.data_mut());
    jitter(layer.w_up.data_mut());
    jitter(layer.w_down.data_mut());
    jitter(&mut layer.attn_norm_gamma);
    jitter(&mut layer.ffn_norm_gamma);
    layer
}

fn validate_patches(patches: &[PatchSpec], n_layers: usize) -> Result<(), ModelError> {
    for p in patches {
        if p.len < 2 || p.start + p.len > n_layers {
            return Err(ModelError::PatchOutOfRange {
                start: p.start,
                len: p.len,
                n_layers,
            });
        }
        if p.epsilon < 0.0 {
            return Err(ModelError::NegativeEpsilon(p.epsilon));
        }
    }
    for (i, a) in patches.iter().enumerate() {
        for b in &patches[i + 1..] {
            let overlap = a.start < b.start + b.len && b.start < a.start + a.len;
            if overlap {
                return Err(ModelError::PatchOverlap {
                    a: a.start,
                    b: b.start,
                });
            }
        }
    }
    Ok(())
}

/// Builds a random model whose declared patches are runs of near-identical,
/// near-identity layers. Deterministic for a fixed seed.
pub fn synthesize(
    config: ModelConfig,
    patches: &[PatchSpec],
    base_residual_scale: f32,
    seed: u64,
) -> Result<Model, ModelError> {
    config.validate()?;
    validate_patches(patches, config.n_layers)?;
    if !(base_residual_scale > 0.0 && base_residual_scale <= 1.0) {
        return Err(ModelError::InvalidConfig(format!(
            "base_residual_scale {base_residual_scale} outside (0, 1]"
        )));
    }

    let d = config.d_model;
    let in_patch = |l: usize| patches.iter().find(|p| l >= p.start && l < p.start + p.len);

    let mut layers: Vec<LayerParams> = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        match in_patch(l) {
            Some(p) if l == p.start => {
                let gain = BRANCH_OUTPUT_GAIN * PATCH_OUTPUT_DAMP;
                layers.push(draw_layer(&config, l, base_residual_scale, gain, seed));
            }
            Some(p) => {
                let base = layers[p.start].clone();
                layers.push(perturb_layer(&base, l, p.epsilon, seed));
            }
            None => {
                layers.push(draw_layer(
                    &config,
                    l,
                    base_residual_scale,
                    BRANCH_OUTPUT_GAIN,
                    seed,
                ));
            }
        }
    }

    let model = Model {
        tok_embed: normal_matrix(
            config.vocab_size,
            d,
            1.0,
            &mut rng::rng(seed, "tok_embed", 0),
        ),
        pos_embed: sinusoidal_positions(config.max_seq, d),
        layers,
        final_norm_gamma: vec![1.0; d],
        lm_head: normal_matrix(
            d,
            config.vocab_size,
            1.0 / (d as f32).sqrt(),
            &mut rng::rng(seed, "lm_head", 0),
        ),
        config,
    };
    model.validate()?;
    Ok(model)
}
