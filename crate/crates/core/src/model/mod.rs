//! The toy decoder-only transformer.
//!
//! Architecture per layer: pre-RMSNorm causal multi-head self-attention,
//! then pre-RMSNorm SwiGLU feed-forward. Each branch output is multiplied by
//! the layer's `residual_scale` before it is added to the residual stream,
//! which makes the near-identity regime (branch output small relative to the
//! stream) an explicit knob rather than an accident of initialization.
//!
//! Positions come from a fixed sinusoidal table stored as an ordinary
//! parameter matrix; layer merging never touches it.

mod io;
mod synth;

pub use io::FORMAT_VERSION;
pub use synth::{synthesize, PatchSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{rmsnorm_row, silu, Matrix, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max} (or is empty)")]
    BadSequenceLength { len: usize, max: usize },
    #[error("patch ({start}, {len}) out of range for {n_layers} layers")]
    PatchOutOfRange {
        start: usize,
        len: usize,
        n_layers: usize,
    },
    #[error("patches starting at {a} and {b} overlap")]
    PatchOverlap { a: usize, b: usize },
    #[error("patch epsilon must be >= 0, got {0}")]
    NegativeEpsilon(f32),
    #[error("bad magic bytes {0:?}; not a model file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("tensor {name}: manifest shape {rows}x{cols} inconsistent with config")]
    ShapeInconsistency {
        name: String,
        rows: usize,
        cols: usize,
    },
    #[error("tensor {name}: payload truncated")]
    TruncatedTensor { name: String },
    #[error("{0} trailing bytes after final tensor")]
    TrailingData(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static geometry of a model.
///
/// `n_heads` fixes the attention head width: `head_dim = d_model / n_heads`.
/// Width pruning removes whole heads and FFN channels by shrinking the layer
/// tensors; the config keeps the original geometry and per-layer counts are
/// derived from tensor shapes, so a model with protected (unpruned) layers
/// next to pruned ones still carries a single config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.norm_eps.is_finite() || self.norm_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One layer's full parameter bundle — the unit that merging operates on.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm_gamma: Vec<f32>,
    pub ffn_norm_gamma: Vec<f32>,
    pub original_index: usize,
    pub residual_scale: f32,
}

impl LayerParams {
    /// Attention head count of this layer, given the model-wide head width.
    pub fn head_count(&self, head_dim: usize) -> usize {
        self.wq.cols() / head_dim
    }

    /// FFN channel count of this layer.
    pub fn ffn_channels(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn bitwise_eq(&self, other: &LayerParams) -> bool {
        let vec_eq = |a: &[f32], b: &[f32]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.wq.bitwise_eq(&other.wq)
            && self.wk.bitwise_eq(&other.wk)
            && self.wv.bitwise_eq(&other.wv)
            && self.wo.bitwise_eq(&other.wo)
            && self.w_gate.bitwise_eq(&other.w_gate)
            && self.w_up.bitwise_eq(&other.w_up)
            && self.w_down.bitwise_eq(&other.w_down)
            && vec_eq(&self.attn_norm_gamma, &other.attn_norm_gamma)
            && vec_eq(&self.ffn_norm_gamma, &other.ffn_norm_gamma)
            && self.original_index == other.original_index
            && self.residual_scale.to_bits() == other.residual_scale.to_bits()
    }

    /// Parameter count, excluding the scalar residual_scale knob.
    pub fn param_count(&self) -> usize {
        self.wq.rows() * self.wq.cols()
            + self.wk.rows() * self.wk.cols()
            + self.wv.rows() * self.wv.cols()
            + self.wo.rows() * self.wo.cols()
            + self.w_gate.rows() * self.w_gate.cols()
            + self.w_up.rows() * self.w_up.cols()
            + self.w_down.rows() * self.w_down.cols()
            + self.attn_norm_gamma.len()
            + self.ffn_norm_gamma.len()
    }

    fn validate(&self, cfg: &ModelConfig, position: usize) -> Result<(), ModelError> {
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let err = |msg: String| {
            Err(ModelError::InvalidConfig(format!(
                "layer {position}: {msg}"
            )))
        };
        if self.wq.rows() != d {
            return err(format!("wq has {} rows, want {d}", self.wq.rows()));
        }
        if self.wq.cols() == 0 || !self.wq.cols().is_multiple_of(hd) {
            return err(format!(
                "wq has {} cols, not a multiple of head_dim {hd}",
                self.wq.cols()
            ));
        }
        for (name, m) in [("wk", &self.wk), ("wv", &self.wv)] {
            if m.rows() != self.wq.rows() || m.cols() != self.wq.cols() {
                return err(format!("{name} shape differs from wq"));
            }
        }
        if self.wo.rows() != self.wq.cols() || self.wo.cols() != d {
            return err(format!(
                "wo is {}x{}, want {}x{d}",
                self.wo.rows(),
                self.wo.cols(),
                self.wq.cols()
            ));
        }
        if self.w_gate.rows() != d || self.w_up.rows() != d {
            return err("w_gate/w_up must have d_model rows".into());
        }
        if self.w_gate.cols() == 0 || self.w_up.cols() != self.w_gate.cols() {
            return err("w_gate/w_up column counts differ or are zero".into());
        }
        if self.w_down.rows() != self.w_gate.cols() || self.w_down.cols() != d {
            return err("w_down shape inconsistent with w_gate".into());
        }
        if self.attn_norm_gamma.len() != d || self.ffn_norm_gamma.len() != d {
            return err("norm gamma length differs from d_model".into());
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return err(format!(
                "residual_scale {} outside (0, 1]",
                self.residual_scale
            ));
        }
        Ok(())
    }
}

/// Residual-stream capture of one forward pass: `per_layer[0]` is the
/// post-embedding state, `per_layer[l + 1]` the state after layer `l`.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    pub per_layer: Vec<Matrix>,
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm_gamma: Vec<f32>,
    pub lm_head: Matrix,
}

impl Model {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        if self.layers.is_empty() {
            return Err(ModelError::InvalidConfig("layer list is empty".into()));
        }
        if self.layers.len() != self.config.n_layers {
            return Err(ModelError::InvalidConfig(format!(
                "config says {} layers, model has {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        let cfg = &self.config;
        if self.tok_embed.rows() != cfg.vocab_size || self.tok_embed.cols() != cfg.d_model {
            return Err(ModelError::InvalidConfig("tok_embed shape mismatch".into()));
        }
        if self.pos_embed.rows() != cfg.max_seq || self.pos_embed.cols() != cfg.d_model {
            return Err(ModelError::InvalidConfig("pos_embed shape mismatch".into()));
        }
        if self.final_norm_gamma.len() != cfg.d_model {
            return Err(ModelError::InvalidConfig(
                "final_norm_gamma length mismatch".into(),
            ));
        }
        if self.lm_head.rows() != cfg.d_model || self.lm_head.cols() != cfg.vocab_size {
            return Err(ModelError::InvalidConfig("lm_head shape mismatch".into()));
        }
        for (pos, layer) in self.layers.iter().enumerate() {
            layer.validate(cfg, pos)?;
        }
        for w in self.layers.windows(2) {
            if w[0].original_index >= w[1].original_index {
                return Err(ModelError::InvalidConfig(
                    "original_index values must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Total parameter count from actual tensor shapes. For an unpruned
    /// model this equals
    /// `vocab*d + max_seq*d + n_layers*(4d^2 + 3*d*d_ff + 2d) + d + d*vocab`.
    pub fn param_count(&self) -> usize {
        self.tok_embed.rows() * self.tok_embed.cols()
            + self.pos_embed.rows() * self.pos_embed.cols()
            + self
                .layers
                .iter()
                .map(LayerParams::param_count)
                .sum::<usize>()
            + self.final_norm_gamma.len()
            + self.lm_head.rows() * self.lm_head.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim()
    }

    /// Head count of the layer at `position` (layers may differ after width pruning).
    pub fn layer_head_count(&self, position: usize) -> usize {
        self.layers[position].head_count(self.head_dim())
    }

    pub fn bitwise_eq(&self, other: &Model) -> bool {
        let vec_eq = |a: &[f32], b: &[f32]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.config == other.config
            && self.tok_embed.bitwise_eq(&other.tok_embed)
            && self.pos_embed.bitwise_eq(&other.pos_embed)
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(other.layers.iter())
                .all(|(a, b)| a.bitwise_eq(b))
            && vec_eq(&self.final_norm_gamma, &other.final_norm_gamma)
            && self.lm_head.bitwise_eq(&other.lm_head)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(ModelError::BadSequenceLength {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let tok = self.tok_embed.row(t as usize);
            let pos = self.pos_embed.row(i);
            for j in 0..d {
                x.set(i, j, tok[j] + pos[j]);
            }
        }
        x
    }

    fn rmsnorm_rows(&self, x: &Matrix, gamma: &[f32]) -> Matrix {
        let rows: Vec<Vec<f32>> = (0..x.rows())
            .map(|r| rmsnorm_row(x.row(r), gamma, self.config.norm_eps))
            .collect();
        Matrix::from_rows(&rows).expect("uniform row lengths")
    }

    fn attention_branch(&self, layer: &LayerParams, x: &Matrix) -> Matrix {
        let normed = self.rmsnorm_rows(x, &layer.attn_norm_gamma);
        let q = normed.matmul(&layer.wq).expect("qkv shapes validated");
        let k = normed.matmul(&layer.wk).expect("qkv shapes validated");
        let v = normed.matmul(&layer.wv).expect("qkv shapes validated");
        let hd = self.head_dim();
        let heads = layer.head_count(hd);
        let seq = x.rows();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols: Vec<usize> = (h * hd..(h + 1) * hd).collect();
            let qh = q.select_cols(&cols);
            let kh = k.select_cols(&cols);
            let vh = v.select_cols(&cols);
            let mut scores = Matrix::zeros(seq, seq);
            for i in 0..seq {
                for j in 0..seq {
                    if j > i {
                        scores.set(i, j, f32::NEG_INFINITY);
                    } else {
                        let mut dot = 0.0f64;
                        for (a, b) in qh.row(i).iter().zip(kh.row(j)) {
                            dot += (*a as f64) * (*b as f64);
                        }
                        scores.set(i, j, (dot * scale) as f32);
                    }
                }
            }
            let probs = scores.softmax_rows();
            head_outputs.push(probs.matmul(&vh).expect("seq x seq * seq x hd"));
        }
        let ctx = Matrix::hconcat(&head_outputs).expect("equal row counts");
        ctx.matmul(&layer.wo).expect("wo shape validated")
    }

    fn ffn_branch(&self, layer: &LayerParams, x: &Matrix) -> Matrix {
        let normed = self.rmsnorm_rows(x, &layer.ffn_norm_gamma);
        let gate = normed
            .matmul(&layer.w_gate)
            .expect("w_gate shape validated");
        let up = normed.matmul(&layer.w_up).expect("w_up shape validated");
        let mut act = Matrix::zeros(gate.rows(), gate.cols());
        for i in 0..gate.rows() {
            for j in 0..gate.cols() {
                act.set(i, j, silu(gate.get(i, j)) * up.get(i, j));
            }
        }
        act.matmul(&layer.w_down).expect("w_down shape validated")
    }

    /// Full forward pass capturing the residual stream after every layer.
    pub fn forward(&self, tokens: &[u32]) -> Result<HiddenTrace, ModelError> {
        self.check_tokens(tokens)?;
        let mut per_layer = Vec::with_capacity(self.layers.len() + 1);
        let mut x = self.embed(tokens);
        per_layer.push(x.clone());
        for layer in &self.layers {
            let attn = self.attention_branch(layer, &x).scale(layer.residual_scale);
            x = x.add(&attn).expect("same shape");
            let ffn = self.ffn_branch(layer, &x).scale(layer.residual_scale);
            x = x.add(&ffn).expect("same shape");
            per_layer.push(x.clone());
        }
        let normed = self.rmsnorm_rows(&x, &self.final_norm_gamma);
        let logits = normed
            .matmul(&self.lm_head)
            .expect("lm_head shape validated");
        Ok(HiddenTrace { per_layer, logits })
    }

    /// Final hidden states: the residual stream after the last layer, passed
    /// through the final normalization. This is the representation compared
    /// between original and compressed models during merging.
    pub fn last_hidden(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for layer in &self.layers {
            let attn = self.attention_branch(layer, &x).scale(layer.residual_scale);
            x = x.add(&attn).expect("same shape");
            let ffn = self.ffn_branch(layer, &x).scale(layer.residual_scale);
            x = x.add(&ffn).expect("same shape");
        }
        Ok(self.rmsnorm_rows(&x, &self.final_norm_gamma))
    }
}
