//! Layer-merge strategies over windows of parameter bundles.
//!
//! Given window layers θ_base..θ_last (lowest position first):
//!
//! - `Delete`  keeps θ_base unchanged and drops the rest.
//! - `Average` replaces the window with the elementwise mean.
//! - `Diff`    keeps θ_base plus the sum of differences to it:
//!   θ* = θ_base + Σ (θ_k − θ_base), evaluated literally in 64-bit
//!   accumulation — algebraically Σ θ_k − (k−1)·θ_base.
//!
//! The merged layer always carries the window's lowest original index, and
//! its residual_scale is the base layer's.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerParams, Model, ModelError};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merge window needs at least 2 layers, got {0}")]
    WindowTooSmall(usize),
    #[error("invalid window [{lo}, {hi}] over {n_layers} layers")]
    InvalidWindow {
        lo: usize,
        hi: usize,
        n_layers: usize,
    },
    #[error("layer shapes differ inside the merge window")]
    ShapeMismatch,
    #[error("original ids {ids:?} are not a contiguous run of current layers")]
    IdsNotContiguous { ids: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Delete,
    Average,
    Diff,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 3] = [
        MergeStrategy::Delete,
        MergeStrategy::Average,
        MergeStrategy::Diff,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "delete" => Some(Self::Delete),
            "average" => Some(Self::Average),
            "diff" => Some(Self::Diff),
            _ => None,
        }
    }
}

impl std::fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Delete => "delete",
            Self::Average => "average",
            Self::Diff => "diff",
        };
        f.write_str(s)
    }
}

/// Inclusive window of layer positions in the current layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeWindow {
    pub lo: usize,
    pub hi: usize,
}

fn merge_slices(slices: &[&[f32]], strategy: MergeStrategy) -> Vec<f32> {
    let base = slices[0];
    match strategy {
        MergeStrategy::Delete => base.to_vec(),
        MergeStrategy::Average => {
            let k = slices.len() as f64;
            (0..base.len())
                .map(|i| {
                    let mut acc = 0.0f64;
                    for s in slices {
                        acc += s[i] as f64;
                    }
                    (acc / k) as f32
                })
                .collect()
        }
        MergeStrategy::Diff => (0..base.len())
            .map(|i| {
                let b = base[i] as f64;
                let mut acc = b;
                for s in &slices[1..] {
                    acc += s[i] as f64 - b;
                }
                acc as f32
            })
            .collect(),
    }
}

fn merge_matrices(mats: &[&Matrix], strategy: MergeStrategy) -> Result<Matrix, MergeError> {
    let (rows, cols) = (mats[0].rows(), mats[0].cols());
    if mats.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(MergeError::ShapeMismatch);
    }
    let slices: Vec<&[f32]> = mats.iter().map(|m| m.data()).collect();
    Ok(Matrix::new(rows, cols, merge_slices(&slices, strategy)).expect("shape preserved"))
}

/// Merges an ordered window of layer bundles into one. The rule applies
/// elementwise to every tensor including the norm gammas; the result keeps
/// the base layer's original_index and residual_scale.
pub fn merge_params(
    window: &[LayerParams],
    strategy: MergeStrategy,
) -> Result<LayerParams, MergeError> {
    if window.len() < 2 {
        return Err(MergeError::WindowTooSmall(window.len()));
    }
    let gather =
        |f: fn(&LayerParams) -> &Matrix| -> Vec<&Matrix> { window.iter().map(f).collect() };
    let gammas_a: Vec<&[f32]> = window
        .iter()
        .map(|l| l.attn_norm_gamma.as_slice())
        .collect();
    let gammas_f: Vec<&[f32]> = window.iter().map(|l| l.ffn_norm_gamma.as_slice()).collect();
    if gammas_a.iter().any(|g| g.len() != gammas_a[0].len()) {
        return Err(MergeError::ShapeMismatch);
    }
    Ok(LayerParams {
        wq: merge_matrices(&gather(|l| &l.wq), strategy)?,
        wk: merge_matrices(&gather(|l| &l.wk), strategy)?,
        wv: merge_matrices(&gather(|l| &l.wv), strategy)?,
        wo: merge_matrices(&gather(|l| &l.wo), strategy)?,
        w_gate: merge_matrices(&gather(|l| &l.w_gate), strategy)?,
        w_up: merge_matrices(&gather(|l| &l.w_up), strategy)?,
        w_down: merge_matrices(&gather(|l| &l.w_down), strategy)?,
        attn_norm_gamma: merge_slices(&gammas_a, strategy),
        ffn_norm_gamma: merge_slices(&gammas_f, strategy),
        original_index: window[0].original_index,
        residual_scale: window[0].residual_scale,
    })
}

/// Returns a new model with positions `window.lo..=window.hi` replaced by
/// their merge. Everything outside the window is untouched bitwise.
pub fn apply_merge(
    model: &Model,
    window: MergeWindow,
    strategy: MergeStrategy,
) -> Result<Model, MergeError> {
    let n = model.layer_count();
    if window.lo >= window.hi || window.hi >= n {
        return Err(MergeError::InvalidWindow {
            lo: window.lo,
            hi: window.hi,
            n_layers: n,
        });
    }
    let merged = merge_params(&model.layers[window.lo..=window.hi], strategy)?;
    let mut out = model.clone();
    out.layers.splice(window.lo..=window.hi, [merged]);
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Merges the layers carrying the given original ids, which must be present
/// as a contiguous run of positions in the current model.
pub fn apply_merge_by_original_ids(
    model: &Model,
    ids: &[usize],
    strategy: MergeStrategy,
) -> Result<Model, MergeError> {
    if ids.len() < 2 {
        return Err(MergeError::WindowTooSmall(ids.len()));
    }
    let positions: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| ids.contains(&l.original_index))
        .map(|(p, _)| p)
        .collect();
    let contiguous = positions.len() == ids.len() && positions.windows(2).all(|w| w[1] == w[0] + 1);
    if !contiguous {
        return Err(MergeError::IdsNotContiguous { ids: ids.to_vec() });
    }
    apply_merge(
        model,
        MergeWindow {
            lo: positions[0],
            hi: *positions.last().unwrap(),
        },
        strategy,
    )
}
