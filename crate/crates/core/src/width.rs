//! Structured width pruning: whole attention heads and FFN channels.
//!
//! Head importance is the summed L2 norm of the head's wq/wk/wv column
//! slices and wo row slice; channel importance likewise over w_gate/w_up
//! columns and the w_down row. The top `ceil(ratio * count)` structures are
//! kept per unprotected layer, ties broken toward the lower index, and all
//! coupled slices are removed together so the model still runs.
//!
//! This is deliberately a simple magnitude criterion — enough to exercise
//! the combined depth+width pipeline, not a reproduction of any particular
//! importance-scored pruner.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibSet;
use crate::model::{LayerParams, Model, ModelError};
use crate::swm::{find_threshold, replay_plan, SwmConfig, SwmError};

#[derive(Debug, Error)]
pub enum WidthError {
    #[error("keep ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("layer position {0} out of range")]
    BadLayer(usize),
    #[error("depth share {0} outside [0, 1]")]
    BadDepthShare(f64),
    #[error("infeasible budget: closest achievable parameter count {achievable} vs target {target} (tolerance {tolerance})")]
    InfeasibleBudget {
        achievable: usize,
        target: usize,
        tolerance: usize,
    },
    #[error(transparent)]
    Swm(#[from] SwmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthPruneConfig {
    pub head_keep_ratio: f64,
    pub ffn_keep_ratio: f64,
    /// Original layer ids that must not be touched.
    pub protected_layers: BTreeSet<usize>,
}

impl WidthPruneConfig {
    pub fn keep_all() -> Self {
        Self {
            head_keep_ratio: 1.0,
            ffn_keep_ratio: 1.0,
            protected_layers: BTreeSet::new(),
        }
    }

    fn validate(&self) -> Result<(), WidthError> {
        for r in [self.head_keep_ratio, self.ffn_keep_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(WidthError::BadRatio(r));
            }
        }
        Ok(())
    }
}

fn col_block_norm(m: &crate::tensor::Matrix, lo: usize, hi: usize) -> f64 {
    let mut acc = 0.0f64;
    for r in 0..m.rows() {
        for c in lo..hi {
            let v = m.get(r, c) as f64;
            acc += v * v;
        }
    }
    acc.sqrt()
}

fn row_block_norm(m: &crate::tensor::Matrix, lo: usize, hi: usize) -> f64 {
    let mut acc = 0.0f64;
    for r in lo..hi {
        for v in m.row(r) {
            acc += (*v as f64) * (*v as f64);
        }
    }
    acc.sqrt()
}

/// Per-head importance scores for one layer: summed L2 norms of the head's
/// four weight slices. Deterministic and nonnegative.
pub fn head_importance(model: &Model, position: usize) -> Result<Vec<f64>, WidthError> {
    let layer = model
        .layers
        .get(position)
        .ok_or(WidthError::BadLayer(position))?;
    let hd = model.head_dim();
    let heads = layer.head_count(hd);
    Ok((0..heads)
        .map(|h| {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            col_block_norm(&layer.wq, lo, hi)
                + col_block_norm(&layer.wk, lo, hi)
                + col_block_norm(&layer.wv, lo, hi)
                + row_block_norm(&layer.wo, lo, hi)
        })
        .collect())
}

/// Per-channel importance scores for one layer's FFN.
pub fn ffn_channel_importance(model: &Model, position: usize) -> Result<Vec<f64>, WidthError> {
    let layer = model
        .layers
        .get(position)
        .ok_or(WidthError::BadLayer(position))?;
    let channels = layer.ffn_channels();
    Ok((0..channels)
        .map(|c| {
            col_block_norm(&layer.w_gate, c, c + 1)
                + col_block_norm(&layer.w_up, c, c + 1)
                + row_block_norm(&layer.w_down, c, c + 1)
        })
        .collect())
}

/// Indices of the `keep` highest-scoring structures, ties broken toward the
/// lower index, returned ascending so slice order is preserved.
fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

fn prune_layer(
    layer: &LayerParams,
    head_dim: usize,
    keep_heads: usize,
    keep_ffn: usize,
    head_scores: &[f64],
    ffn_scores: &[f64],
) -> LayerParams {
    let kept_heads = top_indices(head_scores, keep_heads);
    let mut qkv_cols = Vec::with_capacity(kept_heads.len() * head_dim);
    for &h in &kept_heads {
        qkv_cols.extend(h * head_dim..(h + 1) * head_dim);
    }
    let kept_channels = top_indices(ffn_scores, keep_ffn);

    LayerParams {
        wq: layer.wq.select_cols(&qkv_cols),
        wk: layer.wk.select_cols(&qkv_cols),
        wv: layer.wv.select_cols(&qkv_cols),
        wo: layer.wo.select_rows(&qkv_cols),
        w_gate: layer.w_gate.select_cols(&kept_channels),
        w_up: layer.w_up.select_cols(&kept_channels),
        w_down: layer.w_down.select_rows(&kept_channels),
        attn_norm_gamma: layer.attn_norm_gamma.clone(),
        ffn_norm_gamma: layer.ffn_norm_gamma.clone(),
        original_index: layer.original_index,
        residual_scale: layer.residual_scale,
    }
}

/// Keeps the top `ceil(ratio * count)` heads and FFN channels per
/// unprotected layer. Protected layers are bitwise untouched. A keep ratio
/// of 1.0 returns the model bitwise unchanged.
pub fn width_prune(model: &Model, cfg: &WidthPruneConfig) -> Result<Model, WidthError> {
    cfg.validate()?;
    let hd = model.head_dim();
    let mut out = model.clone();
    for (pos, layer) in model.layers.iter().enumerate() {
        if cfg.protected_layers.contains(&layer.original_index) {
            continue;
        }
        let heads = layer.head_count(hd);
        let channels = layer.ffn_channels();
        let keep_heads = ((cfg.head_keep_ratio * heads as f64).ceil() as usize).clamp(1, heads);
        let keep_ffn = ((cfg.ffn_keep_ratio * channels as f64).ceil() as usize).clamp(1, channels);
        if keep_heads == heads && keep_ffn == channels {
            continue;
        }
        let head_scores = head_importance(model, pos)?;
        let ffn_scores = ffn_channel_importance(model, pos)?;
        out.layers[pos] = prune_layer(layer, hd, keep_heads, keep_ffn, &head_scores, &ffn_scores);
    }
    out.validate()?;
    Ok(out)
}

/// One stage's bookkeeping inside a pipeline report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthStageReport {
    pub applied: bool,
    pub threshold: Option<f64>,
    pub plan: Vec<Vec<usize>>,
    pub target_layer_count: usize,
    pub layer_count_after: usize,
    pub param_count_after: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WidthStageReport {
    pub applied: bool,
    pub head_keep_ratio: f64,
    pub ffn_keep_ratio: f64,
    pub heads_kept_per_layer: usize,
    pub ffn_channels_kept_per_layer: usize,
    pub param_count_after: usize,
}

/// Combined depth-then-width compression report. Reductions are reported in
/// both parameter proportion and removed-layer proportion; the two axes are
/// related but not interchangeable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub original_param_count: usize,
    pub original_layer_count: usize,
    pub target_param_count: usize,
    pub depth_share: f64,
    pub depth: DepthStageReport,
    pub width: WidthStageReport,
    pub final_param_count: usize,
    pub final_layer_count: usize,
    pub param_reduction: f64,
    pub layer_reduction: f64,
}

/// Predicted parameter count after uniform width pruning to `keep_heads`
/// heads and `keep_ffn` channels on every unprotected layer.
fn predict_params(
    model: &Model,
    keep_heads: usize,
    keep_ffn: usize,
    protected: &BTreeSet<usize>,
) -> usize {
    let d = model.config.d_model;
    let hd = model.head_dim();
    let fixed = model.tok_embed.rows() * model.tok_embed.cols()
        + model.pos_embed.rows() * model.pos_embed.cols()
        + model.final_norm_gamma.len()
        + model.lm_head.rows() * model.lm_head.cols();
    let layers: usize = model
        .layers
        .iter()
        .map(|l| {
            if protected.contains(&l.original_index) {
                l.param_count()
            } else {
                let heads = keep_heads.min(l.head_count(hd));
                let chans = keep_ffn.min(l.ffn_channels());
                4 * d * heads * hd + 3 * d * chans + 2 * d
            }
        })
        .sum();
    fixed + layers
}

/// Depth-then-width compression to an absolute parameter target.
///
/// `depth_share` in [0, 1] is the fraction of the parameter deficit assigned
/// to layer merging; the number of layers to remove is rounded up. The width
/// stage then picks uniform keep counts that land within 2% of the target.
#[allow(clippy::too_many_arguments)]
pub fn pipeline(
    model: &Model,
    depth_share: f64,
    target_params: usize,
    swm_template: &SwmConfig,
    grid: &[f64],
    width_template: &WidthPruneConfig,
    calib: &CalibSet,
) -> Result<(Model, PipelineReport), WidthError> {
    if !(0.0..=1.0).contains(&depth_share) {
        return Err(WidthError::BadDepthShare(depth_share));
    }
    width_template.validate()?;
    let original_params = model.param_count();
    let original_layers = model.layer_count();
    let tolerance = (0.02 * target_params as f64).round() as usize;

    let deficit = original_params.saturating_sub(target_params);
    if deficit == 0 {
        // Nothing to remove; only valid if the target is within tolerance.
        if target_params.saturating_sub(original_params) > tolerance {
            return Err(WidthError::InfeasibleBudget {
                achievable: original_params,
                target: target_params,
                tolerance,
            });
        }
    }

    // Depth stage: translate the share of the deficit into whole layers,
    // rounding the removed-layer count up, then grid-search the threshold.
    let per_layer = model
        .layers
        .first()
        .expect("validated non-empty")
        .param_count();
    let depth_budget = (depth_share * deficit as f64).round() as usize;
    let layers_to_remove = if depth_budget == 0 {
        0
    } else {
        depth_budget.div_ceil(per_layer).min(original_layers - 1)
    };

    let (depth_model, depth_report) = if layers_to_remove == 0 {
        (
            model.clone(),
            DepthStageReport {
                applied: false,
                threshold: None,
                plan: Vec::new(),
                target_layer_count: original_layers,
                layer_count_after: original_layers,
                param_count_after: original_params,
            },
        )
    } else {
        let target_layer_count = original_layers - layers_to_remove;
        let (threshold, plan) =
            find_threshold(model, calib, target_layer_count, grid, swm_template)?;
        let merged = replay_plan(model, &plan, swm_template.strategy)?;
        let report = DepthStageReport {
            applied: true,
            threshold: Some(threshold),
            plan: plan.groups.clone(),
            target_layer_count,
            layer_count_after: merged.layer_count(),
            param_count_after: merged.param_count(),
        };
        (merged, report)
    };

    // Width stage: exhaustive over head counts, channel count solved per
    // head count, best |final - target| wins.
    let heads_total = model.config.n_heads;
    let chans_total = model.config.d_ff;
    let mut best: Option<(usize, usize, usize)> = None; // (keep_heads, keep_ffn, predicted)
    for keep_heads in 1..=heads_total {
        for keep_ffn in (1..=chans_total).rev() {
            let predicted = predict_params(
                &depth_model,
                keep_heads,
                keep_ffn,
                &width_template.protected_layers,
            );
            let better = match &best {
                Some((_, _, p)) => predicted.abs_diff(target_params) < p.abs_diff(target_params),
                None => true,
            };
            if better {
                best = Some((keep_heads, keep_ffn, predicted));
            }
            if predicted <= target_params {
                break; // channels only shrink further from here
            }
        }
    }
    let (keep_heads, keep_ffn, predicted) = best.expect("head range is non-empty");
    if predicted.abs_diff(target_params) > tolerance {
        return Err(WidthError::InfeasibleBudget {
            achievable: predicted,
            target: target_params,
            tolerance,
        });
    }

    let width_cfg = WidthPruneConfig {
        head_keep_ratio: keep_heads as f64 / heads_total as f64,
        ffn_keep_ratio: keep_ffn as f64 / chans_total as f64,
        protected_layers: width_template.protected_layers.clone(),
    };
    let final_model = width_prune(&depth_model, &width_cfg)?;
    let final_params = final_model.param_count();
    debug_assert_eq!(final_params, predicted);

    let report = PipelineReport {
        original_param_count: original_params,
        original_layer_count: original_layers,
        target_param_count: target_params,
        depth_share,
        depth: depth_report,
        width: WidthStageReport {
            applied: keep_heads < heads_total || keep_ffn < chans_total,
            head_keep_ratio: width_cfg.head_keep_ratio,
            ffn_keep_ratio: width_cfg.ffn_keep_ratio,
            heads_kept_per_layer: keep_heads,
            ffn_channels_kept_per_layer: keep_ffn,
            param_count_after: final_params,
        },
        final_param_count: final_params,
        final_layer_count: final_model.layer_count(),
        param_reduction: 1.0 - final_params as f64 / original_params as f64,
        layer_reduction: 1.0 - final_model.layer_count() as f64 / original_layers as f64,
    };
    Ok((final_model, report))
}
