//! Sliding-window merging: greedy top-down consolidation of consecutive
//! layers, gated by the cosine similarity between the compressed and the
//! original model's final hidden states on a calibration set.
//!
//! The window starts at the top of the eligible range `[lo_bound, hi_bound]`
//! and grows downward while the merged candidate stays above the similarity
//! threshold. Two commit policies are provided:
//!
//! - `LastValid` (default): when an expansion fails the gate, commit the
//!   largest extent that still passed, then restart the window just below
//!   it. Every committed group is guaranteed to satisfy the gate.
//! - `AsWritten`: commit the candidate that just failed the gate and restart
//!   below, with the loop index still stepped down each iteration so the
//!   procedure terminates. Kept for fidelity comparisons.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibSet;
use crate::merge::{apply_merge_by_original_ids, MergeError, MergeStrategy};
use crate::model::{Model, ModelError};
use crate::tensor::{cosine, TensorError};

#[derive(Debug, Error)]
pub enum SwmError {
    #[error("invalid sliding-window config: {0}")]
    InvalidConfig(String),
    #[error("threshold grid is empty or not sorted ascending")]
    BadGrid,
    #[error("no grid threshold reaches <= {target} layers (best was {best})")]
    InfeasibleTarget { target: usize, best: usize },
    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("plan file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the final hidden-state matrices are reduced to vectors for cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Flatten the whole seq x d matrix; uses every token position.
    FlattenAll,
    /// Compare only the final position's row.
    FinalToken,
}

impl Pooling {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flatten-all" | "flatten-all-tokens" => Some(Self::FlattenAll),
            "final-token" => Some(Self::FinalToken),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommitPolicy {
    LastValid,
    AsWritten,
}

impl CommitPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "last-valid" => Some(Self::LastValid),
            "as-written" => Some(Self::AsWritten),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwmConfig {
    pub threshold: f64,
    pub lo_bound: usize,
    pub hi_bound: usize,
    pub strategy: MergeStrategy,
    pub pooling: Pooling,
    pub commit_policy: CommitPolicy,
}

impl SwmConfig {
    /// Conventional defaults: protect the two bottom layers and the layers
    /// above `n_layers - 2`; flatten-all pooling; last-valid commits.
    pub fn defaults_for(n_layers: usize, threshold: f64, strategy: MergeStrategy) -> Self {
        Self {
            threshold,
            lo_bound: 2.min(n_layers.saturating_sub(2)),
            hi_bound: n_layers.saturating_sub(2),
            strategy,
            pooling: Pooling::FlattenAll,
            commit_policy: CommitPolicy::LastValid,
        }
    }

    fn validate(&self, model: &Model) -> Result<(), SwmError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SwmError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        let n = model.layer_count();
        if !(self.lo_bound < self.hi_bound && self.hi_bound < n) {
            return Err(SwmError::InvalidConfig(format!(
                "bounds [{}, {}] invalid for {n} layers",
                self.lo_bound, self.hi_bound
            )));
        }
        for (pos, layer) in model.layers.iter().enumerate() {
            if layer.original_index != pos {
                return Err(SwmError::InvalidConfig(
                    "input model must be unmerged (original_index == position)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Committed merge groups as lists of original layer ids, in top-down
/// discovery order (descending start index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
}

impl MergePlan {
    pub fn empty() -> Self {
        Self { groups: Vec::new() }
    }

    /// Structural validation: every group has at least 2 contiguous ids and
    /// groups are listed descending by start index. Groups must be disjoint,
    /// except that a later group may end exactly at an earlier group's start
    /// index — that is the chain an as-written run leaves when it merges
    /// further into an already-committed composite, and replaying the groups
    /// in order resolves it through the composite's label.
    pub fn validate(&self) -> Result<(), SwmError> {
        let err = |msg: String| Err(SwmError::InvalidPlan(msg));
        for g in &self.groups {
            if g.len() < 2 {
                return err(format!("group {g:?} has fewer than 2 layers"));
            }
            if g.windows(2).any(|w| w[1] != w[0] + 1) {
                return err(format!("group {g:?} is not contiguous"));
            }
        }
        for (i, later) in self.groups.iter().enumerate() {
            for earlier in &self.groups[..i] {
                let lo = later[0].max(earlier[0]);
                let hi = (*later.last().unwrap()).min(*earlier.last().unwrap());
                if lo > hi {
                    continue; // disjoint
                }
                let chains = lo == hi && hi == earlier[0] && hi == *later.last().unwrap();
                if !chains {
                    return err(format!("groups {earlier:?} and {later:?} overlap"));
                }
            }
        }
        if self.groups.windows(2).any(|w| w[0][0] <= w[1][0]) {
            return err("groups must be sorted descending by start index".into());
        }
        Ok(())
    }

    /// Display form matching published layer tables,
    /// e.g. `[[25, 26, 27, 28, 29, 30], [10, 11]]`.
    pub fn format_groups(&self) -> String {
        let inner: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let ids: Vec<String> = g.iter().map(|i| i.to_string()).collect();
                format!("[{}]", ids.join(", "))
            })
            .collect();
        format!("[{}]", inner.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepDecision {
    /// Similarity passed; the window will grow downward.
    Expand,
    /// Similarity failed and a pending extent was committed.
    Commit,
    /// Similarity failed with nothing to commit; the window slides down.
    RejectSlide,
}

/// One gate evaluation: the tried window in original ids, its similarity,
/// and what the loop did about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwmStep {
    pub window: [usize; 2],
    pub similarity: f64,
    pub decision: StepDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwmLog {
    pub threshold: f64,
    pub strategy: MergeStrategy,
    pub steps: Vec<SwmStep>,
    pub final_layer_count: usize,
}

/// Mean cosine similarity between two models' final hidden states over the
/// calibration sequences. Always compares against the same pooling of both.
pub fn calibration_similarity(
    original: &Model,
    candidate: &Model,
    calib: &CalibSet,
    pooling: Pooling,
) -> Result<f64, SwmError> {
    let per_sequence: Vec<f64> = calib
        .sequences()
        .par_iter()
        .map(|seq| -> Result<f64, SwmError> {
            let a = original.last_hidden(seq)?;
            let b = candidate.last_hidden(seq)?;
            let sim = match pooling {
                Pooling::FlattenAll => cosine(a.data(), b.data())?,
                Pooling::FinalToken => cosine(a.row(a.rows() - 1), b.row(b.rows() - 1))?,
            };
            Ok(sim)
        })
        .collect::<Result<_, _>>()?;
    let sum: f64 = per_sequence.iter().sum();
    Ok(sum / per_sequence.len() as f64)
}

/// Runs the sliding-window merging loop. Returns the compressed model, the
/// committed plan, and the full decision trace. Replaying the plan over the
/// original model reproduces the output bitwise.
pub fn compress(
    model: &Model,
    cfg: &SwmConfig,
    calib: &CalibSet,
) -> Result<(Model, MergePlan, SwmLog), SwmError> {
    cfg.validate(model)?;
    let mut committed = model.clone();
    let mut plan = MergePlan::empty();
    let mut steps = Vec::new();

    let mut hi = cfg.hi_bound;
    let mut lo = hi.wrapping_sub(1);
    // Candidate that last passed the gate, with its extent (LastValid only).
    let mut last_valid: Option<(Model, Vec<usize>)> = None;

    let commit =
        |committed: &mut Model, plan: &mut MergePlan, pending: Option<(Model, Vec<usize>)>| {
            if let Some((model, group)) = pending {
                *committed = model;
                plan.groups.push(group);
            }
        };

    while lo >= cfg.lo_bound && lo < hi {
        let ids: Vec<usize> = (lo..=hi).collect();
        let candidate = apply_merge_by_original_ids(&committed, &ids, cfg.strategy)?;
        let similarity = calibration_similarity(model, &candidate, calib, cfg.pooling)?;
        let passed = similarity > cfg.threshold;

        match cfg.commit_policy {
            CommitPolicy::LastValid => {
                if passed {
                    steps.push(SwmStep {
                        window: [lo, hi],
                        similarity,
                        decision: StepDecision::Expand,
                    });
                    last_valid = Some((candidate, ids));
                    if lo == 0 {
                        break;
                    }
                    lo -= 1;
                } else {
                    let decision = if last_valid.is_some() {
                        StepDecision::Commit
                    } else {
                        StepDecision::RejectSlide
                    };
                    steps.push(SwmStep {
                        window: [lo, hi],
                        similarity,
                        decision,
                    });
                    commit(&mut committed, &mut plan, last_valid.take());
                    hi = lo;
                    if lo == 0 {
                        break;
                    }
                    lo = hi - 1;
                }
            }
            CommitPolicy::AsWritten => {
                if passed {
                    steps.push(SwmStep {
                        window: [lo, hi],
                        similarity,
                        decision: StepDecision::Expand,
                    });
                } else {
                    steps.push(SwmStep {
                        window: [lo, hi],
                        similarity,
                        decision: StepDecision::Commit,
                    });
                    commit(&mut committed, &mut plan, Some((candidate, ids)));
                    hi = lo;
                }
                if lo == 0 {
                    break;
                }
                lo -= 1;
            }
        }
    }
    // A window still passing when the range bottoms out is committed.
    commit(&mut committed, &mut plan, last_valid.take());

    plan.validate()?;
    let log = SwmLog {
        threshold: cfg.threshold,
        strategy: cfg.strategy,
        steps,
        final_layer_count: committed.layer_count(),
    };
    Ok((committed, plan, log))
}

/// Applies a plan's groups (top-down) to an unmerged model.
pub fn replay_plan(
    model: &Model,
    plan: &MergePlan,
    strategy: MergeStrategy,
) -> Result<Model, SwmError> {
    plan.validate()?;
    let mut out = model.clone();
    for group in &plan.groups {
        out = apply_merge_by_original_ids(&out, group, strategy)?;
    }
    Ok(out)
}

/// Grid search for the largest threshold whose compression reaches at most
/// `target_layer_count` layers. The grid must be sorted ascending.
pub fn find_threshold(
    model: &Model,
    calib: &CalibSet,
    target_layer_count: usize,
    grid: &[f64],
    template: &SwmConfig,
) -> Result<(f64, MergePlan), SwmError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SwmError::BadGrid);
    }
    if target_layer_count < 1 {
        return Err(SwmError::InvalidConfig(
            "target layer count must be >= 1".into(),
        ));
    }
    let mut best = usize::MAX;
    for &threshold in grid.iter().rev() {
        let cfg = SwmConfig {
            threshold,
            ..template.clone()
        };
        let (compressed, plan, _) = compress(model, &cfg, calib)?;
        let count = compressed.layer_count();
        best = best.min(count);
        if count <= target_layer_count {
            return Ok((threshold, plan));
        }
    }
    Err(SwmError::InfeasibleTarget {
        target: target_layer_count,
        best,
    })
}

/// On-disk plan document: the committed groups plus the run parameters and
/// decision trace. `steps` and `final_layer_count` are optional on input so
/// externally written plans can omit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub groups: Vec<Vec<usize>>,
    pub threshold: f64,
    pub strategy: MergeStrategy,
    #[serde(default)]
    pub steps: Vec<SwmStep>,
    #[serde(default)]
    pub final_layer_count: Option<usize>,
}

impl PlanDocument {
    pub fn plan(&self) -> MergePlan {
        MergePlan {
            groups: self.groups.clone(),
        }
    }
}

pub fn save_plan(plan: &MergePlan, log: &SwmLog, path: impl AsRef<Path>) -> Result<(), SwmError> {
    let doc = PlanDocument {
        groups: plan.groups.clone(),
        threshold: log.threshold,
        strategy: log.strategy,
        steps: log.steps.clone(),
        final_layer_count: Some(log.final_layer_count),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<PlanDocument, SwmError> {
    let doc: PlanDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    doc.plan().validate()?;
    if !(doc.threshold > 0.0 && doc.threshold < 1.0) {
        return Err(SwmError::InvalidPlan(format!(
            "threshold {} outside (0, 1)",
            doc.threshold
        )));
    }
    Ok(doc)
}
