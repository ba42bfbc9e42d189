//! Evaluation harness: next-token perplexity, wall-clock generation
//! benchmarking, threshold sweeps across merge strategies, and plan
//! agreement across calibration sets.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibSet;
use crate::merge::MergeStrategy;
use crate::model::{Model, ModelError};
use crate::swm::{calibration_similarity, compress, MergePlan, SwmConfig, SwmError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("prompt {prompt} + generation {gen} exceeds max_seq {max}")]
    SequenceOverflow {
        prompt: usize,
        gen: usize,
        max: usize,
    },
    #[error("need at least {need} calibration sets, got {got}")]
    TooFewSets { need: usize, got: usize },
    #[error("benchmark needs runs >= 1")]
    NoRuns,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Swm(#[from] SwmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Next-token perplexity over every position of every sequence:
/// exp of the mean token-level negative log-likelihood, log-sum-exp stable.
pub fn perplexity(model: &Model, corpus: &CalibSet) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_sequence: Vec<(f64, usize)> = corpus
        .sequences()
        .par_iter()
        .map(|seq| -> Result<(f64, usize), EvalError> {
            let trace = model.forward(seq)?;
            let mut nll = 0.0f64;
            for pos in 0..seq.len() - 1 {
                let row = trace.logits.row(pos);
                let target = seq[pos + 1] as usize;
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                for v in row {
                    sum += ((*v as f64) - max).exp();
                }
                let lse = max + sum.ln();
                nll -= row[target] as f64 - lse;
            }
            Ok((nll, seq.len() - 1))
        })
        .collect::<Result<_, _>>()?;
    let total_nll: f64 = per_sequence.iter().map(|(n, _)| n).sum();
    let positions: usize = per_sequence.iter().map(|(_, c)| c).sum();
    Ok((total_nll / positions as f64).exp())
}

/// Timing result of greedy generation. `tokens_per_s` is
/// `batch * gen_len / latency_s` by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    #[serde(rename = "M")]
    pub batch: usize,
    pub gen_len: usize,
    pub runs: usize,
    pub warmup: usize,
    pub latency_s: f64,
    pub tokens_per_s: f64,
}

fn greedy_generate(model: &Model, prompt: &[u32], gen_len: usize) -> Result<Vec<u32>, EvalError> {
    let mut tokens = prompt.to_vec();
    for _ in 0..gen_len {
        // Full-sequence re-forward each step; no KV cache, so per-token cost
        // scales with layer count — the effect the benchmark measures.
        let trace = model.forward(&tokens)?;
        let row = trace.logits.row(tokens.len() - 1);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
    }
    Ok(tokens)
}

/// Wall-clock benchmark of greedy token-by-token generation.
///
/// One "run" generates `gen_len` tokens for each of `batch` prompts of
/// `prompt_len` tokens; `warmup` untimed runs precede `runs` timed ones and
/// the reported latency is the mean per-run seconds. Must be executed
/// without concurrent load for the numbers to mean anything.
pub fn latency_bench(
    model: &Model,
    batch: usize,
    prompt_len: usize,
    gen_len: usize,
    runs: usize,
    warmup: usize,
) -> Result<BenchResult, EvalError> {
    if runs < 1 {
        return Err(EvalError::NoRuns);
    }
    if prompt_len == 0 || prompt_len + gen_len > model.config.max_seq {
        return Err(EvalError::SequenceOverflow {
            prompt: prompt_len,
            gen: gen_len,
            max: model.config.max_seq,
        });
    }
    let vocab = model.config.vocab_size as u32;
    let prompt: Vec<u32> = (0..prompt_len as u32).map(|i| i % vocab).collect();

    for _ in 0..warmup {
        greedy_generate(model, &prompt, gen_len)?;
    }
    let mut total = 0.0f64;
    for _ in 0..runs {
        let start = Instant::now();
        for _ in 0..batch {
            greedy_generate(model, &prompt, gen_len)?;
        }
        total += start.elapsed().as_secs_f64();
    }
    let latency_s = total / runs as f64;
    Ok(BenchResult {
        batch,
        gen_len,
        runs,
        warmup,
        latency_s,
        tokens_per_s: (batch * gen_len) as f64 / latency_s,
    })
}

/// One sweep cell: a full compression run at (strategy, threshold) plus the
/// quality metrics of the result.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub strategy: MergeStrategy,
    pub threshold: f64,
    pub layer_count: usize,
    pub cal_sim: f64,
    pub perplexity: f64,
    pub groups: MergePlan,
}

impl SweepRow {
    /// Table line in the conventional published form:
    /// `0.75 | 26 | [[26, 27, 28, 29, 30], [24, 25], [9, 10]]`.
    pub fn plan_summary(&self) -> String {
        format!(
            "{} | {} | {}",
            self.threshold,
            self.layer_count,
            self.groups.format_groups()
        )
    }
}

fn strategy_order(s: MergeStrategy) -> usize {
    match s {
        MergeStrategy::Delete => 0,
        MergeStrategy::Average => 1,
        MergeStrategy::Diff => 2,
    }
}

/// Runs compression at every (strategy, threshold) cell. Rows come back
/// sorted by strategy (delete, average, diff) then descending threshold,
/// and the whole computation is deterministic.
pub fn threshold_sweep(
    model: &Model,
    calib: &CalibSet,
    thresholds: &[f64],
    strategies: &[MergeStrategy],
    template: &SwmConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut cells: Vec<(MergeStrategy, f64)> = Vec::new();
    for &s in strategies {
        for &t in thresholds {
            cells.push((s, t));
        }
    }
    let mut rows: Vec<SweepRow> = cells
        .into_par_iter()
        .map(|(strategy, threshold)| -> Result<SweepRow, EvalError> {
            let cfg = SwmConfig {
                threshold,
                strategy,
                ..template.clone()
            };
            let (compressed, plan, _) = compress(model, &cfg, calib)?;
            let cal_sim = calibration_similarity(model, &compressed, calib, cfg.pooling)?;
            let ppl = perplexity(&compressed, calib)?;
            Ok(SweepRow {
                strategy,
                threshold,
                layer_count: compressed.layer_count(),
                cal_sim,
                perplexity: ppl,
                groups: plan,
            })
        })
        .collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| {
        strategy_order(a.strategy)
            .cmp(&strategy_order(b.strategy))
            .then(
                b.threshold
                    .partial_cmp(&a.threshold)
                    .expect("finite thresholds"),
            )
    });
    Ok(rows)
}

/// Fixed-header CSV of sweep rows. Thresholds print in their shortest form
/// and metrics with 6 decimals, so repeated sweeps are byte-identical.
pub fn write_sweep_csv(rows: &[SweepRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "strategy,threshold,layer_count,cal_sim,perplexity")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6}",
            r.strategy, r.threshold, r.layer_count, r.cal_sim, r.perplexity
        )?;
    }
    Ok(())
}

fn jaccard(a: &MergePlan, b: &MergePlan) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<&Vec<usize>> = a.groups.iter().collect();
    let sb: BTreeSet<&Vec<usize>> = b.groups.iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0; // two empty plans agree perfectly, by convention
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Mean pairwise Jaccard similarity of the merge plans produced with each
/// calibration set (groups compared as exact original-index tuples).
pub fn calib_robustness(
    model: &Model,
    cfg: &SwmConfig,
    calib_sets: &[CalibSet],
) -> Result<f64, EvalError> {
    if calib_sets.len() < 2 {
        return Err(EvalError::TooFewSets {
            need: 2,
            got: calib_sets.len(),
        });
    }
    let plans: Vec<MergePlan> = calib_sets
        .par_iter()
        .map(|calib| compress(model, cfg, calib).map(|(_, plan, _)| plan))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            total += jaccard(&plans[i], &plans[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
