//! `swm` — compress small transformer models by merging redundant layers.
//!
//! The subcommands cover the full pipeline: synthesize a fixture model,
//! generate calibration data, inspect layer similarity, compress, sweep
//! thresholds, prune width, evaluate, benchmark, and verify a compressed
//! model against its plan.
//!
//! Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.
//! Failures print a single `error: ...` line to stderr.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use swm_core::calib::CalibSet;
use swm_core::cka::{export_heatmap, layer_cka_matrix, HeatmapFormat};
use swm_core::eval::{latency_bench, perplexity, threshold_sweep, write_sweep_csv};
use swm_core::merge::MergeStrategy;
use swm_core::model::{synthesize, Model, ModelConfig, PatchSpec};
use swm_core::swm::{
    calibration_similarity, compress, find_threshold, load_plan, replay_plan, save_plan,
    CommitPolicy, MergePlan, Pooling, SwmConfig, SwmLog,
};
use swm_core::width::{pipeline, width_prune, WidthPruneConfig};

#[derive(Parser)]
#[command(
    name = "swm",
    version,
    about = "Layer-merging depth compression for toy transformer models"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores; bench always runs single-threaded)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SwmFlags {
    /// Similarity threshold T in (0, 1)
    #[arg(long, default_value_t = 0.99)]
    threshold: f64,
    /// Lowest mergeable layer id
    #[arg(long, default_value_t = 2)]
    lo: usize,
    /// Highest mergeable layer id, or "auto" for n_layers - 2
    #[arg(long, default_value = "auto")]
    hi: String,
    /// Merge strategy: delete | average | diff
    #[arg(long, default_value = "diff")]
    strategy: String,
    /// Commit policy: last-valid | as-written
    #[arg(long, default_value = "last-valid")]
    policy: String,
    /// Hidden-state pooling: flatten-all | final-token
    #[arg(long, default_value = "flatten-all")]
    pooling: String,
}

impl SwmFlags {
    fn build(&self, n_layers: usize) -> Result<SwmConfig> {
        let hi = match self.hi.as_str() {
            "auto" => n_layers.saturating_sub(2),
            other => other.parse().context("--hi must be a layer id or 'auto'")?,
        };
        Ok(SwmConfig {
            threshold: self.threshold,
            lo_bound: self.lo,
            hi_bound: hi,
            strategy: MergeStrategy::parse(&self.strategy)
                .ok_or_else(|| anyhow!("unknown strategy '{}'", self.strategy))?,
            pooling: Pooling::parse(&self.pooling)
                .ok_or_else(|| anyhow!("unknown pooling '{}'", self.pooling))?,
            commit_policy: CommitPolicy::parse(&self.policy)
                .ok_or_else(|| anyhow!("unknown policy '{}'", self.policy))?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a model with optional redundant layer patches
    Synth {
        /// Model config: a JSON file path, or inline JSON starting with '{'
        #[arg(long)]
        config: String,
        /// Patches as start:len:epsilon, comma separated (e.g. "3:4:0.001")
        #[arg(long, default_value = "")]
        patches: String,
        #[arg(long, default_value_t = 0.1)]
        residual_scale: f32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic calibration set (JSON-lines)
    GenCalib {
        #[arg(long)]
        vocab: u32,
        #[arg(long, default_value_t = 10)]
        seqs: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise layer-similarity heatmap (CSV and/or PGM)
    Cka {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 1024)]
        token_cap: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Compress a model by sliding-window layer merging
    Compact {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[command(flatten)]
        swm: SwmFlags,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the merge plan JSON
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Compression sweep over thresholds and strategies (CSV)
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Comma-separated threshold list
        #[arg(long, default_value = "0.95,0.9,0.85,0.8,0.75,0.7,0.65")]
        thresholds: String,
        /// Comma-separated strategies
        #[arg(long, default_value = "delete,average,diff")]
        strategies: String,
        #[command(flatten)]
        swm: SwmFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Largest threshold in a grid that reaches a target layer count
    ThresholdSearch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        target_layers: usize,
        /// Ascending comma-separated threshold grid
        #[arg(long, default_value = "0.65,0.7,0.75,0.8,0.85,0.9,0.95")]
        grid: String,
        #[command(flatten)]
        swm: SwmFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Next-token perplexity of a model over a corpus
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Greedy-generation latency/throughput benchmark
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        gen: usize,
        #[arg(long, default_value_t = 12)]
        prompt: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Write the result JSON here as well as stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Structured width pruning (attention heads + FFN channels)
    WidthPrune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        head_keep: f64,
        #[arg(long, default_value_t = 1.0)]
        ffn_keep: f64,
        /// Comma-separated original layer ids to leave untouched
        #[arg(long, default_value = "")]
        protect: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combined depth-then-width compression to a parameter target
    Pipeline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Fraction of the parameter deficit assigned to layer merging
        #[arg(long, default_value_t = 0.5)]
        depth_share: f64,
        /// Total parameter reduction, e.g. 0.35 for a 35% cut
        #[arg(long)]
        target_ratio: f64,
        /// Ascending threshold grid for the depth stage
        #[arg(
            long,
            default_value = "0.5,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95,0.97,0.99"
        )]
        grid: String,
        #[command(flatten)]
        swm: SwmFlags,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replay a plan against the original model and check the gate
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        original: PathBuf,
        /// Needed for the gate-soundness recheck; replay-only without it
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "flatten-all")]
        pooling: String,
    },
}

fn parse_patches(arg: &str) -> Result<Vec<PatchSpec>> {
    let mut patches = Vec::new();
    for part in arg.split(',').filter(|p| !p.trim().is_empty()) {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() != 3 {
            bail!("patch '{part}' is not start:len:epsilon");
        }
        patches.push(PatchSpec {
            start: fields[0].parse().context("patch start")?,
            len: fields[1].parse().context("patch len")?,
            epsilon: fields[2].parse().context("patch epsilon")?,
        });
    }
    Ok(patches)
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number '{p}'"))
        })
        .collect()
}

fn parse_strategies(s: &str) -> Result<Vec<MergeStrategy>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| MergeStrategy::parse(p.trim()).ok_or_else(|| anyhow!("unknown strategy '{p}'")))
        .collect()
}

fn load_config(arg: &str) -> Result<ModelConfig> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading config {arg}"))?
    };
    let cfg: ModelConfig = serde_json::from_str(&text).context("parsing model config JSON")?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            config,
            patches,
            residual_scale,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let patches = parse_patches(&patches)?;
            let model = synthesize(cfg, &patches, residual_scale, seed)?;
            model.save(&out)?;
            println!(
                "wrote {} ({} layers, {} params)",
                out.display(),
                model.layer_count(),
                model.param_count()
            );
        }
        Command::GenCalib {
            vocab,
            seqs,
            len,
            seed,
            out,
        } => {
            let set = CalibSet::generate(vocab, seqs, len, seed)?;
            set.save(&out)?;
            println!(
                "wrote {} ({} sequences of {} tokens)",
                out.display(),
                seqs,
                len
            );
        }
        Command::Cka {
            model,
            calib,
            token_cap,
            csv,
            pgm,
        } => {
            let model = Model::load(&model)?;
            let calib = CalibSet::load(&calib)?;
            let matrix = layer_cka_matrix(&model, &calib, token_cap)?;
            if !matrix.degenerate_layers.is_empty() {
                eprintln!(
                    "warning: degenerate representations at boundaries {:?}; their similarities are reported as 0",
                    matrix.degenerate_layers
                );
            }
            if let Some(path) = &csv {
                export_heatmap(&matrix, path, HeatmapFormat::Csv)?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = &pgm {
                export_heatmap(&matrix, path, HeatmapFormat::Pgm)?;
                println!("wrote {}", path.display());
            }
            let dim = matrix.dim();
            let mut off_diag_min = 1.0f32;
            for i in 0..dim {
                for j in 0..dim {
                    if i != j {
                        off_diag_min = off_diag_min.min(matrix.values.get(i, j));
                    }
                }
            }
            println!("{dim}x{dim} heatmap; min off-diagonal similarity {off_diag_min:.4}");
        }
        Command::Compact {
            model,
            calib,
            swm,
            out,
            plan,
        } => {
            let original = Model::load(&model)?;
            let calib = CalibSet::load(&calib)?;
            let cfg = swm.build(original.layer_count())?;
            let (compressed, merge_plan, log) = compress(&original, &cfg, &calib)?;
            compressed.save(&out)?;
            if let Some(plan_path) = &plan {
                save_plan(&merge_plan, &log, plan_path)?;
            }
            println!(
                "{} -> {} layers; plan {}",
                original.layer_count(),
                compressed.layer_count(),
                merge_plan.format_groups()
            );
        }
        Command::Sweep {
            model,
            calib,
            thresholds,
            strategies,
            swm,
            out,
        } => {
            let model = Model::load(&model)?;
            let calib = CalibSet::load(&calib)?;
            let template = swm.build(model.layer_count())?;
            let thresholds = parse_f64_list(&thresholds)?;
            let strategies = parse_strategies(&strategies)?;
            let rows = threshold_sweep(&model, &calib, &thresholds, &strategies, &template)?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            std::fs::write(&out, &buf)?;
            for row in &rows {
                println!("{} | {}", row.strategy, row.plan_summary());
            }
            println!("wrote {}", out.display());
        }
        Command::ThresholdSearch {
            model,
            calib,
            target_layers,
            grid,
            swm,
            out,
        } => {
            let model = Model::load(&model)?;
            let calib = CalibSet::load(&calib)?;
            let template = swm.build(model.layer_count())?;
            let grid = parse_f64_list(&grid)?;
            let (threshold, plan) =
                find_threshold(&model, &calib, target_layers, &grid, &template)?;
            println!(
                "threshold {threshold} reaches <= {target_layers} layers: {}",
                plan.format_groups()
            );
            if let Some(path) = &out {
                let log = SwmLog {
                    threshold,
                    strategy: template.strategy,
                    steps: Vec::new(),
                    final_layer_count: model.layer_count()
                        - plan.groups.iter().map(|g| g.len() - 1).sum::<usize>(),
                };
                save_plan(&plan, &log, path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { model, corpus } => {
            let model = Model::load(&model)?;
            let corpus = CalibSet::load(&corpus)?;
            let ppl = perplexity(&model, &corpus)?;
            println!("perplexity {ppl:.6}");
        }
        Command::Bench {
            model,
            batch,
            gen,
            prompt,
            runs,
            warmup,
            out,
        } => {
            let model = Model::load(&model)?;
            let result = latency_bench(&model, batch, prompt, gen, runs, warmup)?;
            let json = serde_json::to_string_pretty(&result)?;
            println!("{json}");
            if let Some(path) = &out {
                std::fs::write(path, format!("{json}\n"))?;
            }
        }
        Command::WidthPrune {
            model,
            head_keep,
            ffn_keep,
            protect,
            out,
        } => {
            let model = Model::load(&model)?;
            let protected: BTreeSet<usize> = protect
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse::<usize>().context("bad --protect id"))
                .collect::<Result<_>>()?;
            let cfg = WidthPruneConfig {
                head_keep_ratio: head_keep,
                ffn_keep_ratio: ffn_keep,
                protected_layers: protected,
            };
            let pruned = width_prune(&model, &cfg)?;
            pruned.save(&out)?;
            let shown = pruned
                .layers
                .iter()
                .position(|l| !cfg.protected_layers.contains(&l.original_index))
                .unwrap_or(0);
            println!(
                "params {} -> {} ({} heads, {} channels per unprotected layer)",
                model.param_count(),
                pruned.param_count(),
                pruned.layer_head_count(shown),
                pruned.layers[shown].ffn_channels()
            );
        }
        Command::Pipeline {
            model,
            calib,
            depth_share,
            target_ratio,
            grid,
            swm,
            out,
            report,
        } => {
            if !(0.0..1.0).contains(&target_ratio) {
                bail!("--target-ratio must be in [0, 1)");
            }
            let model = Model::load(&model)?;
            let calib = CalibSet::load(&calib)?;
            let template = swm.build(model.layer_count())?;
            let grid = parse_f64_list(&grid)?;
            let target = ((1.0 - target_ratio) * model.param_count() as f64).round() as usize;
            let width_template = WidthPruneConfig::keep_all();
            let (pruned, rep) = pipeline(
                &model,
                depth_share,
                target,
                &template,
                &grid,
                &width_template,
                &calib,
            )?;
            pruned.save(&out)?;
            let json = serde_json::to_string_pretty(&rep)?;
            if let Some(path) = &report {
                std::fs::write(path, format!("{json}\n"))?;
            }
            println!("{json}");
        }
        Command::Verify {
            model,
            plan,
            original,
            calib,
            pooling,
        } => {
            let pruned = Model::load(&model)?;
            let original = Model::load(&original)?;
            let doc = load_plan(&plan)?;
            let merge_plan: MergePlan = doc.plan();
            let replayed = replay_plan(&original, &merge_plan, doc.strategy)?;
            if !replayed.bitwise_eq(&pruned) {
                bail!("replaying the plan does not reproduce the pruned model");
            }
            println!("replay: ok ({} layers)", pruned.layer_count());
            match calib {
                Some(calib_path) => {
                    let calib = CalibSet::load(&calib_path)?;
                    let pool = Pooling::parse(&pooling)
                        .ok_or_else(|| anyhow!("unknown pooling '{pooling}'"))?;
                    let mut plan_so_far = MergePlan::empty();
                    for group in &merge_plan.groups {
                        plan_so_far.groups.push(group.clone());
                        let partial = replay_plan(&original, &plan_so_far, doc.strategy)?;
                        let s = calibration_similarity(&original, &partial, &calib, pool)?;
                        if s <= doc.threshold - 1e-6 {
                            bail!(
                                "gate violation: cumulative similarity {s:.6} <= threshold {} after group {:?}",
                                doc.threshold,
                                group
                            );
                        }
                        println!(
                            "gate: group {group:?} similarity {s:.6} > {}",
                            doc.threshold
                        );
                    }
                    println!("gate: ok ({} groups)", merge_plan.groups.len());
                }
                None => println!("gate: skipped (no --calib given)"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut workers = cli.workers;
    if let Command::Bench { .. } = &cli.command {
        workers = Some(1); // timing requires an otherwise idle process
    }
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
