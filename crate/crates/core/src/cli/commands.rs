//! Experiment bodies. Each returns plain rows so callers and tests can inspect
//! them before anything touches the filesystem.

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::blocks::BlockGrid;
use crate::error::Result;
use crate::oracle::{build_baseline_pattern, recall, PatternKind};
use crate::pipeline::{estimate_speedup, run_pipeline, summarize, PipelineSummary, SearchSchedule, StepReport};
use crate::search::{fused_online_search, search_mask, SparsityConfig};
use crate::workload::{cross_input_recall, dense_weights, generate_step, lse_drift_stats, region_mass, CrossRecall, LseDrift, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternRow {
    pub sparsity: f64,
    pub pattern: &'static str,
    pub head: usize,
    pub recall: f64,
}

/// Recall of every baseline pattern on the step-1 dense weights.
pub fn pattern_compare(config: &ExperimentConfig) -> Result<Vec<PatternRow>> {
    let weights = dense_weights(&config.workload, 1)?;
    let mut rows = Vec::new();
    for &s in &config.patterns.sparsities {
        for kind in PatternKind::all(config.sparsity.block_size) {
            let mask = build_baseline_pattern(kind, &weights, s)?;
            for (head, r) in recall(&weights, &mask)?.into_iter().enumerate() {
                rows.push(PatternRow {
                    sparsity: s,
                    pattern: kind.name(),
                    head,
                    recall: r,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean recall over heads of `pattern` at `sparsity`.
pub fn aggregate_recall(rows: &[PatternRow], pattern: &str, sparsity: f64) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.pattern == pattern && r.sparsity == sparsity)
        .map(|r| r.recall)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub group: &'static str,
    pub sparsity: f64,
    pub head_adaptive: bool,
    pub row_wise: bool,
    pub text_sink: bool,
    pub warmup: usize,
    pub key_steps: String,
    pub mean_recall: f64,
    pub min_head_recall: f64,
    pub mean_effective_sparsity: f64,
    /// Mean over all steps of the per-step max-abs deviation from full attention.
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub predicted_speedup: f64,
    pub search_fraction: f64,
}

/// Rescales a step written for a 50-step run onto `steps` steps.
pub fn map_step(step: usize, steps: usize) -> usize {
    ((step * steps) as f64 / 50.0).round().clamp(1.0, steps as f64) as usize
}

fn mapped_schedule(warmup: usize, key_steps: &[usize], steps: usize) -> Result<SearchSchedule> {
    let warmup = map_step(warmup, steps);
    let mut keys = vec![warmup];
    keys.extend(key_steps.iter().map(|&k| map_step(k, steps)).filter(|&k| k > warmup));
    keys.dedup();
    SearchSchedule::new(warmup, keys, steps)
}

fn sweep_row(
    config: &ExperimentConfig,
    group: &'static str,
    sparsity: SparsityConfig,
    schedule: &SearchSchedule,
) -> Result<SweepRow> {
    let run = run_pipeline(&config.workload, schedule, &sparsity, true)?;
    let s = summarize(&config.workload, schedule, &sparsity, &run, &config.cost)?;
    let heads = s.per_head_recall.len() as f64;
    Ok(SweepRow {
        group,
        sparsity: sparsity.sparsity,
        head_adaptive: sparsity.head_adaptive,
        row_wise: sparsity.row_wise,
        text_sink: sparsity.text_sink,
        warmup: schedule.warmup(),
        key_steps: join(schedule.key_steps()),
        mean_recall: s.per_head_recall.iter().sum::<f64>() / heads,
        min_head_recall: s.per_head_recall.iter().copied().fold(f64::INFINITY, f64::min),
        mean_effective_sparsity: s.mean_effective_sparsity,
        mean_deviation: s.mean_deviation.unwrap_or(0.0),
        max_deviation: s.max_deviation.unwrap_or(0.0),
        predicted_speedup: s.predicted_speedup,
        search_fraction: s.search_fraction,
    })
}

/// Sparsity grid, head-adaptive on/off, warmup and key-step ablations.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let steps = config.workload.steps;
    let base = config.sparsity;
    let schedule = config.search_schedule()?;
    let mut rows = Vec::new();
    for &s in &config.sweep.grid {
        let cfg = SparsityConfig { sparsity: s, ..base };
        rows.push(sweep_row(config, "sparsity", cfg, &schedule)?);
    }
    for adaptive in [false, true] {
        let cfg = SparsityConfig {
            head_adaptive: adaptive,
            ..base
        };
        rows.push(sweep_row(config, "head_adaptive", cfg, &schedule)?);
    }
    for &tw in &config.sweep.warmups {
        let sched = mapped_schedule(tw, &[30], steps)?;
        rows.push(sweep_row(config, "warmup", base, &sched)?);
    }
    for set in &config.sweep.key_step_sets {
        let Some((&first, rest)) = set.split_first() else {
            continue;
        };
        let sched = mapped_schedule(first, rest, steps)?;
        rows.push(sweep_row(config, "key_steps", base, &sched)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub steps: usize,
    pub sparsity: f64,
    /// `4·L²·D·H`, one layer and step.
    pub attention_per_layer: f64,
    pub non_attention_per_layer: f64,
    pub dense_attention_total: f64,
    pub sparse_attention_total: f64,
    pub non_attention_total: f64,
    pub dense_attention_pflops: f64,
    pub attention_share_dense: f64,
    pub attention_share_sparse: f64,
}

pub fn flops(config: &ExperimentConfig) -> FlopsReport {
    let f = &config.flops;
    let len = f.layout.len() as f64;
    let width = (f.heads * f.head_dim) as f64;
    let attention = 4.0 * len * len * f.head_dim as f64 * f.heads as f64;
    let other = f.non_attention_per_layer.unwrap_or(24.0 * len * width * width);
    let runs = (f.layers * f.steps) as f64;
    let s = config.sparsity.sparsity;
    let dense = attention * runs;
    let sparse = (1.0 - s) * dense;
    let rest = other * runs;
    FlopsReport {
        seq_len: f.layout.len(),
        head_dim: f.head_dim,
        heads: f.heads,
        layers: f.layers,
        steps: f.steps,
        sparsity: s,
        attention_per_layer: attention,
        non_attention_per_layer: other,
        dense_attention_total: dense,
        sparse_attention_total: sparse,
        non_attention_total: rest,
        dense_attention_pflops: dense / 1e15,
        attention_share_dense: dense / (dense + rest),
        attention_share_sparse: sparse / (sparse + rest),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub seconds: f64,
    pub frames: usize,
    pub seq_len: usize,
    pub sparse_density: f64,
    pub predicted_speedup: f64,
    pub search_fraction: f64,
    /// `1/(1-s)`, the speedup of a schedule that is sparse at every step for free.
    pub sparse_bound: f64,
}

/// Predicted speedup per video length under the configured schedule.
pub fn scaling(config: &ExperimentConfig) -> Result<Vec<ScalingRow>> {
    let sc = &config.scaling;
    sc.sparsity.validate()?;
    let schedule = config.search_schedule()?;
    sc.seconds
        .iter()
        .map(|&secs| {
            let layout = sc.layout_for(secs)?;
            let e = estimate_speedup(&layout, &schedule, &sc.sparsity, &config.cost)?;
            Ok(ScalingRow {
                seconds: secs,
                frames: layout.frames(),
                seq_len: layout.len(),
                sparse_density: e.sparse_density,
                predicted_speedup: e.speedup,
                search_fraction: e.search_fraction,
                sparse_bound: 1.0 / (1.0 - sc.sparsity.sparsity),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub mode: &'static str,
    pub mean_recall: Option<f64>,
    pub head_recalls: String,
    pub nominal_sparsity: f64,
    pub effective_sparsity: f64,
    pub flops_ratio: f64,
    pub deviation: Option<f64>,
    pub checksum: String,
}

impl From<&StepReport> for StepRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            mode: r.mode.name(),
            mean_recall: r.recall.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
            head_recalls: r.recall.as_ref().map(|v| join(v)).unwrap_or_default(),
            nominal_sparsity: r.nominal_sparsity,
            effective_sparsity: r.effective_sparsity,
            flops_ratio: r.flops_ratio,
            deviation: r.deviation,
            checksum: format!("{:016x}", r.checksum),
        }
    }
}

/// One pipeline run under the configured schedule.
pub fn run(config: &ExperimentConfig) -> Result<(Vec<StepRow>, PipelineSummary)> {
    config.validate()?;
    let schedule = config.search_schedule()?;
    let run = run_pipeline(&config.workload, &schedule, &config.sparsity, config.compare_full)?;
    let summary = summarize(&config.workload, &schedule, &config.sparsity, &run, &config.cost)?;
    Ok((run.reports.iter().map(StepRow::from).collect(), summary))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub seed: u64,
    pub sparsity: f64,
    pub block_size: usize,
    /// Mean weight mass of an intra-frame region over that of an inter-frame region.
    pub region_mass_ratio: f64,
    /// Jaccard similarity of searched masks at consecutive steps.
    pub step_jaccard: Vec<f64>,
    /// Step-1 optimal mask of this seed applied to the next seed.
    pub cross_seed: CrossRecall,
    pub lse_drift: Vec<LseDrift>,
}

/// Step-to-step mask and LSE stability, frame structure and seed dependence.
pub fn stability(config: &ExperimentConfig) -> Result<StabilityReport> {
    let spec = &config.workload;
    spec.validate()?;
    let cfg = config.sparsity;
    cfg.validate()?;
    let grid = BlockGrid::new(spec.len(), cfg.block_size)?;
    let (intra, inter) = region_mass(&dense_weights(spec, 1)?, &spec.layout);
    let masks = (1..=spec.steps)
        .map(|step| {
            let t = generate_step(spec, step)?;
            let (_, scores) = fused_online_search(&t.q, &t.k, &t.v, &grid)?;
            search_mask(&scores, &spec.layout, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let other = WorkloadSpec {
        seed: spec.seed.wrapping_add(1),
        ..spec.clone()
    };
    let steps: Vec<usize> = (1..=spec.steps).collect();
    Ok(StabilityReport {
        seed: spec.seed,
        sparsity: cfg.sparsity,
        block_size: cfg.block_size,
        region_mass_ratio: intra / inter,
        step_jaccard: masks.windows(2).map(|w| w[0].jaccard(&w[1])).collect(),
        cross_seed: cross_input_recall(spec, &other, cfg.sparsity, cfg.block_size)?,
        lse_drift: if steps.len() >= 2 {
            lse_drift_stats(spec, &steps)?
        } else {
            Vec::new()
        },
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}
