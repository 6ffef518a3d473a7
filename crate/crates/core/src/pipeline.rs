//! Multi-step schedule: warmup, fused search, cached searches, sparse steps.
//!
//! Steps `1..t_w` run full attention. Step `t_w` is the first key step: it runs
//! the fused search, whose first pass is the step's full-attention output and
//! whose LSE is cached. Every later key step reprices that step's logits with
//! the cached LSE, builds a new mask and runs sparsely with it; other steps
//! reuse the most recent mask.

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockGrid, BlockMask};
use crate::error::{Error, Result};
use crate::flash::flash_forward;
use crate::layout::SequenceLayout;
use crate::search::{fused_online_search, lse_cached_search, recall_from_scores, search_mask, SparsityConfig};
use crate::sparse::{block_sparse_forward, flop_count};
use crate::tensor::{AttnTensor, LseVector};
use crate::workload::{generate_step, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleFields", into = "ScheduleFields")]
pub struct SearchSchedule {
    warmup: usize,
    key_steps: Vec<usize>,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFields {
    warmup: usize,
    key_steps: Vec<usize>,
    steps: usize,
}

impl TryFrom<ScheduleFields> for SearchSchedule {
    type Error = Error;

    fn try_from(f: ScheduleFields) -> Result<Self> {
        SearchSchedule::new(f.warmup, f.key_steps, f.steps)
    }
}

impl From<SearchSchedule> for ScheduleFields {
    fn from(s: SearchSchedule) -> Self {
        ScheduleFields {
            warmup: s.warmup,
            key_steps: s.key_steps,
            steps: s.steps,
        }
    }
}

impl SearchSchedule {
    pub fn new(warmup: usize, key_steps: Vec<usize>, steps: usize) -> Result<Self> {
        if warmup == 0 {
            return Err(Error::InvalidSchedule("warmup must be at least 1".into()));
        }
        if key_steps.first() != Some(&warmup) {
            return Err(Error::InvalidSchedule(format!(
                "first key step must equal the warmup step {warmup}, got {key_steps:?}"
            )));
        }
        if key_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule(format!(
                "key steps must be strictly increasing, got {key_steps:?}"
            )));
        }
        if key_steps.last().is_some_and(|&k| k > steps) {
            return Err(Error::InvalidSchedule(format!(
                "key steps {key_steps:?} exceed the {steps} total steps"
            )));
        }
        Ok(Self {
            warmup,
            key_steps,
            steps,
        })
    }

    /// Warmup 10 and key steps {10, 30} over 50 steps.
    pub fn standard() -> Self {
        Self::new(10, vec![10, 30], 50).expect("valid standard schedule")
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn key_steps(&self) -> &[usize] {
        &self.key_steps
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Mode of `step` (1-based).
    pub fn mode(&self, step: usize) -> StepMode {
        if step < self.warmup {
            StepMode::Full
        } else if step == self.warmup {
            StepMode::FullFusedSearch
        } else if self.key_steps.contains(&step) {
            StepMode::SparseCachedSearch
        } else {
            StepMode::Sparse
        }
    }

    pub fn modes(&self) -> Vec<StepMode> {
        (1..=self.steps).map(|s| self.mode(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Full,
    FullFusedSearch,
    Sparse,
    SparseCachedSearch,
}

impl StepMode {
    pub fn name(&self) -> &'static str {
        match self {
            StepMode::Full => "full",
            StepMode::FullFusedSearch => "full+fused_search",
            StepMode::Sparse => "sparse",
            StepMode::SparseCachedSearch => "sparse+cached_search",
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, StepMode::Sparse | StepMode::SparseCachedSearch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub mode: StepMode,
    /// Per-head recall of the executed attention. Full steps report 1.0. Sparse
    /// steps are exact when compared against full attention; otherwise key steps
    /// report the recall measured on their own search scores and the rest `None`.
    pub recall: Option<Vec<f64>>,
    /// Mean per-head target sparsity of the mask in force.
    pub nominal_sparsity: f64,
    /// Mean per-head executed token-area sparsity, text sink included.
    pub effective_sparsity: f64,
    pub flops_ratio: f64,
    /// Max-abs deviation from full attention, when requested.
    pub deviation: Option<f64>,
    /// FNV-1a over the output's f64 bit patterns.
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub reports: Vec<StepReport>,
    /// Mask produced at each key step, in schedule order.
    pub masks: Vec<(usize, BlockMask)>,
    pub cached_lse: Option<LseVector>,
}

/// Mutable state threaded through the steps.
#[derive(Debug, Default)]
struct PipelineState {
    cached_lse: Option<LseVector>,
    mask: Option<BlockMask>,
}

impl PipelineState {
    fn cache_lse(&mut self, lse: LseVector) {
        debug_assert!(self.cached_lse.is_none(), "LSE is cached exactly once");
        self.cached_lse = Some(lse);
    }

    fn cached_lse(&self) -> Result<&LseVector> {
        self.cached_lse.as_ref().ok_or(Error::EmptyLseCache)
    }

    fn mask(&self) -> &BlockMask {
        self.mask.as_ref().expect("mask exists after the warmup step")
    }
}

pub fn checksum(t: &AttnTensor) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    t.data().iter().fold(OFFSET, |h, x| {
        x.to_bits().to_le_bytes().iter().fold(h, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
    })
}

/// Runs every step of `spec` under `schedule`.
pub fn run_pipeline(
    spec: &WorkloadSpec,
    schedule: &SearchSchedule,
    config: &SparsityConfig,
    compare_to_full: bool,
) -> Result<PipelineRun> {
    spec.validate()?;
    config.validate()?;
    if schedule.steps() > spec.steps {
        return Err(Error::InvalidSchedule(format!(
            "schedule has {} steps, workload only {}",
            schedule.steps(),
            spec.steps
        )));
    }
    let layout = spec.layout;
    let grid = BlockGrid::new(layout.len(), config.block_size)?;
    let heads = spec.heads;
    let mut state = PipelineState::default();
    let mut reports = Vec::with_capacity(schedule.steps());
    let mut masks = Vec::new();

    for step in 1..=schedule.steps() {
        let t = generate_step(spec, step)?;
        let mode = schedule.mode(step);
        let report = match mode {
            StepMode::Full => {
                let out = flash_forward(&t.q, &t.k, &t.v, config.block_size)?.output;
                full_report(step, mode, heads, &out, compare_to_full)
            }
            StepMode::FullFusedSearch => {
                let (flash, scores) = fused_online_search(&t.q, &t.k, &t.v, &grid)?;
                let mask = search_mask(&scores, &layout, config)?;
                masks.push((step, mask.clone()));
                state.mask = Some(mask);
                state.cache_lse(flash.lse);
                full_report(step, mode, heads, &flash.output, compare_to_full)
            }
            StepMode::Sparse | StepMode::SparseCachedSearch => {
                let mut search_recall = None;
                if mode == StepMode::SparseCachedSearch {
                    let scores = lse_cached_search(&t.q, &t.k, state.cached_lse()?, &grid)?;
                    let mask = search_mask(&scores, &layout, config)?;
                    search_recall = Some(recall_from_scores(&scores, &mask)?);
                    masks.push((step, mask.clone()));
                    state.mask = Some(mask);
                }
                let mask = state.mask();
                let out = block_sparse_forward(&t.q, &t.k, &t.v, mask)?.output;
                let (recall, deviation) = if compare_to_full {
                    let (reference, exact) = fused_online_search(&t.q, &t.k, &t.v, &grid)?;
                    (
                        Some(recall_from_scores(&exact, mask)?),
                        Some(out.max_abs_diff(&reference.output)),
                    )
                } else {
                    (search_recall, None)
                };
                StepReport {
                    step,
                    mode,
                    recall,
                    nominal_sparsity: mask.mean_target_sparsity(),
                    effective_sparsity: mask.mean_effective_sparsity(),
                    flops_ratio: flop_count(mask, spec.head_dim).ratio,
                    deviation,
                    checksum: checksum(&out),
                }
            }
        };
        reports.push(report);
    }
    Ok(PipelineRun {
        reports,
        masks,
        cached_lse: state.cached_lse,
    })
}

fn full_report(step: usize, mode: StepMode, heads: usize, out: &AttnTensor, compare: bool) -> StepReport {
    StepReport {
        step,
        mode,
        recall: Some(vec![1.0; heads]),
        nominal_sparsity: 0.0,
        effective_sparsity: 0.0,
        flops_ratio: 1.0,
        deviation: compare.then_some(0.0),
        checksum: checksum(out),
    }
}

/// Relative per-step attention costs for the analytic speedup model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Cost of one search pass (QKᵀ plus reduction, no PV product) relative to a full pass.
    pub search_pass: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { search_pass: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupEstimate {
    /// Full-attention cost over modeled cost, for all steps.
    pub speedup: f64,
    /// Search passes as a fraction of the all-full-attention cost.
    pub search_fraction: f64,
    /// Executed density `1 - s_effective` of one sparse step.
    pub sparse_density: f64,
    /// Modeled cost in units of one full attention pass.
    pub cost: f64,
}

/// Token-area density of a mask built with `config` on `layout`, text sink
/// included, assuming the budget spreads evenly over candidate cells.
pub fn expected_density(layout: &SequenceLayout, config: &SparsityConfig) -> Result<f64> {
    let grid = BlockGrid::new(layout.len(), config.block_size)?;
    let len = layout.len() as f64;
    let n = grid.blocks();
    let sink_from = if config.text_sink {
        grid.first_text_block(layout)
    } else {
        None
    };
    let open = sink_from.unwrap_or(n);
    let open_tokens = if open == n {
        layout.len()
    } else {
        open * grid.block_size()
    } as f64;
    let open_area = open_tokens * open_tokens;
    let sink_area = len * len - open_area;
    let frac = if open == 0 {
        0.0
    } else if config.row_wise {
        crate::blocks::round_budget(config.sparsity, open) as f64 / open as f64
    } else {
        crate::blocks::ceil_budget(config.sparsity, open * open) as f64 / (open * open) as f64
    };
    Ok((sink_area + frac * open_area) / (len * len))
}

/// Analytic attention speedup of a schedule over running every step in full.
///
/// Each step is charged once by its mode: full = 1, fused search = 1 + β,
/// cached search + sparse = β + d, sparse = d, where β is the search-pass
/// cost and d the executed density.
pub fn estimate_speedup(
    layout: &SequenceLayout,
    schedule: &SearchSchedule,
    config: &SparsityConfig,
    model: &CostModel,
) -> Result<SpeedupEstimate> {
    let density = expected_density(layout, config)?;
    let beta = model.search_pass;
    let cost: f64 = schedule
        .modes()
        .iter()
        .map(|m| match m {
            StepMode::Full => 1.0,
            StepMode::FullFusedSearch => 1.0 + beta,
            StepMode::SparseCachedSearch => beta + density,
            StepMode::Sparse => density,
        })
        .sum();
    let n = schedule.steps() as f64;
    Ok(SpeedupEstimate {
        speedup: n / cost,
        search_fraction: beta * schedule.key_steps().len() as f64 / n,
        sparse_density: density,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub steps: usize,
    pub warmup: usize,
    pub key_steps: Vec<usize>,
    pub sparsity: f64,
    pub block_size: usize,
    /// Mean recall per head over sparse steps that report one.
    pub per_head_recall: Vec<f64>,
    pub mean_effective_sparsity: f64,
    pub mean_deviation: Option<f64>,
    pub max_deviation: Option<f64>,
    pub predicted_speedup: f64,
    pub search_fraction: f64,
}

pub fn summarize(
    spec: &WorkloadSpec,
    schedule: &SearchSchedule,
    config: &SparsityConfig,
    run: &PipelineRun,
    model: &CostModel,
) -> Result<PipelineSummary> {
    let sparse: Vec<&StepReport> = run.reports.iter().filter(|r| r.mode.is_sparse()).collect();
    let mut per_head = vec![0.0; spec.heads];
    let mut counted = 0usize;
    for r in &sparse {
        if let Some(rec) = &r.recall {
            for (acc, x) in per_head.iter_mut().zip(rec) {
                *acc += x;
            }
            counted += 1;
        }
    }
    if counted > 0 {
        per_head.iter_mut().for_each(|x| *x /= counted as f64);
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let devs: Vec<f64> = run.reports.iter().filter_map(|r| r.deviation).collect();
    let estimate = estimate_speedup(&spec.layout, schedule, config, model)?;
    Ok(PipelineSummary {
        seed: spec.seed,
        steps: schedule.steps(),
        warmup: schedule.warmup(),
        key_steps: schedule.key_steps().to_vec(),
        sparsity: config.sparsity,
        block_size: config.block_size,
        per_head_recall: per_head,
        mean_effective_sparsity: mean(sparse.iter().map(|r| r.effective_sparsity).collect()).unwrap_or(0.0),
        mean_deviation: mean(devs.clone()),
        max_deviation: devs.into_iter().reduce(f64::max),
        predicted_speedup: estimate.speedup,
        search_fraction: estimate.search_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::make_layout;

    fn tiny_spec(drift: f64, steps: usize) -> WorkloadSpec {
        WorkloadSpec {
            layout: make_layout(2, 4, 4, 8).unwrap(),
            heads: 2,
            head_dim: 8,
            steps,
            drift,
            ..WorkloadSpec::default()
        }
    }

    fn tiny_config() -> SparsityConfig {
        SparsityConfig {
            sparsity: 0.5,
            block_size: 8,
            ..SparsityConfig::default()
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(SearchSchedule::new(10, vec![10, 30], 50).is_ok());
        assert!(SearchSchedule::new(0, vec![0], 5).is_err());
        assert!(SearchSchedule::new(10, vec![11, 30], 50).is_err());
        assert!(SearchSchedule::new(10, vec![10, 10], 50).is_err());
        assert!(SearchSchedule::new(10, vec![10, 60], 50).is_err());
        assert!(SearchSchedule::new(10, vec![], 50).is_err());
    }

    #[test]
    fn standard_mode_trace() {
        let modes = SearchSchedule::standard().modes();
        assert!(modes[..9].iter().all(|&m| m == StepMode::Full));
        assert_eq!(modes[9], StepMode::FullFusedSearch);
        assert!(modes[10..29].iter().all(|&m| m == StepMode::Sparse));
        assert_eq!(modes[29], StepMode::SparseCachedSearch);
        assert!(modes[30..].iter().all(|&m| m == StepMode::Sparse));
    }

    #[test]
    fn single_key_step_reuses_one_mask() {
        let spec = tiny_spec(0.05, 6);
        let schedule = SearchSchedule::new(2, vec![2], 6).unwrap();
        let run = run_pipeline(&spec, &schedule, &tiny_config(), false).unwrap();
        assert_eq!(run.masks.len(), 1);
        assert_eq!(run.reports.len(), 6);
        assert!(run.reports[2..].iter().all(|r| r.mode == StepMode::Sparse));
    }

    #[test]
    fn static_workload_is_stable() {
        let spec = tiny_spec(0.0, 8);
        let schedule = SearchSchedule::new(3, vec![3, 6], 8).unwrap();
        let cfg = SparsityConfig {
            head_adaptive: false,
            ..tiny_config()
        };
        let run = run_pipeline(&spec, &schedule, &cfg, true).unwrap();
        assert_eq!(run.masks[0].1, run.masks[1].1);
        assert_eq!(run.reports[2].deviation, Some(0.0));
        let sparse: Vec<_> = run.reports.iter().filter(|r| r.mode.is_sparse()).collect();
        assert!(sparse.windows(2).all(|w| w[0].recall == w[1].recall && w[0].checksum == w[1].checksum));
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = tiny_spec(0.1, 6);
        let schedule = SearchSchedule::new(2, vec![2, 4], 6).unwrap();
        let a = run_pipeline(&spec, &schedule, &tiny_config(), true).unwrap();
        let b = run_pipeline(&spec, &schedule, &tiny_config(), true).unwrap();
        assert_eq!(a.reports, b.reports);
    }

    #[test]
    fn schedule_longer_than_workload_rejected() {
        let spec = tiny_spec(0.0, 4);
        let schedule = SearchSchedule::new(2, vec![2], 6).unwrap();
        assert!(run_pipeline(&spec, &schedule, &tiny_config(), false).is_err());
    }

    #[test]
    fn empty_cache_is_an_error() {
        assert_eq!(PipelineState::default().cached_lse().unwrap_err(), Error::EmptyLseCache);
    }

    #[test]
    fn speedup_without_sparsity_is_one() {
        let layout = make_layout(4, 8, 8, 0).unwrap();
        let cfg = SparsityConfig {
            sparsity: 0.0,
            block_size: 16,
            text_sink: false,
            row_wise: false,
            head_adaptive: false,
            ..SparsityConfig::default()
        };
        let e = estimate_speedup(&layout, &SearchSchedule::standard(), &cfg, &CostModel { search_pass: 0.0 }).unwrap();
        assert_eq!(e.speedup, 1.0);
    }

    #[test]
    fn speedup_standard_schedule() {
        // 5x5 blocks, no text: density exactly ⌈0.2·25⌉/25 = 0.2
        let layout = make_layout(5, 8, 8, 0).unwrap();
        let cfg = SparsityConfig {
            sparsity: 0.8,
            block_size: 64,
            text_sink: false,
            row_wise: false,
            head_adaptive: false,
            ..SparsityConfig::default()
        };
        let e = estimate_speedup(&layout, &SearchSchedule::standard(), &cfg, &CostModel::default()).unwrap();
        // 9 full + 1.5 fused + 0.7 cached + 39 sparse steps at 0.2 = 19.0
        assert!((e.cost - 19.0).abs() < 1e-12, "{}", e.cost);
        assert!((e.speedup - 50.0 / 19.0).abs() < 1e-12);
        assert!((e.search_fraction - 0.02).abs() < 1e-15);
    }

    #[test]
    fn searching_every_step_is_slower() {
        let layout = make_layout(5, 8, 8, 0).unwrap();
        let cfg = SparsityConfig {
            block_size: 64,
            ..SparsityConfig::default()
        };
        let every = SearchSchedule::new(10, (10..=50).collect(), 50).unwrap();
        let a = estimate_speedup(&layout, &SearchSchedule::standard(), &cfg, &CostModel::default()).unwrap();
        let b = estimate_speedup(&layout, &every, &cfg, &CostModel::default()).unwrap();
        assert!(b.speedup < a.speedup);
    }

    #[test]
    fn checksum_sensitive_to_bits() {
        let a = AttnTensor::new(1, 1, 2, crate::tensor::Role::Output, vec![0.0, 1.0]).unwrap();
        let b = AttnTensor::new(1, 1, 2, crate::tensor::Role::Output, vec![-0.0, 1.0]).unwrap();
        assert_ne!(checksum(&a), checksum(&b));
    }
}
