//! Oracle-equivalence self check. With `inject_fault` the implementation side
//! of every comparison sees `-Q`, so each check must report a failure.

use std::time::Instant;

use crate::blocks::{BlockGrid, BlockMask, BlockScoreMatrix};
use crate::error::Result;
use crate::flash::flash_forward;
use crate::layout::make_layout;
use crate::oracle::{block_sum_oracle, dense_attention, masked_dense_attention, MaskBias};
use crate::pipeline::{SearchSchedule, StepMode};
use crate::search::{fused_online_search, lse_cached_search, recall_from_scores, select_topk_mask, SparsityConfig};
use crate::sparse::block_sparse_forward;
use crate::tensor::{seeded_tensor_stream, AttnTensor, NormalStream, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn qkv(h: usize, l: usize, d: usize, seed: u64) -> Result<(AttnTensor, AttnTensor, AttnTensor)> {
    Ok((
        seeded_tensor_stream(h, l, d, seed, 0, 1.0, Role::Query)?,
        seeded_tensor_stream(h, l, d, seed, 1, 1.0, Role::Key)?,
        seeded_tensor_stream(h, l, d, seed, 2, 1.0, Role::Value)?,
    ))
}

fn implementation_q(q: &AttnTensor, fault: bool) -> Result<AttnTensor> {
    if fault {
        q.mix(-1.0, q, 0.0)
    } else {
        Ok(q.clone())
    }
}

fn flash_vs_dense(fault: bool) -> Result<Check> {
    let (mut out_err, mut lse_err) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let (q, k, v) = qkv(4, 256, 32, seed)?;
        let dense = dense_attention(&q, &k, &v)?;
        let flash = flash_forward(&implementation_q(&q, fault)?, &k, &v, 64)?;
        out_err = out_err.max(flash.output.max_abs_diff(&dense.output));
        lse_err = lse_err.max(flash.lse.max_abs_diff(&dense.lse));
    }
    Ok(Check {
        name: "flash matches dense attention",
        passed: out_err <= 1e-5 && lse_err <= 1e-6,
        detail: format!("max |Δout| = {out_err:.2e}, max |ΔLSE| = {lse_err:.2e}"),
    })
}

fn max_rel_diff(a: &BlockScoreMatrix, b: &BlockScoreMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
        .fold(0.0, f64::max)
}

fn fused_scores_vs_block_sums(fault: bool) -> Result<Check> {
    let mut worst = 0.0f64;
    for (seed, b) in [(10, 8), (11, 32), (12, 64)] {
        let (q, k, v) = qkv(2, 200, 16, seed)?;
        let grid = BlockGrid::new(200, b)?;
        let oracle = block_sum_oracle(&dense_attention(&q, &k, &v)?.weights, &grid)?;
        let (_, scores) = fused_online_search(&implementation_q(&q, fault)?, &k, &v, &grid)?;
        worst = worst.max(max_rel_diff(&scores, &oracle));
    }
    Ok(Check {
        name: "fused search scores match block sums",
        passed: worst <= 1e-6,
        detail: format!("max relative error = {worst:.2e}"),
    })
}

fn cached_search_exact(fault: bool) -> Result<Check> {
    let (q, k, v) = qkv(3, 160, 16, 20)?;
    let layout = make_layout(2, 8, 8, 32)?;
    let grid = BlockGrid::new(160, 16)?;
    let (flash, fused) = fused_online_search(&q, &k, &v, &grid)?;
    let qi = implementation_q(&q, fault)?;
    let cached = lse_cached_search(&qi, &k, &flash.lse, &grid)?;
    let shifted = lse_cached_search(&qi, &k, &flash.lse.shifted(1.75), &grid)?;
    let cfg = SparsityConfig {
        block_size: 16,
        ..SparsityConfig::default()
    };
    let bitwise = cached.data() == fused.data();
    let same_mask = crate::search::search_mask(&shifted, &layout, &cfg)? == crate::search::search_mask(&fused, &layout, &cfg)?;
    Ok(Check {
        name: "cached-LSE search reproduces fused scores",
        passed: bitwise && same_mask,
        detail: format!("bitwise = {bitwise}, shifted-LSE mask identical = {same_mask}"),
    })
}

fn sparse_vs_masked_dense(fault: bool) -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let (q, k, v) = qkv(3, 200, 16, 30 + seed)?;
        let grid = BlockGrid::new(200, 32)?;
        let mut rng = NormalStream::new(30 + seed, 99);
        let density = [0.2, 0.5, 0.8];
        let mask = BlockMask::from_fn(grid, 3, |h, p, c| p == c || rng.uniform() < density[h]);
        let dense = masked_dense_attention(&q, &k, &v, &mask.expand(), MaskBias::Exclude)?;
        let sparse = block_sparse_forward(&implementation_q(&q, fault)?, &k, &v, &mask)?;
        worst = worst.max(sparse.output.max_abs_diff(&dense.output));
    }
    Ok(Check {
        name: "block-sparse execution matches masked dense",
        passed: worst <= 1e-5,
        detail: format!("max |Δout| = {worst:.2e}"),
    })
}

/// Best recall over every mask with exactly `budget` cells, by enumeration.
pub fn enumerate_best_recall(scores: &[f64], budget: usize) -> f64 {
    let cells = scores.len();
    let total: f64 = scores.iter().sum();
    (0u32..1 << cells)
        .filter(|m| m.count_ones() as usize == budget)
        .map(|m| (0..cells).filter(|&c| m >> c & 1 == 1).map(|c| scores[c]).sum::<f64>() / total)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn topk_optimal(fault: bool) -> Result<Check> {
    let mut failures = 0;
    let mut cases = 0;
    for seed in 0..4u64 {
        let (q, k, v) = qkv(1, 12, 8, 40 + seed)?;
        let grid = BlockGrid::new(12, 4)?;
        let layout = make_layout(1, 3, 4, 0)?;
        let truth = block_sum_oracle(&dense_attention(&q, &k, &v)?.weights, &grid)?;
        let (_, seen) = fused_online_search(&implementation_q(&q, fault)?, &k, &v, &grid)?;
        for budget in 1..=6 {
            let s = 1.0 - budget as f64 / 9.0;
            let cfg = SparsityConfig {
                sparsity: s,
                block_size: 4,
                text_sink: false,
                row_wise: false,
                head_adaptive: false,
                ..SparsityConfig::default()
            };
            let mask = select_topk_mask(&seen, &[s], &layout, &cfg)?;
            let got = recall_from_scores(&truth, &mask)?[0];
            cases += 1;
            if got != enumerate_best_recall(truth.head(0), budget) {
                failures += 1;
            }
        }
    }
    Ok(Check {
        name: "top-k selection is recall-optimal",
        passed: failures == 0,
        detail: format!("{failures} of {cases} budgets below the enumerated optimum"),
    })
}

fn schedule_trace(_fault: bool) -> Result<Check> {
    let modes = SearchSchedule::standard().modes();
    let mut runs: Vec<(StepMode, usize)> = Vec::new();
    for m in modes {
        match runs.last_mut() {
            Some((last, n)) if *last == m => *n += 1,
            _ => runs.push((m, 1)),
        }
    }
    let expected = [
        (StepMode::Full, 9),
        (StepMode::FullFusedSearch, 1),
        (StepMode::Sparse, 19),
        (StepMode::SparseCachedSearch, 1),
        (StepMode::Sparse, 20),
    ];
    Ok(Check {
        name: "standard schedule step modes",
        passed: runs == expected,
        detail: runs.iter().map(|(m, n)| format!("{}x{n}", m.name())).collect::<Vec<_>>().join(", "),
    })
}

type CheckFn = fn(bool) -> Result<Check>;

pub fn run_suite(inject_fault: bool) -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 6] = [
        ("flash matches dense attention", flash_vs_dense),
        ("fused search scores match block sums", fused_scores_vs_block_sums),
        ("cached-LSE search reproduces fused scores", cached_search_exact),
        ("block-sparse execution matches masked dense", sparse_vs_masked_dense),
        ("top-k selection is recall-optimal", topk_optimal),
        ("standard schedule step modes", schedule_trace),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let mut c = f(inject_fault).unwrap_or_else(|e| Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            });
            c.detail.push_str(&format!(" ({:.2}s)", start.elapsed().as_secs_f64()));
            c
        })
        .collect()
}
