//! Online block-mask search.
//!
//! [`fused_online_search`] runs a full blockwise attention pass to get the exact
//! output and row LSE, then a second pass that reprices every logit as
//! `exp(q·k/√D - lse)` and sums the result per `(query block, key block)` cell.
//! [`lse_cached_search`] is that second pass alone, fed with an LSE cached from
//! an earlier step. The cell sums are then turned into masks by top-k selection,
//! optionally with the text sink, row-wise and head-adaptive rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{ceil_budget, rank_descending, round_budget, BlockGrid, BlockMask, BlockScoreMatrix};
use crate::error::{Error, Result};
use crate::flash::{flash_forward, FlashResult};
use crate::layout::SequenceLayout;
use crate::tensor::{check_qkv, AttnTensor, LseVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    /// Base fraction of blocks discarded, in `[0, 1)`.
    pub sparsity: f64,
    pub block_size: usize,
    /// Keep every block touching a text token, outside the budget.
    pub text_sink: bool,
    /// Keep the same number of blocks in every non-sink block row.
    pub row_wise: bool,
    /// Move budget from high-recall heads to low-recall heads.
    pub head_adaptive: bool,
    /// Recall above which a head counts as well served.
    pub recall_threshold: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.8,
            block_size: 64,
            text_sink: true,
            row_wise: true,
            head_adaptive: true,
            recall_threshold: 0.8,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.sparsity)?;
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        if !(self.recall_threshold > 0.0 && self.recall_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "recall threshold must be in (0, 1), got {}",
                self.recall_threshold
            )));
        }
        if self.head_adaptive {
            check_adaptive_base(self.sparsity)?;
        }
        Ok(())
    }
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity must be in [0, 1), got {s}")));
    }
    Ok(())
}

fn check_adaptive_base(s: f64) -> Result<()> {
    if s < 1.0 / 3.0 {
        return Err(Error::InvalidArgument(format!(
            "head-adaptive mode needs sparsity >= 1/3 so the lowered tier stays non-negative, got {s}"
        )));
    }
    Ok(())
}

/// Sums `exp(q·k/√D - lse)` per block cell. One task owns one block row of one head.
fn block_scores(q: &AttnTensor, k: &AttnTensor, lse: &LseVector, grid: &BlockGrid) -> Result<BlockScoreMatrix> {
    let (heads, len, dim) = (q.heads(), q.len(), q.dim());
    let n = grid.blocks();
    let bs = grid.block_size();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut data = vec![0.0; heads * n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(idx, cells)| {
        let (h, p) = (idx / n, idx % n);
        let kh = k.head(h);
        for i in grid.range(p) {
            let qi = q.row(h, i);
            let row_lse = lse.get(h, i);
            for j in 0..len {
                let kj = &kh[j * dim..(j + 1) * dim];
                let z = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                cells[j / bs] += (z - row_lse).exp();
            }
        }
    });
    BlockScoreMatrix::new(*grid, heads, data)
}

fn check_grid(q: &AttnTensor, grid: &BlockGrid) -> Result<()> {
    if grid.seq_len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid covers {} tokens, tensors have L = {}",
            grid.seq_len(),
            q.len()
        )));
    }
    Ok(())
}

/// Exact attention plus block scores in two passes.
pub fn fused_online_search(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    grid: &BlockGrid,
) -> Result<(FlashResult, BlockScoreMatrix)> {
    check_qkv(q, k, v)?;
    check_grid(q, grid)?;
    let flash = flash_forward(q, k, v, grid.block_size())?;
    let scores = block_scores(q, k, &flash.lse, grid)?;
    Ok((flash, scores))
}

/// Block scores in one pass from a previously computed LSE.
pub fn lse_cached_search(
    q: &AttnTensor,
    k: &AttnTensor,
    cached_lse: &LseVector,
    grid: &BlockGrid,
) -> Result<BlockScoreMatrix> {
    if !q.same_shape(k) {
        return Err(Error::ShapeMismatch("Q and K shapes differ".into()));
    }
    check_grid(q, grid)?;
    if cached_lse.heads() != q.heads() || cached_lse.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "cached LSE is [{}, {}], tensors are [{}, {}]",
            cached_lse.heads(),
            cached_lse.len(),
            q.heads(),
            q.len()
        )));
    }
    cached_lse.check_finite()?;
    block_scores(q, k, cached_lse, grid)
}

/// Top-k block selection per head under the configured constraints.
///
/// Text-sink cells are always kept and are not charged to the budget. The
/// budget is counted over the remaining candidate cells: `⌈(1 - s)·cells⌉`
/// globally, or `round((1 - s)·cols)` per block row in row-wise mode.
pub fn select_topk_mask(
    scores: &BlockScoreMatrix,
    sparsities: &[f64],
    layout: &SequenceLayout,
    config: &SparsityConfig,
) -> Result<BlockMask> {
    let grid = *scores.grid();
    grid.check_layout(layout)?;
    let heads = scores.heads();
    if sparsities.len() != heads {
        return Err(Error::ShapeMismatch(format!(
            "{} sparsities for {heads} heads",
            sparsities.len()
        )));
    }
    for &s in sparsities {
        check_sparsity(s)?;
    }
    let n = grid.blocks();
    let sink_from = if config.text_sink {
        grid.first_text_block(layout)
    } else {
        None
    };
    let is_sink = |b: usize| sink_from.is_some_and(|s| b >= s);
    let open: Vec<usize> = (0..n).filter(|&b| !is_sink(b)).collect();

    let mut keep = vec![false; heads * n * n];
    for (h, &s) in sparsities.iter().enumerate() {
        let head_scores = scores.head(h);
        let head_keep = &mut keep[h * n * n..(h + 1) * n * n];
        for p in 0..n {
            for q in 0..n {
                if is_sink(p) || is_sink(q) {
                    head_keep[p * n + q] = true;
                }
            }
        }
        if open.is_empty() {
            continue;
        }
        if config.row_wise {
            let per_row = round_budget(s, open.len());
            for &p in &open {
                if per_row == 0 {
                    return Err(Error::ZeroBudget {
                        head: h,
                        block_row: Some(p),
                    });
                }
                let row: Vec<f64> = open.iter().map(|&q| head_scores[p * n + q]).collect();
                for idx in rank_descending(&row).into_iter().take(per_row) {
                    head_keep[p * n + open[idx]] = true;
                }
            }
        } else {
            let cells: Vec<usize> = open.iter().flat_map(|&p| open.iter().map(move |&q| p * n + q)).collect();
            let budget = ceil_budget(s, cells.len());
            if budget == 0 {
                return Err(Error::ZeroBudget { head: h, block_row: None });
            }
            let values: Vec<f64> = cells.iter().map(|&c| head_scores[c]).collect();
            for idx in rank_descending(&values).into_iter().take(budget) {
                head_keep[cells[idx]] = true;
            }
        }
    }
    Ok(BlockMask::from_keep(grid, heads, keep, sparsities.to_vec())?.with_constraints(
        config.text_sink,
        config.row_wise,
        sink_from,
    ))
}

/// Kept block mass over total block mass, per head.
pub fn recall_from_scores(scores: &BlockScoreMatrix, mask: &BlockMask) -> Result<Vec<f64>> {
    if scores.grid() != mask.grid() || scores.heads() != mask.heads() {
        return Err(Error::ShapeMismatch("scores and mask disagree on grid or heads".into()));
    }
    Ok((0..scores.heads())
        .map(|h| {
            let (mut kept, mut total) = (0.0, 0.0);
            for (&s, &k) in scores.head(h).iter().zip(mask.head_keep(h)) {
                total += s;
                if k {
                    kept += s;
                }
            }
            if total > 0.0 {
                kept / total
            } else {
                0.0
            }
        })
        .collect())
}

/// Raised and lowered sparsity tiers around `base`: `(1+s)/2` and `(3s-1)/2`.
///
/// Both are snapped to 12 decimals, so a decimal base such as 0.8 yields the
/// decimal tiers 0.9 and 0.7 rather than their binary rounding residue.
pub fn adaptive_tiers(base: f64) -> (f64, f64) {
    let snap = |x: f64| (x * 1e12).round() / 1e12;
    (snap((1.0 + base) / 2.0), snap((3.0 * base - 1.0) / 2.0))
}

/// Per-head sparsities from the hierarchical head-adaptive rule.
///
/// Masks are first selected at the uniform `base`. With `n` the number of heads
/// whose recall exceeds `threshold`, capped at `⌊H/2⌋`, the `n` best heads move to
/// the raised tier and the `n` worst to the lowered tier. Ties in recall keep
/// head order.
pub fn head_adaptive_sparsities(
    scores: &BlockScoreMatrix,
    base: f64,
    threshold: f64,
    layout: &SequenceLayout,
    config: &SparsityConfig,
) -> Result<Vec<f64>> {
    check_sparsity(base)?;
    check_adaptive_base(base)?;
    let heads = scores.heads();
    let provisional = select_topk_mask(scores, &vec![base; heads], layout, config)?;
    let recalls = recall_from_scores(scores, &provisional)?;
    let n = recalls.iter().filter(|&&r| r > threshold).count().min(heads / 2);
    let (raised, lowered) = adaptive_tiers(base);
    let order = rank_descending(&recalls);
    let mut out = vec![base; heads];
    for &h in &order[..n] {
        out[h] = raised;
    }
    for &h in &order[heads - n..] {
        out[h] = lowered;
    }
    Ok(out)
}

/// Per-head sparsities for `config`: uniform, or head-adaptive when enabled.
pub fn plan_sparsities(scores: &BlockScoreMatrix, layout: &SequenceLayout, config: &SparsityConfig) -> Result<Vec<f64>> {
    if config.head_adaptive {
        head_adaptive_sparsities(scores, config.sparsity, config.recall_threshold, layout, config)
    } else {
        check_sparsity(config.sparsity)?;
        Ok(vec![config.sparsity; scores.heads()])
    }
}

/// Mask for `config` from a score matrix.
pub fn search_mask(scores: &BlockScoreMatrix, layout: &SequenceLayout, config: &SparsityConfig) -> Result<BlockMask> {
    let sparsities = plan_sparsities(scores, layout, config)?;
    select_topk_mask(scores, &sparsities, layout, config)
}
