//! Brute-force reference attention.
//!
//! Everything here materializes the full `[H, L, L]` weight matrix in `f64` and
//! sums in row-major order. The blockwise kernels are checked against these
//! routines, so nothing in this module calls into them.

use rayon::prelude::*;

use crate::blocks::{ceil_budget, rank_descending, BlockGrid, BlockMask, BlockScoreMatrix, ElementMask};
use crate::error::{Error, Result};
use crate::tensor::{check_qkv, AttnTensor, LseVector, Role};

/// Row-normalized attention weights, `[H, L, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl AttnWeights {
    pub fn new(heads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * len * len {
            return Err(Error::ShapeMismatch(format!(
                "weights expect {} entries for [{heads}, {len}, {len}], got {}",
                heads * len * len,
                data.len()
            )));
        }
        Ok(Self { heads, len, data })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.len * self.len;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let start = (h * self.len + i) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.data[(h * self.len + i) * self.len + j]
    }
}

#[derive(Debug, Clone)]
pub struct DenseAttnResult {
    pub output: AttnTensor,
    pub weights: AttnWeights,
    pub lse: LseVector,
}

/// How masked logits enter the softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskBias {
    /// Masked logits are `-inf`; they contribute exactly zero.
    Exclude,
    /// Masked logits are shifted by `-c`.
    Finite(f64),
}

/// Scaled logits `q_i·k_j / √D` for one query row.
pub fn logits_row(q: &AttnTensor, k: &AttnTensor, h: usize, i: usize) -> Vec<f64> {
    let scale = 1.0 / (q.dim() as f64).sqrt();
    let qi = q.row(h, i);
    (0..k.len())
        .map(|j| qi.iter().zip(k.row(h, j)).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect()
}

/// Numerically stable softmax of a row with optional exclusions.
/// Returns the weights and the row LSE, or `None` if every entry is excluded.
fn softmax_row(logits: &[f64], keep: Option<&[bool]>) -> Option<(Vec<f64>, f64)> {
    let kept = |j: usize| keep.is_none_or(|m| m[j]);
    let max = (0..logits.len())
        .filter(|&j| kept(j))
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut weights: Vec<f64> = (0..logits.len())
        .map(|j| if kept(j) { (logits[j] - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Some((weights, max + sum.ln()))
}

type HeadParts = (Vec<f64>, Vec<f64>, Vec<f64>);

fn attention_impl(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    mask: Option<(&ElementMask, MaskBias)>,
) -> Result<DenseAttnResult> {
    check_qkv(q, k, v)?;
    let (heads, len, dim) = (q.heads(), q.len(), q.dim());
    if let Some((m, bias)) = mask {
        m.check_heads(heads)?;
        if m.len() != len {
            return Err(Error::ShapeMismatch(format!("mask is {0}x{0}, sequence has L = {len}", m.len())));
        }
        if let MaskBias::Finite(c) = bias {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("mask bias must be positive and finite, got {c}")));
            }
        }
    }

    // (output, weights, lse) per head
    let per_head: Vec<Result<HeadParts>> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut out = vec![0.0; len * dim];
            let mut weights = Vec::with_capacity(len * len);
            let mut lse = Vec::with_capacity(len);
            for i in 0..len {
                let mut logits = logits_row(q, k, h, i);
                let keep = match mask {
                    Some((m, bias)) => {
                        let row = m.row(h, i);
                        if !row.iter().any(|&b| b) {
                            return Err(Error::FullyMaskedRow { head: h, row: i });
                        }
                        match bias {
                            MaskBias::Exclude => Some(row),
                            MaskBias::Finite(c) => {
                                for (z, &keep) in logits.iter_mut().zip(row) {
                                    if !keep {
                                        *z -= c;
                                    }
                                }
                                None
                            }
                        }
                    }
                    None => None,
                };
                let (w, row_lse) = softmax_row(&logits, keep).expect("row has a kept key");
                let o = &mut out[i * dim..(i + 1) * dim];
                for (j, &wj) in w.iter().enumerate() {
                    if wj != 0.0 {
                        for (od, vd) in o.iter_mut().zip(v.row(h, j)) {
                            *od += wj * vd;
                        }
                    }
                }
                weights.extend_from_slice(&w);
                lse.push(row_lse);
            }
            Ok((out, weights, lse))
        })
        .collect();

    let mut out = Vec::with_capacity(heads * len * dim);
    let mut weights = Vec::with_capacity(heads * len * len);
    let mut lse = Vec::with_capacity(heads * len);
    for r in per_head {
        let (o, w, l) = r?;
        out.extend(o);
        weights.extend(w);
        lse.extend(l);
    }
    Ok(DenseAttnResult {
        output: AttnTensor::new(heads, len, dim, Role::Output, out)?,
        weights: AttnWeights::new(heads, len, weights)?,
        lse: LseVector::new(heads, len, lse)?,
    })
}

/// `softmax(QKᵀ/√D)·V` with the full weight matrix and per-row LSE.
pub fn dense_attention(q: &AttnTensor, k: &AttnTensor, v: &AttnTensor) -> Result<DenseAttnResult> {
    attention_impl(q, k, v, None)
}

/// Dense attention with a token-level mask. A query row with no kept key is an error.
pub fn masked_dense_attention(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    mask: &ElementMask,
    bias: MaskBias,
) -> Result<DenseAttnResult> {
    attention_impl(q, k, v, Some((mask, bias)))
}

/// Block-summed weights by direct nested-loop accumulation.
pub fn block_sum_oracle(weights: &AttnWeights, grid: &BlockGrid) -> Result<BlockScoreMatrix> {
    if grid.seq_len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid covers {} tokens, weights have L = {}",
            grid.seq_len(),
            weights.len()
        )));
    }
    let n = grid.blocks();
    let bs = grid.block_size();
    let mut data = vec![0.0; weights.heads() * n * n];
    for h in 0..weights.heads() {
        let cells = &mut data[h * n * n..(h + 1) * n * n];
        for i in 0..weights.len() {
            let row = weights.row(h, i);
            for (j, &w) in row.iter().enumerate() {
                cells[(i / bs) * n + j / bs] += w;
            }
        }
    }
    BlockScoreMatrix::new(*grid, weights.heads(), data)
}

/// Selected weight mass over total weight mass, per head.
pub fn recall(weights: &AttnWeights, mask: &ElementMask) -> Result<Vec<f64>> {
    if mask.len() != weights.len() {
        return Err(Error::ShapeMismatch("mask and weights disagree on L".into()));
    }
    mask.check_heads(weights.heads())?;
    Ok((0..weights.heads())
        .map(|h| {
            let (mut kept, mut total) = (0.0, 0.0);
            for i in 0..weights.len() {
                for (j, &w) in weights.row(h, i).iter().enumerate() {
                    total += w;
                    if mask.get(h, i, j) {
                        kept += w;
                    }
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

/// Element-level recall of a block mask.
pub fn block_mask_recall(weights: &AttnWeights, mask: &BlockMask) -> Result<Vec<f64>> {
    recall(weights, &mask.expand())
}

/// Baseline sparse patterns compared against the blockified one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    /// Largest individual weights.
    Topk,
    /// Whole columns ranked by column mass.
    Col,
    /// Band around the main diagonal.
    Diag,
    /// Half the budget as a band, the rest as top columns.
    DiagCol,
    /// Block-level top-k, expanded to tokens.
    Block { block_size: usize },
}

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::Topk => "topk",
            PatternKind::Col => "col",
            PatternKind::Diag => "diag",
            PatternKind::DiagCol => "diag_col",
            PatternKind::Block { .. } => "block",
        }
    }

    pub fn all(block_size: usize) -> [PatternKind; 5] {
        [
            PatternKind::Topk,
            PatternKind::Block { block_size },
            PatternKind::Col,
            PatternKind::Diag,
            PatternKind::DiagCol,
        ]
    }
}

/// Element budget `⌈(1 - s)·L²⌉` shared by all baseline patterns.
pub fn element_budget(sparsity: f64, len: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let budget = ceil_budget(sparsity, len * len);
    if budget == 0 {
        return Err(Error::ZeroBudget { head: 0, block_row: None });
    }
    Ok(budget)
}

/// Builds a token-level mask of kind `kind` with at most `⌈(1 - s)·L²⌉` kept
/// entries per head. All kinds except `Block` use the budget exactly; `Block`
/// takes whole blocks greedily while they fit.
pub fn build_baseline_pattern(kind: PatternKind, weights: &AttnWeights, sparsity: f64) -> Result<ElementMask> {
    let len = weights.len();
    let budget = element_budget(sparsity, len)?;
    let mut mask = ElementMask::empty(weights.heads(), len);
    for h in 0..weights.heads() {
        let w = weights.head(h);
        match kind {
            PatternKind::Topk => {
                for idx in rank_descending(w).into_iter().take(budget) {
                    mask.set(h, idx / len, idx % len, true);
                }
            }
            PatternKind::Col => {
                fill_columns(&mut mask, h, w, len, budget);
            }
            PatternKind::Diag => {
                fill_band(&mut mask, h, len, budget);
            }
            PatternKind::DiagCol => {
                let placed = fill_band(&mut mask, h, len, budget / 2);
                fill_columns(&mut mask, h, w, len, budget - placed);
            }
            PatternKind::Block { block_size } => {
                let grid = BlockGrid::new(len, block_size)?;
                let n = grid.blocks();
                let mut sums = vec![0.0; n * n];
                for i in 0..len {
                    for j in 0..len {
                        sums[(i / block_size) * n + j / block_size] += w[i * len + j];
                    }
                }
                let mut remaining = budget;
                for cell in rank_descending(&sums) {
                    let (p, q) = (cell / n, cell % n);
                    let area = grid.cell_area(p, q);
                    if area > remaining {
                        continue;
                    }
                    remaining -= area;
                    for i in grid.range(p) {
                        for j in grid.range(q) {
                            mask.set(h, i, j, true);
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Adds up to `budget` entries from the band, nearest diagonals first.
fn fill_band(mask: &mut ElementMask, h: usize, len: usize, budget: usize) -> usize {
    let mut placed = 0;
    'outer: for offset in 0..len {
        for i in 0..len {
            for j in [i.checked_sub(offset), Some(i + offset)].into_iter().flatten() {
                if placed == budget {
                    break 'outer;
                }
                if j < len && !mask.get(h, i, j) {
                    mask.set(h, i, j, true);
                    placed += 1;
                }
            }
        }
    }
    placed
}

/// Adds `budget` new entries, column by column in order of column mass.
fn fill_columns(mask: &mut ElementMask, h: usize, w: &[f64], len: usize, budget: usize) -> usize {
    let mut col_mass = vec![0.0; len];
    for i in 0..len {
        for (j, m) in col_mass.iter_mut().enumerate() {
            *m += w[i * len + j];
        }
    }
    let mut placed = 0;
    for j in rank_descending(&col_mass) {
        for i in 0..len {
            if placed == budget {
                return placed;
            }
            if !mask.get(h, i, j) {
                mask.set(h, i, j, true);
                placed += 1;
            }
        }
    }
    placed
}

/// Keeps each head's `budget` highest-mass blocks; ties go to the lower `(row, col)`.
pub fn optimal_block_mask_oracle(weights: &AttnWeights, grid: &BlockGrid, budgets: &[usize]) -> Result<BlockMask> {
    if budgets.len() != weights.heads() {
        return Err(Error::ShapeMismatch(format!(
            "{} budgets for {} heads",
            budgets.len(),
            weights.heads()
        )));
    }
    let scores = block_sum_oracle(weights, grid)?;
    let cells = grid.cells();
    let mut keep = vec![false; weights.heads() * cells];
    let mut sparsity = Vec::with_capacity(weights.heads());
    for (h, &budget) in budgets.iter().enumerate() {
        if budget > cells {
            return Err(Error::InvalidArgument(format!("budget {budget} exceeds {cells} blocks")));
        }
        for cell in rank_descending(scores.head(h)).into_iter().take(budget) {
            keep[h * cells + cell] = true;
        }
        sparsity.push(1.0 - budget as f64 / cells as f64);
    }
    BlockMask::from_keep(*grid, weights.heads(), keep, sparsity)
}
