//! Block partitioning of the attention matrix and the masks defined on it.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;

/// Relative slack absorbing float noise in `(1 - s)·n` before rounding.
const BUDGET_EPS: f64 = 1e-9;

/// `⌈(1 - sparsity)·n⌉`, treating values within float noise of an integer as that integer.
pub fn ceil_budget(sparsity: f64, n: usize) -> usize {
    let x = (1.0 - sparsity) * n as f64;
    let b = (x - BUDGET_EPS * x.max(1.0)).ceil().max(0.0) as usize;
    b.min(n)
}

/// `(1 - sparsity)·n` rounded half-up, treating near-halves as halves.
pub fn round_budget(sparsity: f64, n: usize) -> usize {
    let x = (1.0 - sparsity) * n as f64;
    let b = (x + 0.5 + BUDGET_EPS * x.max(1.0)).floor().max(0.0) as usize;
    b.min(n)
}

/// Indices of `values` sorted by descending value; ties keep ascending index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Partition of `L` tokens into `⌈L/B⌉` blocks; the last block may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockGrid {
    block_size: usize,
    len: usize,
    blocks: usize,
}

impl BlockGrid {
    pub fn new(len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        if len == 0 {
            return Err(Error::InvalidArgument("sequence length must be positive".into()));
        }
        Ok(Self {
            block_size,
            len,
            blocks: len.div_ceil(block_size),
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Sequence length `L` covered by the grid.
    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Number of blocks along each axis (`n_q = n_k`).
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn cells(&self) -> usize {
        self.blocks * self.blocks
    }

    pub fn range(&self, block: usize) -> Range<usize> {
        let start = block * self.block_size;
        start..(start + self.block_size).min(self.len)
    }

    /// Number of real tokens in `block`; only the trailing block can be short.
    pub fn valid_len(&self, block: usize) -> usize {
        self.range(block).len()
    }

    /// Token area of cell `(p, q)`.
    pub fn cell_area(&self, p: usize, q: usize) -> usize {
        self.valid_len(p) * self.valid_len(q)
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_size
    }

    /// First block that intersects the text range, if the layout has text.
    pub fn first_text_block(&self, layout: &SequenceLayout) -> Option<usize> {
        (layout.text() > 0).then(|| layout.video_len() / self.block_size)
    }

    pub fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        if layout.len() != self.len {
            return Err(Error::ShapeMismatch(format!(
                "grid covers {} tokens but layout has L = {}",
                self.len,
                layout.len()
            )));
        }
        Ok(())
    }
}

/// Block-summed softmax mass `W_sum_attn`, shape `[H, n, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreMatrix {
    grid: BlockGrid,
    heads: usize,
    data: Vec<f64>,
}

impl BlockScoreMatrix {
    pub fn new(grid: BlockGrid, heads: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * grid.cells() {
            return Err(Error::ShapeMismatch(format!(
                "score matrix expects {} cells, got {}",
                heads * grid.cells(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "block score at flat index {pos} is negative or non-finite"
            )));
        }
        Ok(Self { grid, heads, data })
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.data[h * n..(h + 1) * n]
    }

    pub fn get(&self, h: usize, p: usize, q: usize) -> f64 {
        self.data[(h * self.grid.blocks() + p) * self.grid.blocks() + q]
    }

    pub fn head_total(&self, h: usize) -> f64 {
        self.head(h).iter().sum()
    }
}

/// Per-head boolean keep grid over the block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    grid: BlockGrid,
    heads: usize,
    keep: Vec<bool>,
    sparsity: Vec<f64>,
    text_sink: bool,
    row_wise: bool,
    first_sink_block: Option<usize>,
}

impl BlockMask {
    pub fn from_keep(grid: BlockGrid, heads: usize, keep: Vec<bool>, sparsity: Vec<f64>) -> Result<Self> {
        if keep.len() != heads * grid.cells() || sparsity.len() != heads {
            return Err(Error::ShapeMismatch(format!(
                "block mask expects {} cells and {heads} sparsities, got {} and {}",
                heads * grid.cells(),
                keep.len(),
                sparsity.len()
            )));
        }
        Ok(Self {
            grid,
            heads,
            keep,
            sparsity,
            text_sink: false,
            row_wise: false,
            first_sink_block: None,
        })
    }

    pub fn full(grid: BlockGrid, heads: usize) -> Self {
        Self::from_keep(grid, heads, vec![true; heads * grid.cells()], vec![0.0; heads])
            .expect("full mask has consistent shape")
    }

    pub fn from_fn(grid: BlockGrid, heads: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let n = grid.blocks();
        let mut keep = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for p in 0..n {
                for q in 0..n {
                    keep.push(f(h, p, q));
                }
            }
        }
        let mut mask = Self::from_keep(grid, heads, keep, vec![0.0; heads]).expect("consistent shape");
        for h in 0..heads {
            mask.sparsity[h] = 1.0 - mask.kept_count(h) as f64 / grid.cells() as f64;
        }
        mask
    }

    pub(crate) fn with_constraints(mut self, text_sink: bool, row_wise: bool, first_sink_block: Option<usize>) -> Self {
        self.text_sink = text_sink;
        self.row_wise = row_wise;
        self.first_sink_block = if text_sink { first_sink_block } else { None };
        self
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn head_keep(&self, h: usize) -> &[bool] {
        let n = self.grid.cells();
        &self.keep[h * n..(h + 1) * n]
    }

    pub fn is_kept(&self, h: usize, p: usize, q: usize) -> bool {
        self.keep[(h * self.grid.blocks() + p) * self.grid.blocks() + q]
    }

    pub fn set(&mut self, h: usize, p: usize, q: usize, value: bool) {
        let n = self.grid.blocks();
        self.keep[(h * n + p) * n + q] = value;
    }

    /// Nominal (target) sparsity of each head.
    pub fn target_sparsity(&self) -> &[f64] {
        &self.sparsity
    }

    pub fn text_sink(&self) -> bool {
        self.text_sink
    }

    pub fn row_wise(&self) -> bool {
        self.row_wise
    }

    pub fn first_sink_block(&self) -> Option<usize> {
        self.first_sink_block
    }

    /// True when block row/column `b` is an always-kept text sink block.
    pub fn is_sink_block(&self, b: usize) -> bool {
        self.first_sink_block.is_some_and(|s| b >= s)
    }

    pub fn is_sink_cell(&self, p: usize, q: usize) -> bool {
        self.is_sink_block(p) || self.is_sink_block(q)
    }

    pub fn kept_count(&self, h: usize) -> usize {
        self.head_keep(h).iter().filter(|&&k| k).count()
    }

    /// Kept cells outside the text sink, i.e. the ones charged to the budget.
    pub fn kept_non_sink(&self, h: usize) -> usize {
        let n = self.grid.blocks();
        (0..n)
            .flat_map(|p| (0..n).map(move |q| (p, q)))
            .filter(|&(p, q)| !self.is_sink_cell(p, q) && self.is_kept(h, p, q))
            .count()
    }

    pub fn row_kept(&self, h: usize, p: usize) -> usize {
        (0..self.grid.blocks()).filter(|&q| self.is_kept(h, p, q)).count()
    }

    /// Fraction of the `L×L` token area covered by kept cells.
    pub fn density(&self, h: usize) -> f64 {
        let n = self.grid.blocks();
        let mut area = 0usize;
        for p in 0..n {
            for q in 0..n {
                if self.is_kept(h, p, q) {
                    area += self.grid.cell_area(p, q);
                }
            }
        }
        let len = self.grid.seq_len();
        area as f64 / (len * len) as f64
    }

    /// Token-area sparsity actually executed, text sink included.
    pub fn effective_sparsity(&self, h: usize) -> f64 {
        1.0 - self.density(h)
    }

    pub fn mean_effective_sparsity(&self) -> f64 {
        (0..self.heads).map(|h| self.effective_sparsity(h)).sum::<f64>() / self.heads as f64
    }

    pub fn mean_target_sparsity(&self) -> f64 {
        self.sparsity.iter().sum::<f64>() / self.heads as f64
    }

    /// Expands to a token-level `[H, L, L]` mask.
    pub fn expand(&self) -> ElementMask {
        let len = self.grid.seq_len();
        let bs = self.grid.block_size();
        ElementMask::from_fn(self.heads, len, |h, i, j| self.is_kept(h, i / bs, j / bs))
    }

    /// Jaccard similarity of kept-cell sets, pooled over heads.
    pub fn jaccard(&self, other: &Self) -> f64 {
        assert_eq!(self.keep.len(), other.keep.len());
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.keep.iter().zip(&other.keep) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Token-level `[H, L, L]` keep mask. A single head broadcasts to all heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementMask {
    heads: usize,
    len: usize,
    data: Vec<bool>,
}

impl ElementMask {
    pub fn new(heads: usize, len: usize, data: Vec<bool>) -> Result<Self> {
        if heads == 0 || data.len() != heads * len * len {
            return Err(Error::ShapeMismatch(format!(
                "element mask expects {} entries for [{heads}, {len}, {len}], got {}",
                heads * len * len,
                data.len()
            )));
        }
        Ok(Self { heads, len, data })
    }

    pub fn full(heads: usize, len: usize) -> Self {
        Self {
            heads,
            len,
            data: vec![true; heads * len * len],
        }
    }

    pub fn empty(heads: usize, len: usize) -> Self {
        Self {
            heads,
            len,
            data: vec![false; heads * len * len],
        }
    }

    pub fn from_fn(heads: usize, len: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(heads * len * len);
        for h in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    data.push(f(h, i, j));
                }
            }
        }
        Self { heads, len, data }
    }

    /// Stored head count; 1 means shared across heads.
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn head_index(&self, h: usize) -> usize {
        if self.heads == 1 {
            0
        } else {
            h
        }
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> bool {
        self.data[(self.head_index(h) * self.len + i) * self.len + j]
    }

    pub fn set(&mut self, h: usize, i: usize, j: usize, value: bool) {
        let hh = self.head_index(h);
        self.data[(hh * self.len + i) * self.len + j] = value;
    }

    pub fn row(&self, h: usize, i: usize) -> &[bool] {
        let start = (self.head_index(h) * self.len + i) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn count(&self, h: usize) -> usize {
        let n = self.len * self.len;
        let hh = self.head_index(h);
        self.data[hh * n..(hh + 1) * n].iter().filter(|&&b| b).count()
    }

    pub(crate) fn check_heads(&self, heads: usize) -> Result<()> {
        if self.heads != 1 && self.heads != heads {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} heads, tensors have {heads}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::make_layout;

    #[test]
    fn grid_trailing_block() {
        let g = BlockGrid::new(100, 64).unwrap();
        assert_eq!(g.blocks(), 2);
        assert_eq!(g.valid_len(0), 64);
        assert_eq!(g.valid_len(1), 36);
        assert_eq!(g.range(1), 64..100);
        assert!((g.blocks() - 1) * 64 < 100 && 100 <= g.blocks() * 64);
    }

    #[test]
    fn grid_exact_division() {
        let g = BlockGrid::new(128, 64).unwrap();
        assert_eq!(g.blocks(), 2);
        assert_eq!(g.valid_len(1), 64);
        assert!(BlockGrid::new(10, 0).is_err());
    }

    #[test]
    fn sink_block_boundary() {
        let layout = make_layout(2, 4, 4, 8).unwrap(); // video 32, L 40
        let g = BlockGrid::new(40, 16).unwrap();
        assert_eq!(g.first_text_block(&layout), Some(2));
        let g = BlockGrid::new(40, 12).unwrap(); // block 2 = [24, 36) straddles 32
        assert_eq!(g.first_text_block(&layout), Some(2));
        let no_text = make_layout(2, 4, 4, 0).unwrap();
        assert_eq!(BlockGrid::new(32, 8).unwrap().first_text_block(&no_text), None);
    }

    #[test]
    fn expand_and_density() {
        let g = BlockGrid::new(6, 4).unwrap();
        let m = BlockMask::from_fn(g, 1, |_, p, q| p == q);
        let e = m.expand();
        assert!(e.get(0, 0, 3));
        assert!(!e.get(0, 0, 4));
        assert!(e.get(0, 5, 4));
        // kept area = 16 + 4 of 36
        assert!((m.density(0) - 20.0 / 36.0).abs() < 1e-15);
        assert_eq!(m.kept_count(0), 2);
    }

    #[test]
    fn jaccard_bounds() {
        let g = BlockGrid::new(8, 2).unwrap();
        let a = BlockMask::from_fn(g, 1, |_, p, _| p == 0);
        let b = BlockMask::from_fn(g, 1, |_, p, q| p == 0 && q < 2);
        assert_eq!(a.jaccard(&a), 1.0);
        assert!((a.jaccard(&b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(ceil_budget(0.7, 10), 3);
        assert_eq!(ceil_budget(0.8, 5), 1);
        assert_eq!(ceil_budget(0.9, 10), 1);
        assert_eq!(ceil_budget(0.0, 7), 7);
        assert_eq!(ceil_budget(0.5, 3), 2);
        assert_eq!(round_budget(0.9, 5), 1);
        assert_eq!(round_budget(0.75, 4), 1);
        assert_eq!(round_budget(0.8, 16), 3);
        assert_eq!(round_budget(0.95, 4), 0);
    }

    #[test]
    fn ranking_ties_by_index() {
        assert_eq!(rank_descending(&[1.0, 3.0, 3.0, 0.5]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn scores_reject_negative() {
        let g = BlockGrid::new(4, 2).unwrap();
        assert!(BlockScoreMatrix::new(g, 1, vec![1.0, -0.1, 0.0, 0.0]).is_err());
        assert!(BlockScoreMatrix::new(g, 1, vec![1.0; 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn budgets_bounded_and_monotone(n in 1usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(ceil_budget(lo, n) <= n);
                prop_assert!(ceil_budget(hi, n) <= ceil_budget(lo, n));
                prop_assert!(round_budget(hi, n) <= round_budget(lo, n));
                prop_assert!(round_budget(lo, n) <= ceil_budget(lo, n));
            }

            #[test]
            fn ranking_is_stable_permutation(values in proptest::collection::vec(0u8..6, 0..40)) {
                let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
                let order = rank_descending(&v);
                let mut seen = order.clone();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
                for w in order.windows(2) {
                    prop_assert!(v[w[0]] > v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1]));
                }
            }

            #[test]
            fn jaccard_symmetric(seed in 0u64..1000, n in 1usize..6) {
                let grid = BlockGrid::new(n * 3, 3).unwrap();
                let mut rng = crate::tensor::NormalStream::new(seed, 0);
                let a = BlockMask::from_fn(grid, 2, |_, _, _| rng.uniform() < 0.5);
                let b = BlockMask::from_fn(grid, 2, |_, _, _| rng.uniform() < 0.5);
                prop_assert_eq!(a.jaccard(&b), b.jaccard(&a));
                prop_assert_eq!(a.jaccard(&a), 1.0);
            }
        }
    }
}
