//! Block-sparse attention: the online-softmax kernel restricted to kept cells.
//!
//! Every head iterates its own kept-cell list, so heads may carry different
//! budgets. The LSE returned here covers kept blocks only ("sparse LSE") and is
//! diagnostic; the search cache always holds full-attention LSE.

use num_traits::Float;
use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::BlockMask;
use crate::error::{Error, Result};
use crate::flash::{softmax_scale, to_precision, OnlineRow};
use crate::tensor::{check_qkv, AttnTensor, LseVector, Precision, Role};

#[derive(Debug, Clone)]
pub struct SparseAttnResult {
    pub output: AttnTensor,
    /// LSE over kept blocks only.
    pub sparse_lse: LseVector,
    pub skipped_blocks: Vec<usize>,
}

/// Order in which a query block visits its kept key blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VisitOrder {
    #[default]
    Ascending,
    Descending,
}

fn check_mask(q: &AttnTensor, mask: &BlockMask) -> Result<()> {
    if mask.grid().seq_len() != q.len() || mask.heads() != q.heads() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers [{}, {}], tensors are [{}, {}]",
            mask.heads(),
            mask.grid().seq_len(),
            q.heads(),
            q.len()
        )));
    }
    let n = mask.grid().blocks();
    for h in 0..mask.heads() {
        for p in 0..n {
            if mask.row_kept(h, p) == 0 {
                return Err(Error::EmptyBlockRow { head: h, block_row: p });
            }
        }
    }
    Ok(())
}

fn sparse_generic<T: Float + Send + Sync>(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    mask: &BlockMask,
    order: VisitOrder,
) -> Result<SparseAttnResult> {
    let (heads, len, dim) = (q.heads(), q.len(), q.dim());
    let grid = *mask.grid();
    let n = grid.blocks();
    let scale: T = softmax_scale(dim);
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let qh: Vec<T> = to_precision(q.head(h));
            let kh: Vec<T> = to_precision(k.head(h));
            let vh: Vec<T> = to_precision(v.head(h));
            let mut out = Vec::with_capacity(len * dim);
            let mut lse = Vec::with_capacity(len);
            for p in 0..n {
                let mut visit: Vec<usize> = (0..n).filter(|&c| mask.is_kept(h, p, c)).collect();
                if order == VisitOrder::Descending {
                    visit.reverse();
                }
                for i in grid.range(p) {
                    let qi = &qh[i * dim..(i + 1) * dim];
                    let mut row = OnlineRow::new(dim);
                    for &c in &visit {
                        row.update(qi, &kh, &vh, grid.range(c), scale);
                    }
                    let (o, l) = row.finish().expect("mask validated: every row keeps a block");
                    out.extend(o.into_iter().map(|x| x.to_f64().unwrap()));
                    lse.push(l.to_f64().unwrap());
                }
            }
            (out, lse)
        })
        .collect();
    let (out, lse): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_head.into_iter().unzip();
    Ok(SparseAttnResult {
        output: AttnTensor::new(heads, len, dim, Role::Output, out.concat())?,
        sparse_lse: LseVector::new(heads, len, lse.concat())?,
        skipped_blocks: (0..heads).map(|h| grid.cells() - mask.kept_count(h)).collect(),
    })
}

/// Attention over kept cells only, visiting key blocks in ascending order.
pub fn block_sparse_forward(q: &AttnTensor, k: &AttnTensor, v: &AttnTensor, mask: &BlockMask) -> Result<SparseAttnResult> {
    block_sparse_forward_with(q, k, v, mask, VisitOrder::Ascending, Precision::F64)
}

pub fn block_sparse_forward_with(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    mask: &BlockMask,
    order: VisitOrder,
    precision: Precision,
) -> Result<SparseAttnResult> {
    check_qkv(q, k, v)?;
    check_mask(q, mask)?;
    match precision {
        Precision::F64 => sparse_generic::<f64>(q, k, v, mask, order),
        Precision::F32 => sparse_generic::<f32>(q, k, v, mask, order),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopCount {
    /// `4·L²·D` per head.
    pub dense_per_head: f64,
    /// `4·D·Σ(valid_q·valid_k)` over kept cells, per head.
    pub sparse_per_head: Vec<f64>,
    /// Total sparse over total dense.
    pub ratio: f64,
}

/// Multiply-add FLOPs of the two attention products, dense vs. kept cells.
pub fn flop_count(mask: &BlockMask, head_dim: usize) -> FlopCount {
    let grid = mask.grid();
    let len = grid.seq_len() as f64;
    let d = head_dim as f64;
    let dense = 4.0 * len * len * d;
    let n = grid.blocks();
    let sparse: Vec<f64> = (0..mask.heads())
        .map(|h| {
            let mut area = 0usize;
            for p in 0..n {
                for q in 0..n {
                    if mask.is_kept(h, p, q) {
                        area += grid.cell_area(p, q);
                    }
                }
            }
            4.0 * area as f64 * d
        })
        .collect();
    let ratio = sparse.iter().sum::<f64>() / (dense * mask.heads() as f64);
    FlopCount {
        dense_per_head: dense,
        sparse_per_head: sparse,
        ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockGrid;
    use crate::flash::flash_forward;
    use crate::oracle::{masked_dense_attention, MaskBias};
    use crate::tensor::{seeded_tensor_stream, NormalStream};

    fn qkv(h: usize, l: usize, d: usize, seed: u64) -> (AttnTensor, AttnTensor, AttnTensor) {
        (
            seeded_tensor_stream(h, l, d, seed, 0, 1.0, Role::Query).unwrap(),
            seeded_tensor_stream(h, l, d, seed, 1, 1.0, Role::Key).unwrap(),
            seeded_tensor_stream(h, l, d, seed, 2, 1.0, Role::Value).unwrap(),
        )
    }

    #[test]
    fn full_mask_equals_flash() {
        let (q, k, v) = qkv(2, 50, 8, 31);
        let grid = BlockGrid::new(50, 16).unwrap();
        let s = block_sparse_forward(&q, &k, &v, &BlockMask::full(grid, 2)).unwrap();
        let f = flash_forward(&q, &k, &v, 16).unwrap();
        assert!(s.output.max_abs_diff(&f.output) <= 1e-12);
        assert_eq!(s.skipped_blocks, vec![0, 0]);
    }

    #[test]
    fn block_diagonal_is_local() {
        let (q, k, v) = qkv(1, 32, 4, 32);
        let grid = BlockGrid::new(32, 16).unwrap();
        let mask = BlockMask::from_fn(grid, 1, |_, p, c| p == c);
        let a = block_sparse_forward(&q, &k, &v, &mask).unwrap();
        let perturbed = AttnTensor::from_fn(1, 32, 4, Role::Value, |_, i, d| {
            v.get(0, i, d) + if i >= 16 { 100.0 } else { 0.0 }
        })
        .unwrap();
        let b = block_sparse_forward(&q, &k, &perturbed, &mask).unwrap();
        for i in 0..16 {
            assert_eq!(a.output.row(0, i), b.output.row(0, i));
        }
        assert_ne!(a.output.row(0, 20), b.output.row(0, 20));
        assert_eq!(a.skipped_blocks, vec![2]);
    }

    #[test]
    fn random_mask_matches_masked_dense() {
        let (q, k, v) = qkv(2, 64, 8, 33);
        let grid = BlockGrid::new(64, 8).unwrap();
        let mut rng = NormalStream::new(33, 7);
        let mask = BlockMask::from_fn(grid, 2, |_, p, c| p == c || rng.uniform() < 0.4);
        let s = block_sparse_forward(&q, &k, &v, &mask).unwrap();
        let d = masked_dense_attention(&q, &k, &v, &mask.expand(), MaskBias::Exclude).unwrap();
        assert!(s.output.max_abs_diff(&d.output) <= 1e-6);
        assert!(s.sparse_lse.max_abs_diff(&d.lse) <= 1e-9);
    }

    #[test]
    fn visit_order_is_immaterial() {
        let (q, k, v) = qkv(2, 45, 8, 34);
        let grid = BlockGrid::new(45, 8).unwrap();
        let mut rng = NormalStream::new(34, 7);
        let mask = BlockMask::from_fn(grid, 2, |_, p, c| p == c || rng.uniform() < 0.5);
        let a = block_sparse_forward_with(&q, &k, &v, &mask, VisitOrder::Ascending, Precision::F64).unwrap();
        let b = block_sparse_forward_with(&q, &k, &v, &mask, VisitOrder::Descending, Precision::F64).unwrap();
        assert!(a.output.max_abs_diff(&b.output) <= 1e-10);
    }

    #[test]
    fn empty_row_names_head_and_row() {
        let (q, k, v) = qkv(2, 16, 4, 35);
        let grid = BlockGrid::new(16, 4).unwrap();
        let mask = BlockMask::from_fn(grid, 2, |h, p, _| !(h == 1 && p == 2));
        assert_eq!(
            block_sparse_forward(&q, &k, &v, &mask).unwrap_err(),
            Error::EmptyBlockRow { head: 1, block_row: 2 }
        );
    }

    #[test]
    fn skipped_plus_kept_is_total() {
        let grid = BlockGrid::new(30, 7).unwrap();
        let (q, k, v) = qkv(3, 30, 4, 36);
        let mut rng = NormalStream::new(36, 1);
        let mask = BlockMask::from_fn(grid, 3, |_, p, c| p == c || rng.uniform() < 0.3);
        let r = block_sparse_forward(&q, &k, &v, &mask).unwrap();
        for h in 0..3 {
            assert_eq!(r.skipped_blocks[h] + mask.kept_count(h), grid.cells());
        }
    }

    #[test]
    fn flops_full_and_half() {
        let grid = BlockGrid::new(64, 32).unwrap();
        assert_eq!(flop_count(&BlockMask::full(grid, 2), 16).ratio, 1.0);
        let half = BlockMask::from_fn(grid, 1, |_, p, _| p == 0);
        let f = flop_count(&half, 16);
        assert_eq!(f.ratio, 0.5);
        assert_eq!(f.dense_per_head, 4.0 * 64.0 * 64.0 * 16.0);
    }

    #[test]
    fn flops_partial_trailing_block() {
        let grid = BlockGrid::new(10, 8).unwrap();
        let m = BlockMask::from_fn(grid, 1, |_, p, c| p == 1 && c == 1);
        // one 2x2 cell out of 10x10
        assert!((flop_count(&m, 3).ratio - 0.04).abs() < 1e-15);
    }

    #[test]
    fn single_precision_sparse() {
        let (q, k, v) = qkv(1, 32, 8, 37);
        let grid = BlockGrid::new(32, 8).unwrap();
        let mask = BlockMask::from_fn(grid, 1, |_, p, c| p >= c);
        let a = block_sparse_forward(&q, &k, &v, &mask).unwrap();
        let b = block_sparse_forward_with(&q, &k, &v, &mask, VisitOrder::Ascending, Precision::F32).unwrap();
        assert!(a.output.max_abs_diff(&b.output) < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn any_valid_mask_matches_masked_dense(
                seed in 0u64..10_000,
                len in 2usize..60,
                block in 1usize..20,
                keep in 0.0f64..1.0,
            ) {
                let (q, k, v) = qkv(2, len, 6, seed);
                let grid = BlockGrid::new(len, block).unwrap();
                let mut rng = NormalStream::new(seed, 5);
                let mask = BlockMask::from_fn(grid, 2, |_, p, c| p == c || rng.uniform() < keep);
                let s = block_sparse_forward(&q, &k, &v, &mask).unwrap();
                let d = masked_dense_attention(&q, &k, &v, &mask.expand(), MaskBias::Exclude).unwrap();
                prop_assert!(s.output.max_abs_diff(&d.output) <= 1e-9);
                let f = flop_count(&mask, 6);
                prop_assert!(f.ratio > 0.0 && f.ratio <= 1.0);
            }
        }
    }
}
