//! Blockwise attention with the online softmax.
//!
//! Keys and values are consumed chunk by chunk. Each query row keeps a running
//! max `m`, a running exp-sum `l` and an unnormalized accumulator; a new chunk
//! with max `m_c` rescales both by `exp(m - max(m, m_c))`. After the last chunk
//! the output is `acc / l` and the row LSE is `ln(l) + m`.

use std::ops::Range;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{check_qkv, AttnTensor, LseVector, Precision, Role};

#[derive(Debug, Clone)]
pub struct FlashResult {
    pub output: AttnTensor,
    pub lse: LseVector,
}

/// Running state of one query row.
pub(crate) struct OnlineRow<T> {
    max: T,
    sum: T,
    acc: Vec<T>,
    logits: Vec<T>,
}

impl<T: Float> OnlineRow<T> {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            max: T::neg_infinity(),
            sum: T::zero(),
            acc: vec![T::zero(); dim],
            logits: Vec::new(),
        }
    }

    /// Folds keys `keys` of the flat `[L, D]` buffers into the row state.
    pub(crate) fn update(&mut self, q: &[T], k: &[T], v: &[T], keys: Range<usize>, scale: T) {
        let dim = q.len();
        self.logits.clear();
        let mut chunk_max = T::neg_infinity();
        for j in keys.clone() {
            let kj = &k[j * dim..(j + 1) * dim];
            let z = q.iter().zip(kj).fold(T::zero(), |s, (&a, &b)| s + a * b) * scale;
            chunk_max = chunk_max.max(z);
            self.logits.push(z);
        }
        if chunk_max == T::neg_infinity() {
            return;
        }
        let new_max = self.max.max(chunk_max);
        let alpha = if self.max == T::neg_infinity() {
            T::zero()
        } else {
            (self.max - new_max).exp()
        };
        self.sum = self.sum * alpha;
        for a in &mut self.acc {
            *a = *a * alpha;
        }
        for (j, &z) in keys.zip(&self.logits) {
            let p = (z - new_max).exp();
            self.sum = self.sum + p;
            let vj = &v[j * dim..(j + 1) * dim];
            for (a, &x) in self.acc.iter_mut().zip(vj) {
                *a = *a + p * x;
            }
        }
        self.max = new_max;
    }

    /// Normalized output row and LSE; `None` if no key was visited.
    pub(crate) fn finish(self) -> Option<(Vec<T>, T)> {
        if self.sum <= T::zero() {
            return None;
        }
        let inv = T::one() / self.sum;
        let out = self.acc.into_iter().map(|a| a * inv).collect();
        Some((out, self.sum.ln() + self.max))
    }
}

pub(crate) fn to_precision<T: Float>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::from(v).expect("finite value converts")).collect()
}

pub(crate) fn softmax_scale<T: Float>(dim: usize) -> T {
    T::one() / T::from(dim).expect("dim converts").sqrt()
}

fn flash_generic<T: Float + Send + Sync>(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    chunk: usize,
) -> Result<FlashResult> {
    let (heads, len, dim) = (q.heads(), q.len(), q.dim());
    let scale: T = softmax_scale(dim);
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let qh: Vec<T> = to_precision(q.head(h));
            let kh: Vec<T> = to_precision(k.head(h));
            let vh: Vec<T> = to_precision(v.head(h));
            let mut out = Vec::with_capacity(len * dim);
            let mut lse = Vec::with_capacity(len);
            for i in 0..len {
                let qi = &qh[i * dim..(i + 1) * dim];
                let mut row = OnlineRow::new(dim);
                for start in (0..len).step_by(chunk) {
                    row.update(qi, &kh, &vh, start..(start + chunk).min(len), scale);
                }
                let (o, l) = row.finish().expect("every row sees all keys");
                out.extend(o.into_iter().map(|x| x.to_f64().unwrap()));
                lse.push(l.to_f64().unwrap());
            }
            (out, lse)
        })
        .collect();
    let (out, lse): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_head.into_iter().unzip();
    Ok(FlashResult {
        output: AttnTensor::new(heads, len, dim, Role::Output, out.concat())?,
        lse: LseVector::new(heads, len, lse.concat())?,
    })
}

/// Exact attention output and row LSE, visiting keys in chunks of `chunk`.
pub fn flash_forward(q: &AttnTensor, k: &AttnTensor, v: &AttnTensor, chunk: usize) -> Result<FlashResult> {
    flash_forward_with(q, k, v, chunk, Precision::F64)
}

pub fn flash_forward_with(
    q: &AttnTensor,
    k: &AttnTensor,
    v: &AttnTensor,
    chunk: usize,
    precision: Precision,
) -> Result<FlashResult> {
    check_qkv(q, k, v)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("kernel chunk size must be positive".into()));
    }
    match precision {
        Precision::F64 => flash_generic::<f64>(q, k, v, chunk),
        Precision::F32 => flash_generic::<f32>(q, k, v, chunk),
    }
}
