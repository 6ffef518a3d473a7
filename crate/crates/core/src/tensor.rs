//! Dense `[H, L, D]` tensors, per-row LSE vectors and seeded construction.
//!
//! Random tensors come from ChaCha8 keyed by the 64-bit seed (via
//! `SeedableRng::seed_from_u64`), with an explicit 64-bit stream id selecting
//! independent substreams. Standard normals are drawn with Box-Muller from
//! pairs of 53-bit uniforms, so a tensor is reproducible from
//! `(seed, stream, shape)` alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
}

/// Floating point width used by the blockwise kernels. Oracles always run in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnTensor {
    heads: usize,
    len: usize,
    dim: usize,
    role: Role,
    data: Vec<f64>,
}

impl AttnTensor {
    pub fn new(heads: usize, len: usize, dim: usize, role: Role, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || len == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims must be positive (got H={heads}, L={len}, D={dim})"
            )));
        }
        if data.len() != heads * len * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for [{heads}, {len}, {dim}], got {}",
                heads * len * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite tensor entry at flat index {pos}")));
        }
        Ok(Self {
            heads,
            len,
            dim,
            role,
            data,
        })
    }

    pub fn zeros(heads: usize, len: usize, dim: usize, role: Role) -> Result<Self> {
        Self::new(heads, len, dim, role, vec![0.0; heads * len * dim])
    }

    pub fn from_fn(
        heads: usize,
        len: usize,
        dim: usize,
        role: Role,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(heads * len * dim);
        for h in 0..heads {
            for i in 0..len {
                for d in 0..dim {
                    data.push(f(h, i, d));
                }
            }
        }
        Self::new(heads, len, dim, role, data)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.len * self.dim;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let start = (h * self.len + i) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get(&self, h: usize, i: usize, d: usize) -> f64 {
        self.data[(h * self.len + i) * self.dim + d]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.heads == other.heads && self.len == other.len && self.dim == other.dim
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Elementwise `a·self + b·other`.
    pub fn mix(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("mix of tensors with different shapes".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.heads, self.len, self.dim, self.role, data)
    }
}

/// Checks that Q, K and V agree on `[H, L, D]`.
pub fn check_qkv(q: &AttnTensor, k: &AttnTensor, v: &AttnTensor) -> Result<()> {
    if !q.same_shape(k) || !q.same_shape(v) {
        return Err(Error::ShapeMismatch(format!(
            "Q [{}, {}, {}], K [{}, {}, {}], V [{}, {}, {}]",
            q.heads, q.len, q.dim, k.heads, k.len, k.dim, v.heads, v.len, v.dim
        )));
    }
    Ok(())
}

/// One log-sum-exp per `(head, query row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LseVector {
    heads: usize,
    len: usize,
    values: Vec<f64>,
}

impl LseVector {
    pub fn new(heads: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != heads * len {
            return Err(Error::ShapeMismatch(format!(
                "LSE expects {} values for [{heads}, {len}], got {}",
                heads * len,
                values.len()
            )));
        }
        Ok(Self { heads, len, values })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.values[h * self.len..(h + 1) * self.len]
    }

    pub fn get(&self, h: usize, i: usize) -> f64 {
        self.values[h * self.len + i]
    }

    /// Returns the first non-finite entry as an error.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|x| !x.is_finite()) {
            Some(pos) => Err(Error::NonFiniteLse {
                head: pos / self.len,
                row: pos % self.len,
            }),
            None => Ok(()),
        }
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            heads: self.heads,
            len: self.len,
            values: self.values.iter().map(|x| x + delta).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// Deterministic normal sampler over a ChaCha8 substream.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Standard-normal tensor times `scale`; a pure function of its arguments.
pub fn seeded_tensor(heads: usize, len: usize, dim: usize, seed: u64, scale: f64) -> Result<AttnTensor> {
    seeded_tensor_stream(heads, len, dim, seed, 0, scale, Role::Query)
}

pub fn seeded_tensor_stream(
    heads: usize,
    len: usize,
    dim: usize,
    seed: u64,
    stream: u64,
    scale: f64,
    role: Role,
) -> Result<AttnTensor> {
    let mut rng = NormalStream::new(seed, stream);
    AttnTensor::from_fn(heads, len, dim, role, |_, _, _| scale * rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_is_deterministic() {
        let a = seeded_tensor(2, 8, 4, 7, 1.0).unwrap();
        let b = seeded_tensor(2, 8, 4, 7, 1.0).unwrap();
        assert_eq!(a, b);
        let c = seeded_tensor(2, 8, 4, 8, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_scale_is_zero() {
        let a = seeded_tensor(3, 5, 2, 99, 0.0).unwrap();
        assert!(a.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sample_mean_near_zero() {
        let a = seeded_tensor(2, 8, 4, 7, 1.0).unwrap();
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        assert!(mean.abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn large_sample_is_standard_normal() {
        let a = seeded_tensor(4, 256, 32, 1, 1.0).unwrap();
        let n = a.data().len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn streams_are_independent() {
        let a = seeded_tensor_stream(1, 4, 4, 5, 0, 1.0, Role::Key).unwrap();
        let b = seeded_tensor_stream(1, 4, 4, 5, 1, 1.0, Role::Key).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(AttnTensor::new(0, 1, 1, Role::Query, vec![]).is_err());
        assert!(AttnTensor::new(1, 2, 2, Role::Query, vec![0.0; 3]).is_err());
        assert!(AttnTensor::new(1, 1, 1, Role::Query, vec![f64::NAN]).is_err());
    }

    #[test]
    fn lse_finite_check_names_position() {
        let lse = LseVector::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, f64::INFINITY, 5.0]).unwrap();
        assert_eq!(lse.check_finite(), Err(Error::NonFiniteLse { head: 1, row: 1 }));
    }
}
