//! Synthetic multi-step attention workload.
//!
//! This is not a diffusion model. It is a parametric tensor process whose dense
//! attention has the structure block-sparse search is meant to exploit:
//!
//! * each latent frame has its own direction, so queries attend mostly inside
//!   their own frame region;
//! * inside a frame, a contiguous span of "hub" keys carries most of the mass,
//!   so each region has a column-like pattern that does not line up across
//!   regions;
//! * a random, uneven subset of frame pairs is coupled, giving weak
//!   off-diagonal regions of varying strength;
//! * text keys share a sink direction that every query partly points along;
//! * heads differ in sharpness, so their recall at a fixed sparsity differs.
//!
//! Step `t` mixes the base tensors with fresh noise,
//! `x_t = √(1-σ²)·x + σ·rms(x)·z_t`, which keeps per-entry variance constant
//! while the structure drifts by an amount set by `σ`.

use serde::{Deserialize, Serialize};

use crate::blocks::{ceil_budget, BlockGrid};
use crate::error::{Error, Result};
use crate::flash::flash_forward;
use crate::layout::SequenceLayout;
use crate::oracle::{block_mask_recall, dense_attention, optimal_block_mask_oracle, AttnWeights};
use crate::tensor::{AttnTensor, NormalStream, Role};

/// How strongly and how unevenly frames attend each other, in logit units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameCoupling {
    /// Logit of a query toward the hub keys of its own frame.
    pub intra: f64,
    /// Largest logit toward hub keys of a coupled frame.
    pub inter: f64,
    /// Probability that an ordered pair of distinct frames is coupled.
    pub density: f64,
    /// Fraction of each frame's tokens forming its hub span.
    pub hub_fraction: f64,
    /// Non-hub key strength relative to hub keys.
    pub background: f64,
}

impl Default for FrameCoupling {
    fn default() -> Self {
        Self {
            intra: 4.0,
            inter: 3.0,
            density: 0.4,
            hub_fraction: 0.125,
            background: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub layout: SequenceLayout,
    pub heads: usize,
    pub head_dim: usize,
    pub steps: usize,
    /// Per-step drift `σ`, in `[0, 1]`.
    pub drift: f64,
    #[serde(default)]
    pub coupling: FrameCoupling,
    /// Logit of every query toward text keys.
    pub sink_strength: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    /// Desk-scale default: 4 frames of 8x8 tokens plus 16 text tokens (L = 272).
    fn default() -> Self {
        Self {
            layout: SequenceLayout::new(4, 8, 8, 16).expect("valid default layout"),
            heads: 4,
            head_dim: 32,
            steps: 50,
            drift: 0.05,
            coupling: FrameCoupling::default(),
            sink_strength: 2.5,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidArgument("heads and head_dim must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("workload needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::InvalidArgument(format!("drift must be in [0, 1], got {}", self.drift)));
        }
        let c = &self.coupling;
        if !(0.0..=1.0).contains(&c.density) || !(c.hub_fraction > 0.0 && c.hub_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "coupling density must be in [0, 1] and hub_fraction in (0, 1]".into(),
            ));
        }
        if ![c.intra, c.inter, c.background, self.sink_strength].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("coupling strengths must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workload spec serializes")
    }

    /// Parses a spec; errors carry the line and column of the offending entry.
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let spec: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTensors {
    pub step: usize,
    pub q: AttnTensor,
    pub k: AttnTensor,
    pub v: AttnTensor,
}

// Stream ids: tag in the top 16 bits, step in the next 24, head in the low 24.
const TAG_STRUCTURE: u64 = 1;
const TAG_QUERY_NOISE: u64 = 2;
const TAG_KEY_NOISE: u64 = 3;
const TAG_VALUE: u64 = 4;
const TAG_STEP_Q: u64 = 5;
const TAG_STEP_K: u64 = 6;
const TAG_STEP_V: u64 = 7;

fn stream(tag: u64, step: usize, head: usize) -> u64 {
    (tag << 48) | ((step as u64 & 0xFF_FFFF) << 24) | (head as u64 & 0xFF_FFFF)
}

fn unit_vector(rng: &mut NormalStream, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Step-independent Q, K, V for one head.
fn base_head(spec: &WorkloadSpec, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let layout = spec.layout;
    let (len, dim) = (layout.len(), spec.head_dim);
    let frames = layout.frames();
    let frame_len = layout.frame_len();
    let c = spec.coupling;

    // q·k/√D = a·b·(u·u') when q = a·D^¼·u and k = b·D^¼·u'
    let root = (dim as f64).powf(0.25);
    let sharp = if spec.heads > 1 {
        0.6 + 0.8 * h as f64 / (spec.heads - 1) as f64
    } else {
        1.0
    };

    let mut rng = NormalStream::new(spec.seed, stream(TAG_STRUCTURE, 0, h));
    let dirs: Vec<Vec<f64>> = (0..frames).map(|_| unit_vector(&mut rng, dim)).collect();
    let sink = unit_vector(&mut rng, dim);
    let text_dir = unit_vector(&mut rng, dim);
    let hub_len = ((c.hub_fraction * frame_len as f64).round() as usize).clamp(1, frame_len);
    let hub_start: Vec<usize> = (0..frames).map(|_| rng.below(frame_len - hub_len + 1)).collect();
    let coupling: Vec<Vec<f64>> = (0..frames)
        .map(|f| {
            (0..frames)
                .map(|g| {
                    let coupled = rng.uniform() < c.density;
                    let strength = 0.3 + 0.7 * rng.uniform();
                    if f == g {
                        c.intra
                    } else if coupled {
                        c.inter * strength
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut q_noise = NormalStream::new(spec.seed, stream(TAG_QUERY_NOISE, 0, h));
    let mut k_noise = NormalStream::new(spec.seed, stream(TAG_KEY_NOISE, 0, h));
    let noise_scale = root * 0.35 / (dim as f64).sqrt();

    let mut q = Vec::with_capacity(len * dim);
    let mut k = Vec::with_capacity(len * dim);
    for i in 0..len {
        let mut qi = vec![0.0; dim];
        let mut ki = vec![0.0; dim];
        match layout.frame_of(i) {
            Some(f) => {
                for (g, dir) in dirs.iter().enumerate() {
                    let w = sharp * coupling[f][g];
                    if w != 0.0 {
                        for (x, d) in qi.iter_mut().zip(dir) {
                            *x += w * d;
                        }
                    }
                }
                let offset = i - f * frame_len;
                let hub = offset >= hub_start[f] && offset < hub_start[f] + hub_len;
                let kw = if hub { 1.0 } else { c.background };
                for (x, d) in ki.iter_mut().zip(&dirs[f]) {
                    *x += kw * d;
                }
            }
            None => {
                for (x, d) in qi.iter_mut().zip(&text_dir) {
                    *x += sharp * c.intra * d;
                }
                for (x, d) in ki.iter_mut().zip(&sink) {
                    *x += d;
                }
            }
        }
        for (x, d) in qi.iter_mut().zip(&sink) {
            *x += sharp * spec.sink_strength * d;
        }
        q.extend(qi.into_iter().map(|x| root * x + noise_scale * q_noise.normal()));
        k.extend(ki.into_iter().map(|x| root * x + noise_scale * k_noise.normal()));
    }

    let mut v_rng = NormalStream::new(spec.seed, stream(TAG_VALUE, 0, h));
    let v = (0..len * dim).map(|_| v_rng.normal()).collect();
    (q, k, v)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn drift_in_place(base: &mut [f64], sigma: f64, rng: &mut NormalStream) {
    let scale = sigma * rms(base);
    let keep = (1.0 - sigma * sigma).sqrt();
    for x in base.iter_mut() {
        *x = keep * *x + scale * rng.normal();
    }
}

/// Q, K, V at `step` (1-based).
pub fn generate_step(spec: &WorkloadSpec, step: usize) -> Result<StepTensors> {
    spec.validate()?;
    if step == 0 || step > spec.steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 1..={}",
            spec.steps
        )));
    }
    let (len, dim) = (spec.len(), spec.head_dim);
    let mut q = Vec::with_capacity(spec.heads * len * dim);
    let mut k = Vec::with_capacity(spec.heads * len * dim);
    let mut v = Vec::with_capacity(spec.heads * len * dim);
    for h in 0..spec.heads {
        let (mut qh, mut kh, mut vh) = base_head(spec, h);
        if spec.drift > 0.0 {
            drift_in_place(&mut qh, spec.drift, &mut NormalStream::new(spec.seed, stream(TAG_STEP_Q, step, h)));
            drift_in_place(&mut kh, spec.drift, &mut NormalStream::new(spec.seed, stream(TAG_STEP_K, step, h)));
            drift_in_place(&mut vh, spec.drift, &mut NormalStream::new(spec.seed, stream(TAG_STEP_V, step, h)));
        }
        q.extend(qh);
        k.extend(kh);
        v.extend(vh);
    }
    Ok(StepTensors {
        step,
        q: AttnTensor::new(spec.heads, len, dim, Role::Query, q)?,
        k: AttnTensor::new(spec.heads, len, dim, Role::Key, k)?,
        v: AttnTensor::new(spec.heads, len, dim, Role::Value, v)?,
    })
}

/// Dense attention weights at `step`.
pub fn dense_weights(spec: &WorkloadSpec, step: usize) -> Result<AttnWeights> {
    let t = generate_step(spec, step)?;
    Ok(dense_attention(&t.q, &t.k, &t.v)?.weights)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossRecall {
    /// Recall on B's weights of the optimal mask searched on A.
    pub cross: Vec<f64>,
    /// Recall on B's weights of B's own optimal mask.
    pub own: Vec<f64>,
}

/// Applies the step-1 optimal block mask of `a` to the step-1 weights of `b`.
pub fn cross_input_recall(a: &WorkloadSpec, b: &WorkloadSpec, sparsity: f64, block_size: usize) -> Result<CrossRecall> {
    if a.layout != b.layout || a.heads != b.heads || a.head_dim != b.head_dim {
        return Err(Error::ShapeMismatch("workloads differ in layout, heads or head_dim".into()));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let grid = BlockGrid::new(a.len(), block_size)?;
    let budgets = vec![ceil_budget(sparsity, grid.cells()); a.heads];
    let wa = dense_weights(a, 1)?;
    let wb = dense_weights(b, 1)?;
    let mask_a = optimal_block_mask_oracle(&wa, &grid, &budgets)?;
    let mask_b = optimal_block_mask_oracle(&wb, &grid, &budgets)?;
    Ok(CrossRecall {
        cross: block_mask_recall(&wb, &mask_a)?,
        own: block_mask_recall(&wb, &mask_b)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LseDrift {
    pub from_step: usize,
    pub to_step: usize,
    /// Mean of `|ΔLSE|` over all heads and rows.
    pub mean_abs: f64,
    /// Standard deviation of `ΔLSE`.
    pub std: f64,
    pub max_abs: f64,
}

/// Row-LSE changes between consecutive entries of `steps`.
pub fn lse_drift_stats(spec: &WorkloadSpec, steps: &[usize]) -> Result<Vec<LseDrift>> {
    if steps.len() < 2 {
        return Err(Error::InvalidArgument("LSE drift needs at least two steps".into()));
    }
    let lse: Vec<_> = steps
        .iter()
        .map(|&s| {
            let t = generate_step(spec, s)?;
            Ok(flash_forward(&t.q, &t.k, &t.v, 64)?.lse)
        })
        .collect::<Result<_>>()?;
    Ok(steps
        .windows(2)
        .zip(lse.windows(2))
        .map(|(s, l)| {
            let delta: Vec<f64> = l[1].values().iter().zip(l[0].values()).map(|(b, a)| b - a).collect();
            let n = delta.len() as f64;
            let mean = delta.iter().sum::<f64>() / n;
            LseDrift {
                from_step: s[0],
                to_step: s[1],
                mean_abs: delta.iter().map(|d| d.abs()).sum::<f64>() / n,
                std: (delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt(),
                max_abs: delta.iter().fold(0.0, |m, d| f64::max(m, d.abs())),
            }
        })
        .collect())
}

/// Mean weight mass per intra-frame region and per inter-frame region, averaged over heads.
pub fn region_mass(weights: &AttnWeights, layout: &SequenceLayout) -> (f64, f64) {
    let frames = layout.frames();
    let mut region = vec![0.0; frames * frames];
    for h in 0..weights.heads() {
        for i in 0..layout.video_len() {
            let fi = i / layout.frame_len();
            for (j, &w) in weights.row(h, i)[..layout.video_len()].iter().enumerate() {
                region[fi * frames + j / layout.frame_len()] += w;
            }
        }
    }
    let heads = weights.heads() as f64;
    let intra: f64 = (0..frames).map(|f| region[f * frames + f]).sum::<f64>() / (frames as f64 * heads);
    let inter_count = (frames * frames - frames) as f64;
    let inter = if inter_count > 0.0 {
        (region.iter().sum::<f64>() - intra * frames as f64 * heads) / (inter_count * heads)
    } else {
        0.0
    };
    (intra, inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            layout: SequenceLayout::new(2, 4, 4, 8).unwrap(),
            heads: 2,
            head_dim: 8,
            steps: 5,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn zero_drift_steps_identical() {
        let spec = WorkloadSpec {
            drift: 0.0,
            ..small()
        };
        let a = generate_step(&spec, 1).unwrap();
        let b = generate_step(&spec, 5).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.k, b.k);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn drift_changes_steps_but_is_deterministic() {
        let spec = small();
        let a = generate_step(&spec, 2).unwrap();
        let b = generate_step(&spec, 3).unwrap();
        assert_ne!(a.q, b.q);
        assert_eq!(a, generate_step(&spec, 2).unwrap());
    }

    #[test]
    fn invalid_step_rejected() {
        assert!(generate_step(&small(), 0).is_err());
        assert!(generate_step(&small(), 6).is_err());
    }

    #[test]
    fn drift_keeps_variance() {
        let spec = WorkloadSpec {
            drift: 0.5,
            ..small()
        };
        let base = generate_step(&WorkloadSpec { drift: 0.0, ..spec.clone() }, 1).unwrap();
        let moved = generate_step(&spec, 1).unwrap();
        let ratio = rms(moved.q.data()) / rms(base.q.data());
        assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn toml_round_trip() {
        let spec = WorkloadSpec::default();
        let text = spec.to_toml();
        assert_eq!(WorkloadSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn toml_errors_have_line_numbers() {
        let text = "heads = 4\nhead_dim = 32\nsteps = \"many\"\n";
        let err = WorkloadSpec::from_toml(text).unwrap_err();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn cross_recall_self_equals_own() {
        let spec = small();
        let r = cross_input_recall(&spec, &spec, 0.75, 4).unwrap();
        assert_eq!(r.cross, r.own);
    }

    #[test]
    fn cross_recall_bounded_by_own() {
        let a = small();
        let b = WorkloadSpec { seed: 7, ..small() };
        let r = cross_input_recall(&a, &b, 0.75, 4).unwrap();
        for (c, o) in r.cross.iter().zip(&r.own) {
            assert!(c <= &(o + 1e-12));
        }
    }

    #[test]
    fn lse_drift_zero_without_drift() {
        let spec = WorkloadSpec {
            drift: 0.0,
            ..small()
        };
        let stats = lse_drift_stats(&spec, &[1, 2, 3]).unwrap();
        assert_eq!(stats.len(), 2);
        for s in stats {
            assert_eq!((s.mean_abs, s.std, s.max_abs), (0.0, 0.0, 0.0));
        }
        assert!(lse_drift_stats(&spec, &[1]).is_err());
    }

    mod default_workload {
        use super::*;
        use crate::blocks::BlockGrid;
        use crate::search::{fused_online_search, lse_cached_search, recall_from_scores, search_mask, SparsityConfig};

        fn config() -> SparsityConfig {
            SparsityConfig {
                block_size: 16,
                ..SparsityConfig::default()
            }
        }

        #[test]
        fn frame_regions_dominate() {
            let spec = WorkloadSpec::default();
            let (intra, inter) = region_mass(&dense_weights(&spec, 1).unwrap(), &spec.layout);
            assert!(intra / inter > 1.0, "intra {intra}, inter {inter}");
        }

        #[test]
        fn consecutive_masks_overlap() {
            let spec = WorkloadSpec::default();
            let grid = BlockGrid::new(spec.len(), 16).unwrap();
            let masks: Vec<_> = (1..=spec.steps)
                .map(|step| {
                    let t = generate_step(&spec, step).unwrap();
                    let (_, scores) = fused_online_search(&t.q, &t.k, &t.v, &grid).unwrap();
                    search_mask(&scores, &spec.layout, &config()).unwrap()
                })
                .collect();
            for (i, w) in masks.windows(2).enumerate() {
                let j = w[0].jaccard(&w[1]);
                assert!(j >= 0.8, "steps {} and {}: jaccard {j}", i + 1, i + 2);
            }
        }

        #[test]
        fn stale_lse_searches_like_fresh() {
            let spec = WorkloadSpec::default();
            let grid = BlockGrid::new(spec.len(), 16).unwrap();
            let early = generate_step(&spec, 10).unwrap();
            let (flash, _) = fused_online_search(&early.q, &early.k, &early.v, &grid).unwrap();
            let late = generate_step(&spec, 30).unwrap();
            let (_, exact) = fused_online_search(&late.q, &late.k, &late.v, &grid).unwrap();
            let stale = lse_cached_search(&late.q, &late.k, &flash.lse, &grid).unwrap();
            let fresh = recall_from_scores(&exact, &search_mask(&exact, &spec.layout, &config()).unwrap()).unwrap();
            let cached = recall_from_scores(&exact, &search_mask(&stale, &spec.layout, &config()).unwrap()).unwrap();
            for (c, f) in cached.iter().zip(&fresh) {
                assert!((c - f).abs() <= 0.02, "cached {c}, fresh {f}");
            }
        }

        #[test]
        fn more_drift_moves_lse_more() {
            let steps: Vec<usize> = (1..=10).collect();
            let mean = |drift: f64| {
                let spec = WorkloadSpec { drift, ..WorkloadSpec::default() };
                let stats = lse_drift_stats(&spec, &steps).unwrap();
                stats.iter().map(|s| s.mean_abs).sum::<f64>() / stats.len() as f64
            };
            let (low, high) = (mean(0.05), mean(0.2));
            assert!(low.is_finite() && high >= low, "0.05 -> {low}, 0.2 -> {high}");
        }

        #[test]
        fn drift_stats_reproducible() {
            let spec = WorkloadSpec::default();
            assert_eq!(lse_drift_stats(&spec, &[1, 2, 3]).unwrap(), lse_drift_stats(&spec, &[1, 2, 3]).unwrap());
        }

        #[test]
        fn other_seed_loses_recall() {
            let a = WorkloadSpec::default();
            let b = WorkloadSpec { seed: 43, ..a.clone() };
            let r = cross_input_recall(&a, &b, 0.9, 16).unwrap();
            let cross: f64 = r.cross.iter().sum();
            let own: f64 = r.own.iter().sum();
            assert!(cross < own, "cross {cross}, own {own}");
        }
    }
}
