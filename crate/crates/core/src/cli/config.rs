//! Experiment manifest: a TOML file with one section per concern.
//!
//! ```toml
//! seed = 42
//! out = "results"
//! compare_full = false
//!
//! [workload]            # synthetic tensor process, see `WorkloadSpec`
//! layout = { frames = 4, height = 8, width = 8, text = 16 }
//! heads = 4
//! head_dim = 32
//! steps = 50
//! drift = 0.05
//!
//! [sparsity]            # mask search, see `SparsityConfig`
//! sparsity = 0.8
//! block_size = 16
//!
//! [schedule]
//! warmup = 10
//! key_steps = [10, 30]
//!
//! [cost]
//! search_pass = 0.5
//! ```
//!
//! Every key is optional. The single top-level `seed` drives all randomness,
//! so `[workload]` may not carry its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::layout::SequenceLayout;
use crate::pipeline::{CostModel, SearchSchedule};
use crate::search::SparsityConfig;
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub compare_full: bool,
    pub workload: WorkloadSpec,
    pub sparsity: SparsityConfig,
    pub schedule: ScheduleSection,
    pub cost: CostModel,
    pub patterns: PatternSection,
    pub sweep: SweepSection,
    pub flops: FlopsSection,
    pub scaling: ScalingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("results"),
            compare_full: false,
            workload: WorkloadSpec::default(),
            // 17 blocks per side on the 272-token default workload
            sparsity: SparsityConfig {
                block_size: 16,
                ..SparsityConfig::default()
            },
            schedule: ScheduleSection::default(),
            cost: CostModel::default(),
            patterns: PatternSection::default(),
            sweep: SweepSection::default(),
            flops: FlopsSection::default(),
            scaling: ScalingSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub warmup: usize,
    pub key_steps: Vec<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            warmup: 10,
            key_steps: vec![10, 30],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternSection {
    pub sparsities: Vec<f64>,
}

impl Default for PatternSection {
    fn default() -> Self {
        Self {
            sparsities: vec![0.0, 0.5, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    pub warmups: Vec<usize>,
    /// Key-step sets written for a 50-step run and rescaled to the workload's length.
    pub key_step_sets: Vec<Vec<usize>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            warmups: vec![2, 5, 10, 20],
            key_step_sets: vec![vec![10], vec![10, 30], vec![10, 20, 30], vec![10, 20, 30, 40]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub layout: SequenceLayout,
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub steps: usize,
    /// Non-attention FLOPs per layer and step. Absent means `24·L·(H·D)²`,
    /// the QKV/output projections plus a 4x MLP.
    pub non_attention_per_layer: Option<f64>,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            layout: SequenceLayout::new(13, 45, 80, 224).expect("valid layout"),
            head_dim: 128,
            heads: 24,
            layers: 60,
            steps: 50,
            non_attention_per_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    /// Video lengths in seconds.
    pub seconds: Vec<f64>,
    pub fps: f64,
    /// Pixel frames per latent frame; latent frames are `⌊seconds·fps / c⌋ + 1`.
    pub temporal_compression: usize,
    pub height: usize,
    pub width: usize,
    pub text: usize,
    pub sparsity: SparsityConfig,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            seconds: vec![2.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0],
            fps: 24.0,
            temporal_compression: 4,
            height: 45,
            width: 80,
            text: 224,
            sparsity: SparsityConfig {
                sparsity: 0.9,
                ..SparsityConfig::default()
            },
        }
    }
}

impl ScalingSection {
    pub fn layout_for(&self, seconds: f64) -> crate::Result<SequenceLayout> {
        if !(seconds.is_finite() && seconds >= 0.0 && self.fps > 0.0) || self.temporal_compression == 0 {
            return Err(crate::Error::InvalidArgument(format!(
                "cannot map {seconds} s at {} fps onto latent frames",
                self.fps
            )));
        }
        let frames = (seconds * self.fps / self.temporal_compression as f64).floor() as usize + 1;
        SequenceLayout::new(frames, self.height, self.width, self.text)
    }
}

/// Values from flags or `BSA_*` variables; each one set replaces the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sparsity: Option<f64>,
    pub block_size: Option<usize>,
    pub warmup: Option<usize>,
    pub key_steps: Option<Vec<usize>>,
    pub head_adaptive: Option<bool>,
    pub row_wise: Option<bool>,
    pub text_sink: Option<bool>,
    pub compare_full: Option<bool>,
}

impl ExperimentConfig {
    /// Parses a manifest. Keys absent from a section keep this type's defaults,
    /// not the section type's own.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        // typed parse first so errors carry line numbers
        toml::from_str::<Self>(text).map_err(|e| CliError::Config(e.to_string()))?;
        let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if user
            .get("workload")
            .and_then(|w| w.as_table())
            .is_some_and(|w| w.contains_key("seed"))
        {
            return Err(CliError::Config(
                "`seed` is set once at the top level, not under [workload]".into(),
            ));
        }
        let mut merged = Self::default().to_table();
        merge(&mut merged, user);
        let mut config: Self = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.workload.seed = config.seed;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.workload.seed = self.seed;
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(s) = o.sparsity {
            self.sparsity.sparsity = s;
        }
        if let Some(b) = o.block_size {
            self.sparsity.block_size = b;
        }
        if let Some(w) = o.warmup {
            self.schedule.warmup = w;
        }
        if let Some(k) = &o.key_steps {
            self.schedule.key_steps = k.clone();
        }
        if let Some(v) = o.head_adaptive {
            self.sparsity.head_adaptive = v;
        }
        if let Some(v) = o.row_wise {
            self.sparsity.row_wise = v;
        }
        if let Some(v) = o.text_sink {
            self.sparsity.text_sink = v;
        }
        if let Some(v) = o.compare_full {
            self.compare_full = v;
        }
    }

    pub fn search_schedule(&self) -> crate::Result<SearchSchedule> {
        SearchSchedule::new(
            self.schedule.warmup,
            self.schedule.key_steps.clone(),
            self.workload.steps,
        )
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.workload.validate()?;
        self.sparsity.validate()?;
        self.search_schedule()?;
        Ok(())
    }

    fn to_table(&self) -> toml::Table {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        if let Some(w) = table.get_mut("workload").and_then(|w| w.as_table_mut()) {
            w.remove("seed");
        }
        table
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections() {
        let c = ExperimentConfig::from_toml("seed = 7\n[workload]\ndrift = 0.2\n[sparsity]\nrow_wise = false\n").unwrap();
        assert_eq!(c.workload.drift, 0.2);
        assert_eq!(c.workload.heads, 4);
        assert_eq!(c.workload.seed, 7);
        assert!(!c.sparsity.row_wise);
        assert_eq!(c.sparsity.block_size, 16);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = ExperimentConfig::from_toml("seed = 1\n\n[sparsity]\nsparsity = \"high\"\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        let err = ExperimentConfig::from_toml("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn nested_seed_rejected() {
        assert!(ExperimentConfig::from_toml("[workload]\nseed = 3\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::from_toml("seed = 1\n[sparsity]\nsparsity = 0.5\n").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            sparsity: Some(0.9),
            key_steps: Some(vec![10, 40]),
            text_sink: Some(false),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.workload.seed), (9, 9));
        assert_eq!(c.sparsity.sparsity, 0.9);
        assert_eq!(c.schedule.key_steps, vec![10, 40]);
        assert!(!c.sparsity.text_sink);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn scaling_layouts() {
        let s = ScalingSection::default();
        let l = s.layout_for(2.0).unwrap();
        assert_eq!(l.frames(), 13);
        assert_eq!(l.len(), 47_024);
    }
}
