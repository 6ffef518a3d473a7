//! Command-line front end. Settings resolve as flags, then `BSA_*`
//! environment variables, then the `--config` file, then built-in defaults.

pub mod commands;
pub mod config;
pub mod report;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] crate::Error),
}

#[derive(Debug, Parser)]
#[command(name = "blocksparse", version, about = "Block-sparse attention experiments on a synthetic video workload")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML experiment manifest.
    #[arg(long, global = true, env = "BSA_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "BSA_SEED", value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true, env = "BSA_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "BSA_SPARSITY", value_name = "F")]
    pub sparsity: Option<f64>,
    #[arg(long, global = true, env = "BSA_BLOCK_SIZE", value_name = "N")]
    pub block_size: Option<usize>,
    #[arg(long, global = true, env = "BSA_WARMUP", value_name = "N")]
    pub warmup: Option<usize>,
    /// Comma-separated; the first must equal the warmup step.
    #[arg(long, global = true, env = "BSA_KEY_STEPS", value_name = "LIST", value_delimiter = ',')]
    pub key_steps: Option<Vec<usize>>,
    #[arg(long, global = true, env = "BSA_HEAD_ADAPTIVE", value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub head_adaptive: Option<bool>,
    #[arg(long, global = true, env = "BSA_ROW_WISE", value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub row_wise: Option<bool>,
    #[arg(long, global = true, env = "BSA_TEXT_SINK", value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub text_sink: Option<bool>,
    #[arg(long, global = true, env = "BSA_COMPARE_FULL", value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub compare_full: Option<bool>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            sparsity: self.sparsity,
            block_size: self.block_size,
            warmup: self.warmup,
            key_steps: self.key_steps.clone(),
            head_adaptive: self.head_adaptive,
            row_wise: self.row_wise,
            text_sink: self.text_sink,
            compare_full: self.compare_full,
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&self.overrides());
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every kernel against its reference implementation.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Recall of Topk, Block, Col, Diag and Diag+Col masks per sparsity and head.
    PatternCompare {
        /// Comma-separated sparsities; replaces `[patterns] sparsities`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        sparsities: Option<Vec<f64>>,
    },
    /// Recall, deviation and predicted speedup across sparsities and schedules.
    Sweep {
        /// Comma-separated sparsities; replaces `[sweep] grid`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        grid: Option<Vec<f64>>,
    },
    /// Attention FLOPs and their share of total compute.
    Flops,
    /// Predicted speedup as the video gets longer.
    Scaling {
        /// Comma-separated lengths in seconds; replaces `[scaling] seconds`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        seconds: Option<Vec<f64>>,
    },
    /// One pipeline run: a CSV row per step plus a JSON summary.
    Run,
    /// Mask and LSE stability across steps, and seed dependence.
    Stability,
    /// Print the resolved configuration as TOML.
    Config,
}

/// Runs the sweep and writes `sweep.csv` under `config.out`.
pub fn write_sweep(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let rows = commands::sweep(config)?;
    report::write_csv(&config.out, "sweep", config.seed, &rows)
}

pub fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let mut config = cli.global.resolve()?;
    let out = config.out.clone();
    let seed = config.seed;
    match cli.command {
        Command::Verify { inject_fault } => {
            let checks = verify::run_suite(inject_fault);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} passed, {failed} failed", checks.len() - failed);
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::PatternCompare { sparsities } => {
            if let Some(s) = sparsities {
                config.patterns.sparsities = s;
            }
            let rows = commands::pattern_compare(&config)?;
            let path = report::write_csv(&out, "pattern_compare", seed, &rows)?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
        Command::Sweep { grid } => {
            if let Some(g) = grid {
                config.sweep.grid = g;
            }
            println!("wrote {}", write_sweep(&config)?.display());
        }
        Command::Flops => {
            let r = commands::flops(&config);
            let path = report::write_json(&out, "flops", &r)?;
            println!(
                "dense attention: {:.3} PFLOPs, share {:.1}% dense / {:.1}% at s = {}",
                r.dense_attention_pflops,
                100.0 * r.attention_share_dense,
                100.0 * r.attention_share_sparse,
                r.sparsity
            );
            println!("wrote {}", path.display());
        }
        Command::Scaling { seconds } => {
            if let Some(s) = seconds {
                config.scaling.seconds = s;
            }
            let rows = commands::scaling(&config)?;
            println!("wrote {}", report::write_csv(&out, "scaling", seed, &rows)?.display());
        }
        Command::Run => {
            let (rows, summary) = commands::run(&config)?;
            let csv = report::write_csv(&out, "run_steps", seed, &rows)?;
            let json = report::write_json(&out, "run_summary", &summary)?;
            println!(
                "predicted speedup {:.3}, search cost {:.1}% (model); wrote {} and {}",
                summary.predicted_speedup,
                100.0 * summary.search_fraction,
                csv.display(),
                json.display()
            );
        }
        Command::Stability => {
            let r = commands::stability(&config)?;
            println!("wrote {}", report::write_json(&out, "stability", &r)?.display());
        }
        Command::Config => print!("{}", config.to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_anywhere() {
        let cli = Cli::try_parse_from([
            "blocksparse",
            "sweep",
            "--sparsity",
            "0.7",
            "--key-steps",
            "10,25",
            "--head-adaptive",
            "false",
        ])
        .unwrap();
        let c = cli.global.resolve().unwrap();
        assert_eq!(c.sparsity.sparsity, 0.7);
        assert_eq!(c.schedule.key_steps, vec![10, 25]);
        assert!(!c.sparsity.head_adaptive);
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 3\n[sparsity]\nsparsity = 0.6\n").unwrap();
        let cli = Cli::try_parse_from([
            "blocksparse",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "11",
            "flops",
        ])
        .unwrap();
        let c = cli.global.resolve().unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.sparsity.sparsity, 0.6);
    }

    #[test]
    fn bad_config_reports_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 3\nsteps = 4\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("bad.toml") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn hidden_fault_flag_parses() {
        let cli = Cli::try_parse_from(["blocksparse", "verify", "--inject-fault"]).unwrap();
        assert!(matches!(cli.command, Command::Verify { inject_fault: true }));
    }
}
