//! Command-line front end: `calibrate`, `run`, `analyze`, `macs`, `report`.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 artifact mismatch.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sdtm::schedule::ScheduleConfig;
use sdtm::sim::ModelShape;
use sdtm::Parallelism;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "sdtm",
    version,
    about = "Structure-then-detail token merging simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Force single-threaded execution.
    #[arg(long)]
    pub sequential: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if self.sequential {
            cfg.parallelism = Parallelism::Sequential;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a ratio-threshold map from baseline sample runs.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the merged pipeline and write metrics.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write subband-norm and redundancy CSVs for the baseline model.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print analytic MAC counts for a shape, optionally under a schedule.
    Macs(MacsArgs),
    /// Re-check a run directory and print per-step MACs.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    /// Preset name (`sd3-medium`, `toy`).
    #[arg(long, conflicts_with = "blocks")]
    pub shape: Option<String>,
    #[arg(long, requires_all = ["dim", "mlp_dim", "heads", "grid_height", "grid_width", "text_tokens"])]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub grid_height: Option<usize>,
    #[arg(long)]
    pub grid_width: Option<usize>,
    #[arg(long)]
    pub text_tokens: Option<usize>,
    /// Include the score and value products in attention MACs.
    #[arg(long)]
    pub attention_core: bool,
    /// Forward passes per step; 2 counts a classifier-free-guidance pair.
    /// Defaults to the preset's value, or 1 for explicit shapes.
    #[arg(long)]
    pub batch_multiplier: Option<u64>,
    /// Schedule JSON file, or `default` for the built-in schedule.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

impl MacsArgs {
    fn shape(&self) -> Result<ModelShape, CliError> {
        if let Some(name) = &self.shape {
            let mut shape = ModelShape::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown shape preset {name:?}")))?;
            shape.count_attention_core |= self.attention_core;
            if let Some(b) = self.batch_multiplier {
                shape.batch_multiplier = b;
            }
            shape.validate()?;
            return Ok(shape);
        }
        let Some(blocks) = self.blocks else {
            return Err(CliError::Config(
                "give --shape or explicit dimensions".into(),
            ));
        };
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| CliError::Config(format!("--{name} is required with --blocks")))
        };
        let (h, w) = (
            need(self.grid_height, "grid-height")?,
            need(self.grid_width, "grid-width")?,
        );
        let shape = ModelShape {
            blocks,
            model_dim: need(self.dim, "dim")?,
            mlp_dim: need(self.mlp_dim, "mlp-dim")?,
            heads: need(self.heads, "heads")?,
            grid_height: h,
            grid_width: w,
            image_tokens: h * w,
            text_tokens: need(self.text_tokens, "text-tokens")?,
            count_attention_core: self.attention_core,
            batch_multiplier: self.batch_multiplier.unwrap_or(1),
        };
        shape.validate()?;
        Ok(shape)
    }

    fn schedule(&self) -> Result<Option<ScheduleConfig>, CliError> {
        match self.schedule.as_deref() {
            None => Ok(None),
            Some("default") => Ok(Some(ScheduleConfig::default())),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{path}: {e}")))?;
                let s: ScheduleConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
                s.validate()?;
                Ok(Some(s))
            }
        }
    }
}

/// Runs a parsed command, writing reports to `out` and diagnostics to `err`.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Calibrate {
            config,
            samples,
            out: map,
        } => commands::cmd_calibrate(&config.load()?, *samples, map, out),
        Command::Run {
            config,
            map,
            out: dir,
        } => {
            commands::cmd_run(&config.load()?, map.as_deref(), dir.as_deref(), out, err).map(|_| ())
        }
        Command::Analyze { config, out: dir } => {
            commands::cmd_analyze(&config.load()?, dir.as_deref(), out).map(|_| ())
        }
        Command::Macs(args) => {
            let m = commands::macs_summary(
                &args.shape()?,
                args.schedule()?.as_ref(),
                args.window,
                args.split,
            )?;
            let text = if args.json {
                serde_json::to_string_pretty(&m).expect("serializable") + "\n"
            } else {
                commands::render_macs(&m)
            };
            out.write_all(text.as_bytes()).map_err(CliError::stdout)
        }
        Command::Report { run } => commands::cmd_report(run, out).map(|_| ()),
    }
}
