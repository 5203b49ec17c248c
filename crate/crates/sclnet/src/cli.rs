//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, DetectionSource};
use crate::config::{parse_assignment, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sclnet", version, about = "Scale-complementary object detection at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config layering shared by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with flat config keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset: PNG images plus annotations.json.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Print scale-variation statistics of a dataset as JSON.
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory or annotation file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and write model.ckpt, train_log.jsonl and config.toml.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        disable_cscl: bool,
        #[arg(long)]
        disable_iccl: bool,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint or a detections file; writes metrics.json.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "detections_file", conflicts_with = "detections_file")]
        checkpoint: Option<PathBuf>,
        /// COCO results JSON used instead of running a model.
        #[arg(long)]
        detections_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write raw and fused pyramid heatmaps of one image as PNGs.
    Visualize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position of the image in the annotation file.
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn resolve(args: &ConfigArgs, extra: Vec<(&str, toml::Value)>) -> CliResult<RunConfig> {
    let mut ov = Vec::new();
    if let Some(s) = args.seed {
        ov.push(("seed".to_string(), toml::Value::Integer(s as i64)));
    }
    ov.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    for s in &args.set {
        ov.push(parse_assignment(s)?);
    }
    RunConfig::resolve(args.config.as_deref(), &ov)
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { cfg, out, images, force } => {
            let extra = images.map(|n| vec![("synth_images", int(n))]).unwrap_or_default();
            let rc = resolve(&cfg, extra)?;
            commands::gen_data(&rc, &out, force)?;
        }
        Command::Stats { cfg, data } => {
            let rc = resolve(&cfg, vec![])?;
            print_json(&commands::stats(&rc, &data)?);
        }
        Command::Train { cfg, data, out, steps, disable_cscl, disable_iccl, force } => {
            let mut extra = Vec::new();
            if let Some(n) = steps {
                extra.push(("steps", int(n)));
            }
            if disable_cscl {
                extra.push(("enable_cscl", toml::Value::Boolean(false)));
            }
            if disable_iccl {
                extra.push(("enable_iccl", toml::Value::Boolean(false)));
            }
            let rc = resolve(&cfg, extra)?;
            let done = commands::train(&rc, &data, &out, force)?;
            if let Some(last) = done.log.last() {
                print_json(last);
            }
        }
        Command::Eval { cfg, data, checkpoint, detections_file, out, force } => {
            let rc = resolve(&cfg, vec![])?;
            let source = match (&checkpoint, &detections_file) {
                (_, Some(f)) => DetectionSource::File(f),
                (Some(c), None) => DetectionSource::Checkpoint(c),
                (None, None) => return Err(CliError::Config("need --checkpoint or --detections-file".into())),
            };
            print_json(&commands::eval(&rc, &data, source, &out, force)?);
        }
        Command::Visualize { cfg, data, checkpoint, image, out, force } => {
            let rc = resolve(&cfg, vec![])?;
            for p in commands::visualize(&rc, &data, &checkpoint, image, &out, force)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
