//! `nbinv`: train template extractors, face generators and reconstruction
//! networks, and evaluate template-inversion attacks.

mod attack;
mod config;
mod misc;
mod stage;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use nbinv_core::nbnet::Arch;
use nbinv_core::trainer::DataSource;

use config::{Profile, RunConfig};

/// Problems found while validating inputs, before any work starts.
#[derive(Debug)]
pub struct ValidationError(pub Vec<String>);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:")?;
        for p in &self.0 {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

#[derive(Parser, Debug)]
#[command(name = "nbinv", version, about = "Face template inversion toolkit")]
struct Cli {
    /// TOML run configuration; profile defaults fill unset keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Profile used when no config file is given.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "NBINV_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Replace the outputs of an earlier run of the same stage.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

fn parse_data_source(s: &str) -> std::result::Result<DataSource, String> {
    match s {
        "generator" => Ok(DataSource::Generator),
        "raw" | "raw_manifest" | "mixed" => Ok(DataSource::RawManifest),
        other => Err(format!("unknown data source `{other}` (expected generator, raw or mixed)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic face population and a matching desk config.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        train_per_subject: usize,
        #[arg(long, default_value_t = 5)]
        eval_per_subject: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the stand-in template extractor.
    TrainExtractor,
    /// Train the face generator.
    TrainGan {
        /// Continue from the newest checkpoint in the stage directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train a reconstruction network (pixel phase, then perceptual phase).
    TrainNbnet {
        #[arg(long)]
        arch: Option<Arch>,
        /// generator, raw or mixed (raw over all train manifests).
        #[arg(long, value_parser = parse_data_source)]
        data_source: Option<DataSource>,
        /// Print the trainable parameter count and exit.
        #[arg(long)]
        count_params: bool,
    },
    /// Reconstruct faces from templates or from images' templates.
    Reconstruct {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        arch: Option<Arch>,
        /// Image manifest; outputs are original/reconstruction panels.
        #[arg(long, conflicts_with = "templates")]
        images: Option<PathBuf>,
        /// JSON Lines templates; outputs are reconstructions only.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification and identification attacks and write a report.
    Attack,
    /// Fit and sample the NORTA generator from the `[norta]` section.
    NortaDemo,
    /// Merge attack reports and render tables and ROC plots.
    Report {
        /// `report.json` files written by `attack`.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, p) => RunConfig::for_profile(p.unwrap_or_default()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(root) = &cli.output_root {
        cfg.output_dir = root.clone();
    }
    if let Some(id) = &cli.run_id {
        cfg.run_id = id.clone();
    }
    Ok(cfg.resolve())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ow = cli.overwrite;
    match cli.command {
        Command::InitConfig { out } => misc::init_config(&cfg, out.as_deref()),
        Command::SynthData { out, subjects, train_per_subject, eval_per_subject, size } => {
            misc::synth_data(&cfg, &out, subjects, train_per_subject, eval_per_subject, size)
        }
        Command::TrainExtractor => train::train_extractor(&cfg, ow),
        Command::TrainGan { resume } => train::train_gan(&cfg, ow, resume),
        Command::TrainNbnet { arch, data_source, count_params } => {
            let mut cfg = cfg;
            if let Some(a) = arch {
                cfg.nbnet.arch = a;
            }
            if let Some(d) = data_source {
                cfg.train.data_source = d;
            }
            train::train_nbnet(&cfg, ow, count_params)
        }
        Command::Reconstruct { model, arch, images, templates, out } => {
            attack::reconstruct(&cfg, ow, model, arch, images, templates, out)
        }
        Command::Attack => attack::attack(&cfg, ow),
        Command::NortaDemo => misc::norta_demo(&cfg, ow),
        Command::Report { inputs, out } => attack::report(&cfg, ow, &inputs, out),
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ValidationError>()
            || c.is::<toml::de::Error>()
            || matches!(c.downcast_ref::<nbinv_core::Error>(), Some(nbinv_core::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
