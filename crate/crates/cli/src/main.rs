mod commands;
mod config;
mod image_io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use locogs::train::Variant;

use crate::config::RunConfig;

/// Locality-aware Gaussian splat toolkit: coherence analysis, field
/// distillation, toy training, dense initialisation and compression.
#[derive(Parser, Debug)]
#[command(name = "locogs", version, arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model variant whose constants seed the defaults.
    #[arg(long, global = true, value_parser = parse_variant)]
    pub preset: Option<Variant>,
    /// Override one config value, e.g. `--set train.iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown preset `{s}` (base, small)"))
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic splat scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Shuffle attribute records across positions.
        #[arg(long)]
        shuffled: bool,
    },
    /// Attribute coherence report of a splat scene.
    Analyze {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit the field to a scene's implicit attributes.
    Distill {
        scene: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from this field checkpoint instead of a fresh field.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Photometric training against posed images.
    Train {
        /// JSON file listing views (camera + PNG path).
        views: PathBuf,
        /// Initial splat scene.
        #[arg(long, conflicts_with = "points", required_unless_present = "points")]
        init: Option<PathBuf>,
        /// Initial point cloud.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dense point cloud from a density field seen by a set of cameras.
    Densify {
        /// JSON density field description.
        density: PathBuf,
        /// JSON camera list (or a views file).
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a scene and its field into a `.locogs` container.
    Encode {
        scene: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a container into a splat PLY (and optionally the field).
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        field_out: Option<PathBuf>,
    },
    /// Render a PLY scene or container to PNG.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON camera; defaults to one framing the scene.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Reference PNG for PSNR/SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Per-category storage sizes of a container.
    Stats { input: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Analyze { .. } => "analyze",
            Command::Distill { .. } => "distill",
            Command::Train { .. } => "train",
            Command::Densify { .. } => "densify",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Render { .. } => "render",
            Command::Stats { .. } => "stats",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = (|| {
        if let Some(n) = cli.global.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        let cfg = RunConfig::load(cli.global.config.as_deref(), cli.global.preset, &cli.global.sets)?;
        commands::run(&cli.command, &cfg)
    })();
    match result {
        Ok(out) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&out).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let err = serde_json::json!({ "error": { "command": name, "message": e.to_string(), "causes": causes } });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
