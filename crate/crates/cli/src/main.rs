//! `seamkit`: evaluate seams, move between seam, token and edge files, unwrap
//! meshes, and run the sampling / preference / DPO stages of the toy model.
//!
//! Exit codes: 0 success, 2 input error, 3 pipeline error.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Pipeline,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    /// A failure inside the pipeline, prefixed with the stage that failed.
    pub fn stage(stage: &str, err: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Pipeline,
            message: format!("{stage}: {err}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "seamkit", version, about = "Mesh seam evaluation and toy seam-model tooling")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Plain-text key=value configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable result (metrics or training report).
    #[arg(long, global = true)]
    pub json_out: Option<PathBuf>,
    /// Where to write the run manifest. Sampling and training commands
    /// default to `<output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More logging (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Where the seams of `evaluate` and `unwrap` come from.
#[derive(Debug, Args)]
pub struct SeamSource {
    /// Seam file: one segment per line, `x1 y1 z1 x2 y2 z2` in
    /// canonical-cube coordinates. Omit for no seams.
    pub seams: Option<PathBuf>,
    /// Treat the seam file as an edge list (`vi vj` per line).
    #[arg(long)]
    pub edges: bool,
    /// Use the seams implied by the mesh's own UV coordinates.
    #[arg(long, conflicts_with_all = ["seams", "edges"])]
    pub from_uv: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distortion, fragment count and runtime of a seam set on a mesh.
    Evaluate {
        mesh: PathBuf,
        #[command(flatten)]
        source: SeamSource,
        /// Atlas drawing with per-triangle distortion shading.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Seam file to token file.
    Tokenize {
        seams: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Token file to seam file.
    Detokenize {
        tokens: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Map seam segments onto mesh edges.
    Project {
        mesh: PathBuf,
        seams: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Cut and parameterize; writes an OBJ with per-island UVs.
    Unwrap {
        mesh: PathBuf,
        #[command(flatten)]
        source: SeamSource,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Conditioning point clouds as XYZ files `<prefix>.topo.xyz` and
    /// `<prefix>.geom.xyz`.
    SamplePoints {
        mesh: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Points per cloud.
        #[arg(long, default_value_t = 2048)]
        points: usize,
    },
    /// Fit a fresh model to reference seams by next-token likelihood.
    Pretrain {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Draw candidate seam sets for a mesh and score them.
    Sample {
        mesh: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Preference pairs from scored candidates.
    Prefpairs {
        /// `candidates.jsonl` files written by `sample`.
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Preference optimization of a checkpoint against itself as reference.
    Dpo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind {
                ErrorKind::Input => 2,
                ErrorKind::Pipeline => 3,
            })
        }
    }
}
