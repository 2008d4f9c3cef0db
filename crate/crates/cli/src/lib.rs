//! Command-line front end: train models, translate images between classes,
//! export translation grids, fit linear probes, and inspect prior geometry.
//!
//! The binary is a thin sequential orchestrator over the `rotvae` library.
//! Exit codes: 0 on success, 1 on runtime failure (with a one-line
//! `error: <class>: <message>` on stderr), 2 on usage errors.

pub mod commands;
pub mod export;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use export::{export_image_grid, grid_pixel_dims, read_pgm};

#[derive(Debug, Parser)]
#[command(
    name = "rotvae",
    version,
    about = "Multi-domain image translation with a single VAE and rotation-based class priors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file or a built-in preset.
    Train(TrainArgs),
    /// Translate held-out test images to a target class.
    Translate(TranslateArgs),
    /// Export the full class-by-class translation grid as an image.
    Grid(GridArgs),
    /// Fit linear probes on both latent blocks and report their accuracy.
    Probe(ProbeArgs),
    /// Build (or load) a prior geometry and print its diagnostics.
    Priors(PriorsArgs),
}

/// `key=value` pairs applied on top of the config file.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Path to a config file, or a preset name (mnist-desk, synthetic-desk,
    /// mnist-paper).
    #[arg(long)]
    pub config: Option<String>,

    /// Override a config entry, e.g. --override epochs=1 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Output directory for checkpoint, prior, and metrics files
    /// (default: runs/<config-name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Deterministic: use posterior means.
    Mean,
    /// Stochastic: sample latents with the reparameterization trick.
    Sample,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Trained checkpoint (.rvck).
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Class to translate into.
    #[arg(long)]
    pub target_class: u8,

    /// Treat inputs as this class instead of trusting dataset labels; also
    /// selects test images of this class.
    #[arg(long)]
    pub source_class: Option<u8>,

    /// Latent inference mode.
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    pub mode: Mode,

    /// Noise seed (sample mode only).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Prior geometry file; defaults to prior.rvps next to the checkpoint.
    #[arg(long)]
    pub prior_spec: Option<PathBuf>,

    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Trained checkpoint (.rvck).
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Output image path (.png or .pgm).
    #[arg(long)]
    pub out: PathBuf,

    /// Prior geometry file; defaults to prior.rvps next to the checkpoint.
    #[arg(long)]
    pub prior_spec: Option<PathBuf>,

    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Trained checkpoint (.rvck).
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Directory to append probes.json to (default: the checkpoint's
    /// directory).
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PriorsArgs {
    /// Width of the labeled latent block.
    #[arg(long, required_unless_present = "prior_spec", conflicts_with = "prior_spec")]
    pub dim: Option<usize>,

    /// Number of classes.
    #[arg(long, required_unless_present = "prior_spec", conflicts_with = "prior_spec")]
    pub classes: Option<usize>,

    /// Seed for the rotation draws.
    #[arg(long, default_value_t = 0, conflicts_with = "prior_spec")]
    pub seed: u64,

    /// Inspect an existing geometry file instead of building one.
    #[arg(long)]
    pub prior_spec: Option<PathBuf>,

    /// Save the geometry to this path (.rvps).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run one parsed command. Errors bubble up so the binary can map them to
/// exit code 1 with a stable one-line class prefix.
pub fn execute(cli: Cli) -> rotvae::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::Grid(a) => commands::grid(a),
        Command::Probe(a) => commands::probe(a),
        Command::Priors(a) => commands::priors(a),
    }
}
