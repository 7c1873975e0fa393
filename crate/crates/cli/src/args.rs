//! Command line flags. Every subcommand's flags serialize to the
//! `config.json` written next to its outputs, with one key per flag, so a run
//! can be replayed with `actpaint --config <dir>/config.json`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use actpaint_core::analysis::{Background, InversionSpec, TargetMode};

#[derive(Debug, Parser)]
#[command(name = "actpaint", version, about = "Activation painting and tileability analysis for convolutional generators")]
pub struct Cli {
    /// Replay a run from a config.json written by an earlier invocation.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for scans and sweeps (default: available cores).
    #[arg(long, value_name = "N", global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Render baseline images for a list of seeds.
    Generate(GenerateArgs),
    /// Render one vector at several grid sizes.
    Visualize(VisualizeArgs),
    /// Rank random extracted vectors by full-vs-grid feature similarity.
    Scan(ScanArgs),
    /// Run two-vector inversions for several grid sizes and aggregate.
    Sweep(SweepArgs),
    /// Fit block and gap vectors that reproduce a target feature vector.
    Invert(InvertArgs),
    /// Paint library vectors into a layer through an RGB mask.
    Paint(PaintArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

fn default_generator() -> String {
    "toygen-v1".into()
}

fn default_extractor() -> String {
    "toyfx-v1".into()
}

fn default_layer() -> String {
    "up2.conv1".into()
}

fn default_feature_layer() -> String {
    "stage3".into()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Models {
    /// Generator bundle: a directory, or a name looked up in $ACTPAINT_CACHE
    /// and then the built-in fixtures.
    #[arg(long, default_value = "toygen-v1")]
    #[serde(default = "default_generator")]
    pub generator: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Analysis {
    /// Generator bundle (directory or name).
    #[arg(long, default_value = "toygen-v1")]
    #[serde(default = "default_generator")]
    pub generator: String,
    /// Generator layer that receives the vectors.
    #[arg(long, default_value = "up2.conv1")]
    #[serde(default = "default_layer")]
    pub layer: String,
    /// Feature extractor bundle (directory or name).
    #[arg(long, default_value = "toyfx-v1")]
    #[serde(default = "default_extractor")]
    pub extractor: String,
    /// Extractor layer where features are compared.
    #[arg(long, default_value = "stage3")]
    #[serde(default = "default_feature_layer")]
    pub feature_layer: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: Models,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VisualizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: Models,
    /// `LIBRARY.json#ID`, or `extract:SEED:LAYER:X:Y` to take a pixel of a
    /// generated image.
    #[arg(long)]
    pub vector: String,
    /// Grid sizes in output order; 0 replicates the vector everywhere.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,0")]
    pub grids: Vec<usize>,
    /// What fills the grid gaps: original or random.
    #[arg(long, default_value = "original")]
    #[serde(default)]
    pub background: Background,
    /// Seed of the underlying image.
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub analysis: Analysis,
    #[arg(long, default_value_t = 2)]
    pub grid: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub analysis: Analysis,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
    pub sizes: Vec<usize>,
    /// Targets per repeat.
    #[arg(long, default_value_t = 32)]
    pub targets: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = InversionSpec::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = InversionSpec::DEFAULT_STEP_SIZE)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// How targets are drawn from generated images: spatial_mean or random_pixel.
    #[arg(long, default_value = "spatial_mean")]
    #[serde(default)]
    pub target_mode: TargetMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InvertArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub analysis: Analysis,
    #[arg(long, default_value_t = 2)]
    pub grid: usize,
    /// Seed of the image the target features are taken from.
    #[arg(long, default_value_t = 1)]
    pub target_seed: u64,
    /// spatial_mean or random_pixel.
    #[arg(long, default_value = "spatial_mean")]
    #[serde(default)]
    pub target_mode: TargetMode,
    #[arg(long, default_value_t = InversionSpec::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = InversionSpec::DEFAULT_STEP_SIZE)]
    pub step_size: f64,
    /// Seed of the baseline image and of the initial vectors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Library file that receives the two optimized vectors.
    #[arg(long)]
    #[serde(default)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PaintArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: Models,
    /// RGB mask PNG; the keep color leaves activations untouched.
    #[arg(long)]
    pub mask: PathBuf,
    /// Palette JSON mapping colors to labels and vectors.
    #[arg(long)]
    pub palette: PathBuf,
    /// Layer to paint into.
    #[arg(long, default_value = "up1.conv1")]
    pub layer: String,
    /// One output image per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: Models,
    /// Feature extractor for scan jobs; `none` disables scans.
    #[arg(long, default_value = "toyfx-v1")]
    #[serde(default = "default_extractor")]
    pub extractor: String,
    #[arg(long, default_value = actpaint_service::DEFAULT_BIND)]
    pub bind: String,
    #[arg(long, default_value_t = actpaint_service::DEFAULT_PORT)]
    pub port: u16,
    /// Allowed browser origin for the painter UI (`*` for any).
    #[arg(long)]
    #[serde(default)]
    pub cors_origin: Option<String>,
    /// Vector library file, created on first extraction.
    #[arg(long)]
    #[serde(default)]
    pub library: Option<PathBuf>,
    /// Static painter build served under /ui.
    #[arg(long)]
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
    /// Idle seconds before a session expires.
    #[arg(long, default_value_t = 1800)]
    pub session_timeout: u64,
    /// Scan jobs allowed to run at once.
    #[arg(long, default_value_t = 2)]
    pub max_scans: usize,
}
