use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tlv", about = "Touch-language-vision dataset pipeline, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tri-modal corpus.
    Synth(SynthArgs),
    /// Pick touched and untouched frames from synchronized video pairs.
    SelectFrames(SelectArgs),
    /// Human box annotation.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Caption annotated records with a vision-language model or the offline template.
    Caption(CaptionArgs),
    /// Foundation pretraining or adapter fine-tuning.
    Train(TrainArgs),
    /// Zero-shot tactile classification.
    Eval(EvalArgs),
    /// Fine-tune and evaluate the four loss ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub domain: Domain,
    #[arg(long)]
    pub seed: u64,
    /// Flat `key = value` overrides of the world spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// A video-pair directory or a directory of them.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Box-blur radius applied before differencing.
    #[arg(long, default_value_t = 0)]
    pub blur: u32,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Serve the annotation API and UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory holding the built UI bundle.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["endpoint", "template"]))]
pub struct CaptionArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Chat-completions URL of an OpenAI-compatible vision endpoint.
    #[arg(long, requires = "model")]
    pub endpoint: Option<String>,
    #[arg(long, requires = "endpoint")]
    pub model: Option<String>,
    /// Offline template captions from record labels.
    #[arg(long)]
    pub template: bool,
    /// Requests per minute sent to the endpoint.
    #[arg(long, default_value_t = 20)]
    pub rpm: u32,
    /// Caption provenance log; defaults to `captions.jsonl` next to the manifest.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Foundation,
    Lora,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Training config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Foundation checkpoint to fine-tune (lora phase).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Material,
    Hardsoft,
    Roughsmooth,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub task: TaskArg,
    /// Write the report as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub foundation: PathBuf,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub eval_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}
