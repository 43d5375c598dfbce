use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use modfus::daffus::{ExtractionMode, Variant};
use modfus::diffusion::ScheduleKind;
use modfus::synth::{ModulationScheme, NoiseColor};

#[derive(Debug, Parser)]
#[command(name = "modfus", version, about = "Diffusion-feature modulation classification at desk scale")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed. Falls back to the config file, then MODFUS_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Parent of timestamped run directories.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Use this run directory instead of a timestamped one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled dataset file.
    Synth(SynthArgs),
    /// Train the noise predictor on a dataset (labels unused).
    TrainDiffusion(TrainArgs),
    /// Limited-label probe of a trained backbone.
    Probe(ProbeArgs),
    /// Accuracy over diffusion steps and block variants.
    Ablate(AblateArgs),
    /// Evaluate trained heads on a differently synthesized test set.
    EvalShift(ShiftArgs),
    /// Evaluate trained heads under fading and coloured noise.
    EvalChannel(ChannelArgs),
    /// Limited-label probe at several crop lengths.
    EvalLength(LengthArgs),
    /// Sample signals from a trained backbone.
    Generate(GenerateArgs),
    /// Print a checkpoint summary as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated schemes, e.g. bpsk,qpsk,pam4,gfsk.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<ModulationScheme>>,
    /// Comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',')]
    pub snr: Option<Vec<f64>>,
    /// Signals per scheme per SNR.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long = "len")]
    pub length: Option<usize>,
    #[arg(long)]
    pub max_cfo: Option<f64>,
    #[arg(long)]
    pub max_tau: Option<usize>,
    /// Leave out the additive noise (for channel evaluation sets).
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; defaults to model.ck in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint's weights, optimizer state and epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total epochs, counting those already in a resumed checkpoint.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long = "steps")]
    pub total_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeSettings {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Labeled signals per type per SNR.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// daffus, fusion_down, fusion_all or single:b1..single:b8.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Diffusion step used for feature extraction.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub mode: Option<ExtractionMode>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub probe: ProbeSettings,
    /// Checkpoint with the backbone and the first trial's heads; defaults to
    /// heads.ck in the run directory.
    #[arg(long)]
    pub heads_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub probe: ProbeSettings,
    #[arg(long = "steps", value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    /// Checkpoint holding trained heads.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test set from the shifted configuration.
    #[arg(long)]
    pub test: PathBuf,
    /// Test set from the training configuration, for the accuracy delta.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChannelArgs {
    /// Checkpoint holding trained heads.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Noise-free test signals (see `synth --noiseless`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "snr")]
    pub snr_db: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub rayleigh_sigma2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub rician_k: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub colors: Option<Vec<NoiseColor>>,
}

#[derive(Debug, Args)]
pub struct LengthArgs {
    #[command(flatten)]
    pub probe: ProbeSettings,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long = "len", default_value_t = 128)]
    pub length: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}
