use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vidsal::{InsertionPoint, Metric};

#[derive(Debug, Parser)]
#[command(name = "vidsal", version, about = "Temporal saliency models on synthetic video")]
pub struct Cli {
    /// TOML file with [synth], [model], [train] and [eval] sections. Flags
    /// override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-blob dataset.
    Synth(SynthArgs),
    /// Train a model and write per-epoch checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted maps.
    Eval(EvalArgs),
    /// Per-video difference A − B of one metric between two eval reports.
    Compare(CompareArgs),
    /// Evaluate an EMA checkpoint under a list of α values.
    SweepAlpha(SweepArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of videos [default: 20]
    #[arg(long)]
    pub videos: Option<usize>,
    /// Frames per video [default: 40]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame height and width [default: 32]
    #[arg(long, conflicts_with_all = ["height", "width"])]
    pub size: Option<usize>,
    /// Frame height [default: 32]
    #[arg(long)]
    pub height: Option<usize>,
    /// Frame width [default: 32]
    #[arg(long)]
    pub width: Option<usize>,
    /// Maximum blobs per video, 1 to 3 [default: 3]
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Blob standard deviation in pixels [default: 3]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Maximum blob speed in pixels per frame [default: 0.25]
    #[arg(long)]
    pub speed: Option<f64>,
    /// Amplitude of uniform frame noise [default: 0.05]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fixations sampled per frame [default: 10]
    #[arg(long)]
    pub fixations: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecurrenceKind {
    None,
    /// Fixed-α EMA.
    Ema,
    /// EMA with learned α [initial alpha: 0.5].
    EmaTrainable,
    /// Fixed-α EMA added to its input.
    EmaResidual,
    /// ConvLSTM at the bottleneck.
    Convlstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Placement {
    PostSigmoid,
    PreSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LstmOutputArg {
    Cell,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PeepholeArg {
    PerElement,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    PerFrame,
    PerVideo,
}

fn parse_point(s: &str) -> Result<InsertionPoint, String> {
    s.parse().map_err(|e: vidsal::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: vidsal::Error| e.to_string())
}

const MODEL_FLAGS: [&str; 15] = [
    "recurrence",
    "ema_at",
    "alpha",
    "output_placement",
    "lstm_output",
    "peephole",
    "dropout",
    "dropout_mask",
    "stages",
    "base_channels",
    "lr",
    "alpha_lr",
    "clip_length",
    "augment",
    "seed",
];

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    /// Output run directory.
    pub out: PathBuf,
    /// Temporal recurrence [default: none]
    #[arg(long, value_enum)]
    pub recurrence: Option<RecurrenceKind>,
    /// EMA insertion points, comma separated: encoder:K, bottleneck,
    /// decoder:K, output [default: bottleneck]
    #[arg(long, value_delimiter = ',', value_parser = parse_point)]
    pub ema_at: Option<Vec<InsertionPoint>>,
    /// EMA α, or its initial value when trainable [default: 0.1, 0.5 for
    /// ema-trainable]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Side of the final sigmoid for an EMA at the output [default:
    /// post-sigmoid]
    #[arg(long, value_enum)]
    pub output_placement: Option<Placement>,
    /// Which ConvLSTM state feeds the decoder [default: cell]
    #[arg(long, value_enum)]
    pub lstm_output: Option<LstmOutputArg>,
    /// ConvLSTM peephole weights [default: per-element]
    #[arg(long, value_enum)]
    pub peephole: Option<PeepholeArg>,
    /// Dropout probability before the recurrence [default: off]
    #[arg(long, value_name = "P")]
    pub dropout: Option<f64>,
    /// Dropout mask sharing across frames [default: per-frame]
    #[arg(long, value_enum)]
    pub dropout_mask: Option<MaskArg>,
    /// Encoder stages; frame sides must be divisible by 2^stages [default: 3]
    #[arg(long)]
    pub stages: Option<usize>,
    /// Channels of the first encoder stage [default: 8]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam learning rate for a learned α [default: 0.1]
    #[arg(long)]
    pub alpha_lr: Option<f64>,
    /// Total epochs; with --resume, training continues up to this count
    /// [default: 7]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Frames per truncated-backprop clip [default: 10]
    #[arg(long)]
    pub clip_length: Option<usize>,
    /// Random mirror and right-angle rotation per video and epoch
    #[arg(long)]
    pub augment: bool,
    /// Seed for initialization, shuffling, augmentation and dropout
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; model and training flags come from it.
    #[arg(long, value_name = "CKPT", conflicts_with_all = MODEL_FLAGS)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    /// Output report directory.
    pub out: PathBuf,
    /// Checkpoint to run over the dataset.
    #[arg(long, value_name = "CKPT", required_unless_present = "pred_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of predicted maps laid out as <video_id>/<subdir>/NNNNN.pgm.
    #[arg(long, value_name = "DIR", conflicts_with = "checkpoint")]
    pub pred_dir: Option<PathBuf>,
    /// Map subdirectory inside each video of --pred-dir
    #[arg(long, default_value = vidsal::data::PREDICTIONS_DIR, requires = "pred_dir")]
    pub pred_subdir: String,
    /// Inference-time α for an EMA checkpoint [default: the checkpoint's]
    #[arg(long, requires = "checkpoint")]
    pub alpha: Option<f64>,
    /// s-AUC negative splits per frame [default: 100]
    #[arg(long)]
    pub splits: Option<usize>,
    /// s-AUC sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the predicted maps to OUT/<video_id>/maps
    #[arg(long)]
    pub dump_maps: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// report.csv of model A.
    pub a: PathBuf,
    /// report.csv of model B.
    pub b: PathBuf,
    /// Metric to compare: AUC-J, s-AUC, NSS, CC or SIM (case-insensitive)
    #[arg(long, value_parser = parse_metric)]
    pub metric: Metric,
    /// Also write the table as CSV to this file
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    /// EMA checkpoint.
    pub checkpoint: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// α values, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3")]
    pub alphas: Vec<f64>,
    /// Fine-tune the checkpoint with each α fixed before evaluating
    #[arg(long)]
    pub retrain: bool,
    /// Fine-tuning epochs per α
    #[arg(long, default_value_t = 1, requires = "retrain")]
    pub retrain_epochs: usize,
    /// s-AUC negative splits per frame [default: 100]
    #[arg(long)]
    pub splits: Option<usize>,
    /// s-AUC sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    Tensor,
    Recurrence,
    Model,
    Loss,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Operations to check
    #[arg(long, value_enum, default_value_t = ModuleArg::All)]
    pub module: ModuleArg,
    /// Seed for random inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale analytic gradients by 1.01 before comparing (negative control)
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}
