use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hwlm::cells::CellKind;
use hwlm::Precision;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "hwlm", version, about = "Train, convert, evaluate and rescore with LSTM and highway-LSTM language models")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Seed for initialization, dropout and shuffling.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Floating-point precision; defaults to f32 for new models and to the
    /// stored precision for checkpoints.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Reproducible output: fixed reduction order, no timing in logs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellArg {
    Lstm,
    #[value(name = "hw-lstm-c", alias = "c", alias = "C")]
    HwLstmC,
    #[value(name = "hw-lstm-h", alias = "h", alias = "H")]
    HwLstmH,
    #[value(name = "hw-lstm-ch", alias = "ch", alias = "CH")]
    HwLstmCh,
}

impl From<CellArg> for CellKind {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Lstm => CellKind::Lstm,
            CellArg::HwLstmC => CellKind::HwC,
            CellArg::HwLstmH => CellKind::HwH,
            CellArg::HwLstmCh => CellKind::HwCh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// One token stream cut into lanes; state carries across sentences.
    Stream,
    /// Independent sentences, state reset at every `<s>`.
    Sentences,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a corpus.
    Vocab(VocabArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Add highway layers to a trained LSTM.
    Convert(ConvertArgs),
    /// Continue training a checkpoint, usually a converted one.
    Finetune(FinetuneArgs),
    /// Heldout perplexity of a model.
    Ppl(PplArgs),
    /// Perplexity of a linear interpolation of probability streams.
    Interp(InterpArgs),
    /// Estimate interpolation weights by EM.
    Weights(WeightsArgs),
    /// Rescore an N-best list.
    Rescore(RescoreArgs),
    /// Word error rate of hypotheses against references.
    Wer(WerArgs),
    /// Matched-pair significance test between two systems.
    Mpt(MptArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Vocab(_) => "vocab",
            Command::Train(_) => "train",
            Command::Convert(_) => "convert",
            Command::Finetune(_) => "finetune",
            Command::Ppl(_) => "ppl",
            Command::Interp(_) => "interp",
            Command::Weights(_) => "weights",
            Command::Rescore(_) => "rescore",
            Command::Wer(_) => "wer",
            Command::Mpt(_) => "mpt",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub max_size: usize,
    /// Leave the last K lines (the heldout split) out of the counts.
    #[arg(long, default_value_t = 0)]
    pub heldout_lines: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Training text, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Separate heldout text.
    #[arg(long, conflicts_with = "heldout_lines")]
    pub heldout: Option<PathBuf>,
    /// Use the last K corpus lines as heldout text.
    #[arg(long)]
    pub heldout_lines: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 35)]
    pub bptt: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_batch: usize,
    #[arg(long, value_enum, default_value_t = Batching::Stream)]
    pub batching: Batching,
    /// Training log (manifest line, then one TSV line per epoch); stderr if
    /// absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = CellArg::Lstm)]
    pub cell: CellArg,
    /// Highway layers per stack (ignored for lstm).
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long)]
    pub no_layer_norm: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub variant: CellArg,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    /// Initial transform-gate bias.
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    pub bias: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Vocabulary file, needed only if the checkpoint does not store one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PplArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Write per-token log probabilities here.
    #[arg(long)]
    pub dump_probs: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub label: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InterpArgs {
    /// Probability stream files (repeat the flag).
    #[arg(long = "stream", required = true)]
    pub streams: Vec<PathBuf>,
    /// Comma-separated weights; uniform if absent.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightsArgs {
    #[arg(long = "stream", required = true)]
    pub streams: Vec<PathBuf>,
    /// Write the weights, comma-separated, to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RescoreArgs {
    #[arg(long)]
    pub nbest: PathBuf,
    /// Checkpoints to interpolate (repeat the flag).
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Interpolation weights; uniform if absent.
    #[arg(long, value_delimiter = ',')]
    pub interp_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lm_weight: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub wip: f64,
    /// Development N-best list for tuning the LM weight.
    #[arg(long, requires = "dev_ref")]
    pub dev_nbest: Option<PathBuf>,
    #[arg(long, requires = "dev_nbest")]
    pub dev_ref: Option<PathBuf>,
    /// Candidate LM weights for tuning.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.5,0.7,1,1.5,2,3,5")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Chosen hypotheses, in reference-file format.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-hypothesis score table.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WerArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MptArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Only segments where the two systems' error counts differ.
    #[arg(long)]
    pub differing_only: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = CellArg::Lstm)]
    pub cell: CellArg,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
}
