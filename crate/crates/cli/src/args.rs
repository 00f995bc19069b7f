//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knnbox::combiner::CombinerConfig;
use knnbox::pipeline::{EvalMode, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "knnbox", version, about = "Nearest-neighbor augmented translation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the bundled two-domain corpus as TSV files.
    Synth(SynthArgs),
    /// Train the base translation model.
    TrainBase(TrainBaseArgs),
    /// Memorize a corpus into a datastore.
    Build(BuildArgs),
    /// Build an inverted-file index over a datastore.
    Ivf(IvfArgs),
    /// Fit a PCA projection and write the projected datastore.
    Pca(PcaArgs),
    /// Prune datastore entries.
    Prune(PruneArgs),
    /// Train the adaptive combiner's meta network.
    TrainCombiner(TrainCombinerArgs),
    /// Translate sentences.
    Translate(TranslateArgs),
    /// Score a test corpus.
    Eval(EvalArgs),
    /// Serve the trace API over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    /// Training pairs, `source<TAB>target` per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Further corpora whose tokens join the vocabulary.
    #[arg(long = "vocab-from")]
    pub vocab_from: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IvfArgs {
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub nlist: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 8)]
    pub nprobe: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index file path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub datastore: PathBuf,
    /// Retained dimension.
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the projected store and `pca.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneMethodArg {
    Margin,
    Redundant,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long, value_enum)]
    pub method: PruneMethodArg,
    /// Margin: drop entries the model ranks within its top `rank`.
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    /// Redundancy: surviving neighbors that must share the value.
    #[arg(long, default_value_t = 2)]
    pub neighbors_checked: usize,
    /// Redundancy: distance threshold (default: median nearest-neighbor distance).
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Margin: the model the store was built with.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Margin: the corpus the store was built from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Artifacts and hyperparameters shared by every decoding command.
#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub ivf: Option<PathBuf>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub metanet: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Combiner variant (default: `adaptive` with a metanet, else `basic`).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = PipelineConfig::DEFAULT_BEAM)]
    pub beam: usize,
    #[arg(long, default_value_t = PipelineConfig::DEFAULT_MAX_LEN)]
    pub max_len: usize,
}

impl PipelineArgs {
    pub fn config(&self) -> PipelineConfig {
        let variant = self.variant.clone().unwrap_or_else(|| {
            if self.metanet.is_some() { "adaptive" } else { "basic" }.to_string()
        });
        PipelineConfig {
            model: self.model.clone(),
            datastore: self.datastore.clone(),
            ivf: self.ivf.clone(),
            nprobe: self.nprobe,
            pca: self.pca.clone(),
            metanet: self.metanet.clone(),
            combiner: CombinerConfig {
                lambda: self.lambda,
                temperature: self.temperature,
                k: self.k,
                variant,
            },
            beam: self.beam,
            max_len: self.max_len,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainCombinerArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Held-out pairs used as supervision.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Sentence to translate; repeatable.
    #[arg(long)]
    pub text: Vec<String>,
    /// File with one source sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Include per-step traces.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    TeacherForced,
    FreeRunning,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::TeacherForced => EvalMode::TeacherForced,
            EvalModeArg::FreeRunning => EvalMode::FreeRunning,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalModeArg::FreeRunning)]
    pub mode: EvalModeArg,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Corpus the datastore was built from, for neighbor contexts.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
}
