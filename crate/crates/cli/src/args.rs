use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "loopembed", version, about = "Statement-embedding pre-training for a loop-nest speedup model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "snake_case")]
pub enum Command {
    /// Generate programs, labeled splits and unlabeled pre-training vectors.
    Gen(GenArgs),
    /// Pre-train a statement autoencoder.
    Pretrain(PretrainArgs),
    /// Train a speedup model on a labeled dataset.
    Train(TrainArgs),
    /// Report the MAPE of a trained model on one split.
    Eval(EvalArgs),
    /// Run beam search on test programs and score the choices with the oracle.
    Search(SearchArgs),
    /// Data-efficiency sweep plus a model-guided search comparison.
    Experiment(ExperimentArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Rerun(RerunArgs),
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Labeled programs, split 5:1:1 into train/valid/test.
    #[arg(long, default_value_t = 3200, value_parser = positive)]
    pub n_programs: usize,
    /// Programs whose statements become unlabeled pre-training vectors.
    #[arg(long, default_value_t = 6200, value_parser = positive)]
    pub pretrain_programs: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub max_sequences: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Segmented,
    PlainMlp,
    CompEmbed,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Vector file written by `gen` (pretrain_vectors.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Segmented)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendArg {
    Baseline,
    Encoder,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FrontendArg::Encoder)]
    pub frontend: FrontendArg,
    /// Pre-training checkpoint; required by the encoder frontend.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Keep the checkpoint's encoder architecture but start from fresh weights.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 1.0, value_parser = fraction)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60, value_parser = positive)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub embedding_dim: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Model checkpoint guiding the search; the oracle is used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// How many test programs to schedule, in file order.
    #[arg(long, default_value_t = 25, value_parser = positive)]
    pub programs: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub beam: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub depth: usize,
    /// Also write the kept beam of every level as JSON Lines.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Pre-training checkpoint for the encoder frontends.
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.025, 0.05, 0.1, 0.2, 0.5, 1.0], value_parser = fraction)]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub min_epochs: usize,
    /// Training samples each run should see; sets the epoch count per fraction.
    #[arg(long, default_value_t = 300_000, value_parser = positive)]
    pub sample_budget: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Training fraction of the models that guide the search comparison.
    #[arg(long, default_value_t = 0.05, value_parser = fraction)]
    pub search_fraction: f64,
    #[arg(long, default_value_t = 25, value_parser = positive)]
    pub search_programs: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub beam: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub depth: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the re-run writes; must differ from the original directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}
