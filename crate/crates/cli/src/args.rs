use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fabnet_core::faces::Split;
use fabnet_core::model::ModelConfig;
use fabnet_core::probe::{ProbeConfig, Task};
use fabnet_core::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fabnet",
    version,
    about = "Label-free face embeddings trained by warping between video frames"
)]
pub struct Cli {
    /// Worker threads for parallel sections (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face-track dataset
    GenData(GenDataArgs),
    /// Train an encoder-decoder by frame-to-frame reconstruction
    Train(TrainArgs),
    /// Fit a linear probe on frozen embeddings and report test metrics
    Probe(ProbeArgs),
    /// Rank a gallery by embedding similarity and score neighbour attributes
    Retrieve(RetrieveArgs),
    /// Run the gradient-check and oracle suites
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of identities (at least 10)
    #[arg(long, default_value_t = 200)]
    pub identities: usize,
    /// Tracks per identity
    #[arg(long, default_value_t = 2)]
    pub tracks: usize,
    /// Frames per track
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Image side in pixels (multiple of 16, at least 32)
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Image side the model expects
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 256)]
    pub embedding_dim: usize,
    /// Encoder widths, one per stride-2 level
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    pub encoder_channels: Vec<usize>,
    /// Decoder widths, one per upsampling level
    #[arg(long, value_delimiter = ',', default_value = "256,128,64,32")]
    pub decoder_channels: Vec<usize>,
    /// Use the confidence-weighted multi-source model (implied by --sources > 1)
    #[arg(long)]
    pub multi_source: bool,
    /// Weight initialisation seed
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint; model and training flags come from it, except --max-steps
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Batch size [default: 8, or 32 with --curriculum]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Divisor applied to the learning rate on a plateau
    #[arg(long, default_value_t = 10.0)]
    pub lr_decay_factor: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_steps: u64,
    /// Steps between validation passes
    #[arg(long, default_value_t = 200)]
    pub val_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Source frames per target
    #[arg(long, default_value_t = 1)]
    pub sources: usize,
    /// Back-propagate only a loss-percentile window that moves on plateaus
    #[arg(long)]
    pub curriculum: bool,
    #[arg(long, default_value = "sgd", value_parser = ["sgd", "adam"])]
    pub optimizer: String,
    /// Size of the fixed validation pair set
    #[arg(long, default_value_t = 256)]
    pub val_pairs: usize,
    /// Evaluations that make up a plateau
    #[arg(long, default_value_t = 5)]
    pub plateau_patience: usize,
    /// Relative improvement below which evaluations count as flat
    #[arg(long, default_value_t = 1e-3)]
    pub plateau_rel_eps: f64,
    /// Stop after this many learning-rate decays
    #[arg(long, default_value_t = 2)]
    pub max_lr_decays: u32,
    /// Steps between checkpoints (0 = only the final one)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
}

impl TrainArgs {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_size: m.image_size,
            embedding_dim: m.embedding_dim,
            encoder_channels: m.encoder_channels.clone(),
            decoder_channels: m.decoder_channels.clone(),
            multi_source: m.multi_source || self.sources > 1,
            n_sources: self.sources,
            seed: m.model_seed,
        }
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let defaults = TrainConfig::new(self.curriculum);
        let optimizer: OptimizerKind = self.optimizer.parse()?;
        Ok(TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch.unwrap_or(defaults.batch_size),
            lr_decay_factor: self.lr_decay_factor,
            max_steps: self.max_steps,
            val_every: self.val_every,
            seed: self.seed,
            n_sources: self.sources,
            use_curriculum: self.curriculum,
            optimizer,
            val_pairs: self.val_pairs,
            plateau_patience: self.plateau_patience,
            plateau_rel_eps: self.plateau_rel_eps,
            max_lr_decays: self.max_lr_decays,
            checkpoint_every: self.checkpoint_every,
        })
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model or training checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// landmarks, pose, expression or expression-class
    #[arg(long, value_parser = ["landmarks", "pose", "expression", "expression-class"])]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ProbeArgs {
    pub fn task(&self) -> anyhow::Result<Task> {
        Ok(self.task.parse()?)
    }

    pub fn config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split the gallery is drawn from
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Gallery size (capped by the split's frame count)
    #[arg(long, default_value_t = 2000)]
    pub gallery_size: usize,
    /// Neighbours reported per query
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 500)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RetrieveArgs {
    pub fn split(&self) -> anyhow::Result<Split> {
        Ok(self.split.parse()?)
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
