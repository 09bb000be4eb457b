use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "simi-sfx", version, about = "Similarity-conditioned sound-effect synthesis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct GlobalArgs {
    /// TOML config file
    #[arg(long, global = true, env = "SIMI_SFX_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for training, fine-tuning and rendering
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate inputs without writing anything
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract centroid/loudness tracks and sparse peak waveforms
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Write built-in embeddings, or validate and ingest external ones
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// External embedding file to ingest instead of embedding
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Fit per-class statistics on the training split
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// External embeddings; the built-in embedder is used otherwise
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Reconstruction training
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the per-epoch loss history here
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fine-tune the similarity conditioning of a trained checkpoint
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one clip with explicit similarity values
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference clip (WAV path, or clip id with --manifest)
        #[arg(long)]
        reference: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated values in [0, 1], one per class
        #[arg(long, allow_hyphen_values = true)]
        similarity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Controllability sweep of one channel with an exponential fit
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose training split fits the judge statistics
        #[arg(long)]
        manifest: PathBuf,
        /// Reference clip (clip id or WAV path)
        #[arg(long)]
        reference: String,
        #[arg(long)]
        channel: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Value of every other channel
        #[arg(long, default_value_t = 1.0)]
        fixed: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// LSD and Fréchet report on the test split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class density of dataset similarity scores
    Kde {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP service for interactive rendering
    Serve {
        /// Checkpoint to serve; the file stem is the model id
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Statistics used to measure the similarity of renders
        #[arg(long)]
        stats: PathBuf,
        /// Manifest listing the reference clips
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Concurrent renders
        #[arg(long)]
        workers: Option<usize>,
    },
}
