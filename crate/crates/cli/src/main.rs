//! `ringformer` — batch front end for building, training, evaluating and
//! analyzing recurrent shared-block transformer models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 analysis incompatibility, 5 I/O failure.

mod commands;
mod config_file;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ringformer", version, about = "recurrent shared-block transformers: train, count, analyze")]
struct Cli {
    /// Override every stochastic seed (training stream and task synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a run configuration; writes metrics.csv and
    /// final.ckpt into the output directory.
    Train(TrainArgs),
    /// Print per-component and total parameter counts for a model config.
    Params(ParamsArgs),
    /// Print the forward-pass MAC/FLOP breakdown for a model config.
    Flops(FlopsArgs),
    /// Run representation-similarity (cka) or attention-distance (mad)
    /// analysis over saved checkpoints.
    Analyze(AnalyzeArgs),
    /// Synthesize a dataset file (JSON-lines for sequences, binary
    /// container for images).
    GenData(GenDataArgs),
}

/// Flag overrides mirroring the config file keys; flags win over the file.
#[derive(Args, Default, Clone)]
struct Overrides {
    // [model]
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    ff: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, help = "ratio:<divisor> | explicit:<rank> | full")]
    rank_policy: Option<String>,
    #[arg(long)]
    signal_variant: Option<String>,
    #[arg(long)]
    norm_placement: Option<String>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    // [task]
    #[arg(long)]
    task_kind: Option<String>,
    #[arg(long)]
    task_vocab: Option<usize>,
    #[arg(long)]
    task_classes: Option<usize>,
    #[arg(long)]
    task_seq_len: Option<usize>,
    #[arg(long)]
    task_image_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    data_path: Option<String>,
    // [train]
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    config: std::path::PathBuf,
    /// Output directory (default: $RINGFORMER_OUT_DIR or ./out).
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    /// Numeric type for parameters and training math.
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
    dtype: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ParamsArgs {
    config: std::path::PathBuf,
    /// Counting convention.
    #[arg(long, default_value = "weights-only", value_parser = ["weights-only", "with-biases"])]
    convention: String,
    /// Drop embedding-side parameters and the output head from the count.
    #[arg(long)]
    exclude_embeddings: bool,
    /// Also print the machine-readable JSON report.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct FlopsArgs {
    config: std::path::PathBuf,
    /// Token count per stack (default: the image token count in
    /// encoder-only mode, max_seq_len otherwise).
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Analysis kind.
    #[arg(value_parser = ["cka", "mad"])]
    kind: String,
    /// Run configuration (its [task]/[analysis] sections define the
    /// evaluation batch).
    config: std::path::PathBuf,
    /// Checkpoint path; pass twice for cka (row model, then column model).
    /// A single path compares a checkpoint against itself.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<std::path::PathBuf>,
    /// Model tags for report labeling, matched to --checkpoint order.
    #[arg(long = "tag")]
    tags: Vec<String>,
    /// Which stack's representations enter the cka grid.
    #[arg(long, default_value = "encoder", value_parser = ["encoder", "decoder"])]
    stack: String,
    /// Evaluation samples (default: [analysis] samples or 32).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value = "json", value_parser = ["csv", "json"])]
    format: String,
    /// Report file path.
    #[arg(long)]
    out: std::path::PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1024)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_eval: usize,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Dataset file to write (.jsonl for sequence tasks).
    #[arg(long)]
    out: std::path::PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => commands::cmd_train(args, cli.seed),
        Cmd::Params(args) => commands::cmd_params(args, cli.seed),
        Cmd::Flops(args) => commands::cmd_flops(args, cli.seed),
        Cmd::Analyze(args) => commands::cmd_analyze(args, cli.seed),
        Cmd::GenData(args) => commands::cmd_gen_data(args, cli.seed),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {}", err.message());
            std::process::exit(err.code());
        }
    }
}
