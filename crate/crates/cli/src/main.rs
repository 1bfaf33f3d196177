mod commands;
mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "synthpair",
    version,
    about = "Synthetic caption/image-token pairs and embedding-space VLM training"
)]
struct Cli {
    /// JSON settings for the subcommand; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the loaded settings.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a shapes corpus: captions.jsonl, pairs.jsonl and images or token shards.
    MakeCorpus(MakeCorpusArgs),
    /// Generate a caption corpus from class prompts.
    Capgen(CapgenArgs),
    /// Train the toy VQ image tokenizer.
    VqPretrain(VqPretrainArgs),
    /// Pretrain the small language model later used frozen.
    LmPretrain(LmPretrainArgs),
    /// Train the masked text-to-token generator.
    T2iTrain(T2iTrainArgs),
    /// Decode token grids for a caption file.
    T2iSample(T2iSampleArgs),
    /// Train the resampler and gated cross-attention layers.
    VlmTrain(VlmTrainArgs),
    /// Greedy caption for one image or token grid.
    VlmCaption(VlmCaptionArgs),
    /// Cluster caption embeddings and report concentration and entropy.
    Diversity(DiversityArgs),
    /// Steps per second with pixel versus embedding inputs.
    Benchmark(BenchmarkArgs),
    /// Real-only baseline against real plus synthetic training.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct MakeCorpusArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Class list, one name per line; defaults to the builtin list.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Keep only the first N classes.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Draw classes with Zipf weights of this exponent instead of uniformly.
    #[arg(long)]
    zipf: Option<f64>,
    /// Encode images with this VQ checkpoint and write token shards instead of PNGs.
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OriginArg::Real)]
    origin: OriginArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OriginArg {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Template,
    Llm,
}

#[derive(Args, Debug)]
struct CapgenArgs {
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value_t = SourceArg::Template)]
    source: SourceArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    zipf: Option<f64>,
    /// Concurrent LLM requests.
    #[arg(long, default_value_t = synthpair::capgen::DEFAULT_CONCURRENCY)]
    concurrency: usize,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Args, Debug)]
struct VqPretrainArgs {
    /// Pairs file, or a corpus directory holding pairs.jsonl (pixel records are used).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LmPretrainArgs {
    /// Caption JSONL files.
    #[arg(long, num_args = 1.., required = true)]
    captions: Vec<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct T2iTrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for t2i.bin and metrics.csv.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct T2iSampleArgs {
    /// Generator checkpoint file or training output directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Token shard to write.
    #[arg(long)]
    out: PathBuf,
    /// Also decode every grid to a PNG next to the shard (needs --vq).
    #[arg(long)]
    decode_pixels: bool,
    #[arg(long)]
    vq: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VlmTrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for vlm.bin and metrics.csv.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["image", "tokens"])))]
struct VlmCaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vq: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Token shard, optionally suffixed `#index` (default 0).
    #[arg(long)]
    tokens: Option<String>,
    #[arg(long, default_value_t = synthpair::capgen::tokenizer::MAX_LEN)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct DiversityArgs {
    #[arg(long, num_args = 1.., required = true)]
    captions: Vec<PathBuf>,
    /// Frozen LM whose pooled states embed the captions.
    #[arg(long)]
    lm: PathBuf,
    /// `auto` picks k at the elbow of the WCSS curve.
    #[arg(long, default_value = "auto")]
    k: String,
    /// Largest k tried by `--k auto`.
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Cluster the pooled states as they are instead of whitening them jointly first.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Pairs with image_path records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    vq: PathBuf,
    #[arg(long, default_value_t = synthpair::pipeline::MIN_BENCH_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Output directory for per-arm metrics and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Size of the synthetic pool; defaults to the number of real pairs.
    #[arg(long)]
    synthetic_n: Option<usize>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = commands::Ctx {
        config: cli.config,
        seed: cli.seed,
    };
    match cli.command {
        Command::MakeCorpus(a) => commands::make_corpus(&ctx, a),
        Command::Capgen(a) => commands::capgen(&ctx, a),
        Command::VqPretrain(a) => commands::vq_pretrain(&ctx, a),
        Command::LmPretrain(a) => commands::lm_pretrain(&ctx, a),
        Command::T2iTrain(a) => commands::t2i_train(&ctx, a),
        Command::T2iSample(a) => commands::t2i_sample(&ctx, a),
        Command::VlmTrain(a) => commands::vlm_train(&ctx, a),
        Command::VlmCaption(a) => commands::vlm_caption(&ctx, a),
        Command::Diversity(a) => commands::diversity(&ctx, a),
        Command::Benchmark(a) => commands::benchmark(&ctx, a),
        Command::Experiment(a) => commands::experiment(&ctx, a),
    }
}
