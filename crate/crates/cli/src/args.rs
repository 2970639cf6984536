use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "melody-lstm", version, about = "Train an LSTM on MIDI melodies and generate new ones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of MIDI files into a token corpus.
    Ingest(IngestArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Generate MIDI files from a checkpoint.
    Generate(GenerateArgs),
    /// Teacher-forced metrics of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Train several configurations and generate songs from a shared seed.
    Variants(VariantsArgs),
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck(GradcheckArgs),
    /// Check that MIDI files survive parse and write unchanged.
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Args)]
pub struct Shared {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of `.mid` / `.midi` files.
    pub midi_dir: PathBuf,
    #[arg(long)]
    pub grid: Option<u32>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub max_dur: Option<u32>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Comma-separated layer widths, bottom first.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Fraction of each song's trailing windows kept out of training.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Argmax,
    Sample,
}

#[derive(Debug, Args)]
pub struct GenFlags {
    /// Songs to generate, all from the same seed window [default: 1, or 5
    /// per variant].
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub length: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value = "sample")]
    pub mode: ModeArg,
    /// Longest allowed run of one note; 0 disables the guard.
    #[arg(long, default_value_t = 8)]
    pub repeat_cap: usize,
    /// Song index for an explicit seed window (with --seed-offset).
    #[arg(long, requires = "seed_offset")]
    pub seed_song: Option<usize>,
    #[arg(long, requires = "seed_song")]
    pub seed_offset: Option<usize>,
    /// Seed window from a file holding one line of `NOTE:DUR` fields.
    #[arg(long, conflicts_with = "seed_song")]
    pub tokens: Option<PathBuf>,
    /// Also write each song as a `NOTE:DUR` line next to its MIDI file.
    #[arg(long)]
    pub emit_tokens: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to draw the seed window from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct VariantsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// `name: key=value, key=value`; repeatable.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// File with one variant per line in the `--variant` syntax.
    #[arg(long)]
    pub variants_file: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}
