mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sscq", version, about = "Self-supervised product quantization for retrieval")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic cluster dataset.
    Gen(GenArgs),
    /// Convert a headerless CSV file into the binary dataset format.
    Import(ImportArgs),
    /// Train an encoder and codebooks.
    Train(TrainArgs),
    /// Encode and quantize a dataset split into an index.
    Index(IndexArgs),
    /// Search an index with raw item vectors.
    Query(QueryArgs),
    /// Score an index with the query split of a dataset.
    Eval(EvalArgs),
    /// Run the loss-term, variant and temperature ablation grids.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Radius of the sphere holding the class centers.
    #[arg(long, default_value_t = 4.0)]
    pub sep: f64,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub query_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// Rows of features followed by a `|`-separated label column.
    /// Repeatable; files are concatenated in order.
    #[arg(long, required = true)]
    pub csv: Vec<PathBuf>,
    /// Split for the rows of each file (train, query or database); a
    /// single value applies to every file.
    #[arg(long, default_value = "database")]
    pub split: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML file with any of the [encoder], [quantizer], [loss], [train]
    /// and [augment] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.lambda_pn=0`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training seed; overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "database")]
    pub split: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Headerless CSV, one raw item vector per row.
    #[arg(long)]
    pub vector_file: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Result CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for searching; 0 lets the runtime decide.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub cutoff: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100")]
    pub k_list: Vec<usize>,
    /// Directory for map.csv, p_at_k.csv, pr_curve.csv and summary.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset to use; a synthetic one is generated from `--data-seed`
    /// when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grids to run: table, diversity, fusion, temperature.
    #[arg(long, value_delimiter = ',', default_value = "table,diversity,fusion,temperature")]
    pub grids: Vec<String>,
    /// Training seeds; every cell runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Values tried for each temperature.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,1.0")]
    pub temperatures: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub cutoff: usize,
    /// Output table CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a, &argv),
        Command::Import(a) => commands::import(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Index(a) => commands::index(a, &argv),
        Command::Query(a) => commands::query(a, &argv),
        Command::Eval(a) => commands::eval(a, &argv),
        Command::Ablate(a) => commands::ablate(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
