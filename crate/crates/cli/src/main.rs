//! `irnn`: quantize, run, compare and benchmark integer-only RNN models.

mod bench;
mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irnn_core::pwl::Activation;

#[derive(Debug, Parser)]
#[command(name = "irnn", version, about = "Integer-only RNN inference tools")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads. Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random toy float model.
    Init(InitArgs),
    /// Write random input sequences, uniform in [-1, 1].
    Data(DataArgs),
    /// Calibrate a float model and write an `.irnn` integer model.
    Quantize(QuantizeArgs),
    /// Build a PWL table and dump it over the quantized grid as CSV.
    Approx(ApproxArgs),
    /// Run an integer model over input sequences.
    Run(RunArgs),
    /// Per-layer integer vs float error report.
    Compare(CompareArgs),
    /// Time integer and float cell steps.
    Bench(BenchArgs),
    /// Print the 8-bit fixed-point format table.
    Table(TableArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// `.json` or `.irnn` (float export).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub input_size: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long)]
    pub bidirectional: bool,
    #[arg(long)]
    pub layernorm: bool,
    /// Attention width of an attending decoder; 0 for none.
    #[arg(long, default_value_t = 0)]
    pub attention: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// `.csv` or raw `f32` (any other extension).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub len: usize,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Float model, `.json` or `.irnn` float export.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration sequences, `.csv` or raw `f32`.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = bits)]
    pub cell_bits: u32,
    /// Defaults to `--cell-bits`.
    #[arg(long, value_parser = bits)]
    pub preact_bits: Option<u32>,
    #[arg(long, default_value_t = 32)]
    pub pwl_pieces: usize,
    /// Replace LayerNorm with MadNorm before calibrating.
    #[arg(long)]
    pub madnorm: bool,
}

#[derive(Debug, Args)]
pub struct ApproxArgs {
    #[arg(long = "fn")]
    pub func: Activation,
    /// Input range; defaults to the function's conventional range.
    #[arg(long, num_args = 2, value_names = ["A", "B"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long, default_value_t = 16)]
    pub pieces: usize,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Run the attending decoder too. Without it only the encoder runs.
    #[arg(long)]
    pub attend: bool,
    /// Dequantized outputs as CSV; defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Float reference; defaults to the dequantized export of `--model`.
    #[arg(long)]
    pub float: Option<PathBuf>,
    /// Max absolute error allowed per element in every layer. Defaults to
    /// 0.05 for encoder layers and 0.12 for an attending decoder.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// JSON report path; defaults to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Float model whose first cell is timed; a toy cell otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Toy cell state size.
    #[arg(long, default_value_t = 400)]
    pub state: usize,
    /// Toy cell input size; defaults to `--state`.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(100..))]
    pub runs: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
    pub warmup: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
}

fn bits(s: &str) -> Result<u32, String> {
    match s.parse::<u32>() {
        Ok(b @ (8 | 16)) => Ok(b),
        _ => Err(format!("`{s}` is not 8 or 16")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IRNN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Init(a) => commands::init(&a, seed),
        Command::Data(a) => commands::data(&a, seed),
        Command::Quantize(a) => commands::quantize(&a),
        Command::Approx(a) => commands::approx(&a),
        Command::Run(a) => commands::run(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Bench(a) => bench::bench(&a, seed),
        Command::Table(a) => commands::table(&a),
    };
    match result {
        Ok(()) | Err(report::CliError::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
