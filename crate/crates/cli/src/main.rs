//! `nnkit` command-line harness: training, evaluation, parameter counting,
//! feature extraction, adversarial attacks and dataset inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nnkit", version, about = "Train and probe small neural networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its metrics and final checkpoint.
    Train(TrainArgs),
    /// Report accuracy and mean loss of a checkpoint.
    Eval(EvalArgs),
    /// Print the per-layer parameter table and the total.
    CountParams(CountArgs),
    /// Write per-sample feature vectors from one layer as CSV.
    Extract(ExtractArgs),
    /// Measure accuracy under gradient-based input perturbations.
    Attack(AttackArgs),
    /// Print dataset shapes and pixel statistics.
    InspectData(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Model and training configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for matmul and evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Dropout scaling convention: inverted or paper.
    #[arg(long)]
    dropout_convention: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DtypeArg {
    F64,
    F32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Start from this checkpoint (fine-tuning).
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Per-iteration metrics CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Overrides the configured iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Freeze every layer with a lower index.
    #[arg(long)]
    freeze_below: Option<usize>,
    /// Layer indices re-initialized instead of loaded from --checkpoint-in.
    #[arg(long, value_delimiter = ',')]
    replace: Vec<usize>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Only use the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layer whose output is written; defaults to the layer feeding the last dense layer.
    #[arg(long)]
    tap: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint_in: PathBuf,
    /// Robustness CSV `epsilon,adv_accuracy`.
    #[arg(long)]
    out: PathBuf,
    /// Budgets as fractions of the input range.
    #[arg(long, value_delimiter = ',', default_value = "0,0.04")]
    epsilons: Vec<f64>,
    /// Step direction: scaled (g/max|g|) or sign.
    #[arg(long, default_value = "scaled")]
    mode: String,
    /// Ascend this class's score instead of the true-label loss.
    #[arg(long)]
    target: Option<usize>,
    /// Number of test images attacked.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
