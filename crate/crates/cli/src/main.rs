//! `moe-upcycle`: pretrain, upcycle, train, evaluate and inspect models, or
//! run whole experiment protocols in a work directory.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moe_upcycle::experiment::Protocol;

#[derive(Parser)]
#[command(name = "moe-upcycle", version, about = "Dense-to-MoE upcycling for CTC sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a data directory for one domain of an experiment config.
    GenData(GenDataArgs),
    /// Train a dense model from scratch.
    Pretrain(PretrainArgs),
    /// Turn a dense checkpoint into an MoE checkpoint with copied experts.
    Upcycle(UpcycleArgs),
    /// Continue training a checkpoint on a data directory.
    Train(TrainArgs),
    /// Token error rate and losses of a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-expert routing statistics of an MoE checkpoint.
    Stats(StatsArgs),
    /// Activated multiply-accumulates per frame.
    Flops(FlopsArgs),
    /// Run an experiment protocol, and its prerequisites, in a work directory.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Experiment config (`key = value`); desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the desk defaults the config file modifies.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Domain::Old)]
    pub domain: Domain,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Domain {
    Old,
    New,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Experiment config: `model.*` and `pretrain.*` keys, and `data.old.*` unless `--data` is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data directory to train on instead of the config's old domain.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the init and shuffling seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
}

#[derive(Args)]
pub struct UpcycleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub experts: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub topk: u32,
    /// Std of the Gaussian noise added to the zero-initialized routers.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f32,
    /// Balance weight stored with the model and used by `train`.
    #[arg(long, default_value_t = moe_upcycle::moe::DEFAULT_ALPHA)]
    pub alpha: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Freeze {
    /// Train expert FFNs and routers only.
    MoeOnly,
    /// Train every parameter.
    None,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `moe-only` for MoE checkpoints and `none` for dense ones.
    #[arg(long, value_enum)]
    pub freeze: Option<Freeze>,
    /// Balance weight; defaults to the checkpoint's `moe.alpha`.
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Training config with plain `TrainConfig` keys (`peak_lr = 2e-3`, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Attention context in frames; the model's `max_len` by default.
    #[arg(long)]
    pub context: Option<usize>,
    /// Result file; `<in>.flops` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// PRETRAIN, FMFT, UME, UME_NOFREEZE, UME_NOBALANCE or ALL.
    #[arg(long)]
    pub protocol: ProtocolArg,
    #[arg(long)]
    pub workdir: PathBuf,
    /// Experiment config used to initialize a fresh work directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the desk defaults the config file modifies.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy)]
pub enum ProtocolArg {
    One(Protocol),
    All,
}

impl std::str::FromStr for ProtocolArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ProtocolArg::All);
        }
        s.parse().map(ProtocolArg::One).map_err(|e| format!("{e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Upcycle(a) => commands::upcycle(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::Flops(a) => commands::flops(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
