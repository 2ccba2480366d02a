//! `patchlab` — command-line front end for the wavelet-residual patch-attack
//! laboratory.
//!
//! Verbs: `train` builds checkpoints, `attack` crafts per-sample manifests,
//! `evaluate` aggregates tables and plot-ready CSVs, `denoise` dumps a single
//! image's residual decomposition. Every run echoes its effective JSON config
//! (plus the seed) into the output directory; re-running from that echo
//! reproduces every artifact bit-identically on the same platform.
//!
//! Exit codes: 0 success, 2 input/config error, 3 numeric/runtime failure.

mod cmd_attack;
mod cmd_denoise;
mod cmd_evaluate;
mod cmd_train;
mod manifest;
mod runs;
mod sysio;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use runs::Failure;

#[derive(Parser)]
#[command(
    name = "patchlab",
    version,
    about = "Desk-scale laboratory for wavelet-residual detection of adversarial patches",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Debug)]
pub struct CommonArgs {
    /// JSON run configuration; individual flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>-<unix-time>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed override (otherwise from the config file or its default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool size. All reductions are order-fixed and the desk-scale
    /// kernels run on one worker, so any value yields identical results.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier, select sigma, train the residual detector, and
    /// save checkpoints plus a system description.
    Train(cmd_train::TrainArgs),
    /// Craft an attack batch and write a per-sample manifest (exit code 0
    /// even when every attack fails: failure is data).
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Run an aggregate experiment and write tables / plot-ready CSVs.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Denoise one image and dump input / denoised / residual grids.
    Denoise(cmd_denoise::DenoiseArgs),
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Masked projected-gradient-descent attack at one epsilon.
    Pgd(cmd_attack::PgdArgs),
    /// Masked Carlini-Wagner attack (restricted or unrestricted patch).
    Cw(cmd_attack::CwArgs),
    /// Single-pixel differential-evolution attack.
    Pixel(cmd_attack::PixelArgs),
    /// Detector-aware white-box attack on the full classifier+detector
    /// ensemble with a straight-through denoiser approximation.
    Adaptive(cmd_attack::AdaptiveArgs),
    /// Brute-force patch-location search with an inner PGD attack.
    Brute(cmd_attack::BruteArgs),
    /// Substitute-model transfer attack against the deployed ensemble.
    Transfer(cmd_attack::TransferArgs),
}

#[derive(Subcommand)]
enum EvaluateCmd {
    /// Detection quality versus attack strength, on fresh attacks or on
    /// stored attack manifests.
    #[command(name = "epsilon-sweep", alias = "table2")]
    EpsilonSweep(cmd_evaluate::EpsilonSweepArgs),
    /// Restricted versus unrestricted Carlini-Wagner detection accuracy.
    #[command(name = "cw-compare", alias = "cw-table")]
    CwCompare(cmd_evaluate::CwCompareArgs),
    /// Residual-energy heatmaps and patch-concentration statistics.
    Heatmap(cmd_evaluate::HeatmapArgs),
    /// Protected fraction and false-positive rate across kappa.
    #[command(name = "kappa-sweep")]
    KappaSweep(cmd_evaluate::KappaSweepArgs),
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if cli.common.jobs == 0 {
        return Err(Failure::config("--jobs must be at least 1"));
    }
    match cli.cmd {
        Command::Train(args) => cmd_train::run(&cli.common, args),
        Command::Attack(which) => match which {
            AttackCmd::Pgd(args) => cmd_attack::run_pgd(&cli.common, args),
            AttackCmd::Cw(args) => cmd_attack::run_cw(&cli.common, args),
            AttackCmd::Pixel(args) => cmd_attack::run_pixel(&cli.common, args),
            AttackCmd::Adaptive(args) => cmd_attack::run_adaptive(&cli.common, args),
            AttackCmd::Brute(args) => cmd_attack::run_brute(&cli.common, args),
            AttackCmd::Transfer(args) => cmd_attack::run_transfer(&cli.common, args),
        },
        Command::Evaluate(which) => match which {
            EvaluateCmd::EpsilonSweep(args) => cmd_evaluate::run_epsilon_sweep(&cli.common, args),
            EvaluateCmd::CwCompare(args) => cmd_evaluate::run_cw_compare(&cli.common, args),
            EvaluateCmd::Heatmap(args) => cmd_evaluate::run_heatmap(&cli.common, args),
            EvaluateCmd::KappaSweep(args) => cmd_evaluate::run_kappa_sweep(&cli.common, args),
        },
        Command::Denoise(args) => cmd_denoise::run(&cli.common, args),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    };
    std::process::exit(code);
}
