// tdvmm: run TD-VMM experiments from a TOML config and merge their results.
//
// Usage:
//   tdvmm extract --config exp.toml --out runs/extract --seed 3
//   tdvmm report runs/ --out runs/report

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use tdvmm::experiment::{
    config_load, export_report, run_experiment, Command, ErrorReport, ExperimentConfig,
};
use tdvmm::Error;

#[derive(Parser, Debug)]
#[command(name = "tdvmm", version, about = "Time-domain VMM simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pair-activation weight deficits for layout cases A, B and C.
    Deltaw(RunArgs),
    /// WEM extraction sweep scored with slope and SER.
    Extract(RunArgs),
    /// Baseline training and float / quantized / analog accuracy.
    Train(RunArgs),
    /// Baseline plus hardware-aware retraining.
    Retrain(RunArgs),
    /// Per-layer distortion ablation.
    Ablate(RunArgs),
    /// Decision margins before and after retraining.
    DmReport(RunArgs),
    /// Bit-line LUT against the exact solver.
    LutCheck(RunArgs),
    /// Merge run directories into one comparison report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 5 when any acceptance check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn fail(command: Option<Command>, out: Option<&Path>, err: &Error) -> ExitCode {
    let report = ErrorReport::new(command, err).to_json();
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), &report);
        }
    }
    error!("{err}");
    eprintln!("{report}");
    ExitCode::from(err.exit_code() as u8)
}

fn run(command: Command, args: RunArgs) -> ExitCode {
    let cfg = match &args.config {
        Some(p) => config_load(p),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => return fail(Some(command), args.out.as_deref(), &e),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{}", cfg.seed)));
    let summary = match run_experiment(&cfg, command, &out) {
        Ok(s) => s,
        Err(e) => return fail(Some(command), Some(&out), &e),
    };
    for (name, ok) in &summary.checks {
        println!("{} {name}", if *ok { "[PASS]" } else { "[FAIL]" });
    }
    info!("results in {}", out.display());
    if args.check && !summary.passed() {
        let failed: Vec<&str> = summary
            .checks
            .iter()
            .filter(|(_, ok)| !**ok)
            .map(|(k, _)| k.as_str())
            .collect();
        return fail(Some(command), Some(&out), &Error::Check(failed.join(", ")));
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Deltaw(a) => (Command::Deltaw, a),
        Cmd::Extract(a) => (Command::Extract, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Retrain(a) => (Command::Retrain, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::DmReport(a) => (Command::DmReport, a),
        Cmd::LutCheck(a) => (Command::LutCheck, a),
        Cmd::Report(r) => {
            return match export_report(&r.inputs, &r.out) {
                Ok(rep) => {
                    println!("merged {} runs into {}", rep.runs.len(), r.out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(None, Some(&r.out), &e),
            };
        }
    };
    run(command, args)
}
