mod commands;
mod listing;

use std::path::PathBuf;
use std::process::ExitCode;

use aesthete::config::{Profile, RunConfig};
use aesthete::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};

/// Feature alignment and semi-supervised distillation for image aesthetics.
#[derive(Parser, Debug)]
#[command(name = "aesthete", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Defaults profile: full or desk.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// TOML file layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set skd.loss.beta=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `$AESTHETE_RUN_ROOT/<command>` or
    /// `runs/<command>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

impl Global {
    pub fn resolve(&self) -> aesthete::Result<RunConfig> {
        let profile = self.profile.as_deref().map(str::parse::<Profile>).transpose()?;
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(dir) = &self.run_dir {
            overrides.push(format!("run_dir={}", toml_string(&dir.to_string_lossy())));
        }
        RunConfig::resolve(profile, self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a manifest from image directories, or merge manifests.
    MakeManifest(commands::MakeManifestArgs),
    /// Generate the synthetic scoring task.
    Synth(commands::SynthArgs),
    /// Align a student backbone's features to a frozen teacher encoder.
    Cfa(commands::TrainArgs),
    /// Fine-tune a score teacher on labeled data.
    FinetuneTeacher(commands::TrainArgs),
    /// Distill a student from ground truth and teacher pseudo labels.
    Skd(commands::TrainArgs),
    /// Evaluate a score model checkpoint on a labeled manifest.
    Eval(commands::EvalArgs),
    /// Compare attention statistics of two transformer backbones.
    AttnReport(commands::AttnArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Data => 5,
        ErrorKind::Unsupported => 6,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let g = &cli.global;
    let result = match cli.command {
        Command::MakeManifest(a) => commands::make_manifest(&a),
        Command::Synth(a) => commands::synth(g, &a),
        Command::Cfa(a) => commands::cfa(g, &a),
        Command::FinetuneTeacher(a) => commands::finetune(g, &a),
        Command::Skd(a) => commands::skd(g, &a),
        Command::Eval(a) => commands::eval(g, &a),
        Command::AttnReport(a) => commands::attn_report(g, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
