use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bundleforge_cli::{run, CliError, Command, ExperimentConfig};

/// Popularity-debiased bundle construction experiments.
#[derive(Parser, Debug)]
#[command(name = "bundleforge", version)]
struct Cli {
    /// key=value config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// logits, feature, both or none.
    #[arg(long, global = true)]
    distill: Option<String>,
    /// Fusion variant of the student: full, wo_ui, wo_mm or wo_bi.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Evaluation scenarios, comma separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    scenario: Vec<String>,
    #[arg(long, global = true)]
    head_ratio: Option<f64>,
    #[arg(long, global = true)]
    tail_ratio: Option<f64>,
    /// Ranking cutoffs, comma separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Vec<usize>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth,
    /// Train the user-feedback item table.
    Feedback,
    /// Train the popularity-free teacher.
    TrainTeacher,
    /// Train a student with the configured distillation.
    Train,
    /// Evaluate a trained student on the test split.
    Eval,
    /// Compare backbone and distilled student across popularity ratios.
    Sweep,
    /// Train and evaluate the fusion ablations.
    Ablate,
    /// Write score histograms and case studies.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Feedback => Command::Feedback,
            Cmd::TrainTeacher => Command::TrainTeacher,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Sweep => Command::Sweep,
            Cmd::Ablate => Command::Ablate,
            Cmd::Report => Command::Report,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn build_config(cli: &Cli) -> bundleforge::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(v) = cli.seed {
        push("seed", v.to_string());
    }
    if let Some(v) = &cli.out {
        push("out", v.display().to_string());
    }
    if let Some(v) = &cli.distill {
        push("distill", v.clone());
    }
    if let Some(v) = &cli.fusion {
        push("fusion", v.clone());
    }
    if !cli.scenario.is_empty() {
        push("scenarios", join(&cli.scenario));
    }
    if let Some(v) = cli.head_ratio {
        push("head_ratio", v.to_string());
    }
    if let Some(v) = cli.tail_ratio {
        push("tail_ratio", v.to_string());
    }
    if !cli.k.is_empty() {
        push("ks", join(&cli.k));
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| bundleforge::Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        push(k.trim(), v.trim().to_string());
    }
    for (k, v) in overrides {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build_config(&cli)
        .map_err(CliError::Config)
        .and_then(|cfg| run(cli.cmd.into(), &cfg));
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
