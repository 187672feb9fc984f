use std::ops::Range;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "F2C_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "f2c", version, about = "Flip-flop consistency training on synthetic multi-format tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a scorer on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run a multi-seed study.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory; defaults to `$F2C_OUT_ROOT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Default output root.
    #[arg(long = "out-root", env = OUT_ROOT_ENV, hide_env_values = true)]
    pub out_root: Option<PathBuf>,
}

impl OutArgs {
    pub fn resolve(&self, command: &str) -> PathBuf {
        match (&self.out, &self.out_root) {
            (Some(out), _) => out.clone(),
            (None, Some(root)) => root.join(command),
            (None, None) => PathBuf::from("runs").join(command),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Task config (TOML or JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` edits applied to the config, dotted keys for nested fields.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Base,
    Swarm,
    Cce,
    F2c,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on formats `A..B` only.
    #[arg(long, value_parser = parse_range)]
    pub formats: Option<Range<usize>>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda_cce: Option<f64>,
    #[arg(long)]
    pub tau_unanimous: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub f_min: Option<f64>,
    #[arg(long)]
    pub f_max: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub beta_jsd: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

impl TrainArgs {
    /// Dedicated hyperparameter flags expressed as overrides.
    pub fn flag_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        push("lr", self.lr.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("hp.lambda_cce", self.lambda_cce.map(|v| v.to_string()));
        push("hp.tau_unanimous", self.tau_unanimous.map(|v| v.to_string()));
        push("hp.k_max", self.k_max.map(|v| v.to_string()));
        push("hp.f_min", self.f_min.map(|v| v.to_string()));
        push("hp.f_max", self.f_max.map(|v| v.to_string()));
        push("hp.temperature", self.temperature.map(|v| v.to_string()));
        push("hp.beta_jsd", self.beta_jsd.map(|v| v.to_string()));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate formats `A..B` only.
    #[arg(long, value_parser = parse_range)]
    pub formats: Option<Range<usize>>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    Compare,
    Ood,
    Heldout,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Compare => "compare",
            StudyKind::Ood => "ood",
            StudyKind::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(value_enum)]
    pub study: StudyKind,
    /// Study spec (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the spec's seed list; repeat for several seeds.
    #[arg(long)]
    pub seed: Vec<u64>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses a half-open `A..B` range.
pub fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start `{a}`: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end `{b}`: {e}"))?;
    if a >= b {
        return Err(format!("empty format range {a}..{b}"));
    }
    Ok(a..b)
}
