use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use xalign_core::arm_env::ScenarioName;
use xalign_core::pipeline::{self, Method, RunAllOptions, RunConfig};

#[derive(Parser)]
#[command(name = "xalign", version, about = "Cross-domain correspondence learning and imitation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate proxy and inference demonstration corpora.
    GenDemos(Common),
    /// Fit normalizers and temporal position estimators.
    TrainPositions(Common),
    /// Learn the expert/agent state correspondence.
    TrainAlign(Common),
    /// Map expert inference demonstrations into the agent domain.
    Transfer(Common),
    /// Train the inverse dynamics model and clone the transferred demonstrations.
    TrainBco(Common),
    /// Score the cloned policy.
    Eval(Common),
    /// Run every stage into a fresh output directory.
    RunAll(RunAll),
    /// Print the effective configuration as JSON.
    ShowConfig(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Quick,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Cca,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Budget preset applied before the config file.
    #[arg(long, value_enum, default_value = "default")]
    profile: Profile,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (`output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    demos_per_proxy_task: Option<usize>,
    #[arg(long)]
    inference_demo_count: Option<usize>,
    #[arg(long)]
    gamma_pos: Option<f64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Override any field by dotted path, e.g. `--set align.lambda4=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunAll {
    #[command(flatten)]
    common: Common,
    /// Also run the three loss-term ablations.
    #[arg(long)]
    ablation: bool,
    #[arg(long, value_enum)]
    baseline: Vec<Baseline>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match self.profile {
            Profile::Default => RunConfig::default(),
            Profile::Quick => RunConfig::default().quick(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut file_value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let mut merged = serde_json::to_value(&cfg)?;
            merge(&mut merged, file_value.take());
            cfg = serde_json::from_value(merged).with_context(|| format!("config {}", path.display()))?;
        }
        if let Some(s) = &self.scenario {
            cfg.scenario = s.parse::<ScenarioName>()?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(n) = self.demos_per_proxy_task {
            cfg.demos_per_proxy_task = n;
        }
        if let Some(n) = self.inference_demo_count {
            cfg.inference_demo_count = n;
        }
        if let Some(g) = self.gamma_pos {
            cfg.gamma_pos = g;
        }
        if let Some(n) = self.eval_episodes {
            cfg.eval_episodes = n;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(c) => {
            let files = pipeline::gen_demos(&c.config()?)?;
            println!("wrote {} corpora", files.len());
        }
        Command::TrainPositions(c) => print_json(&pipeline::train_positions(&c.config()?)?)?,
        Command::TrainAlign(c) => {
            let files = pipeline::train_align(&c.config()?, Method::FULL)?;
            println!("wrote {} alignment artifacts", files.len());
        }
        Command::Transfer(c) => {
            let files = pipeline::transfer(&c.config()?, Method::FULL)?;
            println!("wrote {} transferred corpora", files.len());
        }
        Command::TrainBco(c) => print_json(&pipeline::train_bco(&c.config()?, Method::FULL)?)?,
        Command::Eval(c) => print_json(&pipeline::eval(&c.config()?, Method::FULL)?)?,
        Command::RunAll(r) => {
            let opts = RunAllOptions {
                ablation: r.ablation,
                cca: r.baseline.contains(&Baseline::Cca),
            };
            let report = pipeline::run_all(&r.common.config()?, &opts)?;
            print_json(&report.summary)?;
        }
        Command::ShowConfig(c) => println!("{}", c.config()?.to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
