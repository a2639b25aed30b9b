use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use multiband::config::{parse_policy, ExperimentConfig, Method};
use multiband::data::DatasetId;
use multiband::runner::{
    evaluate_checkpoint, run_ablation, run_experiment, run_seed, run_toy, sample_checkpoint, write_error_record,
    SessionOptions,
};
use multiband::{Error, Result};

#[derive(Parser)]
#[command(name = "multiband", version, about = "Continual generative training with latent alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one experiment, once per seed.
    Run(Common),
    /// Run the cumulative ablation ladder and write a FID table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Stop starting new runs after this many minutes.
        #[arg(long)]
        budget_minutes: Option<f64>,
    },
    /// Score a saved task checkpoint on every task it has seen.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Generated samples per task (defaults to the stored config).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write a sample grid (rows are tasks) from a saved checkpoint.
    Sample {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 10)]
        columns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-task alignment probe against the replay baseline.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Probe images per class.
        #[arg(long, default_value_t = 500)]
        probe: usize,
    },
}

/// Flags that override keys of the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    method: Option<Method>,
    /// class_incremental, dirichlet, sequential_datasets or toy.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Continue from the last complete task checkpoint.
    #[arg(long)]
    resume: bool,
    /// Do not echo progress to stderr.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.dataset {
            c.dataset = v;
        }
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = &self.scenario {
            c.scenario.policy = parse_policy(v)?;
        }
        if let Some(v) = self.num_tasks {
            c.scenario.num_tasks = v;
        }
        if let Some(v) = self.alpha {
            c.scenario.alpha = Some(v);
        }
        if let Some(v) = self.gamma {
            c.gamma = Some(v);
        }
        if let Some(v) = self.seed {
            c.seeds = vec![v];
        }
        if let Some(v) = &self.out {
            c.out_dir = v.clone();
        }
        if let Some(v) = &self.data_root {
            c.data_root = v.clone();
        }
        c.resolved()
    }

    fn opts(&self) -> SessionOptions {
        SessionOptions { echo: !self.quiet, resume: self.resume }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(common) => {
            let cfg = common.config()?;
            let artifacts = if let [seed] = cfg.seeds[..] {
                vec![run_seed(&cfg, seed, common.opts())?.artifacts()]
            } else {
                run_experiment(&cfg, common.opts())?
            };
            println!("{}", serde_json::to_string_pretty(&artifacts)?);
        }
        Cmd::Ablate { common, budget_minutes } => {
            let cfg = common.config()?;
            let budget = budget_minutes.map(|m| Duration::from_secs_f64(m * 60.0));
            let table = run_ablation(&cfg, common.opts(), budget)?;
            print!("{}", table.to_markdown());
            if !table.finished {
                return Err(Error::Contract("time budget exhausted before the ladder finished".into()));
            }
        }
        Cmd::Eval { bundle, samples } => {
            let rows = evaluate_checkpoint(&bundle, samples, true)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Cmd::Sample { bundle, columns, seed, out } => {
            sample_checkpoint(&bundle, columns, seed, &out)?;
            println!("{}", out.display());
        }
        Cmd::Toy { common, probe } => {
            let cfg = common.config()?;
            let report = run_toy(&cfg, cfg.seeds[0], common.opts(), probe)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = match &cli.cmd {
        Cmd::Run(c) | Cmd::Ablate { common: c, .. } | Cmd::Toy { common: c, .. } => c.out.clone(),
        _ => None,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            // per-run failures already left an error.json in their run directory
            if let Some(dir) = out_dir {
                let _ = write_error_record(&dir.join("error.json"), &e, None, 0, "");
            }
            ExitCode::FAILURE
        }
    }
}
