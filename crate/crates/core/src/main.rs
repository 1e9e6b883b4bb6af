use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depnet::cli::{self, ExperimentConfig, Preset};
use depnet::error::Result;

#[derive(Parser)]
#[command(name = "depnet", version, about = "Posterior sampling for networks with dependent weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a batch and write samples, stats, ECDFs and a manifest
    Run(RunArgs),
    /// Per-marginal KS distances between two batches
    Compare {
        batch_a: PathBuf,
        batch_b: PathBuf,
        /// Report file
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Write one realization of the limit kernel chain
    Kernel(ConfigArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Worker threads (default: all cores)
    #[arg(long, env = "DEPNET_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value file, e.g. a manifest from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Hidden width, applied to every hidden layer
    #[arg(long)]
    width: Option<usize>,
    /// Number of hidden layers
    #[arg(long)]
    depth: Option<usize>,
    /// prior | posterior | limit-prior | limit-posterior
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clamp level of the acceptance estimate
    #[arg(long)]
    delta: Option<f64>,
    /// Replica count of the acceptance estimate
    #[arg(long = "mc-n")]
    mc_n: Option<usize>,
    /// Monte Carlo draws for the kernel expectation
    #[arg(long = "limit-mc")]
    limit_mc: Option<usize>,
    #[arg(long = "poisson-eps")]
    poisson_eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input/target CSV (x_1.., y_1.. columns)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma separated n_0,...,n_{L+1}
    #[arg(long)]
    widths: Option<String>,
    /// auto | shallow | deep
    #[arg(long)]
    method: Option<String>,
    /// likelihood | prior
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long = "max-proposals")]
    max_proposals: Option<u64>,
    /// per-output-sample | per-proposal
    #[arg(long = "replica-reuse")]
    replica_reuse: Option<String>,
    /// Per-layer variance models, comma separated (fixed | model1 | model2)
    #[arg(long = "variance-models")]
    variance_models: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::preset(Preset::Model1);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply(&ExperimentConfig::parse_pairs(&text)?)?;
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("widths", self.widths.clone());
        push("depth", self.depth.map(|v| v.to_string()));
        push("width", self.width.map(|v| v.to_string()));
        push("variance_models", self.variance_models.clone());
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("sampler", self.sampler.clone());
        push("method", self.method.clone());
        push("weighting", self.weighting.clone());
        push("samples", self.samples.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("delta", self.delta.map(|v| v.to_string()));
        push("mc_n", self.mc_n.map(|v| v.to_string()));
        push("max_proposals", self.max_proposals.map(|v| v.to_string()));
        push("replica_reuse", self.replica_reuse.clone());
        push("limit_mc", self.limit_mc.map(|v| v.to_string()));
        push("poisson_eps", self.poisson_eps.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        cfg.apply(&pairs)?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::Run(run) => run
            .config
            .resolve()
            .and_then(|cfg| cli::run(&cfg, run.threads).map(|_| ())),
        Command::Compare { batch_a, batch_b, out } => cli::compare(&batch_a, &batch_b, &out).map(|rows| {
            for r in rows {
                println!("row {} input {}: ks = {:.4}", r.output_row, r.input_index, r.ks);
            }
        }),
        Command::Kernel(k) => k.resolve().and_then(|cfg| cli::kernel(&cfg).map(|_| ())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
