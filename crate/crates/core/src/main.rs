use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use comdad::config::{ConditionSource, ExperimentConfig};
use comdad::discrete::UnmaskPolicy;
use comdad::gates::{oracle_suite, GateOutcome};
use comdad::modality::Modality;
use comdad::pipeline::{self, Arm, Metric, PipelineError, RunContext, SampleRequest};
use comdad::trainer::Stage;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GATE: u8 = 3;

#[derive(Parser)]
#[command(name = "comdad", version, about = "Two-stage latent/absorbing diffusion experiments on a synthetic corpus")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set stage2.iterations=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired corpus.
    GenData,
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Stage II arm (ablation arms live under `ablate/`).
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Sample token sequences from a trained Stage II model.
    Sample(SampleArgs),
    /// Evaluate a trained model.
    Eval {
        /// Comma-separated subset of: bleu, self_bleu, order, cross_modal, cost, elbo, loss.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
        #[arg(long, default_value = "full")]
        arm: Arm,
    },
    /// Train and evaluate the no-injection and fixed-rate arms and check the ablation orderings.
    Ablate,
    /// Run the finite-difference, forward-process and enumeration oracle suites.
    Oracle,
    /// Print the resolved config and its run ID.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Latent,
    Discrete,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value = "text")]
    modality: Modality,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Unmasking policy: confidence, random or left_to_right.
    #[arg(long)]
    policy: Option<UnmaskPolicy>,
    /// Reverse steps; `L` means one step per position.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Conditioning source: heldout or prior.
    #[arg(long)]
    condition: Option<ConditionSource>,
    /// Record which positions each step committed.
    #[arg(long)]
    trajectory: bool,
    #[arg(long, default_value = "full")]
    arm: Arm,
}

fn parse_steps(raw: &str, len: usize) -> Result<usize, PipelineError> {
    if raw.eq_ignore_ascii_case("l") {
        return Ok(len);
    }
    raw.parse().map_err(|_| PipelineError::Invalid(format!("--steps expects a positive integer or `L`, got `{raw}`")))
}

fn print_gates(gates: &[GateOutcome]) -> bool {
    for g in gates {
        println!("{} {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
    }
    gates.iter().all(|g| g.passed)
}

enum Outcome {
    Done,
    GateFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?.resolved()?;
    if let Command::Oracle = cli.command {
        let gates = oracle_suite(config.seed)?;
        return Ok(if print_gates(&gates) { Outcome::Done } else { Outcome::GateFailed });
    }
    let ctx = RunContext::create(config)?;
    match cli.command {
        Command::GenData => {
            let corpus = pipeline::gen_data(&ctx)?;
            println!("{} records -> {}", corpus.records.len(), ctx.corpus_path().display());
        }
        Command::Train { stage, arm } => {
            let (stage, trace) = match stage {
                StageArg::Latent => (Stage::Latent, pipeline::train_latent(&ctx)?),
                StageArg::Discrete => (Stage::Discrete, pipeline::train_discrete(&ctx, arm)?),
            };
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("{stage} loss {:.4} (step {}) -> {:.4} (step {})", first.loss, first.step, last.loss, last.step);
            }
            println!("{}", ctx.stage_dir(stage, arm).display());
        }
        Command::Sample(a) => {
            let e = &ctx.config.eval;
            let len = if a.modality == Modality::Text { ctx.config.world.text_len } else { ctx.config.world.image_len() };
            let steps = match &a.steps {
                Some(raw) => parse_steps(raw, len)?,
                None => e.steps,
            };
            let req = SampleRequest {
                arm: a.arm,
                modality: a.modality,
                count: a.count,
                steps,
                policy: a.policy.unwrap_or(e.policy),
                temperature: a.temperature.unwrap_or(e.temperature),
                condition: a.condition.unwrap_or(e.condition),
                trajectory: a.trajectory,
            };
            let (path, records) = pipeline::sample(&ctx, &req)?;
            let evals: usize = records.iter().map(|r| r.evaluations).sum();
            println!("{} samples, {evals} denoiser evaluations -> {}", records.len(), path.display());
        }
        Command::Eval { metrics, arm } => {
            let metrics = if metrics.is_empty() { Metric::ALL.to_vec() } else { metrics };
            let report = pipeline::evaluate(&ctx, arm, &metrics)?;
            for (k, v) in &report.metrics {
                println!("{k}\t{v:.4}");
            }
            println!("{}", ctx.eval_dir(arm).display());
        }
        Command::Ablate => {
            let summary = pipeline::ablate(&ctx)?;
            if !print_gates(&summary.gates) {
                return Ok(Outcome::GateFailed);
            }
        }
        Command::Config => {
            print!("{}", ctx.config.to_toml());
            println!("# run id {}", ctx.id);
        }
        Command::Oracle => unreachable!("handled above"),
    }
    Ok(Outcome::Done)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(p) = err.downcast_ref::<PipelineError>() {
        if p.is_validation() {
            return EXIT_VALIDATION;
        }
    }
    if err.downcast_ref::<comdad::config::ConfigError>().is_some() {
        return EXIT_VALIDATION;
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GateFailed) => ExitCode::from(EXIT_GATE),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
