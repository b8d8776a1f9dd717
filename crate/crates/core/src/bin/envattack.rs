use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use envattack::runner::commands::{self, Context};
use envattack::runner::{Arm, ExperimentPlan, Method, Profile};

#[derive(Parser)]
#[command(name = "envattack", version, about = "Adversarial training through environment attacks")]
struct Cli {
    /// Experiment plan (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the plan's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving `checkpoints/` and `results/`.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one protagonist per seed in the base environment.
    Pretrain,
    /// Continue training from the pretrained agents with one method.
    Train {
        /// baseline, target, eacn, eaan, oacn, oaan, rarl, fsp or co-fsp
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Perturbation budget; defaults to the plan's
        #[arg(long)]
        epsilon: Option<f64>,
        /// Cooperation weight of adversary methods; defaults to the plan's
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate a trained method at one difficulty.
    Eval {
        #[arg(long, value_parser = parse_method, default_value = "baseline")]
        method: Method,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        difficulty: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Epsilon grid search for one method.
    Grid {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Evaluate the configured methods over the difficulty grid.
    Sweep,
    /// Evaluate the frozen baseline under each attack and budget.
    AttackEval,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: envattack::Error| e.to_string())
}

fn run(cli: Cli) -> envattack::Result<PathBuf> {
    let mut plan = match &cli.config {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::default(),
    };
    plan.apply_profile(match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Full => Profile::Full,
    });
    if let Some(s) = cli.seed {
        plan.schedule.seeds = vec![s];
    }
    let arm = |m: Method, eps: Option<f64>, alpha: Option<f64>, plan: &ExperimentPlan| {
        Arm::new(m, eps.unwrap_or(plan.attack.epsilon), alpha.unwrap_or(plan.adversary.alpha))
    };
    let a = match &cli.command {
        Command::Train { method, epsilon, alpha } | Command::Eval { method, epsilon, alpha, .. } => {
            Some(arm(*method, *epsilon, *alpha, &plan))
        }
        _ => None,
    };
    let ctx = Context::new(plan, cli.out)?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Train { .. } => commands::train(&ctx, &a.expect("arm")),
        Command::Eval { difficulty, episodes, .. } => commands::eval(&ctx, &a.expect("arm"), difficulty, episodes),
        Command::Grid { method } => commands::grid(&ctx, method),
        Command::Sweep => commands::sweep(&ctx),
        Command::AttackEval => commands::attack_eval(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
