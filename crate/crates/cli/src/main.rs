use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use steer_core::env::{format_joint, ObsMode, PriorityPermutation};
use steer_core::equilibria::Oracle;
use steer_core::games;
use steer_core::harness::{self, ExperimentConfig, Manifest, SweepResult};
use steer_core::model::Variant;
use steer_core::trainer::TrainConfig;

/// Train and evaluate a hierarchical transformer policy on Stackelberg matrix games.
#[derive(Debug, Parser)]
#[command(name = "steer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a single seed.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        /// Seed of the run.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train seeds 0..N independently and aggregate convergence.
    Sweep {
        #[command(flatten)]
        exp: ExpArgs,
        /// Number of seeds.
        #[arg(long, default_value_t = harness::DEFAULT_SEEDS)]
        seeds: usize,
        /// Re-run the sweep recorded in this manifest; other experiment flags are ignored.
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
    },
    /// Sweep every listed model variant with identical settings.
    Ablate {
        #[command(flatten)]
        exp: ExpArgs,
        /// Number of seeds per variant.
        #[arg(long, default_value_t = harness::DEFAULT_SEEDS)]
        seeds: usize,
        /// Comma-separated variants to compare.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,itb-mlp,otb-gru,itb-only,otb-only"
        )]
        variants: Vec<Variant>,
    },
    /// Print the equilibrium report of a game.
    Oracle {
        #[command(flatten)]
        game: GameArg,
        /// Agent decision order, e.g. `1,0`.
        #[arg(long)]
        priority: Option<PriorityPermutation>,
    },
    /// Greedy rollout of a checkpoint, compared with the oracle path.
    Eval {
        #[command(flatten)]
        game: GameArg,
        /// Checkpoint written by `train` or `sweep`.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Write `curve.csv` (step, mean return, 95% CI) into each sweep directory.
    Plot {
        /// Sweep output directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct GameArg {
    /// Game document path or built-in name.
    #[arg(value_name = "GAME")]
    positional: Option<String>,
    /// Game document path or built-in name (same as the positional argument).
    #[arg(long = "game", value_name = "GAME", conflicts_with = "positional")]
    flag: Option<String>,
}

impl GameArg {
    fn get(&self) -> Result<String> {
        self.flag
            .clone()
            .or_else(|| self.positional.clone())
            .ok_or_else(|| steer_core::Error::Config("no game given (pass GAME or --game)".into()).into())
    }
}

#[derive(Debug, Args)]
struct ExpArgs {
    #[command(flatten)]
    game: GameArg,
    /// Model variant: full, itb-mlp, otb-gru, itb-only or otb-only.
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Override the game's observation mode.
    #[arg(long, value_parser = ["global", "local"])]
    obs_mode: Option<String>,
    /// Agent decision order, e.g. `1,0`.
    #[arg(long)]
    priority: Option<PriorityPermutation>,
    /// Environment steps per run.
    #[arg(long, default_value_t = 60_000)]
    steps: usize,
    /// Output directory [default: runs/<command>-<game>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Policy ratio clip.
    #[arg(long, default_value_t = 0.2)]
    clip: f64,
    /// Weight of the entropy bonus.
    #[arg(long, default_value_t = 0.01)]
    entropy_coef: f64,
    /// Discount factor.
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// GAE smoothing parameter.
    #[arg(long, default_value_t = 0.95)]
    gae_lambda: f64,
    /// Model width.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Layers in each transformer block.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Environment steps per update.
    #[arg(long, default_value_t = 128)]
    rollout_len: usize,
}

impl ExpArgs {
    fn config(&self, command: &str, seeds: Vec<u64>) -> Result<ExperimentConfig> {
        let game = self.game.get()?;
        let obs_mode = self.obs_mode.as_deref().map(str::parse::<ObsMode>).transpose()?;
        let name = std::path::Path::new(&game)
            .file_name()
            .map_or_else(|| game.clone(), |n| n.to_string_lossy().into_owned());
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{name}")));
        Ok(ExperimentConfig {
            game,
            variant: self.variant,
            obs_mode,
            priority: self.priority.clone(),
            d: self.d,
            depth: self.depth,
            train: TrainConfig {
                total_steps: self.steps,
                rollout_len: self.rollout_len,
                lr: self.lr,
                clip: self.clip,
                entropy_coef: self.entropy_coef,
                gamma: self.gamma,
                gae_lambda: self.gae_lambda,
                ..TrainConfig::default()
            },
            seeds,
            out: Some(out),
            ..ExperimentConfig::new("")
        })
    }
}

fn report(result: &SweepResult, out: Option<&PathBuf>) {
    println!("{}", result.summary());
    for s in &result.seeds {
        match &s.error {
            Some(e) => println!("  seed {}: aborted: {e}", s.seed),
            None => println!(
                "  seed {}: se_match={} returns={:?} ({:.1}s)",
                s.seed, s.se_match, s.returns, s.wall_time_s
            ),
        }
    }
    if let Some(out) = out {
        println!("results in {}", out.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { exp, seed } => {
            let cfg = exp.config("train", vec![seed])?;
            let result = harness::run_sweep(&cfg)?;
            report(&result, cfg.out.as_ref());
            if let Some(e) = &result.seeds[0].error {
                anyhow::bail!("run aborted: {e}");
            }
        }
        Command::Sweep { exp, seeds, manifest } => {
            let result = match manifest {
                Some(path) => {
                    let m = Manifest::load(&path)?;
                    let out = exp.out.clone().unwrap_or_else(|| {
                        path.parent()
                            .map_or_else(|| PathBuf::from("rerun"), |p| p.join("rerun"))
                    });
                    let result = harness::rerun_manifest(&m, Some(out.clone()))?;
                    report(&result, Some(&out));
                    result
                }
                None => {
                    let cfg = exp.config("sweep", (0..seeds as u64).collect())?;
                    let result = harness::run_sweep(&cfg)?;
                    report(&result, cfg.out.as_ref());
                    result
                }
            };
            if result.warning {
                eprintln!(
                    "warning: {} of {} seeds aborted",
                    result.seeds.len() - result.completed,
                    result.seeds.len()
                );
            }
        }
        Command::Ablate { exp, seeds, variants } => {
            let cfg = exp.config("ablate", (0..seeds as u64).collect())?;
            for r in harness::ablate(&cfg, &variants)? {
                println!("{}", r.summary());
            }
            if let Some(out) = &cfg.out {
                println!("results in {}", out.display());
            }
        }
        Command::Oracle { game, priority } => {
            let spec = games::resolve(&game.get()?)?;
            let priority = priority.unwrap_or_else(|| PriorityPermutation::identity(spec.n_agents));
            let oracle = Oracle::solve(&spec, &priority)?;
            let rep = oracle.report();
            let path: Vec<String> = oracle
                .se_path()
                .iter()
                .map(|s| {
                    format!(
                        "{}: ({})",
                        spec.states[s.state],
                        format_joint(&s.joint).replace(' ', ",")
                    )
                })
                .collect();
            let unique = if rep.se_path_count == 1 { "unique " } else { "" };
            println!("{unique}SE path: {}", path.join(" -> "));
            println!("SE values: {:?}", rep.se_values);
            print!("{}", rep.to_text());
        }
        Command::Eval { game, checkpoint } => {
            let ev = harness::eval_checkpoint(&checkpoint, &game.get()?)?;
            let joints: Vec<String> = ev.joints.iter().map(|j| format_joint(j)).collect();
            println!("greedy path: {}", joints.join(" -> "));
            println!("returns: {:?}", ev.returns);
            println!("se_match: {}", ev.se_match);
        }
        Command::Plot { dirs } => {
            for p in harness::emit_plot_data(&dirs).context("writing learning curves")? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<steer_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
