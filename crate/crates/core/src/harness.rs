//! Seeded experiment sweeps, ablation grids and their output files.
//!
//! A sweep writes:
//!
//! ```text
//! <out>/manifest            full config, game document, code version, oracle digest
//! <out>/result              per-seed outcomes and the aggregate (TOML)
//! <out>/seed_<k>/metrics.csv
//! <out>/seed_<k>/checkpoint
//! <out>/curve.csv           written by emit_plot_data
//! ```
//!
//! Seeds run in parallel on the rayon pool. Each run owns its environment,
//! model and optimiser, so the pool size never changes per-seed results.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{GameSpec, ObsMode, PriorityPermutation};
use crate::equilibria::Oracle;
use crate::error::{Error, Result};
use crate::games;
use crate::model::{ModelConfig, SteerModel, Variant};
use crate::trainer::{evaluate, read_metrics_csv, train_with, write_metrics_csv, Evaluation, TrainConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

pub const DEFAULT_SEEDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to a game document, or the name of a built-in game.
    pub game: String,
    pub variant: Variant,
    pub obs_mode: Option<ObsMode>,
    pub priority: Option<PriorityPermutation>,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// No files are written when absent.
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(game: impl Into<String>) -> Self {
        ExperimentConfig {
            game: game.into(),
            variant: Variant::Full,
            obs_mode: None,
            priority: None,
            d: 64,
            depth: 2,
            heads: 4,
            train: TrainConfig::default(),
            seeds: (0..DEFAULT_SEEDS as u64).collect(),
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.train.validate()
    }

    /// Loads the game with the observation-mode override applied.
    pub fn load_game(&self) -> Result<GameSpec> {
        let spec = games::resolve(&self.game)?;
        Ok(self.apply(spec))
    }

    fn apply(&self, spec: GameSpec) -> GameSpec {
        match self.obs_mode {
            Some(m) => spec.with_obs_mode(m),
            None => spec,
        }
    }

    pub fn model_config(&self, spec: &GameSpec) -> Result<ModelConfig> {
        let priority = self
            .priority
            .clone()
            .unwrap_or_else(|| PriorityPermutation::identity(spec.n_agents));
        if priority.len() != spec.n_agents {
            return Err(Error::Config(format!(
                "priority has {} entries for {} agents",
                priority.len(),
                spec.n_agents
            )));
        }
        let cfg = ModelConfig {
            d: self.d,
            itb_depth: self.depth,
            otb_depth: self.depth,
            heads: self.heads,
            variant: self.variant,
            priority,
            ..ModelConfig::for_game(spec)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub oracle_digest: String,
    /// SHA-256 of `game_document`.
    pub game_digest: String,
    /// The game exactly as trained on, before the observation-mode override.
    pub game_document: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })
    }

    fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest is plain data")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub se_match: bool,
    /// Final greedy return per agent; empty when aborted.
    pub returns: Vec<f64>,
    /// First step whose greedy evaluation matched the equilibrium path.
    pub first_match_step: Option<usize>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub game: String,
    pub variant: Variant,
    pub obs_mode: ObsMode,
    pub completed: usize,
    pub converged: usize,
    /// `converged / completed`, in percent.
    pub convergence_pct: f64,
    /// Set when any seed aborted; aggregates cover completed seeds only.
    pub warning: bool,
    pub mean_return: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub seeds: Vec<SeedResult>,
}

impl SweepResult {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("result is plain data")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SweepResult> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn summary(&self) -> String {
        let rets: Vec<String> = self
            .mean_return
            .iter()
            .zip(self.ci_low.iter().zip(&self.ci_high))
            .map(|(m, (lo, hi))| format!("{m:.3} [{lo:.3}, {hi:.3}]"))
            .collect();
        format!(
            "{} {} {}: {}/{} converged ({:.1}%){}, returns {}",
            self.game,
            self.variant,
            self.obs_mode,
            self.converged,
            self.completed,
            self.convergence_pct,
            if self.warning { ", some seeds aborted" } else { "" },
            rets.join(", ")
        )
    }
}

/// Mean and 95% normal-approximation interval `mean ± z * s / sqrt(k)`,
/// with `s` the sample standard deviation. A single sample has zero width.
pub fn mean_ci(xs: &[f64]) -> (f64, f64, f64) {
    let k = xs.len();
    if k == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, mean, mean);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let half = Z95 * (var / k as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// Aggregates per-seed outcomes.
pub fn aggregate(
    game: &str,
    variant: Variant,
    obs_mode: ObsMode,
    n_agents: usize,
    seeds: Vec<SeedResult>,
) -> SweepResult {
    let done: Vec<&SeedResult> = seeds.iter().filter(|s| s.status == RunStatus::Completed).collect();
    let converged = done.iter().filter(|s| s.se_match).count();
    let mut mean_return = Vec::with_capacity(n_agents);
    let mut ci_low = Vec::with_capacity(n_agents);
    let mut ci_high = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let xs: Vec<f64> = done.iter().map(|s| s.returns[i]).collect();
        let (m, lo, hi) = mean_ci(&xs);
        mean_return.push(m);
        ci_low.push(lo);
        ci_high.push(hi);
    }
    SweepResult {
        game: game.to_string(),
        variant,
        obs_mode,
        completed: done.len(),
        converged,
        convergence_pct: if done.is_empty() {
            0.0
        } else {
            100.0 * converged as f64 / done.len() as f64
        },
        warning: done.len() < seeds.len(),
        mean_return,
        ci_low,
        ci_high,
        seeds,
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains one seed, writing its metrics and checkpoint under `out` if given.
fn run_seed(
    spec: &GameSpec,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Evaluation, Option<usize>)> {
    let cfg = TrainConfig { seed, ..train.clone() };
    let outcome = train_with(spec, model_cfg, &cfg, |_| Ok(()))?;
    if let Some(out) = out {
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics, spec.n_agents)?;
        outcome.model.save(dir.join("checkpoint"))?;
    }
    let first = outcome
        .metrics
        .iter()
        .find(|m| m.se_match == Some(true))
        .map(|m| m.step);
    Ok((outcome.final_eval, first))
}

fn sweep_spec(cfg: &ExperimentConfig, spec: GameSpec) -> Result<SweepResult> {
    cfg.validate()?;
    let document = spec.to_document();
    let spec = cfg.apply(spec);
    let model_cfg = cfg.model_config(&spec)?;
    let oracle = Oracle::solve(&spec, &model_cfg.priority)?;
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        let manifest = Manifest {
            code_version: CODE_VERSION.to_string(),
            oracle_digest: oracle.report().digest(),
            game_digest: hex::encode(Sha256::digest(document.as_bytes())),
            game_document: document,
            config: cfg.clone(),
        };
        write(&out.join("manifest"), &manifest.to_text())?;
    }
    let seeds: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let run = run_seed(&spec, &model_cfg, &cfg.train, seed, cfg.out.as_deref());
            let wall_time_s = start.elapsed().as_secs_f64();
            match run {
                Ok((ev, first_match_step)) => SeedResult {
                    seed,
                    status: RunStatus::Completed,
                    error: None,
                    se_match: ev.se_match,
                    returns: ev.returns,
                    first_match_step,
                    wall_time_s,
                },
                Err(e) => SeedResult {
                    seed,
                    status: RunStatus::Aborted,
                    error: Some(e.to_string()),
                    se_match: false,
                    returns: Vec::new(),
                    first_match_step: None,
                    wall_time_s,
                },
            }
        })
        .collect();
    let result = aggregate(&spec.name, cfg.variant, spec.obs_mode, spec.n_agents, seeds);
    if let Some(out) = &cfg.out {
        write(&out.join("result"), &result.to_text())?;
    }
    Ok(result)
}

/// One independent training run per seed, then the aggregate.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let spec = games::resolve(&cfg.game)?;
    sweep_spec(cfg, spec)
}

/// Repeats a sweep from its manifest, writing into `out`.
pub fn rerun_manifest(manifest: &Manifest, out: Option<PathBuf>) -> Result<SweepResult> {
    if manifest.code_version != CODE_VERSION {
        return Err(Error::Validation(format!(
            "manifest was written by version {}, this is {CODE_VERSION}",
            manifest.code_version
        )));
    }
    let spec = games::load_checked(&manifest.game_document)?;
    let cfg = ExperimentConfig {
        out,
        ..manifest.config.clone()
    };
    let model_cfg = cfg.model_config(&cfg.apply(spec.clone()))?;
    let digest = Oracle::solve(&cfg.apply(spec.clone()), &model_cfg.priority)?
        .report()
        .digest();
    if digest != manifest.oracle_digest {
        return Err(Error::Validation("oracle report differs from the manifest".into()));
    }
    sweep_spec(&cfg, spec)
}

/// One sweep per variant; with an output directory each lands in `<out>/<variant>`.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<SweepResult>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to compare".into()));
    }
    variants
        .iter()
        .map(|&variant| {
            let sub = ExperimentConfig {
                variant,
                out: cfg.out.as_ref().map(|o| o.join(variant.to_string())),
                ..cfg.clone()
            };
            run_sweep(&sub)
        })
        .collect()
}

/// One row of a learning curve: the across-seed mean of the per-seed
/// greedy return (averaged over agents) with its 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_return: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Fraction of seeds whose greedy path matched the equilibrium path.
    pub se_match_rate: f64,
    pub seeds: usize,
}

/// Learning curve of a sweep directory from its per-seed metrics files.
/// Only steps evaluated by every seed are kept.
pub fn learning_curve(dir: &Path) -> Result<Vec<CurvePoint>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let path = entry.path().join("metrics.csv");
        if name.to_string_lossy().starts_with("seed_") && path.is_file() {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no seed_*/metrics.csv under {}",
            dir.display()
        )));
    }
    files.sort();
    let per_seed: Vec<Vec<(usize, f64, bool)>> = files
        .iter()
        .map(|f| {
            Ok(read_metrics_csv(f)?
                .into_iter()
                .filter(|r| !r.eval_return.is_empty())
                .map(|r| {
                    let avg = r.eval_return.iter().sum::<f64>() / r.eval_return.len() as f64;
                    (r.step, avg, r.se_match == Some(true))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut curve = Vec::new();
    for &(step, _, _) in &per_seed[0] {
        let at: Vec<(f64, bool)> = per_seed
            .iter()
            .filter_map(|rows| rows.iter().find(|r| r.0 == step).map(|r| (r.1, r.2)))
            .collect();
        if at.len() != per_seed.len() {
            continue;
        }
        let xs: Vec<f64> = at.iter().map(|a| a.0).collect();
        let (mean, lo, hi) = mean_ci(&xs);
        curve.push(CurvePoint {
            step,
            mean_return: mean,
            ci_low: lo,
            ci_high: hi,
            se_match_rate: at.iter().filter(|a| a.1).count() as f64 / at.len() as f64,
            seeds: at.len(),
        });
    }
    Ok(curve)
}

/// Writes `<dir>/curve.csv` for every sweep directory and returns the paths.
pub fn emit_plot_data(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(Error::Validation("no sweep directories given".into()));
    }
    dirs.iter()
        .map(|dir| {
            let curve = learning_curve(dir)?;
            let path = dir.join("curve.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
            for p in &curve {
                w.serialize(p).map_err(io)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Greedy rollout of a saved model against the oracle.
pub fn eval_checkpoint(checkpoint: &Path, game: &str) -> Result<Evaluation> {
    let model = SteerModel::load(checkpoint)?;
    let cfg = model.config();
    let spec = games::resolve(game)?.with_obs_mode(cfg.obs_mode);
    if cfg.n_agents != spec.n_agents || cfg.actions != spec.actions || cfg.obs_width != spec.agent_obs_width() {
        return Err(Error::Validation(format!(
            "checkpoint {} was not trained on {}",
            checkpoint.display(),
            spec.name
        )));
    }
    let oracle = Oracle::solve(&spec, &cfg.priority)?;
    evaluate(&spec, &model, &oracle)
}
