//! Clipped-PPO training of the model on a game.
//!
//! Every agent keeps its own rewards, values and advantages; a single
//! combined loss (mean over steps and agents) updates the shared network.

mod ppo;
mod rollout;
mod value_norm;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::GameSpec;
use crate::equilibria::Oracle;
use crate::error::{Error, Result};
use crate::model::{ActMode, ModelConfig, SteerModel};
use crate::tensor::{Adam, AdamConfig};

pub use ppo::{normalize_advantages, ppo_loss, ppo_update, LossVars, MinibatchStats, UpdateReport};
pub use rollout::{collect_rollouts, compute_gae, RolloutBatch, VecEnv};
pub use value_norm::ValueNorm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Environment steps over the whole run.
    pub total_steps: usize,
    /// Environment steps per update, split evenly across `n_envs`.
    pub rollout_len: usize,
    pub n_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Policy ratio clip; `inf` disables clipping.
    pub clip: f64,
    pub value_clip: f64,
    /// Train the critic against running-normalised targets.
    #[serde(default)]
    pub value_norm: bool,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Updates between greedy evaluations; the final update is always evaluated.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 60_000,
            rollout_len: 128,
            n_envs: 8,
            epochs: 4,
            minibatches: 2,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_clip: 0.2,
            value_norm: true,
            entropy_coef: 0.01,
            lr: 5e-4,
            max_grad_norm: 0.5,
            seed: 0,
            eval_interval: 1,
            eval_episodes: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let in_unit_open = |x: f64| x > 0.0 && x < 1.0;
        if !(in_unit_open(self.clip) || self.clip == f64::INFINITY) {
            return bad("clip must lie in (0, 1) or be inf");
        }
        if !in_unit_open(self.value_clip) && self.value_clip != f64::INFINITY {
            return bad("value clip must lie in (0, 1) or be inf");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.total_steps == 0
            || self.rollout_len == 0
            || self.n_envs == 0
            || self.epochs == 0
            || self.minibatches == 0
            || self.eval_interval == 0
            || self.eval_episodes == 0
        {
            return bad("step, rollout, environment, epoch, minibatch and eval counts must be positive");
        }
        if !self.rollout_len.is_multiple_of(self.n_envs) {
            return bad("rollout length must be a multiple of the environment count");
        }
        if self.minibatches > self.rollout_len {
            return bad("more minibatches than rollout rows");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.max_grad_norm > 0.0) || self.entropy_coef < 0.0 {
            return bad("learning rate and gradient clip must be positive, entropy coefficient non-negative");
        }
        Ok(())
    }

    pub fn updates(&self) -> usize {
        self.total_steps / self.rollout_len
    }
}

/// One row of the metrics stream, written after every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Greedy episode return per agent; empty when not evaluated this update.
    pub eval_return: Vec<f64>,
    pub se_match: Option<bool>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], n_agents: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut header: Vec<String> = [
        "step",
        "policy_loss",
        "value_loss",
        "entropy",
        "clip_fraction",
        "grad_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_agents).map(|i| format!("eval_return_{i}")));
    header.push("se_match".into());
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.policy_loss.to_string(),
            r.value_loss.to_string(),
            r.entropy.to_string(),
            r.clip_fraction.to_string(),
            r.grad_norm.to_string(),
        ];
        for i in 0..n_agents {
            rec.push(r.eval_return.get(i).map_or(String::new(), |v| v.to_string()));
        }
        rec.push(r.se_match.map_or(String::new(), |m| u8::from(m).to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = r
        .headers()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .clone();
    let n_agents = headers.iter().filter(|h| h.starts_with("eval_return_")).count();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let parse_err = |m: String| Error::Parse {
            line: line + 2,
            message: m,
        };
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| parse_err(format!("column {i}: {e}")))
        };
        let mut eval_return = Vec::new();
        for i in 0..n_agents {
            if !rec.get(6 + i).unwrap_or("").is_empty() {
                eval_return.push(num(6 + i)?);
            }
        }
        let se = rec.get(6 + n_agents).unwrap_or("");
        rows.push(MetricsRow {
            step: num(0)? as usize,
            policy_loss: num(1)?,
            value_loss: num(2)?,
            entropy: num(3)?,
            clip_fraction: num(4)?,
            grad_norm: num(5)?,
            eval_return,
            se_match: match se {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                other => return Err(parse_err(format!("se_match {other:?}"))),
            },
        });
    }
    Ok(rows)
}

/// Greedy episode from reset: the joint actions taken and per-agent returns.
pub fn greedy_episode(spec: &GameSpec, model: &SteerModel) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let (mut st, mut obs) = spec.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut joints = Vec::new();
    let mut ret = vec![0.0; spec.n_agents];
    loop {
        let d = model.act_autoregressive(std::slice::from_ref(&obs), &mut rng, ActMode::Greedy)?;
        let joint = d[0].actions.clone();
        let step = spec.step(&st, &joint)?;
        for (r, x) in ret.iter_mut().zip(&step.rewards) {
            *r += x;
        }
        joints.push(joint);
        if step.done {
            return Ok((joints, ret));
        }
        st = step.state;
        obs = step.observation;
    }
}

/// Greedy evaluation against the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub joints: Vec<Vec<usize>>,
    pub se_match: bool,
}

pub fn evaluate(spec: &GameSpec, model: &SteerModel, oracle: &Oracle) -> Result<Evaluation> {
    let (joints, returns) = greedy_episode(spec, model)?;
    Ok(Evaluation {
        se_match: oracle.is_se_path(&joints),
        returns,
        joints,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SteerModel,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: Evaluation,
}

/// Seed offset separating the rollout stream from parameter initialisation.
const ROLLOUT_STREAM: u64 = 0x5DEE_CE66_D1CE_4E5B;

const VALUE_NORM_BETA: f64 = 0.99999;

/// Collect, estimate advantages and update until the step budget is spent.
pub fn train(spec: &GameSpec, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, model_cfg, cfg, |_| Ok(()))
}

/// [`train`] with a callback after each update's metrics row.
pub fn train_with<F>(
    spec: &GameSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_update: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRow) -> Result<()>,
{
    cfg.validate()?;
    if model_cfg.n_agents != spec.n_agents || model_cfg.actions != spec.actions {
        return Err(Error::Config("model config does not match the game".into()));
    }
    let oracle = Oracle::solve(spec, &model_cfg.priority)?;
    let mut model = SteerModel::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(
        model.store(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ROLLOUT_STREAM);
    let mut envs = VecEnv::new(spec, cfg.n_envs);
    let mut norm = cfg.value_norm.then(|| ValueNorm::new(spec.n_agents, VALUE_NORM_BETA));
    let updates = cfg.updates().max(1);
    let mut metrics = Vec::with_capacity(updates);
    let mut final_eval = None;
    for u in 0..updates {
        let mut batch = collect_rollouts(spec, &mut envs, &model, cfg.rollout_len / cfg.n_envs, &mut rng)?;
        if let Some(vn) = &norm {
            vn.denormalize_batch(&mut batch);
        }
        compute_gae(&mut batch, cfg.gamma, cfg.gae_lambda)?;
        if let Some(vn) = &mut norm {
            vn.update(&batch.returns);
        }
        let rep = ppo_update(&mut model, &mut adam, &batch, cfg, norm.as_ref(), &mut rng)?;
        let last = u + 1 == updates;
        let eval = if last || (u + 1) % cfg.eval_interval == 0 {
            let mut ev = evaluate(spec, &model, &oracle)?;
            // greedy play is deterministic; extra episodes only average identical returns
            for _ in 1..cfg.eval_episodes {
                let again = evaluate(spec, &model, &oracle)?;
                ev.se_match &= again.se_match;
            }
            Some(ev)
        } else {
            None
        };
        let row = MetricsRow {
            step: (u + 1) * cfg.rollout_len,
            policy_loss: rep.policy_loss,
            value_loss: rep.value_loss,
            entropy: rep.entropy,
            clip_fraction: rep.clip_fraction,
            grad_norm: rep.grad_norm,
            eval_return: eval.as_ref().map_or(Vec::new(), |e| e.returns.clone()),
            se_match: eval.as_ref().map(|e| e.se_match),
        };
        on_update(&row)?;
        metrics.push(row);
        if last {
            final_eval = eval;
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        final_eval: final_eval.expect("the last update is always evaluated"),
    })
}

#[cfg(test)]
mod tests;
