use rand::Rng;

use crate::env::{EnvState, GameSpec, Observation};
use crate::error::{Error, Result};
use crate::model::{ActMode, SteerModel};

/// Time-major rollout storage: step `t` of environment `e` is row
/// `t * n_envs + e`. Per-agent vectors are indexed by agent id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub n_envs: usize,
    pub obs: Vec<Observation>,
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    /// Episode ended after this step (terminal or cut at the horizon).
    pub dones: Vec<bool>,
    /// Episode reached TERMINAL; its successor value is zero.
    pub terminals: Vec<bool>,
    /// Successor values for rows whose successor is not the next stored row:
    /// horizon cuts and the last step of each environment.
    pub bootstrap: Vec<Option<Vec<f64>>>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl RolloutBatch {
    pub fn new(n_agents: usize, n_envs: usize) -> Self {
        RolloutBatch {
            n_agents,
            n_envs,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn is_sealed(&self) -> bool {
        self.advantages.len() == self.len() && !self.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        obs: Observation,
        actions: Vec<usize>,
        log_probs: Vec<f64>,
        values: Vec<f64>,
        rewards: Vec<f64>,
        done: bool,
        terminal: bool,
    ) {
        self.obs.push(obs);
        self.actions.push(actions);
        self.log_probs.push(log_probs);
        self.values.push(values);
        self.rewards.push(rewards);
        self.dones.push(done);
        self.terminals.push(terminal);
        self.bootstrap.push(None);
    }
}

/// Parallel copies of one game, each auto-resetting when its episode ends.
#[derive(Clone, Debug)]
pub struct VecEnv {
    states: Vec<EnvState>,
    obs: Vec<Observation>,
}

impl VecEnv {
    pub fn new(spec: &GameSpec, n_envs: usize) -> Self {
        let (st, ob) = spec.reset();
        VecEnv {
            states: vec![st; n_envs],
            obs: vec![ob; n_envs],
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }
}

/// Runs `steps_per_env` sampled decisions in every environment.
pub fn collect_rollouts<R: Rng>(
    spec: &GameSpec,
    envs: &mut VecEnv,
    model: &SteerModel,
    steps_per_env: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    if model.config().n_agents != spec.n_agents {
        return Err(Error::Config(format!(
            "model built for {} agents, game has {}",
            model.config().n_agents,
            spec.n_agents
        )));
    }
    let n_envs = envs.states.len();
    let mut batch = RolloutBatch::new(spec.n_agents, n_envs);
    for _ in 0..steps_per_env {
        let decisions = model.act_autoregressive(&envs.obs, rng, ActMode::Sample)?;
        for (e, d) in decisions.into_iter().enumerate() {
            let step = spec.step(&envs.states[e], &d.actions)?;
            let obs = std::mem::replace(&mut envs.obs[e], step.observation.clone());
            batch.push(
                obs,
                d.actions,
                d.log_probs,
                d.values,
                step.rewards,
                step.done,
                step.terminal,
            );
            if step.done {
                if !step.terminal {
                    let v = model.act_autoregressive(&[step.observation], rng, ActMode::Sample)?;
                    *batch.bootstrap.last_mut().expect("just pushed") = Some(v[0].values.clone());
                }
                let (st, ob) = spec.reset();
                envs.states[e] = st;
                envs.obs[e] = ob;
            } else {
                envs.states[e] = step.state;
            }
        }
    }
    // successor values for the unfinished tail of each environment
    let tail = model.act_autoregressive(&envs.obs, rng, ActMode::Sample)?;
    let last = batch.len() - n_envs;
    for (e, d) in tail.into_iter().enumerate() {
        if !batch.dones[last + e] {
            batch.bootstrap[last + e] = Some(d.values);
        }
    }
    Ok(batch)
}

/// Per-agent generalised advantage estimation over each environment's
/// stream, using that agent's own rewards and conditional values.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) -> Result<()> {
    let (n, ne) = (batch.n_agents, batch.n_envs);
    if ne == 0 || !batch.len().is_multiple_of(ne) {
        return Err(Error::Contract(format!(
            "{} rows do not split into {ne} environments",
            batch.len()
        )));
    }
    let steps = batch.len() / ne;
    batch.advantages = vec![vec![0.0; n]; batch.len()];
    batch.returns = vec![vec![0.0; n]; batch.len()];
    for e in 0..ne {
        let mut carry = vec![0.0; n];
        for t in (0..steps).rev() {
            let row = t * ne + e;
            let cut = batch.dones[row] || t + 1 == steps;
            for i in 0..n {
                let next_value = if batch.terminals[row] {
                    0.0
                } else if cut {
                    batch.bootstrap[row]
                        .as_ref()
                        .ok_or_else(|| Error::Contract(format!("row {row} lacks a bootstrap value")))?[i]
                } else {
                    batch.values[row + ne][i]
                };
                let delta = batch.rewards[row][i] + gamma * next_value - batch.values[row][i];
                let follow = if cut { 0.0 } else { carry[i] };
                carry[i] = delta + gamma * lambda * follow;
                batch.advantages[row][i] = carry[i];
                batch.returns[row][i] = carry[i] + batch.values[row][i];
            }
        }
    }
    Ok(())
}
