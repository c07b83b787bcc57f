//! Two-level transformer policy.
//!
//! The inner block (ITB) attends, without a mask, over
//! `[e0, e_1 .. e_n]`: a state or class token followed by one token per agent
//! in priority order. A per-token MLP on its output yields the state summary
//! `s0` and agent embeddings `x_p`.
//!
//! The outer block (OTB) is causal over `[s0, emb(a_1) .. emb(a_{n-1})]`,
//! with a learned embedding row per action. Its output at
//! position `p` summarises the state and the actions of the `p` agents ahead
//! of priority level `p`, so agent `p` decides from `x_p + y_p`. With `n`
//! tokens the last action is never an input; appending it would change no
//! earlier output under the causal mask.
//!
//! Rows inside the model are laid out sample-major: sample `b`, priority
//! level `p` is row `b * n + p` (ITB rows use `n + 1`).

mod checkpoint;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GameSpec, ObsMode, Observation, PriorityPermutation};
use crate::error::{Error, Result};
use crate::tensor::nn::{scaled_uniform, Block, GruCell, LayerNorm, Linear, Mlp, MLP_EXPANSION};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Architecture variants; all but `Full` remove or replace one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Per-token MLP instead of the inner transformer (no cross-token mixing).
    ItbMlp,
    /// Recurrent scan instead of the outer transformer.
    OtbGru,
    /// Heads read `x_p` only; no information about earlier actions.
    ItbOnly,
    /// Heads read `y_p` only; no agent-specific state embedding.
    OtbOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::ItbMlp,
        Variant::OtbGru,
        Variant::ItbOnly,
        Variant::OtbOnly,
    ];

    /// Whether agents can condition on earlier agents' actions.
    pub fn propagates_decisions(self) -> bool {
        self != Variant::ItbOnly
    }

    fn has_itb_stack(self) -> bool {
        self != Variant::ItbMlp
    }

    fn has_otb_stack(self) -> bool {
        matches!(self, Variant::Full | Variant::ItbMlp | Variant::OtbOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::ItbMlp => "itb-mlp",
            Variant::OtbGru => "otb-gru",
            Variant::ItbOnly => "itb-only",
            Variant::OtbOnly => "otb-only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL.into_iter().find(|v| v.to_string() == norm).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?} (expected full, itb-mlp, otb-gru, itb-only or otb-only)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_agents: usize,
    /// Width of each per-agent observation.
    pub obs_width: usize,
    /// Width of the global state vector (unused in local mode).
    pub state_width: usize,
    pub actions: Vec<usize>,
    pub d: usize,
    pub itb_depth: usize,
    pub otb_depth: usize,
    pub heads: usize,
    pub variant: Variant,
    pub obs_mode: ObsMode,
    pub priority: PriorityPermutation,
    /// Pair priority level `p` with inner token `p` instead of agent `p`'s own token.
    #[serde(default)]
    pub literal_alignment: bool,
}

impl ModelConfig {
    pub fn for_game(spec: &GameSpec) -> Self {
        ModelConfig {
            n_agents: spec.n_agents,
            obs_width: spec.agent_obs_width(),
            state_width: spec.global_obs_width(),
            actions: spec.actions.clone(),
            d: 64,
            itb_depth: 2,
            otb_depth: 2,
            heads: 4,
            variant: Variant::Full,
            obs_mode: spec.obs_mode,
            priority: PriorityPermutation::identity(spec.n_agents),
            literal_alignment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 {
            return bad("model needs at least one agent".into());
        }
        if self.actions.len() != self.n_agents || self.priority.len() != self.n_agents {
            return bad(format!(
                "{} agents but {} action counts and {} priority entries",
                self.n_agents,
                self.actions.len(),
                self.priority.len()
            ));
        }
        if self.actions.contains(&0) {
            return bad("every agent needs at least one action".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "embedding width {} is not divisible by {} heads",
                self.d, self.heads
            ));
        }
        if self.itb_depth == 0 || self.otb_depth == 0 {
            return bad("block depths must be at least 1".into());
        }
        if self.obs_width == 0 || (self.obs_mode == ObsMode::Global && self.state_width == 0) {
            return bad("observation widths must be positive".into());
        }
        Ok(())
    }

    fn max_actions(&self) -> usize {
        *self.actions.iter().max().expect("validated non-empty")
    }

    /// Distinct action counts, one actor head each.
    pub fn head_sizes(&self) -> Vec<usize> {
        self.actions
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Number of scalar parameters [`SteerModel::new`] allocates.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let n = self.n_agents;
        let wide = MLP_EXPANSION * d;
        let mut total = Linear::param_count(self.obs_width, d);
        total += match self.obs_mode {
            ObsMode::Global => Linear::param_count(self.state_width, d),
            ObsMode::Local => d,
        };
        total += (n + 1) * d;
        total += if self.variant.has_itb_stack() {
            self.itb_depth * Block::param_count(d) + LayerNorm::param_count(d) + Mlp::param_count(d, wide, d)
        } else {
            Mlp::param_count(d, wide, d)
        };
        if self.variant.propagates_decisions() {
            if n > 1 {
                total += self.max_actions() * d;
            }
            total += Mlp::param_count(d, d, d);
            total += if self.variant.has_otb_stack() {
                n * d
                    + self.otb_depth * Block::param_count(d)
                    + LayerNorm::param_count(d)
                    + Mlp::param_count(d, wide, d)
            } else {
                GruCell::param_count(d)
            };
        }
        total += LayerNorm::param_count(d) + Linear::param_count(d, 1);
        total += self
            .head_sizes()
            .iter()
            .map(|&c| Linear::param_count(d, c))
            .sum::<usize>();
        total
    }
}

#[derive(Clone, Debug)]
enum Itb {
    Stack {
        blocks: Vec<Block>,
        ln: LayerNorm,
        mlp: Mlp,
    },
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
enum Otb {
    Stack {
        action_embed: Option<ParamId>,
        input: Mlp,
        pos: ParamId,
        blocks: Vec<Block>,
        ln: LayerNorm,
        mlp: Mlp,
    },
    Gru {
        action_embed: Option<ParamId>,
        input: Mlp,
        cell: GruCell,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// One sample's decision, indexed by agent id.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionOutput {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Graph handles for a batched teacher-forced evaluation. Each is `[B * n, 1]`
/// with sample `b`, agent `i` at row `b * n + i`.
#[derive(Clone, Copy, Debug)]
pub struct EvalVars {
    pub log_prob: Var,
    pub entropy: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct SteerModel {
    config: ModelConfig,
    store: ParamStore,
    obs_embed: Linear,
    state_embed: Option<Linear>,
    class_token: Option<ParamId>,
    itb_pos: ParamId,
    itb: Itb,
    otb: Option<Otb>,
    head_ln: LayerNorm,
    critic: Linear,
    actors: Vec<(usize, Linear)>,
}

impl SteerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, n) = (config.d, config.n_agents);
        let wide = MLP_EXPANSION * d;
        let rng = &mut rng;

        let obs_embed = Linear::new(&mut store, rng, "obs_embed", config.obs_width, d, 1.0);
        let (state_embed, class_token) = match config.obs_mode {
            ObsMode::Global => (
                Some(Linear::new(&mut store, rng, "state_embed", config.state_width, d, 1.0)),
                None,
            ),
            ObsMode::Local => (
                None,
                Some(store.add("class_token", scaled_uniform(rng, &[1, d], d, 1.0))),
            ),
        };
        let itb_pos = store.add("itb.pos", scaled_uniform(rng, &[n + 1, d], d, 1.0));
        let itb = if config.variant.has_itb_stack() {
            let blocks = (0..config.itb_depth)
                .map(|l| Block::new(&mut store, rng, &format!("itb.block{l}"), d, config.heads))
                .collect::<Result<Vec<_>>>()?;
            Itb::Stack {
                blocks,
                ln: LayerNorm::new(&mut store, "itb.ln", d),
                mlp: Mlp::new(&mut store, rng, "itb.mlp", d, wide, d),
            }
        } else {
            Itb::Mlp(Mlp::new(&mut store, rng, "itb.mlp", d, wide, d))
        };
        let otb = if !config.variant.propagates_decisions() {
            None
        } else {
            // a single agent has no leader actions to embed
            let action_embed = (n > 1).then(|| {
                store.add(
                    "otb.action_embed",
                    scaled_uniform(rng, &[config.max_actions(), d], config.max_actions(), 1.0),
                )
            });
            let input = Mlp::new(&mut store, rng, "otb.input", d, d, d);
            Some(if config.variant.has_otb_stack() {
                let pos = store.add("otb.pos", scaled_uniform(rng, &[n, d], d, 1.0));
                let blocks = (0..config.otb_depth)
                    .map(|l| Block::new(&mut store, rng, &format!("otb.block{l}"), d, config.heads))
                    .collect::<Result<Vec<_>>>()?;
                Otb::Stack {
                    action_embed,
                    input,
                    pos,
                    blocks,
                    ln: LayerNorm::new(&mut store, "otb.ln", d),
                    mlp: Mlp::new(&mut store, rng, "otb.mlp", d, wide, d),
                }
            } else {
                Otb::Gru {
                    action_embed,
                    input,
                    cell: GruCell::new(&mut store, rng, "otb.gru", d),
                }
            })
        };
        let head_ln = LayerNorm::new(&mut store, "head.ln", d);
        let critic = Linear::new(&mut store, rng, "head.critic", d, 1, 1.0);
        let actors = config
            .head_sizes()
            .into_iter()
            .map(|c| (c, Linear::new(&mut store, rng, &format!("head.actor{c}"), d, c, 1.0)))
            .collect();
        let model = SteerModel {
            config,
            store,
            obs_embed,
            state_embed,
            class_token,
            itb_pos,
            itb,
            otb,
            head_ln,
            critic,
            actors,
        };
        debug_assert_eq!(model.store.numel(), model.config.param_count());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn check_obs(&self, obs: &[Observation]) -> Result<()> {
        let c = &self.config;
        for o in obs {
            if o.agents.len() != c.n_agents || o.agents.iter().any(|v| v.len() != c.obs_width) {
                return Err(Error::Config(format!(
                    "observation does not match {} agents of width {}",
                    c.n_agents, c.obs_width
                )));
            }
            if c.obs_mode == ObsMode::Global {
                match &o.global {
                    Some(s) if s.len() == c.state_width => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "global-state model needs a state vector of width {}",
                            c.state_width
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Inner block over a batch. Returns `(y_itb [B*(n+1), d], s0 [B, d], x [B*n, d])`,
    /// with `x` in priority order.
    fn itb_forward(&self, g: &mut Graph, obs: &[Observation]) -> Result<(Var, Var, Var)> {
        self.check_obs(obs)?;
        let c = &self.config;
        let (b, n, d) = (obs.len(), c.n_agents, c.d);
        let order = c.priority.order();
        let mut rows = Vec::with_capacity(b * n * c.obs_width);
        for o in obs {
            for &a in order {
                rows.extend_from_slice(&o.agents[a]);
            }
        }
        let agent_in = g.constant(Tensor::new(vec![b * n, c.obs_width], rows)?);
        let e_agents = self.obs_embed.forward(g, agent_in)?;
        let e0 = match (&self.state_embed, self.class_token) {
            (Some(embed), _) => {
                let data: Vec<f64> = obs
                    .iter()
                    .flat_map(|o| o.global.as_ref().expect("checked").iter().copied())
                    .collect();
                let s = g.constant(Tensor::new(vec![b, c.state_width], data)?);
                embed.forward(g, s)?
            }
            (None, Some(tok)) => {
                let t = g.param(tok);
                g.gather_rows(t, vec![0; b])?
            }
            (None, None) => unreachable!("one of state embed or class token exists"),
        };
        let seq = n + 1;
        let e0 = g.scatter_rows(e0, (0..b).map(|i| i * seq).collect(), b * seq)?;
        let agent_rows = (0..b).flat_map(|i| (0..n).map(move |p| i * seq + 1 + p)).collect();
        let e_agents = g.scatter_rows(e_agents, agent_rows, b * seq)?;
        let z = g.add(e0, e_agents)?;
        let pos = g.param(self.itb_pos);
        let pos = g.gather_rows(pos, (0..b * seq).map(|r| r % seq).collect())?;
        let mut z = g.add(z, pos)?;
        let y = match &self.itb {
            Itb::Stack { blocks, ln, mlp } => {
                for blk in blocks {
                    z = blk.forward(g, z, b, seq, false)?;
                }
                let h = ln.forward(g, z)?;
                mlp.forward(g, h)?
            }
            Itb::Mlp(mlp) => mlp.forward(g, z)?,
        };
        debug_assert_eq!(g.value(y).cols(), d);
        let s0 = g.gather_rows(y, (0..b).map(|i| i * seq).collect())?;
        let x = g.gather_rows(y, (0..b).flat_map(|i| (0..n).map(move |p| i * seq + 1 + p)).collect())?;
        Ok((y, s0, x))
    }

    /// Outer block. `prefix[b][p]` is the action at priority level `p` of
    /// sample `b`; only levels `< n - 1` are read. Returns `[B*n, d]`.
    fn otb_forward(&self, g: &mut Graph, otb: &Otb, s0: Var, prefix: &[Vec<usize>]) -> Result<Var> {
        let c = &self.config;
        let (b, n) = (prefix.len(), c.n_agents);
        let embed = match otb {
            Otb::Stack { action_embed, .. } | Otb::Gru { action_embed, .. } => *action_embed,
        };
        let mut tokens = g.scatter_rows(s0, (0..b).map(|i| i * n).collect(), b * n)?;
        if let Some(embed) = embed {
            let embed = g.param(embed);
            let acts = prefix.iter().flat_map(|a| a[..n - 1].iter().copied()).collect();
            let rows = (0..b).flat_map(|i| (1..n).map(move |p| i * n + p)).collect();
            let e = g.gather_rows(embed, acts)?;
            let e = g.scatter_rows(e, rows, b * n)?;
            tokens = g.add(tokens, e)?;
        }
        match otb {
            Otb::Stack {
                input,
                pos,
                blocks,
                ln,
                mlp,
                ..
            } => {
                let u = input.forward(g, tokens)?;
                let p = g.param(*pos);
                let p = g.gather_rows(p, (0..b * n).map(|r| r % n).collect())?;
                let mut z = g.add(u, p)?;
                for blk in blocks {
                    z = blk.forward(g, z, b, n, true)?;
                }
                let h = ln.forward(g, z)?;
                mlp.forward(g, h)
            }
            Otb::Gru { input, cell, .. } => {
                let u = input.forward(g, tokens)?;
                let mut h = g.constant(Tensor::zeros(&[b, c.d]));
                let mut out: Option<Var> = None;
                for p in 0..n {
                    let rows: Vec<usize> = (0..b).map(|i| i * n + p).collect();
                    let up = g.gather_rows(u, rows.clone())?;
                    h = cell.forward(g, up, h)?;
                    let placed = g.scatter_rows(h, rows, b * n)?;
                    out = Some(match out {
                        None => placed,
                        Some(acc) => g.add(acc, placed)?,
                    });
                }
                Ok(out.expect("at least one agent"))
            }
        }
    }

    /// Sub-game embeddings `[B*n, d]` in priority order. The trunk runs once
    /// per distinct observation and once per distinct (observation, prefix).
    fn subgame(&self, g: &mut Graph, obs: &[Observation], prefix: &[Vec<usize>]) -> Result<Var> {
        self.check_obs(obs)?;
        let n = self.config.n_agents;
        let (obs_id, uniq) = distinct(obs.iter().map(obs_key));
        let uniq_obs: Vec<Observation> = uniq.iter().map(|&i| obs[i].clone()).collect();
        let (y_itb, s0, x) = self.itb_forward(g, &uniq_obs)?;
        let spread =
            |key_id: &[usize]| -> Vec<usize> { key_id.iter().flat_map(|&k| (0..n).map(move |p| k * n + p)).collect() };
        let Some(otb) = &self.otb else {
            return g.gather_rows(x, spread(&obs_id));
        };
        let (key_id, first) = distinct(prefix.iter().zip(&obs_id).map(|(pre, &o)| (o, pre[..n - 1].to_vec())));
        let key_obs: Vec<usize> = first.iter().map(|&i| obs_id[i]).collect();
        let key_prefix: Vec<Vec<usize>> = first.iter().map(|&i| prefix[i].clone()).collect();
        let s0k = g.gather_rows(s0, key_obs.clone())?;
        let y_otb = self.otb_forward(g, otb, s0k, &key_prefix)?;
        let h = match self.config.variant {
            Variant::OtbOnly => y_otb,
            _ if self.config.literal_alignment => {
                let rows = key_obs
                    .iter()
                    .flat_map(|&o| (0..n).map(move |p| o * (n + 1) + p))
                    .collect();
                let lit = g.gather_rows(y_itb, rows)?;
                g.add(lit, y_otb)?
            }
            _ => {
                let xk = g.gather_rows(x, spread(&key_obs))?;
                g.add(xk, y_otb)?
            }
        };
        g.gather_rows(h, spread(&key_id))
    }

    /// Critic and actor heads on rows of `h`; `levels[r]` is the priority
    /// level of row `r`. Returns values `[R, 1]` and per-head-size
    /// `(row indices, logits)` groups.
    fn heads(&self, g: &mut Graph, h: Var, levels: &[usize]) -> Result<(Var, Vec<(Vec<usize>, Var)>)> {
        let z = self.head_ln.forward(g, h)?;
        let value = self.critic.forward(g, z)?;
        let order = self.config.priority.order();
        let mut groups = Vec::new();
        for (size, head) in &self.actors {
            let rows: Vec<usize> = (0..levels.len())
                .filter(|&r| self.config.actions[order[levels[r]]] == *size)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let zr = if rows.len() == levels.len() {
                z
            } else {
                g.gather_rows(z, rows.clone())?
            };
            groups.push((rows, head.forward(g, zr)?));
        }
        Ok((value, groups))
    }

    fn check_actions(&self, actions: &[Vec<usize>]) -> Result<()> {
        for joint in actions {
            if joint.len() != self.config.n_agents {
                return Err(Error::Contract(format!(
                    "joint action has {} entries for {} agents",
                    joint.len(),
                    self.config.n_agents
                )));
            }
            for (i, (&a, &cnt)) in joint.iter().zip(&self.config.actions).enumerate() {
                if a >= cnt {
                    return Err(Error::Contract(format!(
                        "action {a} out of range for agent {i} ({cnt} actions)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Teacher-forced evaluation of stored joint actions (agent-indexed) in
    /// one pass, recorded on `g` for differentiation.
    pub fn evaluate_graph(&self, g: &mut Graph, obs: &[Observation], actions: &[Vec<usize>]) -> Result<EvalVars> {
        if obs.len() != actions.len() {
            return Err(Error::Contract(format!(
                "{} observations for {} joint actions",
                obs.len(),
                actions.len()
            )));
        }
        self.check_actions(actions)?;
        let n = self.config.n_agents;
        let b = obs.len();
        let prio = &self.config.priority;
        let prefix: Vec<Vec<usize>> = actions.iter().map(|j| prio.to_priority(j)).collect();
        let h = self.subgame(g, obs, &prefix)?;
        let levels: Vec<usize> = (0..b * n).map(|r| r % n).collect();
        let (value, groups) = self.heads(g, h, &levels)?;
        let order = prio.order();
        let to_agent_row = |r: usize| (r / n) * n + order[r % n];
        let value = g.scatter_rows(value, (0..b * n).map(to_agent_row).collect(), b * n)?;
        let mut log_prob: Option<Var> = None;
        let mut entropy: Option<Var> = None;
        for (rows, logits) in groups {
            let ls = g.log_softmax(logits);
            let picked: Vec<usize> = rows.iter().map(|&r| prefix[r / n][r % n]).collect();
            let lp = g.pick(ls, picked)?;
            let p = g.exp(ls);
            let plogp = g.mul(p, ls)?;
            let ent = g.sum_rows(plogp);
            let ent = g.scale(ent, -1.0);
            let targets: Vec<usize> = rows.iter().map(|&r| to_agent_row(r)).collect();
            let lp = g.scatter_rows(lp, targets.clone(), b * n)?;
            let ent = g.scatter_rows(ent, targets, b * n)?;
            log_prob = Some(match log_prob {
                None => lp,
                Some(acc) => g.add(acc, lp)?,
            });
            entropy = Some(match entropy {
                None => ent,
                Some(acc) => g.add(acc, ent)?,
            });
        }
        Ok(EvalVars {
            log_prob: log_prob.expect("at least one head group"),
            entropy: entropy.expect("at least one head group"),
            value,
        })
    }

    /// Teacher-forced evaluation returning plain numbers.
    pub fn evaluate_parallel(&self, obs: &[Observation], actions: &[Vec<usize>]) -> Result<Vec<DecisionOutput>> {
        let mut g = Graph::new(&self.store);
        let vars = self.evaluate_graph(&mut g, obs, actions)?;
        let n = self.config.n_agents;
        let (lp, ent, val) = (
            g.value(vars.log_prob).data(),
            g.value(vars.entropy).data(),
            g.value(vars.value).data(),
        );
        Ok(actions
            .iter()
            .enumerate()
            .map(|(b, joint)| DecisionOutput {
                actions: joint.clone(),
                log_probs: lp[b * n..(b + 1) * n].to_vec(),
                values: val[b * n..(b + 1) * n].to_vec(),
                entropies: ent[b * n..(b + 1) * n].to_vec(),
            })
            .collect())
    }

    /// State summary `s0` and agent embeddings (indexed by agent id) for one observation.
    pub fn encode_itb(&self, obs: &Observation) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::new(&self.store);
        let (_, s0, x) = self.itb_forward(&mut g, std::slice::from_ref(obs))?;
        let by_prio: Vec<Vec<f64>> = (0..self.config.n_agents).map(|p| g.value(x).row(p).to_vec()).collect();
        Ok((g.value(s0).data().to_vec(), self.config.priority.to_agents(&by_prio)))
    }

    /// Decides agent by agent in priority order, one outer pass per level,
    /// each level conditioned on the actions already chosen.
    pub fn act_autoregressive<R: Rng>(
        &self,
        obs: &[Observation],
        rng: &mut R,
        mode: ActMode,
    ) -> Result<Vec<DecisionOutput>> {
        let c = &self.config;
        let (b, n) = (obs.len(), c.n_agents);
        self.check_obs(obs)?;
        let mut g = Graph::new(&self.store);
        let (obs_id, uniq) = distinct(obs.iter().map(obs_key));
        let uniq_obs: Vec<Observation> = uniq.iter().map(|&i| obs[i].clone()).collect();
        let (y_itb, s0, x) = self.itb_forward(&mut g, &uniq_obs)?;
        let mut prefix = vec![vec![0usize; n]; b];
        let mut out: Vec<DecisionOutput> = (0..b)
            .map(|_| DecisionOutput {
                actions: vec![0; n],
                log_probs: vec![0.0; n],
                values: vec![0.0; n],
                entropies: vec![0.0; n],
            })
            .collect();
        for p in 0..n {
            // level p sees only the first p actions
            let (key_id, first) = distinct(prefix.iter().zip(&obs_id).map(|(pre, &o)| (o, pre[..p].to_vec())));
            let key_obs: Vec<usize> = first.iter().map(|&i| obs_id[i]).collect();
            let k = first.len();
            let h = match &self.otb {
                None => g.gather_rows(x, key_obs.iter().map(|&o| o * n + p).collect())?,
                Some(otb) => {
                    let key_prefix: Vec<Vec<usize>> = first.iter().map(|&i| prefix[i].clone()).collect();
                    let s0k = g.gather_rows(s0, key_obs.clone())?;
                    let y = self.otb_forward(&mut g, otb, s0k, &key_prefix)?;
                    let y = g.gather_rows(y, (0..k).map(|i| i * n + p).collect())?;
                    match c.variant {
                        Variant::OtbOnly => y,
                        _ if c.literal_alignment => {
                            let lit = g.gather_rows(y_itb, key_obs.iter().map(|&o| o * (n + 1) + p).collect())?;
                            g.add(lit, y)?
                        }
                        _ => {
                            let xp = g.gather_rows(x, key_obs.iter().map(|&o| o * n + p).collect())?;
                            g.add(xp, y)?
                        }
                    }
                }
            };
            let (value, groups) = self.heads(&mut g, h, &vec![p; k])?;
            let (_, logits) = &groups[0];
            let logits = g.value(*logits);
            let values = g.value(value).data();
            let log_softmax: Vec<Vec<f64>> = (0..k)
                .map(|r| {
                    let row = logits.row(r);
                    let mut ls = vec![0.0; row.len()];
                    crate::tensor::kernels::log_softmax_rows(row, row.len(), &mut ls);
                    ls
                })
                .collect();
            let agent = c.priority.order()[p];
            for i in 0..b {
                let r = key_id[i];
                let ls = &log_softmax[r];
                let a = match mode {
                    ActMode::Greedy => argmax(logits.row(r)),
                    ActMode::Sample => sample(ls, rng),
                };
                prefix[i][p] = a;
                let d = &mut out[i];
                d.actions[agent] = a;
                d.log_probs[agent] = ls[a];
                d.entropies[agent] = -ls.iter().map(|l| l.exp() * l).sum::<f64>();
                d.values[agent] = values[r];
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::load(path.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }
}

/// Lowest index among the maxima.
/// Exact bit pattern of an observation, for grouping identical inputs.
fn obs_key(o: &Observation) -> Vec<u64> {
    let mut key: Vec<u64> = o.agents.iter().flatten().map(|v| v.to_bits()).collect();
    if let Some(gl) = &o.global {
        key.push(u64::MAX);
        key.extend(gl.iter().map(|v| v.to_bits()));
    }
    key
}

/// Ids of each item among the distinct items, and the first index of each
/// distinct item, in order of first appearance.
fn distinct<K: std::hash::Hash + Eq>(items: impl Iterator<Item = K>) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashMap::new();
    let mut first = Vec::new();
    let ids = items
        .enumerate()
        .map(|(i, k)| {
            *seen.entry(k).or_insert_with(|| {
                first.push(i);
                first.len() - 1
            })
        })
        .collect();
    (ids, first)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}
