//! Finite-horizon sequential Markov games with per-agent private rewards.
//!
//! A [`GameSpec`] is a fully tabulated game: for every stage state and every
//! joint action it stores exactly one successor (a state or [`Next::Terminal`])
//! and one reward vector. Specs are loaded from TOML documents and validated
//! eagerly; afterwards they are immutable.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TERMINAL: &str = "TERMINAL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    /// Observations carry a shared global state vector.
    #[serde(alias = "globalstate")]
    Global,
    /// Only per-agent observations are available.
    #[serde(alias = "localonly")]
    Local,
}

impl std::str::FromStr for ObsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" | "globalstate" => Ok(ObsMode::Global),
            "local" | "localonly" => Ok(ObsMode::Local),
            other => Err(Error::Config(format!("unknown observation mode {other:?}"))),
        }
    }
}

impl fmt::Display for ObsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObsMode::Global => "global",
            ObsMode::Local => "local",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Next {
    State(usize),
    Terminal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub next: Next,
    pub reward: Vec<f64>,
}

/// Property predicates a document asserts about itself; checked by the oracle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claims {
    /// Stage the stage-level claims refer to; defaults to the initial state.
    #[serde(default)]
    pub state: Option<String>,
    /// The set of SE trajectories from the initial state has exactly one element.
    #[serde(default)]
    pub unique_se: bool,
    /// Pure NE set at the claim stage, as joint-action strings.
    #[serde(default)]
    pub ne_set: Option<Vec<String>>,
    /// SE stage payoff strictly Pareto-dominates at least one pure NE.
    #[serde(default)]
    pub se_pareto_dominates_some_ne: bool,
    /// SE joint action has the strictly highest agent-averaged stage payoff.
    #[serde(default)]
    pub se_highest_average_payoff: bool,
}

impl Claims {
    pub fn is_empty(&self) -> bool {
        !self.unique_se && self.ne_set.is_none() && !self.se_pareto_dominates_some_ne && !self.se_highest_average_payoff
    }
}

/// Validated, immutable game description.
#[derive(Clone, Debug, PartialEq)]
pub struct GameSpec {
    pub name: String,
    pub n_agents: usize,
    pub actions: Vec<usize>,
    pub states: Vec<String>,
    pub initial_state: usize,
    pub horizon: usize,
    pub obs_mode: ObsMode,
    pub gamma: f64,
    pub claims: Claims,
    /// `table[state][joint_index]`.
    table: Vec<Vec<Outcome>>,
}

// ---- document schema ---------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    n_agents: usize,
    actions: Vec<usize>,
    states: Vec<String>,
    initial_state: String,
    horizon: usize,
    obs_mode: ObsMode,
    gamma: f64,
    #[serde(default)]
    stage: Vec<StageDoc>,
    #[serde(default)]
    claims: Claims,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    state: String,
    #[serde(default)]
    default: Option<OutcomeDoc>,
    #[serde(default)]
    outcomes: Vec<JointOutcomeDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutcomeDoc {
    next: String,
    reward: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointOutcomeDoc {
    joint: String,
    next: String,
    reward: Vec<f64>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Formats a joint action as `"a1 a3"` (one-based labels).
pub fn format_joint(joint: &[usize]) -> String {
    joint
        .iter()
        .map(|a| format!("a{}", a + 1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `"a1 a3"` / `"a1,a3"` into zero-based action ids.
pub fn parse_joint(text: &str, actions: &[usize]) -> Result<Vec<usize>> {
    let parts: Vec<&str> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|p| !p.is_empty())
        .collect();
    if parts.len() != actions.len() {
        return Err(Error::Validation(format!(
            "joint action {text:?} names {} actions, game has {} agents",
            parts.len(),
            actions.len()
        )));
    }
    parts
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(agent, (p, &count))| {
            let id: usize = p
                .strip_prefix('a')
                .and_then(|n| n.parse().ok())
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Validation(format!("bad action label {p:?} in {text:?}")))?;
            if id > count {
                return Err(Error::Validation(format!(
                    "action {p} out of range for agent {agent} ({count} actions)"
                )));
            }
            Ok(id - 1)
        })
        .collect()
}

impl GameSpec {
    /// Parses and validates a game document.
    pub fn load(text: &str) -> Result<GameSpec> {
        let doc: Document = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        Self::from_document(doc)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<GameSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load(&text)
    }

    fn from_document(doc: Document) -> Result<GameSpec> {
        if doc.n_agents == 0 {
            return Err(Error::Validation("a game needs at least one agent".into()));
        }
        if doc.actions.len() != doc.n_agents {
            return Err(Error::Validation(format!(
                "actions lists {} agents, n_agents is {}",
                doc.actions.len(),
                doc.n_agents
            )));
        }
        if doc.actions.contains(&0) {
            return Err(Error::Validation("every agent needs at least one action".into()));
        }
        if doc.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&doc.gamma) {
            return Err(Error::Validation(format!("gamma {} outside [0, 1]", doc.gamma)));
        }
        if doc.states.is_empty() {
            return Err(Error::Validation("no states declared".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, s) in doc.states.iter().enumerate() {
            if s == TERMINAL {
                return Err(Error::Validation(format!("{TERMINAL} is reserved")));
            }
            if index.insert(s.as_str(), i).is_some() {
                return Err(Error::Validation(format!("state {s:?} declared twice")));
            }
        }
        let resolve = |name: &str| -> Result<Next> {
            if name == TERMINAL {
                return Ok(Next::Terminal);
            }
            index
                .get(name)
                .map(|&i| Next::State(i))
                .ok_or_else(|| Error::Validation(format!("unknown state {name:?}")))
        };
        let initial_state = match resolve(&doc.initial_state)? {
            Next::State(i) => i,
            Next::Terminal => return Err(Error::Validation("initial state cannot be TERMINAL".into())),
        };
        let n_joint: usize = doc.actions.iter().product();
        let check_reward = |r: &[f64], ctx: &str| -> Result<()> {
            if r.len() != doc.n_agents {
                return Err(Error::Validation(format!(
                    "{ctx}: reward has {} entries for {} agents",
                    r.len(),
                    doc.n_agents
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{ctx}: non-finite reward")));
            }
            Ok(())
        };

        let mut table: Vec<Option<Vec<Option<Outcome>>>> = vec![None; doc.states.len()];
        for stage in &doc.stage {
            let sid = match resolve(&stage.state)? {
                Next::State(i) => i,
                Next::Terminal => return Err(Error::Validation("TERMINAL has no stage".into())),
            };
            if table[sid].is_some() {
                return Err(Error::Validation(format!("stage {:?} defined twice", stage.state)));
            }
            let mut cells: Vec<Option<Outcome>> = vec![None; n_joint];
            for o in &stage.outcomes {
                let joint = parse_joint(&o.joint, &doc.actions)?;
                let ctx = format!("({}, {})", stage.state, format_joint(&joint));
                check_reward(&o.reward, &ctx)?;
                let j = joint_index(&doc.actions, &joint);
                if cells[j].is_some() {
                    return Err(Error::Validation(format!("{ctx} listed twice")));
                }
                cells[j] = Some(Outcome {
                    next: resolve(&o.next)?,
                    reward: o.reward.clone(),
                });
            }
            if let Some(def) = &stage.default {
                check_reward(&def.reward, &format!("({}, default)", stage.state))?;
                let fallback = Outcome {
                    next: resolve(&def.next)?,
                    reward: def.reward.clone(),
                };
                for c in cells.iter_mut().filter(|c| c.is_none()) {
                    *c = Some(fallback.clone());
                }
            }
            table[sid] = Some(cells);
        }

        let mut full = Vec::with_capacity(table.len());
        for (sid, cells) in table.into_iter().enumerate() {
            let cells =
                cells.ok_or_else(|| Error::Validation(format!("state {:?} has no stage table", doc.states[sid])))?;
            let mut row = Vec::with_capacity(n_joint);
            for (j, c) in cells.into_iter().enumerate() {
                let c = c.ok_or_else(|| {
                    Error::Validation(format!(
                        "missing transition for ({}, {})",
                        doc.states[sid],
                        format_joint(&joint_from_index(&doc.actions, j))
                    ))
                })?;
                row.push(c);
            }
            full.push(row);
        }
        if let Some(s) = &doc.claims.state {
            resolve(s)?;
        }
        if let Some(set) = &doc.claims.ne_set {
            for j in set {
                parse_joint(j, &doc.actions)?;
            }
        }

        Ok(GameSpec {
            name: doc.name,
            n_agents: doc.n_agents,
            actions: doc.actions,
            states: doc.states,
            initial_state,
            horizon: doc.horizon,
            obs_mode: doc.obs_mode,
            gamma: doc.gamma,
            claims: doc.claims,
            table: full,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_joint(&self) -> usize {
        self.actions.iter().product()
    }

    pub fn state_id(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn outcome(&self, state: usize, joint: &[usize]) -> &Outcome {
        &self.table[state][joint_index(&self.actions, joint)]
    }

    pub fn outcome_at(&self, state: usize, joint_idx: usize) -> &Outcome {
        &self.table[state][joint_idx]
    }

    /// Width of each per-agent observation: one-hot state plus one-hot agent id.
    pub fn agent_obs_width(&self) -> usize {
        self.n_states() + self.n_agents
    }

    /// Width of the global state vector: one-hot state.
    pub fn global_obs_width(&self) -> usize {
        self.n_states()
    }

    pub fn with_obs_mode(mut self, mode: ObsMode) -> Self {
        self.obs_mode = mode;
        self
    }

    /// True iff every reward vector has identical components.
    pub fn is_fully_cooperative(&self) -> bool {
        self.table
            .iter()
            .flatten()
            .all(|o| o.reward.windows(2).all(|w| w[0] == w[1]))
    }

    pub fn observe(&self, state: usize) -> Observation {
        let s = self.n_states();
        let agents = (0..self.n_agents)
            .map(|i| {
                let mut v = vec![0.0; s + self.n_agents];
                v[state] = 1.0;
                v[s + i] = 1.0;
                v
            })
            .collect();
        let global = match self.obs_mode {
            ObsMode::Global => {
                let mut v = vec![0.0; s];
                v[state] = 1.0;
                Some(v)
            }
            ObsMode::Local => None,
        };
        Observation { agents, global }
    }

    pub fn reset(&self) -> (EnvState, Observation) {
        let st = EnvState {
            state: self.initial_state,
            step: 0,
            done: false,
        };
        (st, self.observe(self.initial_state))
    }

    /// Advances one stage. `joint` is indexed by agent id.
    pub fn step(&self, st: &EnvState, joint: &[usize]) -> Result<Step> {
        if st.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if joint.len() != self.n_agents {
            return Err(Error::Contract(format!(
                "joint action has {} entries for {} agents",
                joint.len(),
                self.n_agents
            )));
        }
        for (i, (&a, &n)) in joint.iter().zip(&self.actions).enumerate() {
            if a >= n {
                return Err(Error::Contract(format!(
                    "action {a} out of range for agent {i} ({n} actions)"
                )));
            }
        }
        let outcome = self.outcome(st.state, joint);
        let step = st.step + 1;
        let (state, terminal) = match outcome.next {
            Next::State(s) => (s, false),
            Next::Terminal => (st.state, true),
        };
        let done = terminal || step >= self.horizon;
        Ok(Step {
            state: EnvState { state, step, done },
            observation: self.observe(state),
            rewards: outcome.reward.clone(),
            done,
            terminal,
        })
    }

    /// Renders the spec back into a document (round-trips through [`GameSpec::load`]).
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let q = |s: &str| format!("{s:?}");
        out.push_str(&format!("name = {}\n", q(&self.name)));
        out.push_str(&format!("n_agents = {}\n", self.n_agents));
        out.push_str(&format!("actions = {:?}\n", self.actions));
        let states: Vec<String> = self.states.iter().map(|s| q(s)).collect();
        out.push_str(&format!("states = [{}]\n", states.join(", ")));
        out.push_str(&format!("initial_state = {}\n", q(&self.states[self.initial_state])));
        out.push_str(&format!("horizon = {}\n", self.horizon));
        out.push_str(&format!("obs_mode = \"{}\"\n", self.obs_mode));
        out.push_str(&format!("gamma = {:?}\n", self.gamma));
        for (sid, row) in self.table.iter().enumerate() {
            out.push_str(&format!(
                "\n[[stage]]\nstate = {}\noutcomes = [\n",
                q(&self.states[sid])
            ));
            for (j, o) in row.iter().enumerate() {
                let next = match o.next {
                    Next::State(s) => self.states[s].as_str(),
                    Next::Terminal => TERMINAL,
                };
                let reward: Vec<String> = o.reward.iter().map(|r| format!("{r:?}")).collect();
                out.push_str(&format!(
                    "  {{ joint = \"{}\", next = {}, reward = [{}] }},\n",
                    format_joint(&joint_from_index(&self.actions, j)),
                    q(next),
                    reward.join(", ")
                ));
            }
            out.push_str("]\n");
        }
        out
    }

    /// Stage payoff matrix summary keyed by joint label (used by reports).
    pub fn stage_rewards(&self, state: usize) -> BTreeMap<String, Vec<f64>> {
        self.table[state]
            .iter()
            .enumerate()
            .map(|(j, o)| (format_joint(&joint_from_index(&self.actions, j)), o.reward.clone()))
            .collect()
    }
}

/// Mixed-radix index of a joint action, agent 0 most significant.
pub fn joint_index(actions: &[usize], joint: &[usize]) -> usize {
    joint.iter().zip(actions).fold(0, |acc, (&a, &n)| acc * n + a)
}

pub fn joint_from_index(actions: &[usize], mut idx: usize) -> Vec<usize> {
    let mut joint = vec![0; actions.len()];
    for (slot, &n) in joint.iter_mut().zip(actions).rev() {
        *slot = idx % n;
        idx /= n;
    }
    joint
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub state: usize,
    pub step: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Per-agent vectors, indexed by agent id.
    pub agents: Vec<Vec<f64>>,
    /// Shared state vector; present only in global-state mode.
    pub global: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub observation: Observation,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// The transition reached TERMINAL (as opposed to being cut at the horizon).
    pub terminal: bool,
}

/// Agent decision order: `order[p]` is the agent acting at priority level `p`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PriorityPermutation(Vec<usize>);

impl PriorityPermutation {
    pub fn identity(n: usize) -> Self {
        PriorityPermutation((0..n).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &a in &order {
            if a >= n || seen[a] {
                return Err(Error::Config(format!("{order:?} is not a permutation of 0..{n}")));
            }
            seen[a] = true;
        }
        Ok(PriorityPermutation(order))
    }

    /// Parses a comma-separated list of zero-based agent ids, e.g. `"1,0"`.
    pub fn parse(text: &str) -> Result<Self> {
        let order = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad agent id {p:?} in priority {text:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(order)
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Reorders an agent-indexed slice into priority order.
    pub fn to_priority<T: Clone>(&self, by_agent: &[T]) -> Vec<T> {
        self.0.iter().map(|&a| by_agent[a].clone()).collect()
    }

    /// Inverse of [`PriorityPermutation::to_priority`].
    pub fn to_agents<T: Clone + Default>(&self, by_priority: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); by_priority.len()];
        for (p, &a) in self.0.iter().enumerate() {
            out[a] = by_priority[p].clone();
        }
        out
    }
}

impl std::str::FromStr for PriorityPermutation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<Vec<usize>> for PriorityPermutation {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PriorityPermutation> for Vec<usize> {
    fn from(p: PriorityPermutation) -> Self {
        p.0
    }
}

impl fmt::Display for PriorityPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
