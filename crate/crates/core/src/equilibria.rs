//! Exhaustive pure-strategy equilibrium solver.
//!
//! Stackelberg equilibria are found by backward induction twice over: across
//! stages, on the `(state, remaining horizon)` graph from the last step
//! backwards, and inside each stage, over the depth-`n` tree of actions taken
//! in priority order. The agent at each level picks the action that maximises
//! its own value given the induced responses below it.
//!
//! Ties follow the strong convention: an agent indifferent between actions
//! prefers the one that is better for higher-priority agents (compared
//! lexicographically from the top leader down), and only then the lowest
//! action index. All comparisons are exact.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::env::{format_joint, joint_from_index, parse_joint, GameSpec, Next, PriorityPermutation};
use crate::error::{Error, Result};

/// Largest number of stage-tree leaves the solver will enumerate.
pub const MAX_LEAVES: u128 = 1_000_000;

/// Cap on the number of distinct tie-optimal trajectories listed in a report.
const MAX_LISTED_PATHS: usize = 64;

pub const CONVENTION: &str =
    "strong Stackelberg: ties go to higher-priority agents lexicographically, then lowest action index";

/// Per-agent continuation values for every successor state (TERMINAL is zero).
#[derive(Clone, Debug, PartialEq)]
pub struct Continuation {
    per_state: Vec<Vec<f64>>,
}

impl Continuation {
    pub fn zero(spec: &GameSpec) -> Self {
        Continuation {
            per_state: vec![vec![0.0; spec.n_agents]; spec.n_states()],
        }
    }

    pub fn from_values(per_state: Vec<Vec<f64>>) -> Self {
        Continuation { per_state }
    }

    pub fn get(&self, next: Next) -> Option<&[f64]> {
        match next {
            Next::Terminal => None,
            Next::State(s) => Some(&self.per_state[s]),
        }
    }
}

/// Stage value `r(s, a) + gamma * V(next)` for one joint action.
fn joint_value(spec: &GameSpec, state: usize, joint_idx: usize, cont: &Continuation) -> Vec<f64> {
    let o = spec.outcome_at(state, joint_idx);
    match cont.get(o.next) {
        None => o.reward.clone(),
        Some(v) => o.reward.iter().zip(v).map(|(r, c)| r + spec.gamma * c).collect(),
    }
}

/// Pure Nash equilibria of one stage: joint actions (agent-indexed) at which
/// no agent strictly gains from a unilateral deviation.
pub fn enumerate_pure_ne(spec: &GameSpec, state: usize, cont: &Continuation) -> Vec<Vec<usize>> {
    let values: Vec<Vec<f64>> = (0..spec.n_joint()).map(|j| joint_value(spec, state, j, cont)).collect();
    let mut out = Vec::new();
    for j in 0..spec.n_joint() {
        let joint = joint_from_index(&spec.actions, j);
        let stable = (0..spec.n_agents).all(|agent| {
            (0..spec.actions[agent]).all(|alt| {
                let mut dev = joint.clone();
                dev[agent] = alt;
                values[crate::env::joint_index(&spec.actions, &dev)][agent] <= values[j][agent]
            })
        });
        if stable {
            out.push(joint);
        }
    }
    out
}

/// Result of solving one stage game in priority order.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSolution {
    /// Canonical equilibrium joint action, agent-indexed.
    pub joint: Vec<usize>,
    /// Per-agent stage values (reward plus discounted continuation).
    pub values: Vec<f64>,
    /// Every joint action reachable by tie-optimal choices, agent-indexed.
    pub tie_optimal: Vec<Vec<usize>>,
    /// `(prefix in priority order, chosen action)` for every internal tree node.
    pub responses: Vec<(Vec<usize>, usize)>,
}

struct Level {
    values: Vec<f64>,
    /// Canonical completion from this level down, in priority order.
    canonical: Vec<usize>,
    tie_optimal: Vec<Vec<usize>>,
}

fn compare_key(a: &[f64], b: &[f64], agent: usize, leaders: &[usize]) -> Ordering {
    let own = a[agent].partial_cmp(&b[agent]).expect("finite values");
    leaders.iter().fold(own, |ord, &l| {
        ord.then_with(|| a[l].partial_cmp(&b[l]).expect("finite values"))
    })
}

/// Backward induction over the action tree of one stage.
pub fn stackelberg_stage(
    spec: &GameSpec,
    state: usize,
    priority: &PriorityPermutation,
    cont: &Continuation,
) -> StageSolution {
    let order = priority.order();
    let mut prefix = Vec::with_capacity(order.len());
    let mut responses = Vec::new();
    let level = solve_level(spec, state, order, cont, &mut prefix, &mut responses);
    let mut joint = vec![0; spec.n_agents];
    for (p, &a) in level.canonical.iter().enumerate() {
        joint[order[p]] = a;
    }
    let tie_optimal = level
        .tie_optimal
        .iter()
        .map(|by_prio| {
            let mut j = vec![0; spec.n_agents];
            for (p, &a) in by_prio.iter().enumerate() {
                j[order[p]] = a;
            }
            j
        })
        .collect();
    StageSolution {
        joint,
        values: level.values,
        tie_optimal,
        responses,
    }
}

fn solve_level(
    spec: &GameSpec,
    state: usize,
    order: &[usize],
    cont: &Continuation,
    prefix: &mut Vec<usize>,
    responses: &mut Vec<(Vec<usize>, usize)>,
) -> Level {
    let p = prefix.len();
    if p == order.len() {
        let mut joint = vec![0; order.len()];
        for (lvl, &a) in prefix.iter().enumerate() {
            joint[order[lvl]] = a;
        }
        let j = crate::env::joint_index(&spec.actions, &joint);
        return Level {
            values: joint_value(spec, state, j, cont),
            canonical: Vec::new(),
            tie_optimal: vec![Vec::new()],
        };
    }
    let agent = order[p];
    let leaders = &order[..p];
    let mut best: Option<(usize, Level)> = None;
    let mut tied: Vec<Vec<usize>> = Vec::new();
    for a in 0..spec.actions[agent] {
        prefix.push(a);
        let sub = solve_level(spec, state, order, cont, prefix, responses);
        prefix.pop();
        let with_a = |paths: &[Vec<usize>]| -> Vec<Vec<usize>> {
            paths
                .iter()
                .map(|rest| std::iter::once(a).chain(rest.iter().copied()).collect())
                .collect()
        };
        match &best {
            None => {
                tied = with_a(&sub.tie_optimal);
                best = Some((a, sub));
            }
            Some((_, b)) => match compare_key(&sub.values, &b.values, agent, leaders) {
                Ordering::Greater => {
                    tied = with_a(&sub.tie_optimal);
                    best = Some((a, sub));
                }
                Ordering::Equal => tied.extend(with_a(&sub.tie_optimal)),
                Ordering::Less => {}
            },
        }
    }
    let (a, sub) = best.expect("every agent has at least one action");
    responses.push((prefix.clone(), a));
    let mut canonical = vec![a];
    canonical.extend(sub.canonical);
    Level {
        values: sub.values,
        canonical,
        tie_optimal: tied,
    }
}

/// One step of an equilibrium trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStep {
    pub state: usize,
    pub joint: Vec<usize>,
}

/// Solved game: stage solutions for every `(state, remaining)` node.
#[derive(Clone, Debug)]
pub struct Oracle {
    spec: GameSpec,
    priority: PriorityPermutation,
    /// `nodes[remaining - 1][state]`.
    nodes: Vec<Vec<StageSolution>>,
    depth: Vec<Option<usize>>,
}

impl Oracle {
    /// Backward induction over all `(state, remaining horizon)` nodes.
    pub fn solve(spec: &GameSpec, priority: &PriorityPermutation) -> Result<Oracle> {
        if priority.len() != spec.n_agents {
            return Err(Error::Config(format!(
                "priority lists {} agents, game has {}",
                priority.len(),
                spec.n_agents
            )));
        }
        let leaves = spec.n_states() as u128 * spec.horizon as u128 * spec.n_joint() as u128;
        if leaves > MAX_LEAVES {
            return Err(Error::TooLarge {
                leaves,
                limit: MAX_LEAVES,
            });
        }
        let mut nodes: Vec<Vec<StageSolution>> = Vec::with_capacity(spec.horizon);
        let mut cont = Continuation::zero(spec);
        for _rem in 1..=spec.horizon {
            let layer: Vec<StageSolution> = (0..spec.n_states())
                .map(|s| stackelberg_stage(spec, s, priority, &cont))
                .collect();
            cont = Continuation::from_values(layer.iter().map(|l| l.values.clone()).collect());
            nodes.push(layer);
        }
        Ok(Oracle {
            spec: spec.clone(),
            priority: priority.clone(),
            nodes,
            depth: bfs_depth(spec),
        })
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    pub fn priority(&self) -> &PriorityPermutation {
        &self.priority
    }

    pub fn stage(&self, state: usize, remaining: usize) -> &StageSolution {
        &self.nodes[remaining - 1][state]
    }

    /// Continuation values seen by a stage with `remaining` steps left.
    pub fn continuation(&self, remaining: usize) -> Continuation {
        if remaining <= 1 {
            Continuation::zero(&self.spec)
        } else {
            Continuation::from_values(self.nodes[remaining - 2].iter().map(|s| s.values.clone()).collect())
        }
    }

    /// Remaining horizon at which `state` is first reachable, if at all.
    pub fn remaining_at(&self, state: usize) -> Option<usize> {
        self.depth[state]
            .filter(|&d| d < self.spec.horizon)
            .map(|d| self.spec.horizon - d)
    }

    /// Pure NE of a stage, evaluated with equilibrium continuation values at
    /// the stage's first reachable depth.
    pub fn pure_ne(&self, state: usize) -> Vec<Vec<usize>> {
        let rem = self.remaining_at(state).unwrap_or(1);
        enumerate_pure_ne(&self.spec, state, &self.continuation(rem))
    }

    pub fn se_values(&self) -> &[f64] {
        &self.stage(self.spec.initial_state, self.spec.horizon).values
    }

    /// Canonical equilibrium trajectory from the initial state.
    pub fn se_path(&self) -> Vec<PathStep> {
        let mut path = Vec::new();
        let mut state = self.spec.initial_state;
        for rem in (1..=self.spec.horizon).rev() {
            let joint = self.stage(state, rem).joint.clone();
            let next = self.spec.outcome(state, &joint).next;
            path.push(PathStep { state, joint });
            match next {
                Next::State(s) => state = s,
                Next::Terminal => break,
            }
        }
        path
    }

    /// All trajectories obtainable by breaking remaining exact ties any way,
    /// up to `limit` of them.
    pub fn se_paths(&self, limit: usize) -> Vec<Vec<PathStep>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        self.collect_paths(self.spec.initial_state, self.spec.horizon, &mut cur, &mut out, limit);
        out
    }

    fn collect_paths(
        &self,
        state: usize,
        rem: usize,
        cur: &mut Vec<PathStep>,
        out: &mut Vec<Vec<PathStep>>,
        limit: usize,
    ) {
        if out.len() >= limit {
            return;
        }
        for joint in &self.stage(state, rem).tie_optimal {
            cur.push(PathStep {
                state,
                joint: joint.clone(),
            });
            match self.spec.outcome(state, joint).next {
                Next::State(s) if rem > 1 => self.collect_paths(s, rem - 1, cur, out, limit),
                _ => {
                    if out.len() < limit {
                        out.push(cur.clone());
                    }
                }
            }
            cur.pop();
        }
    }

    /// True iff the joint-action sequence, played from the initial state, is
    /// an equilibrium trajectory under some resolution of exact ties.
    pub fn is_se_path(&self, joints: &[Vec<usize>]) -> bool {
        let mut state = self.spec.initial_state;
        for (t, joint) in joints.iter().enumerate() {
            let rem = self.spec.horizon - t;
            if rem == 0 || !self.stage(state, rem).tie_optimal.contains(joint) {
                return false;
            }
            match self.spec.outcome(state, joint).next {
                Next::State(s) if rem > 1 => state = s,
                _ => return t + 1 == joints.len(),
            }
        }
        false
    }

    pub fn report(&self) -> EquilibriumReport {
        let spec = &self.spec;
        let label = |s: usize| spec.states[s].clone();
        let path = |p: &[PathStep]| -> Vec<StepDoc> {
            p.iter()
                .map(|s| StepDoc {
                    state: label(s.state),
                    joint: format_joint(&s.joint),
                })
                .collect()
        };
        let se_path = self.se_path();
        let se_paths = self.se_paths(MAX_LISTED_PATHS);
        let mut pure_ne = Vec::new();
        let mut sub_policy = Vec::new();
        for s in 0..spec.n_states() {
            let Some(rem) = self.remaining_at(s) else { continue };
            pure_ne.push(StageNe {
                state: label(s),
                remaining: rem,
                joints: self.pure_ne(s).iter().map(|j| format_joint(j)).collect(),
            });
            for (prefix, action) in &self.stage(s, rem).responses {
                let agent = self.priority.order()[prefix.len()];
                sub_policy.push(ResponseDoc {
                    state: label(s),
                    remaining: rem,
                    leader_prefix: prefix
                        .iter()
                        .map(|a| format!("a{}", a + 1))
                        .collect::<Vec<_>>()
                        .join(" "),
                    agent,
                    action: format!("a{}", action + 1),
                });
            }
        }
        EquilibriumReport {
            game: spec.name.clone(),
            priority: self.priority.order().to_vec(),
            convention: CONVENTION.to_string(),
            se_values: self.se_values().to_vec(),
            se_path: path(&se_path),
            se_path_count: se_paths.len(),
            se_paths: se_paths.iter().map(|p| path(p)).collect(),
            pure_ne,
            sub_policy,
        }
    }
}

fn bfs_depth(spec: &GameSpec) -> Vec<Option<usize>> {
    let mut depth = vec![None; spec.n_states()];
    depth[spec.initial_state] = Some(0);
    let mut queue = VecDeque::from([spec.initial_state]);
    while let Some(s) = queue.pop_front() {
        let d = depth[s].expect("queued states have a depth");
        for j in 0..spec.n_joint() {
            if let Next::State(t) = spec.outcome_at(s, j).next {
                if depth[t].is_none() {
                    depth[t] = Some(d + 1);
                    queue.push_back(t);
                }
            }
        }
    }
    depth
}

/// Serializable oracle output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub game: String,
    pub priority: Vec<usize>,
    pub convention: String,
    pub se_values: Vec<f64>,
    pub se_path: Vec<StepDoc>,
    pub se_path_count: usize,
    pub se_paths: Vec<Vec<StepDoc>>,
    pub pure_ne: Vec<StageNe>,
    pub sub_policy: Vec<ResponseDoc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepDoc {
    pub state: String,
    pub joint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageNe {
    pub state: String,
    pub remaining: usize,
    pub joints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResponseDoc {
    pub state: String,
    pub remaining: usize,
    pub leader_prefix: String,
    pub agent: usize,
    pub action: String,
}

impl EquilibriumReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report is plain data")
    }

    /// Hex SHA-256 of [`EquilibriumReport::to_text`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Backward induction from the initial state under `priority`.
pub fn solve_stages(spec: &GameSpec, priority: &PriorityPermutation) -> Result<EquilibriumReport> {
    Ok(Oracle::solve(spec, priority)?.report())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClaimResult {
    pub claim: String,
    pub passed: bool,
    pub witness: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClaimReport {
    pub results: Vec<ClaimResult>,
}

impl ClaimReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Checks a document's embedded claims against the oracle (identity priority).
pub fn validate_claims(spec: &GameSpec, claims: &crate::env::Claims) -> Result<ClaimReport> {
    let oracle = Oracle::solve(spec, &PriorityPermutation::identity(spec.n_agents))?;
    let state = match &claims.state {
        Some(name) => spec
            .state_id(name)
            .ok_or_else(|| Error::Validation(format!("claim state {name:?} unknown")))?,
        None => spec.initial_state,
    };
    let rem = oracle
        .remaining_at(state)
        .ok_or_else(|| Error::Validation(format!("claim state {:?} is unreachable", spec.states[state])))?;
    let stage = oracle.stage(state, rem);
    let cont = oracle.continuation(rem);
    let ne = oracle.pure_ne(state);
    let fmt_set = |s: &[Vec<usize>]| s.iter().map(|j| format_joint(j)).collect::<Vec<_>>().join(", ");
    let mut results = Vec::new();

    if claims.unique_se {
        let paths = oracle.se_paths(2);
        let witness = paths
            .iter()
            .map(|p| {
                p.iter()
                    .map(|s| format_joint(&s.joint))
                    .collect::<Vec<_>>()
                    .join(" -> ")
            })
            .collect::<Vec<_>>()
            .join(" | ");
        results.push(ClaimResult {
            claim: "unique-SE".into(),
            passed: paths.len() == 1,
            witness,
        });
    }
    if let Some(expect) = &claims.ne_set {
        let mut want = expect
            .iter()
            .map(|j| parse_joint(j, &spec.actions))
            .collect::<Result<Vec<_>>>()?;
        want.sort();
        let mut got = ne.clone();
        got.sort();
        results.push(ClaimResult {
            claim: format!("NE-set-equals {{{}}}", fmt_set(&want)),
            passed: want == got,
            witness: format!("{{{}}}", fmt_set(&got)),
        });
    }
    if claims.se_pareto_dominates_some_ne {
        let dominated: Vec<Vec<usize>> = ne
            .iter()
            .filter(|j| {
                let v = joint_value(spec, state, crate::env::joint_index(&spec.actions, j), &cont);
                v.iter().zip(&stage.values).all(|(n, s)| s > n)
            })
            .cloned()
            .collect();
        results.push(ClaimResult {
            claim: "SE-pareto-dominates-some-NE".into(),
            passed: !dominated.is_empty(),
            witness: format!(
                "SE {} {:?} dominates {{{}}}",
                format_joint(&stage.joint),
                stage.values,
                fmt_set(&dominated)
            ),
        });
    }
    if claims.se_highest_average_payoff {
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se_avg = avg(&stage.values);
        let se_idx = crate::env::joint_index(&spec.actions, &stage.joint);
        let rival = (0..spec.n_joint())
            .filter(|&j| j != se_idx)
            .map(|j| (j, avg(&joint_value(spec, state, j, &cont))))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
        let passed = rival.is_none_or(|(_, r)| se_avg > r);
        results.push(ClaimResult {
            claim: "SE-has-highest-average-payoff".into(),
            passed,
            witness: match rival {
                Some((j, r)) => format!(
                    "SE average {se_avg} vs best other {} average {r}",
                    format_joint(&joint_from_index(&spec.actions, j))
                ),
                None => format!("SE average {se_avg}, no other joint action"),
            },
        });
    }
    Ok(ClaimReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GameSpec;

    fn matrix_game(rows: &[[(f64, f64); 3]; 3]) -> GameSpec {
        let mut doc = String::from(
            "name = \"m\"\nn_agents = 2\nactions = [3, 3]\nstates = [\"root\"]\n\
             initial_state = \"root\"\nhorizon = 1\nobs_mode = \"global\"\ngamma = 0.99\n\
             [[stage]]\nstate = \"root\"\noutcomes = [\n",
        );
        for (i, row) in rows.iter().enumerate() {
            for (j, (r1, r2)) in row.iter().enumerate() {
                doc.push_str(&format!(
                    "{{ joint = \"a{} a{}\", next = \"TERMINAL\", reward = [{r1:?}, {r2:?}] }},\n",
                    i + 1,
                    j + 1
                ));
            }
        }
        doc.push_str("]\n");
        GameSpec::load(&doc).unwrap()
    }

    fn penalty(k: f64) -> GameSpec {
        let c = |v: f64| (v, v);
        matrix_game(&[
            [c(10.0), c(0.0), c(k)],
            [c(0.0), c(2.0), c(0.0)],
            [c(k), c(0.0), c(10.0)],
        ])
    }

    #[test]
    fn penalty_se_is_first_optimum() {
        for k in [0.0, -100.0, -1000.0] {
            let spec = penalty(k);
            let id = PriorityPermutation::identity(2);
            let sol = stackelberg_stage(&spec, 0, &id, &Continuation::zero(&spec));
            assert_eq!(sol.joint, vec![0, 0]);
            assert_eq!(sol.values, vec![10.0, 10.0]);
            assert_eq!(sol.tie_optimal, vec![vec![0, 0], vec![2, 2]]);
        }
    }

    #[test]
    fn penalty_ne_set_by_brute_force() {
        let spec = penalty(-100.0);
        let ne = enumerate_pure_ne(&spec, 0, &Continuation::zero(&spec));
        assert_eq!(ne, vec![vec![0, 0], vec![1, 1], vec![2, 2]]);
    }

    #[test]
    fn single_agent_ne_is_argmax_set() {
        let doc = "name = \"one\"\nn_agents = 1\nactions = [3]\nstates = [\"s\"]\n\
                   initial_state = \"s\"\nhorizon = 1\nobs_mode = \"local\"\ngamma = 1.0\n\
                   [[stage]]\nstate = \"s\"\noutcomes = [\n\
                   { joint = \"a1\", next = \"TERMINAL\", reward = [4] },\n\
                   { joint = \"a2\", next = \"TERMINAL\", reward = [1] },\n\
                   { joint = \"a3\", next = \"TERMINAL\", reward = [4] },\n]\n";
        let spec = GameSpec::load(doc).unwrap();
        let ne = enumerate_pure_ne(&spec, 0, &Continuation::zero(&spec));
        assert_eq!(ne, vec![vec![0], vec![2]]);
        let sol = stackelberg_stage(&spec, 0, &PriorityPermutation::identity(1), &Continuation::zero(&spec));
        assert_eq!(sol.joint, vec![0]);
    }

    #[test]
    fn dominant_joint_action_is_the_se() {
        let spec = matrix_game(&[
            [(1.0, 1.0), (0.0, 2.0), (3.0, 0.0)],
            [(2.0, 0.0), (9.0, 9.0), (1.0, 1.0)],
            [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
        ]);
        let oracle = Oracle::solve(&spec, &PriorityPermutation::identity(2)).unwrap();
        assert_eq!(oracle.se_path()[0].joint, vec![1, 1]);
        assert_eq!(oracle.se_values(), &[9.0, 9.0]);
    }

    #[test]
    fn follower_ties_resolve_toward_leader() {
        // follower indifferent after a1; leader gets 5 from a3, 1 from a1
        let spec = matrix_game(&[
            [(1.0, 2.0), (0.0, 0.0), (5.0, 2.0)],
            [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
            [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
        ]);
        let sol = stackelberg_stage(&spec, 0, &PriorityPermutation::identity(2), &Continuation::zero(&spec));
        assert_eq!(sol.joint, vec![0, 2]);
        assert_eq!(sol.tie_optimal, vec![vec![0, 2]]);
    }

    #[test]
    fn reversed_priority_changes_the_leader() {
        // (a1,a3) when agent 0 leads; agent 1 leading prefers its own best
        let spec = matrix_game(&[
            [(0.0, 2.0), (1.0, 0.0), (8.0, 6.0)],
            [(2.0, 0.0), (4.0, 4.0), (0.0, 1.0)],
            [(6.0, 7.0), (0.0, 1.0), (1.0, 0.0)],
        ]);
        let a = Oracle::solve(&spec, &PriorityPermutation::identity(2)).unwrap();
        assert_eq!(a.se_path()[0].joint, vec![0, 2]);
        let b = Oracle::solve(&spec, &PriorityPermutation::parse("1,0").unwrap()).unwrap();
        // agent 1 leads: a1 -> agent 0 answers a3 (6,7); a2 -> a2 (4,4); a3 -> a1 (8,6)
        assert_eq!(b.se_path()[0].joint, vec![2, 0]);
        assert_eq!(b.se_values(), &[6.0, 7.0]);
    }

    #[test]
    fn too_large_games_are_refused() {
        let mut doc = String::from(
            "name = \"big\"\nn_agents = 7\nactions = [8, 8, 8, 8, 8, 8, 8]\nstates = [\"s\"]\n\
             initial_state = \"s\"\nhorizon = 1\nobs_mode = \"local\"\ngamma = 1.0\n\
             [[stage]]\nstate = \"s\"\n",
        );
        doc.push_str("default = { next = \"TERMINAL\", reward = [0, 0, 0, 0, 0, 0, 0] }\n");
        let spec = GameSpec::load(&doc).unwrap();
        let err = Oracle::solve(&spec, &PriorityPermutation::identity(7)).unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }

    #[test]
    fn se_path_membership() {
        let spec = penalty(-1000.0);
        let oracle = Oracle::solve(&spec, &PriorityPermutation::identity(2)).unwrap();
        assert!(oracle.is_se_path(&[vec![0, 0]]));
        assert!(oracle.is_se_path(&[vec![2, 2]]));
        assert!(!oracle.is_se_path(&[vec![1, 1]]));
        assert!(!oracle.is_se_path(&[]));
        assert!(!oracle.is_se_path(&[vec![0, 0], vec![0, 0]]));
    }

    #[test]
    fn report_is_deterministic_text() {
        let spec = penalty(0.0);
        let r1 = solve_stages(&spec, &PriorityPermutation::identity(2)).unwrap();
        let r2 = solve_stages(&spec, &PriorityPermutation::identity(2)).unwrap();
        assert_eq!(r1.to_text(), r2.to_text());
        assert_eq!(r1.digest().len(), 64);
        assert_eq!(r1.se_path[0].joint, "a1 a1");
        assert_eq!(r1.se_path_count, 2);
    }
}
