#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steer_core::env::{format_joint, joint_from_index, GameSpec};
use steer_core::model::{ModelConfig, SteerModel, Variant};
use steer_core::tensor::{Graph, ParamId, ParamStore, Var};
use steer_core::trainer::{collect_rollouts, compute_gae, ppo_loss, TrainConfig, ValueNorm, VecEnv};

pub const FD_STEP: f64 = 1e-5;

/// Central differences at [`FD_STEP`] carry round-off of a few
/// `eps * |loss| / step` (about 4e-10 for a loss near 20), so gradients
/// smaller than `GRAD_FLOOR * max(1, |loss|)` are compared against that floor.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between analytic gradients and central differences
/// of `loss` at the listed coordinates (all coordinates when `per_param` is `None`).
pub fn fd_check<F>(store: &mut ParamStore, per_param: Option<usize>, rng: &mut ChaCha8Rng, loss: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l).unwrap()
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };
    let floor = GRAD_FLOOR * eval(store).abs().max(1.0);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g[c]);
            let orig = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, numeric, floor));
        }
    }
    worst
}

/// Two-stage game with `n` agents and random integer payoffs.
pub fn random_game(n: usize, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(2..=3)).collect();
    let joints: usize = actions.iter().product();
    let mut doc = format!(
        "name = \"random{n}\"\nn_agents = {n}\nactions = {actions:?}\nstates = [\"s\", \"t\"]\n\
         initial_state = \"s\"\nhorizon = 2\nobs_mode = \"global\"\ngamma = 0.9\n"
    );
    for (state, next) in [("s", "t"), ("t", "TERMINAL")] {
        doc += &format!("[[stage]]\nstate = \"{state}\"\noutcomes = [\n");
        for j in 0..joints {
            let joint = format_joint(&joint_from_index(&actions, j));
            let reward: Vec<i32> = (0..n).map(|_| rng.gen_range(-3..=5)).collect();
            doc += &format!("  {{ joint = \"{joint}\", next = \"{next}\", reward = {reward:?} }},\n");
        }
        doc += "]\n";
    }
    GameSpec::load(&doc).unwrap()
}

/// Worst relative error of the full training loss gradient (clipped
/// surrogate, entropy bonus and clipped value loss against normalised
/// targets) for a randomly perturbed `n`-agent model of width `d`.
pub fn composed_loss_error(n: usize, d: usize, variant: Variant, seed: u64) -> f64 {
    let spec = random_game(n, seed);
    let cfg = ModelConfig {
        d,
        heads: 2,
        itb_depth: 1,
        otb_depth: 1,
        variant,
        ..ModelConfig::for_game(&spec)
    };
    let mut model = SteerModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut envs = VecEnv::new(&spec, 4);
    let mut batch = collect_rollouts(&spec, &mut envs, &model, 3, &mut rng).unwrap();
    let mut norm = ValueNorm::new(n, 0.99);
    norm.update(&[vec![1.0; n], vec![-0.5; n]]);
    norm.denormalize_batch(&mut batch);
    compute_gae(&mut batch, 0.9, 0.95).unwrap();
    // move away from the rollout policy so ratios differ from one
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let train = TrainConfig::default();
    let idx: Vec<usize> = (0..batch.len()).collect();
    // the graph reads parameters from the store it is built on
    let mut store = model.store().clone();
    fd_check(&mut store, Some(6), &mut rng, |g| {
        ppo_loss(g, &model, &batch, &idx, &train, Some(&norm)).unwrap().total
    })
}

/// Random game with `n_states` stages; every outcome moves to a random
/// stage or terminates. With `shared`, all agents receive the same reward.
pub fn random_markov_game(n: usize, n_states: usize, horizon: usize, shared: bool, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(2..=3)).collect();
    let joints: usize = actions.iter().product();
    let states: Vec<String> = (0..n_states).map(|s| format!("s{s}")).collect();
    let mut doc = format!(
        "name = \"markov\"\nn_agents = {n}\nactions = {actions:?}\nstates = {states:?}\n\
         initial_state = \"s0\"\nhorizon = {horizon}\nobs_mode = \"global\"\ngamma = 0.5\n"
    );
    for state in &states {
        doc += &format!("[[stage]]\nstate = \"{state}\"\noutcomes = [\n");
        for j in 0..joints {
            let joint = format_joint(&joint_from_index(&actions, j));
            let next = match rng.gen_range(0..=n_states) {
                k if k == n_states => "TERMINAL".to_string(),
                k => states[k].clone(),
            };
            let reward: Vec<i32> = if shared {
                vec![rng.gen_range(-4..=6); n]
            } else {
                (0..n).map(|_| rng.gen_range(-4..=6)).collect()
            };
            doc += &format!("  {{ joint = \"{joint}\", next = \"{next}\", reward = {reward:?} }},\n");
        }
        doc += "]\n";
    }
    GameSpec::load(&doc).unwrap()
}
