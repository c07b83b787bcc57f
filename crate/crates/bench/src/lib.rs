//! Fixtures shared by the benchmarks in `benches/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use steer_core::env::GameSpec;
use steer_core::games::builtin;
use steer_core::model::{ModelConfig, SteerModel};
use steer_core::trainer::{collect_rollouts, compute_gae, RolloutBatch, VecEnv};

/// A built-in game and a freshly initialised model of width `d`.
pub fn model_for(game: &str, d: usize, depth: usize) -> (GameSpec, SteerModel) {
    let spec = builtin(game).expect("built-in game");
    let cfg = ModelConfig {
        d,
        itb_depth: depth,
        otb_depth: depth,
        ..ModelConfig::for_game(&spec)
    };
    let model = SteerModel::new(cfg, 0).expect("valid config");
    (spec, model)
}

/// One sealed rollout batch of `steps` environment steps over 8 environments.
pub fn batch(spec: &GameSpec, model: &SteerModel, steps: usize) -> RolloutBatch {
    let mut envs = VecEnv::new(spec, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = collect_rollouts(spec, &mut envs, model, steps / 8, &mut rng).expect("rollout");
    compute_gae(&mut b, 0.99, 0.95).expect("gae");
    b
}
