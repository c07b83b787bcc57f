use super::*;
use crate::env::{ObsMode, Observation};
use crate::games::builtin;
use crate::model::Variant;
use crate::tensor::Graph;

fn tiny_model(spec: &GameSpec) -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        itb_depth: 1,
        otb_depth: 1,
        ..ModelConfig::for_game(spec)
    }
}

fn dummy_obs() -> Observation {
    Observation {
        agents: vec![vec![1.0]],
        global: None,
    }
}

/// One environment, one agent, given rewards/values; last step terminal.
fn episode(rewards: &[f64], values: &[f64]) -> RolloutBatch {
    let mut b = RolloutBatch::new(1, 1);
    for (t, (&r, &v)) in rewards.iter().zip(values).enumerate() {
        let last = t + 1 == rewards.len();
        b.push(dummy_obs(), vec![0], vec![0.0], vec![v], vec![r], last, last);
    }
    b
}

#[test]
fn gae_hand_recursion() {
    let mut b = episode(&[1.0, 2.0, 3.0], &[0.5, 0.4, 0.3]);
    compute_gae(&mut b, 0.9, 0.95).unwrap();
    // delta_3 = 2.7; delta_2 = 2 + 0.27 - 0.4; delta_1 = 1 + 0.36 - 0.5
    let expect = [4.4326175, 4.1785, 2.7];
    for (a, e) in b.advantages.iter().zip(expect) {
        assert!((a[0] - e).abs() < 1e-12, "{} vs {e}", a[0]);
    }
    for t in 0..3 {
        assert!((b.returns[t][0] - (b.advantages[t][0] + b.values[t][0])).abs() < 1e-15);
    }
}

#[test]
fn gae_lambda_extremes() {
    let rewards = [0.5, -1.0, 2.0, 4.0];
    let values = [0.1, 0.2, -0.3, 0.7];
    let gamma = 0.8;
    let mut b = episode(&rewards, &values);
    compute_gae(&mut b, gamma, 1.0).unwrap();
    for t in 0..4 {
        let togo: f64 = (t..4).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
        assert!((b.advantages[t][0] - (togo - values[t])).abs() < 1e-12);
    }
    let mut b = episode(&rewards, &values);
    compute_gae(&mut b, gamma, 0.0).unwrap();
    for t in 0..4 {
        let next = if t == 3 { 0.0 } else { values[t + 1] };
        assert!((b.advantages[t][0] - (rewards[t] + gamma * next - values[t])).abs() < 1e-15);
    }
}

#[test]
fn gae_bootstraps_cut_episodes() {
    let mut b = RolloutBatch::new(1, 1);
    b.push(dummy_obs(), vec![0], vec![0.0], vec![1.0], vec![2.0], true, false);
    b.bootstrap[0] = Some(vec![10.0]);
    b.push(dummy_obs(), vec![0], vec![0.0], vec![3.0], vec![1.0], false, false);
    b.bootstrap[1] = Some(vec![-4.0]);
    compute_gae(&mut b, 0.5, 0.9).unwrap();
    assert_eq!(b.advantages[0][0], 2.0 + 0.5 * 10.0 - 1.0);
    assert_eq!(b.advantages[1][0], 1.0 + 0.5 * -4.0 - 3.0);

    let mut missing = RolloutBatch::new(1, 1);
    missing.push(dummy_obs(), vec![0], vec![0.0], vec![1.0], vec![2.0], true, false);
    assert!(matches!(compute_gae(&mut missing, 0.5, 0.9), Err(Error::Contract(_))));
}

#[test]
fn gae_keeps_environments_apart() {
    // two interleaved one-step episodes per env
    let mut b = RolloutBatch::new(1, 2);
    for (r, v) in [(1.0, 0.0), (5.0, 1.0), (2.0, 0.5), (7.0, 2.0)] {
        b.push(dummy_obs(), vec![0], vec![0.0], vec![v], vec![r], true, true);
    }
    compute_gae(&mut b, 0.99, 0.95).unwrap();
    let adv: Vec<f64> = b.advantages.iter().map(|a| a[0]).collect();
    assert_eq!(adv, vec![1.0, 4.0, 1.5, 5.0]);
}

#[test]
fn agents_advantages_are_separate() {
    let mut b = RolloutBatch::new(2, 1);
    let steps = [
        ([1.0, -2.0], [0.3, 0.1]),
        ([0.0, 4.0], [0.2, 0.9]),
        ([2.5, 1.0], [-0.1, 0.4]),
    ];
    for (t, (r, v)) in steps.iter().enumerate() {
        let last = t == 2;
        b.push(
            dummy_obs(),
            vec![0, 0],
            vec![0.0; 2],
            v.to_vec(),
            r.to_vec(),
            last,
            last,
        );
    }
    let mut zeroed = b.clone();
    for r in &mut zeroed.rewards {
        r[1] = 0.0;
    }
    compute_gae(&mut b, 0.9, 0.95).unwrap();
    compute_gae(&mut zeroed, 0.9, 0.95).unwrap();
    for t in 0..3 {
        assert_eq!(b.advantages[t][0], zeroed.advantages[t][0]);
        assert_ne!(b.advantages[t][1], zeroed.advantages[t][1]);
    }
}

#[test]
fn normalization_is_per_agent() {
    let adv = vec![vec![1.0, 100.0], vec![3.0, 100.0]];
    let n = normalize_advantages(&adv);
    assert_eq!(n, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
}

#[test]
fn rollouts_record_every_step() {
    let spec = builtin("coordination").unwrap();
    let model = SteerModel::new(tiny_model(&spec), 1).unwrap();
    let mut envs = VecEnv::new(&spec, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = collect_rollouts(&spec, &mut envs, &model, 9, &mut rng).unwrap();
    assert_eq!(b.len(), 36);
    assert!(b.dones.iter().any(|&d| d));
    for (r, a) in b.rewards.iter().zip(&b.actions) {
        assert_eq!(r.len(), 2);
        assert!(a[0] < 3 && a[1] < 3);
    }

    let coop = builtin("cooperation").unwrap();
    let b = collect_rollouts(&coop, &mut VecEnv::new(&coop, 2), &model, 6, &mut rng).unwrap();
    assert!(b.rewards.iter().all(|r| r[0] == r[1]));
}

#[test]
fn first_minibatch_ratios_are_one() {
    let spec = builtin("mixing").unwrap();
    let mut model = SteerModel::new(tiny_model(&spec), 2).unwrap();
    let cfg = TrainConfig {
        rollout_len: 32,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 8), &model, 4, &mut rng).unwrap();
    compute_gae(&mut b, cfg.gamma, cfg.gae_lambda).unwrap();
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let rep = ppo_update(&mut model, &mut adam, &b, &cfg, None, &mut rng).unwrap();
    assert_eq!(rep.minibatches.len(), cfg.epochs * cfg.minibatches);
    assert!(rep.minibatches[0].max_ratio_deviation < 1e-10);
    assert_eq!(rep.minibatches[0].clip_fraction, 0.0);
    assert!(rep.minibatches.iter().all(|m| (0.0..=1.0).contains(&m.clip_fraction)));
}

#[test]
fn update_requires_sealed_batch() {
    let spec = builtin("mixing").unwrap();
    let mut model = SteerModel::new(tiny_model(&spec), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 2), &model, 2, &mut rng).unwrap();
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let err = ppo_update(&mut model, &mut adam, &b, &TrainConfig::default(), None, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn zero_advantage_exact_fit_leaves_only_entropy_gradient() {
    let spec = builtin("mixing").unwrap();
    let model = SteerModel::new(tiny_model(&spec), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 4), &model, 2, &mut rng).unwrap();
    b.advantages = vec![vec![0.0; 2]; b.len()];
    b.returns = b.values.clone();
    let cfg = TrainConfig::default();
    let idx: Vec<usize> = (0..b.len()).collect();

    let mut g = Graph::new(model.store());
    let lv = ppo_loss(&mut g, &model, &b, &idx, &cfg, None).unwrap();
    let full = g.backward(lv.total).unwrap();

    let mut g = Graph::new(model.store());
    let ev = model.evaluate_graph(&mut g, &b.obs, &b.actions).unwrap();
    let h = g.mean(ev.entropy);
    let only = g.scale(h, -cfg.entropy_coef);
    let ent = g.backward(only).unwrap();

    for id in model.store().ids() {
        let a = full.get(id).unwrap();
        match ent.get(id) {
            Some(e) => {
                for (x, y) in a.iter().zip(e) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
            // critic parameters: no path to the entropy
            None => assert!(a.iter().all(|&x| x == 0.0)),
        }
    }
}

#[test]
fn non_finite_loss_is_reported() {
    let spec = builtin("mixing").unwrap();
    let mut model = SteerModel::new(tiny_model(&spec), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 2), &model, 2, &mut rng).unwrap();
    compute_gae(&mut b, 0.99, 0.95).unwrap();
    let id = model.store().find("head.critic.bias").unwrap();
    model.store_mut().get_mut(id).value.data_mut()[0] = f64::NAN;
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let err = ppo_update(&mut model, &mut adam, &b, &TrainConfig::default(), None, &mut rng).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("value loss"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

fn bandit() -> GameSpec {
    GameSpec::load(
        "name = \"bandit\"\nn_agents = 1\nactions = [2]\nstates = [\"s\"]\n\
         initial_state = \"s\"\nhorizon = 1\nobs_mode = \"local\"\ngamma = 0.99\n\
         [[stage]]\nstate = \"s\"\noutcomes = [\n\
         { joint = \"a1\", next = \"TERMINAL\", reward = [1] },\n\
         { joint = \"a2\", next = \"TERMINAL\", reward = [0] },\n]\n",
    )
    .unwrap()
}

#[test]
fn one_update_favours_the_better_arm() {
    let spec = bandit();
    let cfg = TrainConfig {
        rollout_len: 32,
        epochs: 1,
        minibatches: 1,
        entropy_coef: 0.0,
        clip: f64::INFINITY,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let obs = vec![spec.reset().1];
    let mut improved = 0;
    for seed in 0..20 {
        let mut model = SteerModel::new(tiny_model(&spec), seed).unwrap();
        let before = model.evaluate_parallel(&obs, &[vec![0]]).unwrap()[0].log_probs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 8), &model, 4, &mut rng).unwrap();
        compute_gae(&mut b, cfg.gamma, cfg.gae_lambda).unwrap();
        let mut adam = Adam::new(
            model.store(),
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        ppo_update(&mut model, &mut adam, &b, &cfg, None, &mut rng).unwrap();
        let after = model.evaluate_parallel(&obs, &[vec![0]]).unwrap()[0].log_probs[0];
        improved += usize::from(after > before);
    }
    assert!(improved > 10, "{improved}/20");
}

#[test]
fn value_loss_falls_on_a_fixed_batch() {
    let spec = builtin("coordination").unwrap();
    let mut model = SteerModel::new(tiny_model(&spec), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = collect_rollouts(&spec, &mut VecEnv::new(&spec, 8), &model, 8, &mut rng).unwrap();
    compute_gae(&mut b, 0.99, 0.95).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        minibatches: 1,
        lr: 1e-4,
        // the clipped term is flat once predictions leave the trust band
        value_clip: f64::INFINITY,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(
        model.store(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let rep = ppo_update(&mut model, &mut adam, &b, &cfg, None, &mut rng).unwrap();
    let losses: Vec<f64> = rep.minibatches.iter().map(|m| m.value_loss).collect();
    let falling = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falling * 5 >= (losses.len() - 1) * 4, "{losses:?}");
}

#[test]
fn training_is_deterministic_and_sized() {
    let spec = builtin("penalty_k0").unwrap();
    let cfg = TrainConfig {
        total_steps: 256,
        rollout_len: 64,
        seed: 9,
        ..TrainConfig::default()
    };
    let mcfg = tiny_model(&spec);
    let a = train(&spec, &mcfg, &cfg).unwrap();
    let b = train(&spec, &mcfg, &cfg).unwrap();
    assert_eq!(a.metrics.len(), cfg.total_steps / cfg.rollout_len);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert!(a.metrics.iter().all(|m| m.se_match.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &a.metrics, 2).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), a.metrics);
}

#[test]
fn eval_matches_oracle_on_the_se_path() {
    let spec = builtin("coordination").unwrap();
    let oracle = Oracle::solve(&spec, &crate::env::PriorityPermutation::identity(2)).unwrap();
    let model = SteerModel::new(tiny_model(&spec), 0).unwrap();
    let ev = evaluate(&spec, &model, &oracle).unwrap();
    assert_eq!(ev.se_match, oracle.is_se_path(&ev.joints));
    assert!(!ev.joints.is_empty() && ev.joints.len() <= spec.horizon);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig {
            clip: 1.5,
            ..ok.clone()
        },
        TrainConfig {
            gamma: 1.2,
            ..ok.clone()
        },
        TrainConfig {
            rollout_len: 100,
            n_envs: 8,
            ..ok.clone()
        },
        TrainConfig {
            epochs: 0,
            ..ok.clone()
        },
        TrainConfig { lr: -1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let local = ModelConfig {
        obs_mode: ObsMode::Local,
        variant: Variant::OtbGru,
        ..tiny_model(&builtin("mixing").unwrap())
    };
    assert!(train(&bandit(), &local, &ok).is_err());
}
