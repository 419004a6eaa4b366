use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xalign_core::arm_env::{make_scenario, observe, step, Action, ArmConfig, ArmState, ScenarioName, TaskSpec};
use xalign_core::bco::{
    behavioral_cloning, collect_random, evaluate_policy, label_actions, normalized_score,
    reference_returns, train_inverse_model, BcSettings, ExpertController, IdmSettings,
    RandomController, TaskReference, DEFAULT_EXPLORATION_STEPS,
};
use xalign_core::expert::{generate_demos, DemoRequest};
use xalign_core::traj::{Domain, Trajectory};
use xalign_core::Matrix;

fn ks_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = (x - lo) / (hi - lo);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn exploration_is_exact_uniform_and_consistent_with_the_simulator() {
    let config = ArmConfig::two_link();
    let expl = collect_random(&config, 10_000, 1).unwrap();
    assert_eq!(expl.len(), 10_000);
    assert_eq!(collect_random(&config, 10_000, 1).unwrap(), expl);

    // The goal is irrelevant to the dynamics, so any placeholder task works.
    let task = TaskSpec::reach("check", [1e3, 1e3]);
    let k = config.num_links;
    for r in 0..expl.len() {
        let s = expl.states.row(r);
        let state = ArmState {
            angles: s[..k].to_vec(),
            velocities: s[k..2 * k].to_vec(),
            goal: [s[2 * k], s[2 * k + 1]],
            goal_index: 0,
        };
        let out = step(&state, &Action(expl.actions.row(r).to_vec()), &config, &task).unwrap();
        assert_eq!(observe(&out.next, &config)[..2 * k], expl.next_states.row(r)[..2 * k], "row {r}");
    }

    let big = collect_random(&config, 100_000, 2).unwrap();
    let l = config.torque_limit;
    for c in 0..k {
        let mut col: Vec<f64> = (0..big.len()).map(|r| big.actions.get(r, c)).collect();
        let d = ks_uniform(&mut col, -l, l);
        assert!(d < 0.02, "joint {c}: KS statistic {d}");
    }
}

#[test]
fn inverse_model_recovers_actions() {
    let config = ArmConfig::two_link();
    let expl = collect_random(&config, DEFAULT_EXPLORATION_STEPS, 3).unwrap();
    let settings = IdmSettings::default();
    let (idm, report) = train_inverse_model(&expl, &config, &settings, 4).unwrap();
    for (j, rmse) in report.heldout_rmse.iter().enumerate() {
        assert!(*rmse < 0.05, "joint {j}: held-out RMSE {rmse}");
    }

    // Fresh transitions generated by known torques.
    let probe = collect_random(&config, 500, 99).unwrap();
    let pred = idm.predict(&probe.states, &probe.next_states).unwrap();
    let worst = pred
        .as_slice()
        .iter()
        .zip(probe.actions.as_slice())
        .map(|(p, a)| (p - a).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.1, "worst action error {worst}");

    let small = IdmSettings {
        epochs: 2,
        ..settings
    };
    let sub = collect_random(&config, 2_000, 5).unwrap();
    let (a, _) = train_inverse_model(&sub, &config, &small, 6).unwrap();
    let (b, _) = train_inverse_model(&sub, &config, &small, 6).unwrap();
    assert_eq!(a.net.fingerprint(), b.net.fingerprint());

    let tiny = collect_random(&config, 999, 5).unwrap();
    assert!(train_inverse_model(&tiny, &config, &small, 6).is_err());
}

#[test]
fn labeling_adds_one_action_per_transition() {
    let config = ArmConfig::two_link();
    let expl = collect_random(&config, 2_000, 7).unwrap();
    let settings = IdmSettings {
        epochs: 1,
        ..IdmSettings::default()
    };
    let (idm, _) = train_inverse_model(&expl, &config, &settings, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trajs: Vec<Trajectory> = (0..3)
        .map(|i| Trajectory {
            domain: Domain::Agent,
            task_id: format!("t{i}"),
            states: (0..4 + i).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            actions: None,
            reached: None,
        })
        .collect();
    let labeled = label_actions(&idm, &trajs).unwrap();
    for (l, t) in labeled.iter().zip(&trajs) {
        assert_eq!(l.actions.as_ref().unwrap().len(), t.len() - 1);
        assert_eq!(l.states, t.states);
    }
    assert_eq!(label_actions(&idm, &trajs).unwrap(), labeled);

    let wide = Trajectory {
        states: vec![vec![0.0; 8]; 3],
        ..trajs[0].clone()
    };
    assert!(label_actions(&idm, &[wide]).is_err());
}

#[test]
fn cloning_a_constant_action() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target = [0.3, -0.6];
    let trajs: Vec<Trajectory> = (0..10)
        .map(|_| {
            let states: Vec<Vec<f64>> = (0..20).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            Trajectory {
                domain: Domain::Agent,
                task_id: "c".into(),
                actions: Some(vec![target.to_vec(); states.len() - 1]),
                states,
                reached: None,
            }
        })
        .collect();
    let settings = BcSettings {
        epochs: 1000,
        ..BcSettings::default()
    };
    let (policy, report) = behavioral_cloning(&trajs, 1.0, &settings, 11).unwrap();
    assert_eq!(report.epoch_losses.len(), 1000);
    let smoothed: Vec<f64> = report.epoch_losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0] * 1.05), "{smoothed:?}");
    let states: Vec<Vec<f64>> = trajs.iter().flat_map(|t| t.states[..t.len() - 1].to_vec()).collect();
    let acts = policy.act_matrix(&Matrix::from_rows(&states).unwrap()).unwrap();
    for r in 0..acts.rows() {
        for (c, want) in target.iter().enumerate() {
            assert!((acts.get(r, c) - want).abs() < 0.01, "{} vs {want}", acts.get(r, c));
        }
    }

    let (again, _) = behavioral_cloning(&trajs, 1.0, &settings, 11).unwrap();
    assert_eq!(again.net.fingerprint(), policy.net.fingerprint());
    assert!(behavioral_cloning(&[], 1.0, &settings, 11).is_err());
}

#[test]
fn expert_and_random_references_anchor_the_score() {
    let sc = make_scenario(ScenarioName::SelfDomain);
    let refs = reference_returns(&sc.agent, sc.agent_gains, &sc.inference_tasks, 5, 12).unwrap();
    let mut expert = ExpertController::new(&sc.agent, sc.agent_gains).unwrap();
    let report = evaluate_policy(&mut expert, &sc.agent, &sc.inference_tasks, &refs).unwrap();
    assert!((report.normalized - 1.0).abs() <= 0.02, "{}", report.normalized);
    let mut random = RandomController::new(&sc.agent);
    let report = evaluate_policy(&mut random, &sc.agent, &sc.inference_tasks, &refs).unwrap();
    assert!(report.normalized.abs() <= 0.02, "{}", report.normalized);
    let again = evaluate_policy(&mut random, &sc.agent, &sc.inference_tasks, &refs).unwrap();
    assert_eq!(again, report);
}

#[test]
fn normalization_rejects_broken_references() {
    let ok = TaskReference {
        task_id: "t".into(),
        expert_return: -2.0,
        random_return: -10.0,
    };
    assert_eq!(normalized_score(-6.0, &ok).unwrap(), 0.5);
    assert_eq!(normalized_score(100.0, &ok).unwrap(), 1.5);
    assert_eq!(normalized_score(-100.0, &ok).unwrap(), -0.5);
    let broken = TaskReference {
        expert_return: -10.0,
        ..ok
    };
    assert!(normalized_score(-6.0, &broken).is_err());
}

#[test]
fn self_demos_clone_to_expert_level() {
    let sc = make_scenario(ScenarioName::SelfDomain);
    let expl = collect_random(&sc.agent, DEFAULT_EXPLORATION_STEPS, 13).unwrap();
    let (idm, _) = train_inverse_model(&expl, &sc.agent, &IdmSettings::default(), 14).unwrap();
    let mut demos: Vec<Trajectory> = Vec::new();
    for (i, task) in sc.inference_tasks.iter().enumerate() {
        let request = DemoRequest {
            domain: Domain::Agent,
            task: task.clone(),
            num_trajectories: 64,
            record_actions: false,
            seed: 100 + i as u64,
        };
        demos.extend(generate_demos(&request, &sc.agent, sc.agent_gains).unwrap());
    }
    let labeled = label_actions(&idm, &demos).unwrap();
    let (policy, _) = behavioral_cloning(&labeled, sc.agent.torque_limit, &BcSettings::default(), 15).unwrap();
    let refs = reference_returns(&sc.agent, sc.agent_gains, &sc.inference_tasks, 20, 16).unwrap();
    let mut policy = policy;
    let report = evaluate_policy(&mut policy, &sc.agent, &sc.inference_tasks, &refs).unwrap();
    assert!(report.normalized >= 0.9, "self-demo score {}", report.normalized);
}
