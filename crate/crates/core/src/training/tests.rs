use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agents::AgentConfig;
use crate::envs::EnvSpec;
use crate::mixers::{MixerDims, MixerKind, MixerSpec};

#[test]
fn td_loss_examples() {
    let mut g = Graph::new();
    let q = g.variable(Tensor::vector(vec![2.5]));
    let t = g.constant(Tensor::vector(vec![2.0]));
    let loss = td_loss(&mut g, q, &[1.0], 0.9, t, &[false]).unwrap();
    assert!((g.value(loss).item() - 0.045).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    assert!((grads.wrt(q).unwrap().item() + 0.3).abs() < 1e-12);

    let mut g = Graph::new();
    let q = g.variable(Tensor::vector(vec![1.0]));
    let t = g.constant(Tensor::vector(vec![123.0]));
    let loss = td_loss(&mut g, q, &[1.0], 0.9, t, &[true]).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    assert_eq!(td_target(1.0, 0.9, 2.0, false), 1.0 + 0.9 * 2.0);
}

#[test]
fn td_target_branch_has_no_gradient() {
    let mut g = Graph::new();
    let q = g.variable(Tensor::vector(vec![0.5, -1.0]));
    let t = g.variable(Tensor::vector(vec![3.0, 4.0]));
    let loss = td_loss(&mut g, q, &[0.0, 1.0], 0.99, t, &[false, false]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt_or_zero(&g, t).data(), &[0.0, 0.0]);
    assert!(grads.wrt(q).unwrap().data().iter().all(|x| *x != 0.0));
}

#[test]
fn anneal_schedule() {
    let cfg = TrainConfig {
        total_steps: 100_000,
        ..TrainConfig::default()
    };
    assert_eq!(anneal_weight(0, &cfg), 1.0);
    assert_eq!(anneal_weight(5000, &cfg), 0.0);
    assert!((anneal_weight(2500, &cfg) - 0.5).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for s in (0..10_000).step_by(37) {
        let w = anneal_weight(s, &cfg);
        assert!(w <= prev);
        prev = w;
    }
    assert_eq!(prev, 0.0);
    let off = TrainConfig {
        anneal_fraction: 0.0,
        ..cfg
    };
    assert_eq!(anneal_weight(0, &off), 0.0);
}

#[test]
fn epsilon_schedule() {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(epsilon(0, &cfg), 1.0);
    assert!((epsilon(100, &cfg) - 0.525).abs() < 1e-12);
    assert_eq!(epsilon(200, &cfg), 0.05);
    assert_eq!(epsilon(900, &cfg), 0.05);
}

fn learner(kind: MixerKind, counts: Vec<usize>, shared: bool, seed: u64) -> Learner {
    let spec = EnvSpec::new(counts.clone(), 2, 2, 2, 0.9).unwrap();
    let agents = UtilityNetwork::new(
        AgentConfig {
            window: 2,
            hidden: 8,
            shared,
        },
        &spec,
    )
    .unwrap();
    let dims = MixerDims {
        action_counts: counts,
        history_dim: agents.joint_window_dim(),
        state_dim: 2,
    };
    let mixer = Mixer::new(MixerSpec::new(kind).with_widths(8), dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = agents.init(&mut rng);
    params.extend(mixer.init(&mut rng));
    Learner::new(agents, mixer, params, TrainConfig::default()).unwrap()
}

fn random_windows(l: &Learner, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w = (0..l.agents.n_agents())
        .map(|i| (0..l.agents.window_dim(i)).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (w, vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
}

#[test]
fn greedy_target_matches_exhaustive_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in MixerKind::ALL {
        for inst in 0..60 {
            let l = learner(kind, vec![3, 3], true, inst);
            let (w, s) = random_windows(&l, &mut rng);
            let greedy = l.greedy_joint_target(&[&w], &[&s]).unwrap()[0];
            let exhaustive = l.exhaustive_joint_target(&w, &s).unwrap();
            assert!((greedy - exhaustive).abs() < 1e-9, "{kind}: {greedy} vs {exhaustive}");
        }
    }
}

#[test]
fn vdn_target_is_sum_of_maxima() {
    let l = learner(MixerKind::Vdn, vec![2, 2], false, 0);
    let mut l = l;
    l.agents.net(0).set_constant_output(&mut l.target, &[0.0, 1.0]).unwrap();
    l.agents.net(1).set_constant_output(&mut l.target, &[2.0, 0.0]).unwrap();
    let (w, s) = random_windows(&l, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(l.greedy_joint_target(&[&w], &[&s]).unwrap(), vec![3.0]);
}

fn record(l: &Learner, reward: f64, rng: &mut impl Rng) -> StepRecord {
    let (windows, state) = random_windows(l, rng);
    let (next_windows, next_state) = random_windows(l, rng);
    StepRecord {
        windows,
        next_windows,
        state,
        next_state,
        joint_action: vec![rng.gen_range(0..2), rng.gen_range(0..2)],
        reward,
        terminal: false,
    }
}

#[test]
fn zero_lambda_gives_pure_td_loss() {
    let mut l = learner(MixerKind::QplusfixSum, vec![2, 2], true, 4);
    l.cfg.anneal_lambda_start = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let recs: Vec<StepRecord> = (0..8).map(|_| record(&l, 1.0, &mut rng)).collect();
    let batch: Vec<&StepRecord> = recs.iter().collect();
    let m = l.train_step(&batch, 0, 0).unwrap();
    assert_eq!(m.anneal_loss, 0.0);
    assert_eq!(m.lambda_delta, 0.0);
    assert!(m.td_loss > 0.0);

    let mut l = learner(MixerKind::QplusfixSum, vec![2, 2], true, 4);
    let m = l.train_step(&batch, 0, 0).unwrap();
    assert!(m.anneal_loss > 0.0 && m.lambda_delta == 1.0);
}

#[test]
fn zero_reward_zero_params_is_a_fixed_point() {
    let mut l = learner(MixerKind::QplusfixMono, vec![2, 2], true, 9);
    let names: Vec<String> = l.params.names().map(String::from).collect();
    for n in &names {
        let shape = l.params.get(n).unwrap().shape().to_vec();
        l.params.set(n, Tensor::zeros(&shape)).unwrap();
    }
    l.sync_target();
    let before = l.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs: Vec<StepRecord> = (0..4).map(|_| record(&l, 0.0, &mut rng)).collect();
    let batch: Vec<&StepRecord> = recs.iter().collect();
    for _ in 0..5 {
        let m = l.train_step(&batch, 10_000, 0).unwrap();
        assert_eq!(m.td_loss, 0.0);
    }
    for (name, t) in before.iter() {
        for (a, b) in t.data().iter().zip(l.params.get(name).unwrap().data()) {
            assert!((a - b).abs() < 1e-6, "{name} drifted");
        }
    }
}

#[test]
fn non_finite_reward_reports_divergence() {
    let mut l = learner(MixerKind::Vdn, vec![2, 2], true, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs = [record(&l, f64::NAN, &mut rng)];
    let batch: Vec<&StepRecord> = recs.iter().collect();
    match l.train_step(&batch, 17, 3) {
        Err(Error::Diverged { step, seed, detail }) => {
            assert_eq!((step, seed), (17, 3));
            assert!(detail.contains("agent.shared"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn tiny_run(total_steps: u64) -> (Vec<MetricRecord>, RunSummary) {
    let cfg = TrainConfig {
        total_steps,
        batch_episodes: 4,
        ..TrainConfig::default()
    };
    let opts = RunOptions {
        master_seed: 1,
        eval_interval: 40,
        eval_episodes: 2,
    };
    let mut out = Vec::new();
    let summary = run_experiment(
        &crate::envs::EnvConfig::penalty(),
        &MixerSpec::new(MixerKind::QplusfixSum),
        &AgentConfig::default(),
        &cfg,
        &opts,
        7,
        &mut |r| {
            out.push(r.clone());
            Ok(())
        },
    )
    .unwrap();
    (out, summary)
}

#[test]
fn zero_steps_emit_only_initial_record() {
    let (records, summary) = tiny_run(0);
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].step, 0);
    assert_eq!(records[0].td_loss, None);
    assert_eq!(summary.updates, 0);
}

#[test]
fn runs_are_reproducible() {
    let (a, sa) = tiny_run(100);
    let (b, sb) = tiny_run(100);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 40, 80, 100]);
    assert_eq!(sa.updates, 97);
}
