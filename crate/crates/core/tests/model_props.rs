use std::collections::BTreeMap;

use proptest::prelude::*;
use qfix::agents::{decompose, AgentConfig, AgentTerms, UtilityNetwork};
use qfix::autodiff::{Graph, Tensor};
use qfix::envs::{EnvSpec, Environment, LatentStateMatrixGame, PayoffTable};
use qfix::mixers::{ForwardOptions, Mixer, MixerDims, MixerKind, MixerSpec, RowBatch};
use qfix::nn::Bind;
use qfix::training::{anneal_weight, rollout, Learner, StepRecord, TrainConfig};
use qfix::verification::{fixee_recovery_error, random_utilities, reparameterization_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latent_game(rng: &mut ChaCha8Rng, n_states: usize, horizon: usize) -> LatentStateMatrixGame {
    let payoffs = (0..n_states)
        .map(|_| PayoffTable::new(vec![2, 2], (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
        .collect();
    let mut p0: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = p0.iter().sum();
    p0.iter_mut().for_each(|p| *p /= z);
    let rho = rng.gen_range(0.0..1.0);
    LatentStateMatrixGame::new(payoffs, p0, rho, horizon, 0.9).unwrap()
}

/// `Pr(readings)` jointly with the state by walking the generative process
/// branch by branch: each reading is either a hit (the state) or a uniform
/// draw.
fn brute_force_joint(game: &LatentStateMatrixGame, slots: usize) -> BTreeMap<Vec<usize>, Vec<f64>> {
    let s = game.n_states();
    let mut table: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    fn walk(game: &LatentStateMatrixGame, state: usize, left: usize, prefix: &mut Vec<usize>, p: f64, table: &mut BTreeMap<Vec<usize>, Vec<f64>>) {
        if left == 0 {
            table.entry(prefix.clone()).or_insert_with(|| vec![0.0; game.n_states()])[state] += p;
            return;
        }
        let s = game.n_states();
        prefix.push(state);
        walk(game, state, left - 1, prefix, p * game.rho(), table);
        prefix.pop();
        for r in 0..s {
            prefix.push(r);
            walk(game, state, left - 1, prefix, p * (1.0 - game.rho()) / s as f64, table);
            prefix.pop();
        }
    }
    for state in 0..s {
        walk(game, state, slots, &mut Vec::new(), game.initial_distribution()[state], &mut table);
    }
    table
}

fn learner(kind: MixerKind, seed: u64) -> Learner {
    let spec = EnvSpec::new(vec![2, 2], 2, 2, 2, 0.9).unwrap();
    let agents = UtilityNetwork::new(AgentConfig { window: 2, hidden: 8, shared: true }, &spec).unwrap();
    let dims = MixerDims {
        action_counts: vec![2, 2],
        history_dim: agents.joint_window_dim(),
        state_dim: 2,
    };
    let mixer = Mixer::new(MixerSpec::new(kind).with_widths(8), dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = agents.init(&mut rng);
    params.extend(mixer.init(&mut rng));
    Learner::new(agents, mixer, params, TrainConfig::default()).unwrap()
}

fn random_record(l: &Learner, rng: &mut ChaCha8Rng) -> StepRecord {
    let mut windows = || -> Vec<Vec<f64>> {
        (0..2)
            .map(|i| (0..l.agents.window_dim(i)).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let (windows, next_windows) = (windows(), windows());
    StepRecord {
        windows,
        next_windows,
        state: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        next_state: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        joint_action: vec![rng.gen_range(0..2), rng.gen_range(0..2)],
        reward: rng.gen_range(-2.0..2.0),
        terminal: rng.gen_bool(0.3),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn posterior_is_a_distribution(seed in any::<u64>(), n_states in 1usize..=4, len in 0usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let game = latent_game(&mut rng, n_states, 4);
        let history: Vec<Vec<usize>> = (0..2).map(|_| (0..len).map(|_| rng.gen_range(0..n_states)).collect()).collect();
        let post = game.state_posterior(&history).unwrap();
        prop_assert!(post.iter().all(|&p| p >= 0.0));
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decomposed_utilities_peak_at_zero(q in prop::collection::vec(-1e6f64..1e6, 1..12)) {
        let t = decompose(&q).unwrap();
        prop_assert_eq!(t.u.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0);
        prop_assert!(t.u.iter().all(|&u| u <= 0.0));
        prop_assert_eq!(t.u[t.greedy()], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn posterior_matches_generative_enumeration(seed in any::<u64>(), n_states in 1usize..=3, horizon in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let game = latent_game(&mut rng, n_states, horizon);
        // two agents, readings laid out agent-major
        for (readings, joint) in brute_force_joint(&game, 2 * horizon) {
            let z: f64 = joint.iter().sum();
            if z == 0.0 {
                continue;
            }
            let history = vec![readings[..horizon].to_vec(), readings[horizon..].to_vec()];
            let post = game.state_posterior(&history).unwrap();
            for (p, j) in post.iter().zip(&joint) {
                prop_assert!((p - j / z).abs() < 1e-12, "{readings:?}: {post:?} vs {joint:?}");
            }
        }
    }

    #[test]
    fn greedy_rollouts_are_reproducible(seed in any::<u64>(), env_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut game = latent_game(&mut rng, 3, 3);
        let agents = UtilityNetwork::new(AgentConfig { window: 2, hidden: 8, shared: true }, game.spec()).unwrap();
        let params = agents.init(&mut rng);
        let (a, ra) = rollout(&mut game, &agents, &params, 0.0, env_seed, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, rb) = rollout(&mut game, &agents, &params, 0.0, env_seed, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(ra.to_bits(), rb.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn qmix_is_monotonic_in_every_utility(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = vec![rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let dims = MixerDims { action_counts: counts.clone(), history_dim: 3, state_dim: 2 };
        for kind in [MixerKind::Qmix, MixerKind::QfixMono, MixerKind::QplusfixMono] {
            let mixer = Mixer::new(MixerSpec::new(kind).with_widths(8), dims.clone()).unwrap();
            let store = mixer.init(&mut rng);
            let history: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cond = mixer.spec().conditioning.build(&history, &[rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
            let rows = RowBatch::all_joint_actions(&dims, &random_utilities(&mut rng, &counts), &cond).unwrap();
            let mut g = Graph::new();
            let leaves: Vec<_> = rows.utilities().iter().map(|u| g.variable(u.clone())).collect();
            let terms: Vec<AgentTerms> = leaves
                .iter()
                .zip(rows.actions())
                .map(|(&u, a)| AgentTerms::at_actions(&mut g, u, a).unwrap())
                .collect();
            let out = rows.forward_with_terms(&mixer, &mut g, Bind::frozen(&store), &terms, ForwardOptions::default()).unwrap();
            // the monotonic part is the mixer itself for QMIX, the fixee otherwise
            let mono = if kind == MixerKind::Qmix { out.q } else { out.fixee.unwrap().q };
            for row in 0..rows.len() {
                let one = {
                    let mut mask = vec![0.0; rows.len()];
                    mask[row] = 1.0;
                    let m = g.constant(Tensor::vector(mask));
                    let y = g.mul(mono, m).unwrap();
                    g.sum(y)
                };
                let grads = g.backward(one).unwrap();
                for leaf in &leaves {
                    prop_assert!(grads.wrt_or_zero(&g, *leaf).data().iter().all(|&d| d >= 0.0), "{kind}: negative slope");
                }
            }
        }
    }

    #[test]
    fn fixing_layers_recover_their_fixee(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in MixerKind::ALL.into_iter().filter(|k| k.is_fixing()) {
            let err = fixee_recovery_error(kind, &mut rng).unwrap();
            prop_assert!(err <= 1e-12, "{kind}: {err:e}");
        }
    }

    #[test]
    fn additive_fix_is_a_shifted_multiplicative_fix(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [MixerKind::QplusfixSum, MixerKind::QplusfixMono, MixerKind::QplusfixLin] {
            let err = reparameterization_error(kind, &mut rng).unwrap();
            prop_assert!(err <= 1e-12, "{kind}: {err:e}");
        }
    }

    #[test]
    fn anneal_weight_decays_to_zero(start in 0.0f64..10.0, fraction in 0.0f64..=1.0, total in 1u64..100_000) {
        let cfg = TrainConfig { anneal_lambda_start: start, anneal_fraction: fraction, total_steps: total, ..TrainConfig::default() };
        let steps: Vec<u64> = (0..=64).map(|k| total * k / 64).collect();
        let w: Vec<f64> = steps.iter().map(|&s| anneal_weight(s, &cfg)).collect();
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(w.iter().all(|&x| x >= 0.0 && x <= start));
        prop_assert_eq!(anneal_weight(total, &cfg), 0.0);
    }

    #[test]
    fn updates_never_touch_the_target_network(seed in any::<u64>(), k in 0usize..MixerKind::ALL.len()) {
        let mut l = learner(MixerKind::ALL[k], seed);
        let before: Vec<(String, Vec<u64>)> = l.target.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let recs: Vec<StepRecord> = (0..6).map(|_| random_record(&l, &mut rng)).collect();
        let batch: Vec<&StepRecord> = recs.iter().collect();
        l.train_step(&batch, 0, seed).unwrap();
        let after: Vec<(String, Vec<u64>)> = l.target.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect())).collect();
        prop_assert_eq!(before, after);
    }
}
