use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, PayoffTable, Transition};
use crate::error::{Error, Result};

/// Matrix game whose payoff depends on a hidden state drawn once per
/// episode. Each step every agent receives an independent noisy reading of
/// the state: the true state with probability `rho`, otherwise a uniformly
/// random one.
///
/// Per-agent observation: one-hot state reading ++ one-hot step index.
/// Global state: one-hot of the hidden state.
#[derive(Clone, Debug)]
pub struct LatentStateMatrixGame {
    spec: EnvSpec,
    payoffs: Vec<PayoffTable>,
    initial: Vec<f64>,
    rho: f64,
    rng: ChaCha8Rng,
    state: usize,
    t: usize,
    done: bool,
    readings: Vec<Vec<usize>>,
    current_obs: Vec<Vec<f64>>,
}

impl LatentStateMatrixGame {
    pub fn new(
        payoffs: Vec<PayoffTable>,
        initial: Vec<f64>,
        rho: f64,
        horizon: usize,
        discount: f64,
    ) -> Result<Self> {
        let n_states = payoffs.len();
        if n_states == 0 {
            return Err(Error::Config("latent game needs at least one state".into()));
        }
        let counts = payoffs[0].action_counts().to_vec();
        if payoffs.iter().any(|p| p.action_counts() != counts.as_slice()) {
            return Err(Error::Config("all per-state payoffs must share a shape".into()));
        }
        if initial.len() != n_states
            || initial.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("p0 must be a distribution over states".into()));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config("rho must lie in [0, 1]".into()));
        }
        let spec = EnvSpec::new(counts, n_states + horizon, n_states, horizon, discount)?;
        let n = spec.n_agents;
        Ok(Self {
            spec,
            payoffs,
            initial,
            rho,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: 0,
            t: 0,
            done: true,
            readings: vec![Vec::new(); n],
            current_obs: Vec::new(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.payoffs.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn payoffs(&self) -> &[PayoffTable] {
        &self.payoffs
    }

    pub fn hidden_state(&self) -> usize {
        self.state
    }

    /// State readings each agent has received so far this episode.
    pub fn readings(&self) -> &[Vec<usize>] {
        &self.readings
    }

    /// Probability that one agent reads `reading` when the state is `state`.
    pub fn reading_likelihood(&self, reading: usize, state: usize) -> f64 {
        let s = self.n_states() as f64;
        let hit = if reading == state { self.rho } else { 0.0 };
        hit + (1.0 - self.rho) / s
    }

    /// Encodes one agent's observation for a reading at step `t`.
    pub fn encode_observation(&self, reading: usize, t: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.spec.obs_dim];
        obs[reading] = 1.0;
        obs[self.n_states() + t] = 1.0;
        obs
    }

    pub fn encode_state(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[state] = 1.0;
        v
    }

    /// Exact `Pr(s | readings)` by Bayes' rule; readings are conditionally
    /// independent across agents and steps given the state.
    pub fn state_posterior(&self, joint_history: &[Vec<usize>]) -> Result<Vec<f64>> {
        let n = self.n_states();
        let mut post = self.initial.clone();
        for (s, p) in post.iter_mut().enumerate() {
            for &r in joint_history.iter().flatten() {
                if r >= n {
                    return Err(Error::ZeroProbabilityHistory);
                }
                *p *= self.reading_likelihood(r, s);
            }
        }
        let z: f64 = post.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ZeroProbabilityHistory);
        }
        post.iter_mut().for_each(|p| *p /= z);
        Ok(post)
    }

    fn sample_reading(&mut self) -> usize {
        if self.rng.gen::<f64>() < self.rho {
            self.state
        } else {
            self.rng.gen_range(0..self.n_states())
        }
    }

    fn sample_state(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (s, &p) in self.initial.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        // rounding slack: last state with positive mass
        self.initial.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn observe(&mut self) -> Vec<Vec<f64>> {
        let n = self.spec.n_agents;
        let mut obs = Vec::with_capacity(n);
        for i in 0..n {
            let r = self.sample_reading();
            self.readings[i].push(r);
            obs.push(self.encode_observation(r, self.t));
        }
        obs
    }
}

impl Environment for LatentStateMatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.sample_state();
        self.t = 0;
        self.done = false;
        self.readings.iter_mut().for_each(Vec::clear);
        self.current_obs = self.observe();
        (self.current_obs.clone(), self.encode_state(self.state))
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        self.spec.check_joint_action(joint_action)?;
        let reward = self.payoffs[self.state].get(joint_action);
        let state = self.encode_state(self.state);
        self.t += 1;
        let terminal = self.t >= self.spec.horizon;
        let next_obs = if terminal {
            vec![vec![0.0; self.spec.obs_dim]; self.spec.n_agents]
        } else {
            self.observe()
        };
        self.done = terminal;
        let joint_obs = std::mem::replace(&mut self.current_obs, next_obs.clone());
        Ok(Transition {
            joint_obs,
            state: state.clone(),
            joint_action: joint_action.to_vec(),
            reward,
            next_joint_obs: next_obs,
            next_state: state,
            terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn game(p0: Vec<f64>, rho: f64, horizon: usize) -> LatentStateMatrixGame {
        let a = PayoffTable::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = PayoffTable::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap();
        LatentStateMatrixGame::new(vec![a, b], p0, rho, horizon, 0.99).unwrap()
    }

    #[test]
    fn deterministic_start_and_noiseless_channel() {
        let mut env = game(vec![1.0, 0.0], 1.0, 2);
        for seed in 0..20 {
            let (obs, state) = env.reset(seed);
            assert_eq!(state, vec![1.0, 0.0]);
            for o in &obs {
                assert_eq!(&o[..2], &[1.0, 0.0]);
                assert_eq!(&o[2..], &[1.0, 0.0]);
            }
        }
    }

    #[test]
    fn horizon_bookkeeping() {
        let mut env = game(vec![0.5, 0.5], 0.8, 2);
        env.reset(3);
        let first = env.step(&[0, 0]).unwrap();
        assert!(!first.terminal);
        assert_eq!(first.next_joint_obs[0][3], 1.0);
        let second = env.step(&[1, 1]).unwrap();
        assert!(second.terminal);
        assert!(env.step(&[0, 0]).is_err());
        assert_eq!(env.readings()[0].len(), 2);
    }

    #[test]
    fn posterior_examples() {
        let env = game(vec![0.5, 0.5], 1.0, 2);
        let post = env.state_posterior(&[vec![0], vec![0]]).unwrap();
        assert_eq!(post, vec![1.0, 0.0]);

        let env = game(vec![0.3, 0.7], 0.0, 2);
        let post = env.state_posterior(&[vec![0, 1], vec![1, 1]]).unwrap();
        assert!((post[0] - 0.3).abs() < 1e-15 && (post[1] - 0.7).abs() < 1e-15);

        // per-reading likelihood 0.9 under s = 0 and 0.1 under s = 1
        let env = game(vec![0.5, 0.5], 0.8, 2);
        let post = env.state_posterior(&[vec![0], vec![0]]).unwrap();
        assert!((post[0] - 0.81 / 0.82).abs() < 1e-12);
        assert!((post[1] - 0.01 / 0.82).abs() < 1e-12);
    }

    #[test]
    fn impossible_history_is_an_error() {
        let env = game(vec![1.0, 0.0], 1.0, 2);
        assert!(matches!(
            env.state_posterior(&[vec![1], vec![0]]),
            Err(Error::ZeroProbabilityHistory)
        ));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let a = PayoffTable::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(LatentStateMatrixGame::new(vec![a.clone()], vec![0.5], 0.5, 2, 0.9).is_err());
        assert!(LatentStateMatrixGame::new(vec![a], vec![1.0], 1.5, 2, 0.9).is_err());
    }
}
