//! Small cooperative Dec-POMDPs with enumerable joint action spaces.

mod latent;
mod matrix;
mod payoff;

use serde::{Deserialize, Serialize};

pub use latent::LatentStateMatrixGame;
pub use matrix::MatrixGame;
pub use payoff::PayoffTable;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub action_counts: Vec<usize>,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub discount: f64,
}

impl EnvSpec {
    pub fn new(
        action_counts: Vec<usize>,
        obs_dim: usize,
        state_dim: usize,
        horizon: usize,
        discount: f64,
    ) -> Result<Self> {
        if action_counts.len() < 2 {
            return Err(Error::Config("need at least two agents".into()));
        }
        if action_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config("every agent needs at least two actions".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        Ok(Self {
            n_agents: action_counts.len(),
            action_counts,
            obs_dim,
            state_dim,
            horizon,
            discount,
        })
    }

    pub fn check_joint_action(&self, joint_action: &[usize]) -> Result<()> {
        if joint_action.len() != self.n_agents {
            return Err(Error::Shape {
                op: "step",
                lhs: vec![self.n_agents],
                rhs: vec![joint_action.len()],
            });
        }
        for (agent, (&action, &count)) in joint_action.iter().zip(&self.action_counts).enumerate() {
            if action >= count {
                return Err(Error::ActionOutOfRange {
                    agent,
                    action,
                    count,
                });
            }
        }
        Ok(())
    }
}

/// One environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub joint_obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub joint_action: Vec<usize>,
    pub reward: f64,
    pub next_joint_obs: Vec<Vec<f64>>,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Starts an episode; returns the first joint observation and the state.
    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>);

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition>;
}

fn default_gamma() -> f64 {
    0.99
}

/// JSON description of an environment fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvConfig {
    Matrix {
        payoff: PayoffTable,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    Latent {
        payoff_per_state: Vec<PayoffTable>,
        rho: f64,
        horizon: usize,
        p0: Vec<f64>,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

impl EnvConfig {
    pub fn penalty() -> Self {
        EnvConfig::Matrix {
            payoff: MatrixGame::penalty().payoff().clone(),
            gamma: default_gamma(),
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Matrix { payoff, gamma } => Env::Matrix(MatrixGame::new(payoff.clone(), *gamma)?),
            EnvConfig::Latent {
                payoff_per_state,
                rho,
                horizon,
                p0,
                gamma,
            } => Env::Latent(LatentStateMatrixGame::new(
                payoff_per_state.clone(),
                p0.clone(),
                *rho,
                *horizon,
                *gamma,
            )?),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Env {
    Matrix(MatrixGame),
    Latent(LatentStateMatrixGame),
}

impl Env {
    /// Largest achievable single-episode return, when it is known in closed
    /// form (matrix games only).
    pub fn optimal_return(&self) -> Option<f64> {
        match self {
            Env::Matrix(m) => Some(m.payoff().max()),
            Env::Latent(_) => None,
        }
    }
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::Matrix(e) => e.spec(),
            Env::Latent(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            Env::Matrix(e) => e.reset(seed),
            Env::Latent(e) => e.reset(seed),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        match self {
            Env::Matrix(e) => e.step(joint_action),
            Env::Latent(e) => e.step(joint_action),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fixtures_load_from_json() {
        let cfg: EnvConfig = serde_json::from_value(json!({
            "type": "matrix",
            "payoff": [[8, -12, -12], [-12, 0, 0], [-12, 0, 0]]
        }))
        .unwrap();
        assert_eq!(cfg, EnvConfig::penalty());
        let env = cfg.build().unwrap();
        assert_eq!(env.spec().action_counts, vec![3, 3]);
        assert_eq!(env.optimal_return(), Some(8.0));

        let cfg: EnvConfig = serde_json::from_value(json!({
            "type": "latent",
            "payoff_per_state": [[[1, 0], [0, 0]], [[0, 0], [0, 1]]],
            "rho": 0.8,
            "horizon": 3,
            "p0": [0.5, 0.5]
        }))
        .unwrap();
        let env = cfg.build().unwrap();
        assert_eq!(env.spec().obs_dim, 5);
        assert_eq!(env.spec().state_dim, 2);
    }

    #[test]
    fn unknown_fields_and_types_are_rejected() {
        assert!(serde_json::from_value::<EnvConfig>(json!({"type": "grid"})).is_err());
        assert!(serde_json::from_value::<EnvConfig>(json!({
            "type": "matrix", "payoff": [[1, 2], [3, 4]], "extra": 1
        }))
        .is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EnvSpec::new(vec![3], 1, 1, 1, 0.9).is_err());
        assert!(EnvSpec::new(vec![3, 1], 1, 1, 1, 0.9).is_err());
        assert!(EnvSpec::new(vec![3, 3], 1, 1, 0, 0.9).is_err());
        assert!(EnvSpec::new(vec![3, 3], 1, 1, 1, 1.0).is_err());
    }
}
