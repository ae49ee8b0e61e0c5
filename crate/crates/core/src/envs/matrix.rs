use super::{EnvSpec, Environment, PayoffTable, Transition};
use crate::error::{Error, Result};

/// One-shot cooperative game: every agent acts once and the team receives
/// `payoff[joint_action]`. Observations and state are a constant zero.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    spec: EnvSpec,
    payoff: PayoffTable,
    done: bool,
}

impl MatrixGame {
    pub fn new(payoff: PayoffTable, discount: f64) -> Result<Self> {
        let spec = EnvSpec::new(payoff.action_counts().to_vec(), 1, 1, 1, discount)?;
        Ok(Self {
            spec,
            payoff,
            done: true,
        })
    }

    /// The classic non-monotonic 3×3 penalty game: coordinating on action 0
    /// pays 8, miscoordinating with it costs 12, everything else pays 0.
    pub fn penalty() -> Self {
        let payoff = PayoffTable::from_rows(&[
            &[8.0, -12.0, -12.0],
            &[-12.0, 0.0, 0.0],
            &[-12.0, 0.0, 0.0],
        ])
        .expect("fixture");
        Self::new(payoff, 0.99).expect("fixture")
    }

    pub fn payoff(&self) -> &PayoffTable {
        &self.payoff
    }

    fn observe(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        (vec![vec![0.0]; self.spec.n_agents], vec![0.0])
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.done = false;
        self.observe()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        self.spec.check_joint_action(joint_action)?;
        self.done = true;
        let (obs, state) = self.observe();
        Ok(Transition {
            joint_obs: obs.clone(),
            state: state.clone(),
            joint_action: joint_action.to_vec(),
            reward: self.payoff.get(joint_action),
            next_joint_obs: obs,
            next_state: state,
            terminal: true,
        })
    }
}
