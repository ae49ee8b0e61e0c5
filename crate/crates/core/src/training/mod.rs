//! Joint TD learning with target networks, ε-greedy rollouts and the
//! intervention-annealing loss.

mod replay;
mod run;

use serde::{Deserialize, Serialize};

pub use replay::{Episode, ReplayBuffer, StepRecord};
pub use run::{evaluate, rollout, run_experiment, train_run, MetricRecord, RunOptions, RunSummary};

use crate::agents::{AgentTerms, UtilityNetwork};
use crate::autodiff::{AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::joint;
use crate::mixers::{ForwardOptions, Mixer, MixerInput, RowBatch};
use crate::nn::Bind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch_episodes: usize,
    /// Environment steps between target-network copies.
    pub target_sync_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_steps` over which ε decays linearly.
    pub epsilon_fraction: f64,
    pub total_steps: u64,
    pub buffer_episodes: usize,
    pub anneal_lambda_start: f64,
    pub anneal_fraction: f64,
    /// Let the annealing loss reach the fixee through `A_fixee`.
    pub anneal_through_fixee: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            gamma: 0.99,
            batch_episodes: 32,
            target_sync_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.2,
            total_steps: 50_000,
            buffer_episodes: 5000,
            anneal_lambda_start: 1.0,
            anneal_fraction: 0.05,
            anneal_through_fixee: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if self.batch_episodes == 0 || self.buffer_episodes == 0 {
            return fail("batch_episodes and buffer_episodes must be positive");
        }
        if self.target_sync_interval == 0 {
            return fail("target_sync_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return fail("anneal_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_fraction) {
            return fail("epsilon_fraction must lie in [0, 1]");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return fail("epsilon values must lie in [0, 1]");
            }
        }
        if !(self.anneal_lambda_start.is_finite() && self.anneal_lambda_start >= 0.0) {
            return fail("anneal_lambda_start must be non-negative");
        }
        Ok(())
    }
}

/// Linear decay from 1 to 0 over `fraction · total` steps; 0 when the
/// window is empty.
fn linear_decay(step: u64, fraction: f64, total: u64) -> f64 {
    let window = fraction * total as f64;
    if window <= 0.0 {
        return 0.0;
    }
    (1.0 - step as f64 / window).max(0.0)
}

/// `λ_Δ` at an environment step.
pub fn anneal_weight(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.anneal_lambda_start * linear_decay(step, cfg.anneal_fraction, cfg.total_steps)
}

pub fn epsilon(step: u64, cfg: &TrainConfig) -> f64 {
    let r = linear_decay(step, cfg.epsilon_fraction, cfg.total_steps);
    cfg.epsilon_end + (cfg.epsilon_start - cfg.epsilon_end) * r
}

/// Bootstrapped target `r + γ·(1 − terminal)·max_next`.
pub fn td_target(reward: f64, gamma: f64, max_next: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * max_next
    }
}

/// `½·mean((y − Q)²)` with `y` built from `target` behind a stop-gradient.
pub fn td_loss(g: &mut Graph, q: Var, rewards: &[f64], gamma: f64, target: Var, terminal: &[bool]) -> Result<Var> {
    let target = g.stop_gradient(target);
    let mask: Vec<f64> = terminal.iter().map(|&t| if t { 0.0 } else { gamma }).collect();
    let mask = g.constant(Tensor::vector(mask));
    let r = g.constant(Tensor::vector(rewards.to_vec()));
    let boot = g.mul(mask, target)?;
    let y = g.add(r, boot)?;
    g.mse(q, y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub td_loss: f64,
    /// `λ_Δ · mean Δ²`, the weighted auxiliary term.
    pub anneal_loss: f64,
    pub grad_norm: f64,
    pub lambda_delta: f64,
}

/// Agents, mixer, online and target parameters.
#[derive(Clone, Debug)]
pub struct Learner {
    pub agents: UtilityNetwork,
    pub mixer: Mixer,
    pub params: ParamStore,
    pub target: ParamStore,
    pub cfg: TrainConfig,
    adam: AdamConfig,
}

/// Conditioning vector for one step: all windows, then the state.
pub fn condition(mixer: &Mixer, windows: &[Vec<f64>], state: &[f64]) -> Vec<f64> {
    let history: Vec<f64> = windows.iter().flatten().copied().collect();
    mixer.spec().conditioning.build(&history, state)
}

impl Learner {
    /// `params` holds both agent and mixer parameters.
    pub fn new(agents: UtilityNetwork, mixer: Mixer, params: ParamStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let target = params.values_only();
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            agents,
            mixer,
            params,
            target,
            cfg,
            adam,
        })
    }

    pub fn sync_target(&mut self) {
        self.target.copy_values_from(&self.params);
    }

    fn agent_terms(
        &self,
        g: &mut Graph,
        bind: Bind<'_>,
        windows: &[Vec<&[f64]>],
        actions: Option<&[Vec<usize>]>,
    ) -> Result<(Vec<AgentTerms>, Vec<Vec<usize>>)> {
        let mut terms = Vec::with_capacity(windows.len());
        let mut chosen = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            let util = self.agents.utilities(g, bind, i, w)?;
            let a = match actions {
                Some(a) => a[i].clone(),
                None => g.argmax_last_dim(util),
            };
            terms.push(AgentTerms::at_actions(g, util, &a)?);
            chosen.push(a);
        }
        Ok((terms, chosen))
    }

    fn mixer_inputs(&self, g: &mut Graph, conds: Vec<f64>, rows: usize, actions: &[Vec<usize>]) -> Result<(Var, Var)> {
        let counts = &self.mixer.dims().action_counts;
        let cond = g.constant(Tensor::new(vec![rows, self.mixer.cond_dim()], conds)?);
        let mut onehot = Vec::with_capacity(rows * self.mixer.dims().onehot_dim());
        for r in 0..rows {
            let ja: Vec<usize> = actions.iter().map(|a| a[r]).collect();
            onehot.extend(joint::one_hot(counts, &ja));
        }
        let onehot = g.constant(Tensor::new(vec![rows, self.mixer.dims().onehot_dim()], onehot)?);
        Ok((cond, onehot))
    }

    /// Decentralised greedy target: each agent's argmax under the target
    /// utilities, then the target mixer at that joint action.
    pub fn greedy_joint_target(&self, next_windows: &[&[Vec<f64>]], next_states: &[&[f64]]) -> Result<Vec<f64>> {
        let rows = next_windows.len();
        if rows == 0 {
            return Ok(Vec::new());
        }
        let n = self.agents.n_agents();
        let per_agent: Vec<Vec<&[f64]>> = (0..n)
            .map(|i| next_windows.iter().map(|w| w[i].as_slice()).collect())
            .collect();
        let mut g = Graph::new();
        let bind = Bind::frozen(&self.target);
        let (terms, chosen) = self.agent_terms(&mut g, bind, &per_agent, None)?;
        let conds: Vec<f64> = next_windows
            .iter()
            .zip(next_states)
            .flat_map(|(w, s)| condition(&self.mixer, w, s))
            .collect();
        let (cond, onehot) = self.mixer_inputs(&mut g, conds, rows, &chosen)?;
        let input = MixerInput {
            terms: &terms,
            cond: Some(cond),
            joint_onehot: Some(onehot),
        };
        let out = self.mixer.forward(&mut g, bind, &input, ForwardOptions::default())?;
        Ok(g.value(out.q).data().to_vec())
    }

    /// Exhaustive maximum of the target joint value over all joint actions.
    pub fn exhaustive_joint_target(&self, next_windows: &[Vec<f64>], next_state: &[f64]) -> Result<f64> {
        let utilities = (0..self.agents.n_agents())
            .map(|i| self.agents.utilities_of(&self.target, i, &next_windows[i]))
            .collect::<Result<Vec<_>>>()?;
        let cond = condition(&self.mixer, next_windows, next_state);
        let rows = RowBatch::all_joint_actions(self.mixer.dims(), &utilities, &cond)?;
        let mut g = Graph::new();
        let out = rows.forward(&self.mixer, &mut g, Bind::frozen(&self.target), ForwardOptions::default())?;
        Ok(g.value(out.q).data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// One gradient step on a batch of steps. `env_step` sets `λ_Δ`.
    pub fn train_step(&mut self, batch: &[&StepRecord], env_step: u64, seed: u64) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let rows = batch.len();
        let n = self.agents.n_agents();
        let next_w: Vec<&[Vec<f64>]> = batch.iter().map(|r| r.next_windows.as_slice()).collect();
        let next_s: Vec<&[f64]> = batch.iter().map(|r| r.next_state.as_slice()).collect();
        let max_next = self.greedy_joint_target(&next_w, &next_s)?;

        let mut g = Graph::new();
        let bind = Bind::train(&self.params);
        let per_agent: Vec<Vec<&[f64]>> = (0..n)
            .map(|i| batch.iter().map(|r| r.windows[i].as_slice()).collect())
            .collect();
        let actions: Vec<Vec<usize>> = (0..n)
            .map(|i| batch.iter().map(|r| r.joint_action[i]).collect())
            .collect();
        let (terms, _) = self.agent_terms(&mut g, bind, &per_agent, Some(&actions))?;
        let conds: Vec<f64> = batch
            .iter()
            .flat_map(|r| condition(&self.mixer, &r.windows, &r.state))
            .collect();
        let (cond, onehot) = self.mixer_inputs(&mut g, conds, rows, &actions)?;
        let input = MixerInput {
            terms: &terms,
            cond: Some(cond),
            joint_onehot: Some(onehot),
        };
        let opts = ForwardOptions {
            delta_through_fixee: self.cfg.anneal_through_fixee,
        };
        let out = self.mixer.forward(&mut g, bind, &input, opts)?;

        let rewards: Vec<f64> = batch.iter().map(|r| r.reward).collect();
        let terminal: Vec<bool> = batch.iter().map(|r| r.terminal).collect();
        let target = g.constant(Tensor::vector(max_next));
        let td = td_loss(&mut g, out.q, &rewards, self.cfg.gamma, target, &terminal)?;

        let lambda = anneal_weight(env_step, &self.cfg);
        let mut total = td;
        let mut anneal = 0.0;
        if let (Some(delta), true) = (out.delta, lambda > 0.0) {
            let sq = g.mul(delta, delta)?;
            let m = g.mean(sq);
            let term = g.scale(m, lambda);
            anneal = g.value(term).item();
            total = g.add(td, term)?;
        }
        let td_value = g.value(td).item();
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(self.diverged(env_step, seed, format!("loss {total_value}")));
        }
        let grads = g.backward(total)?.by_name();
        let grad_norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if let Err(e) = self.params.adam_step(&grads, &self.adam) {
            return Err(match e {
                Error::NonFiniteGradient(_) => self.diverged(env_step, seed, e.to_string()),
                other => other,
            });
        }
        Ok(StepMetrics {
            td_loss: td_value,
            anneal_loss: anneal,
            grad_norm,
            lambda_delta: lambda,
        })
    }

    fn diverged(&self, step: u64, seed: u64, cause: String) -> Error {
        let norms = serde_json::to_string(&self.params.norms()).unwrap_or_default();
        Error::Diverged {
            step,
            seed,
            detail: format!("{cause}; parameter norms {norms}"),
        }
    }
}

#[cfg(test)]
mod tests;
