use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{epsilon, anneal_weight, Learner, ReplayBuffer, StepMetrics, StepRecord, TrainConfig};
use crate::agents::{select_action, AgentConfig, UtilityNetwork};
use crate::autodiff::ParamStore;
use crate::envs::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::mixers::{Mixer, MixerDims, MixerSpec};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub master_seed: u64,
    /// Environment steps between evaluations.
    pub eval_interval: u64,
    pub eval_episodes: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            master_seed: 0,
            eval_interval: 5000,
            eval_episodes: 10,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub seed: u64,
    /// Latest training losses; `null` before the first update.
    pub td_loss: Option<f64>,
    pub anneal_loss: Option<f64>,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub epsilon: f64,
    pub lambda_delta: f64,
}

/// Final per-seed outcome, one row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    pub updates: u64,
    pub final_return_mean: f64,
    pub final_return_std: f64,
    /// Greedy joint action at the first step of an evaluation episode.
    pub greedy_joint_action: Vec<usize>,
    pub final_td_loss: Option<f64>,
}

/// Plays one episode. Returns the stored steps and the undiscounted return.
pub fn rollout<E: Environment>(
    env: &mut E,
    agents: &UtilityNetwork,
    params: &ParamStore,
    eps: f64,
    env_seed: u64,
    rng: &mut impl Rng,
) -> Result<(Vec<StepRecord>, f64)> {
    let n = agents.n_agents();
    let mut windows: Vec<_> = (0..n).map(|i| agents.new_window(i)).collect();
    let (obs, mut state) = env.reset(env_seed);
    for (w, o) in windows.iter_mut().zip(&obs) {
        w.push(o, None);
    }
    let mut steps = Vec::with_capacity(env.spec().horizon);
    let mut ret = 0.0;
    loop {
        let feats: Vec<Vec<f64>> = windows.iter().map(|w| w.features()).collect();
        let mut joint_action = Vec::with_capacity(n);
        for (i, f) in feats.iter().enumerate() {
            let q = agents.utilities_of(params, i, f)?;
            joint_action.push(select_action(&q, eps, rng));
        }
        let tr = env.step(&joint_action)?;
        for ((w, o), &a) in windows.iter_mut().zip(&tr.next_joint_obs).zip(&joint_action) {
            w.push(o, Some(a));
        }
        ret += tr.reward;
        steps.push(StepRecord {
            windows: feats,
            next_windows: windows.iter().map(|w| w.features()).collect(),
            state: std::mem::take(&mut state),
            next_state: tr.next_state.clone(),
            joint_action,
            reward: tr.reward,
            terminal: tr.terminal,
        });
        state = tr.next_state;
        if tr.terminal {
            return Ok((steps, ret));
        }
    }
}

/// Greedy evaluation: mean and population standard deviation of returns,
/// plus the first joint action of the first episode.
pub fn evaluate<E: Environment>(
    env: &mut E,
    agents: &UtilityNetwork,
    params: &ParamStore,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64, Vec<usize>)> {
    let mut returns = Vec::with_capacity(episodes);
    let mut first = Vec::new();
    for k in 0..episodes.max(1) {
        let (steps, ret) = rollout(env, agents, params, 0.0, rng.gen(), rng)?;
        if k == 0 {
            first = steps[0].joint_action.clone();
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt(), first))
}

/// Trains one seed, passing every evaluation record to `sink`.
pub fn run_experiment(
    env_cfg: &EnvConfig,
    mixer_spec: &MixerSpec,
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
    run_seed: u64,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<RunSummary> {
    train_run(env_cfg, mixer_spec, agent_cfg, cfg, opts, run_seed, sink).map(|(summary, _)| summary)
}

/// [`run_experiment`], also returning the trained learner.
pub fn train_run(
    env_cfg: &EnvConfig,
    mixer_spec: &MixerSpec,
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
    run_seed: u64,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<(RunSummary, Learner)> {
    cfg.validate()?;
    if opts.eval_interval == 0 {
        return Err(Error::Config("eval_interval must be positive".into()));
    }
    let mut env = env_cfg.build()?;
    let mut eval_env = env.clone();
    let spec = env.spec().clone();
    let agents = UtilityNetwork::new(agent_cfg.clone(), &spec)?;
    let dims = MixerDims {
        action_counts: spec.action_counts.clone(),
        history_dim: agents.joint_window_dim(),
        state_dim: spec.state_dim,
    };
    let mixer = Mixer::new(mixer_spec.clone(), dims)?;

    let stream = |name: &str| seed::stream(opts.master_seed, run_seed, name);
    let mut init_rng = stream("init");
    let mut env_rng = stream("env");
    let mut explore_rng = stream("explore");
    let mut replay_rng = stream("replay");
    let mut eval_rng = stream("eval");

    let mut params = agents.init(&mut init_rng);
    params.extend(mixer.init(&mut init_rng));
    let mut learner = Learner::new(agents, mixer, params, cfg.clone())?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_episodes);

    let mut step = 0u64;
    let mut updates = 0u64;
    let mut last: Option<StepMetrics> = None;
    let mut last_sync = 0u64;

    let mut emit = |learner: &Learner, step: u64, last: Option<StepMetrics>, rng: &mut seed::Rng| -> Result<(f64, f64, Vec<usize>)> {
        let (mean, std, ja) = evaluate(&mut eval_env, &learner.agents, &learner.params, opts.eval_episodes, rng)?;
        sink(&MetricRecord {
            step,
            seed: run_seed,
            td_loss: last.map(|m| m.td_loss),
            anneal_loss: last.map(|m| m.anneal_loss),
            eval_return_mean: mean,
            eval_return_std: std,
            epsilon: epsilon(step, cfg),
            lambda_delta: anneal_weight(step, cfg),
        })?;
        Ok((mean, std, ja))
    };

    let mut final_eval = emit(&learner, 0, None, &mut eval_rng)?;
    let mut last_eval_step = 0;
    let mut next_eval = opts.eval_interval;

    while step < cfg.total_steps {
        let eps = epsilon(step, cfg);
        let (episode, _) = rollout(&mut env, &learner.agents, &learner.params, eps, env_rng.gen(), &mut explore_rng)?;
        step += episode.len() as u64;
        buffer.push(episode);

        if buffer.len() >= cfg.batch_episodes {
            let sampled = buffer.sample(cfg.batch_episodes, &mut replay_rng);
            let batch: Vec<&StepRecord> = sampled.into_iter().flatten().collect();
            last = Some(learner.train_step(&batch, step, run_seed)?);
            updates += 1;
        }
        if step - last_sync >= cfg.target_sync_interval {
            learner.sync_target();
            last_sync = step;
        }
        if step >= next_eval {
            final_eval = emit(&learner, step, last, &mut eval_rng)?;
            last_eval_step = step;
            while next_eval <= step {
                next_eval += opts.eval_interval;
            }
        }
    }
    if step != last_eval_step {
        final_eval = emit(&learner, step, last, &mut eval_rng)?;
    }

    let (mean, std, ja) = final_eval;
    let summary = RunSummary {
        seed: run_seed,
        steps: step,
        updates,
        final_return_mean: mean,
        final_return_std: std,
        greedy_joint_action: ja,
        final_td_loss: last.map(|m| m.td_loss),
    };
    Ok((summary, learner))
}
