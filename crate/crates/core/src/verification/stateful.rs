use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fit_contexts, igm_check, random_igm_target, FitContext, FitOptions, IgmReport, JointValueTable, TargetParams};
use crate::agents::{HistoryWindow, UtilityNetwork};
use crate::autodiff::ParamStore;
use crate::envs::{Environment, LatentStateMatrixGame};
use crate::error::Result;
use crate::joint;
use crate::mixers::{Conditioning, Mixer, MixerDims, MixerKind, MixerSpec};
use crate::training::condition;

/// Readings seen by each agent so far, plus the joint actions taken between
/// them (one fewer than the number of steps).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHistory {
    pub readings: Vec<Vec<usize>>,
    pub actions: Vec<Vec<usize>>,
}

impl JointHistory {
    pub fn len(&self) -> usize {
        self.readings.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-agent window features after replaying the history.
    pub fn windows(&self, game: &LatentStateMatrixGame, agents: &UtilityNetwork) -> Vec<Vec<f64>> {
        (0..agents.n_agents())
            .map(|i| {
                let mut w = agents.new_window(i);
                self.replay(game, i, &mut w);
                w.features()
            })
            .collect()
    }

    fn replay(&self, game: &LatentStateMatrixGame, agent: usize, window: &mut HistoryWindow) {
        for (t, &r) in self.readings[agent].iter().enumerate() {
            let prev = t.checked_sub(1).map(|p| self.actions[p][agent]);
            window.push(&game.encode_observation(r, t), prev);
        }
    }
}

/// Every joint history of length `1..=max_len` (capped by the horizon):
/// all reading combinations and all intermediate joint actions.
pub fn enumerate_histories(game: &LatentStateMatrixGame, max_len: usize) -> Result<Vec<JointHistory>> {
    let spec = game.spec();
    let n = spec.n_agents;
    let s = game.n_states();
    let mut out = Vec::new();
    let mut frontier = vec![JointHistory {
        readings: vec![Vec::new(); n],
        actions: Vec::new(),
    }];
    for depth in 1..=max_len.min(spec.horizon) {
        let mut next = Vec::new();
        for h in &frontier {
            let action_choices = if depth == 1 {
                vec![Vec::new()]
            } else {
                joint::enumerate(&spec.action_counts)?
            };
            for ja in &action_choices {
                for rs in joint::enumerate(&vec![s; n])? {
                    let mut child = h.clone();
                    if depth > 1 {
                        child.actions.push(ja.clone());
                    }
                    for (i, r) in rs.into_iter().enumerate() {
                        child.readings[i].push(r);
                    }
                    next.push(child);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatefulReport {
    pub holds: bool,
    pub histories_checked: usize,
    /// First failing history, the state (`None` for the marginalized table)
    /// and the IGM report for that table.
    pub failure: Option<(JointHistory, Option<usize>, IgmReport)>,
}

/// Pointwise IGM for every `(history, state)` pair, then IGM of
/// `Σ_s Pr(s | jh) · Q(jh, s, ·)` under the exact posterior.
pub fn stateful_igm_check(
    game: &LatentStateMatrixGame,
    agents: &UtilityNetwork,
    mixer: &Mixer,
    store: &ParamStore,
    histories: &[JointHistory],
    tol: f64,
) -> Result<StatefulReport> {
    for h in histories {
        let windows = h.windows(game, agents);
        let utilities = (0..agents.n_agents())
            .map(|i| agents.utilities_of(store, i, &windows[i]))
            .collect::<Result<Vec<_>>>()?;
        let posterior = game.state_posterior(&h.readings)?;
        let mut marginal = vec![0.0; joint::joint_space_size(agents.action_counts())];
        for (s, &p) in posterior.iter().enumerate() {
            let cond = condition(mixer, &windows, &game.encode_state(s));
            let values = mixer.joint_values(store, &utilities, &cond)?;
            for (m, v) in marginal.iter_mut().zip(&values) {
                *m += p * v;
            }
            let report = igm_check(&JointValueTable::new(values, utilities.clone())?, tol)?;
            if !report.holds {
                return Ok(StatefulReport {
                    holds: false,
                    histories_checked: histories.len(),
                    failure: Some((h.clone(), Some(s), report)),
                });
            }
        }
        let report = igm_check(&JointValueTable::new(marginal, utilities)?, tol)?;
        if !report.holds {
            return Ok(StatefulReport {
                holds: false,
                histories_checked: histories.len(),
                failure: Some((h.clone(), None, report)),
            });
        }
    }
    Ok(StatefulReport {
        holds: true,
        histories_checked: histories.len(),
        failure: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessOutcome {
    pub state_only_error: f64,
    pub history_state_error: f64,
}

/// Error threshold separating "fits" from "cannot fit" in the witness.
pub const WITNESS_THRESHOLD: f64 = 0.05;

impl WitnessOutcome {
    pub fn reproduces(&self) -> bool {
        self.state_only_error >= WITNESS_THRESHOLD && self.history_state_error < WITNESS_THRESHOLD
    }
}

/// Two joint histories of a two-state game with the same posterior (each
/// agent saw one reading, in swapped roles) and the same utilities, whose
/// target tables differ by a history-dependent shift. A mixer conditioned
/// on the state alone sees identical inputs for both and must miss one of
/// them by half the shift.
pub fn state_only_witness(rng: &mut impl Rng, min_shift: f64, opts: &FitOptions) -> Result<WitnessOutcome> {
    let payoff = crate::envs::PayoffTable::new(vec![3, 3], vec![0.0; 9])?;
    let game = LatentStateMatrixGame::new(vec![payoff.clone(), payoff], vec![0.5, 0.5], 0.8, 1, 0.0)?;
    let counts = vec![3, 3];
    let histories = [[0usize, 1], [1, 0]];
    let windows: Vec<Vec<Vec<f64>>> = histories
        .iter()
        .map(|rs| {
            rs.iter()
                .zip(&counts)
                .map(|(&r, &a)| {
                    let mut w = HistoryWindow::new(1, game.spec().obs_dim, a);
                    w.push(&game.encode_observation(r, 0), None);
                    w.features()
                })
                .collect()
        })
        .collect();
    let base = random_igm_target(rng, &counts, &TargetParams::default())?;
    let utilities = base.utilities.clone();
    let per_state: Vec<Vec<f64>> = (0..2)
        .map(|s| {
            if s == 0 {
                return base.values.clone();
            }
            // same argmax, different values: shift and rescale the advantage
            let m = base.max();
            let scale = rng.gen_range(0.5..2.0);
            let offset = rng.gen_range(-1.0..1.0);
            base.values.iter().map(|v| m + offset + scale * (v - m)).collect()
        })
        .collect();
    let shift = min_shift + rng.gen_range(0.0..0.5);

    let history_dim = windows[0].iter().map(Vec::len).sum();
    let dims = MixerDims {
        action_counts: counts.clone(),
        history_dim,
        state_dim: 2,
    };
    let fit = |conditioning: Conditioning| -> Result<f64> {
        let spec = MixerSpec::new(MixerKind::QplusfixSum).with_conditioning(conditioning);
        let mixer = Mixer::new(spec, dims.clone())?;
        let mut init = crate::seed::stream(opts.seed, 0, "witness");
        let mut store = mixer.init(&mut init);
        let mut contexts = Vec::new();
        for (h, ws) in windows.iter().enumerate() {
            for (s, target) in per_state.iter().enumerate() {
                let history: Vec<f64> = ws.iter().flatten().copied().collect();
                contexts.push(FitContext {
                    utilities: utilities.clone(),
                    cond: conditioning.build(&history, &game.encode_state(s)),
                    target: target.iter().map(|v| v + h as f64 * shift).collect(),
                });
            }
        }
        Ok(fit_contexts(&mixer, &mut store, &contexts, opts)?.max_abs_error)
    };
    Ok(WitnessOutcome {
        state_only_error: fit(Conditioning::StateOnly)?,
        history_state_error: fit(Conditioning::HistoryState)?,
    })
}
