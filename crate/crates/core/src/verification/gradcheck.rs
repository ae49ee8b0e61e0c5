//! Central finite-difference checks and the detach identity check.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentTerms, UtilityNetwork};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::joint;
use crate::mixers::{ForwardOptions, Mixer, MixerDims, MixerInput, MixerSpec};
use crate::nn::Bind;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Instances with a relu/abs/max input closer than this to its kink are
/// redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-4;
const MAX_RESAMPLES: usize = 200;
const ROWS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub resampled: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_REL_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against central differences of `loss` on every
/// selected scalar in `store`.
fn compare(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss: &dyn Fn(&ParamStore) -> Result<f64>,
    include: &dyn Fn(&str) -> bool,
) -> Result<(f64, Option<(String, usize)>, usize)> {
    let names: Vec<String> = store.names().filter(|n| include(n)).map(str::to_owned).collect();
    let mut worst = (0.0, None);
    let mut coords = 0;
    for name in names {
        let len = store.get(&name).map_or(0, Tensor::len);
        for k in 0..len {
            let orig = store.get(&name).expect("listed").data()[k];
            store.get_mut(&name).expect("listed").data_mut()[k] = orig + FD_STEP;
            let up = loss(store)?;
            store.get_mut(&name).expect("listed").data_mut()[k] = orig - FD_STEP;
            let down = loss(store)?;
            store.get_mut(&name).expect("listed").data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[k]);
            let rel = relative_error(a, numeric);
            if rel > worst.0 || worst.1.is_none() {
                worst = (rel, Some((name.clone(), k)));
            }
            coords += 1;
        }
    }
    Ok((worst.0, worst.1, coords))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

struct MixerCase {
    actions: Vec<Vec<usize>>,
    cond: Tensor,
    onehot: Tensor,
    coeff: Tensor,
}

fn mixer_loss(mixer: &Mixer, store: &ParamStore, case: &MixerCase, trainable: bool) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let bind = if trainable { Bind::train(store) } else { Bind::frozen(store) };
    let terms = case
        .actions
        .iter()
        .enumerate()
        .map(|(i, acts)| {
            let q = bind.var(&mut g, &format!("gc.u{i}"))?;
            AgentTerms::at_actions(&mut g, q, acts)
        })
        .collect::<Result<Vec<_>>>()?;
    let cond = g.constant(case.cond.clone());
    let onehot = g.constant(case.onehot.clone());
    let input = MixerInput {
        terms: &terms,
        cond: Some(cond),
        joint_onehot: Some(onehot),
    };
    let out = mixer.forward(&mut g, bind, &input, ForwardOptions::default())?;
    let c = g.constant(case.coeff.clone());
    let weighted = g.mul(out.q, c)?;
    let loss = g.sum(weighted);
    Ok((g, loss))
}

/// Checks a mixer's gradients with respect to its parameters and to the
/// per-agent utilities on a random instance. With detached advantages the
/// utility gradients deliberately differ from the function's derivative,
/// so only mixer parameters are compared.
pub fn grad_check_mixer(spec: &MixerSpec, action_counts: &[usize], rng: &mut impl Rng) -> Result<GradCheckOutcome> {
    let dims = MixerDims {
        action_counts: action_counts.to_vec(),
        history_dim: 3,
        state_dim: 2,
    };
    let mixer = Mixer::new(spec.clone(), dims.clone())?;
    let c = mixer.cond_dim();
    for resampled in 0..MAX_RESAMPLES {
        let mut store = mixer.init(rng);
        for (i, &a) in action_counts.iter().enumerate() {
            store.insert(format!("gc.u{i}"), random_tensor(rng, &[ROWS, a], 2.0));
        }
        let joint_actions: Vec<Vec<usize>> = (0..ROWS)
            .map(|_| action_counts.iter().map(|&n| rng.gen_range(0..n)).collect())
            .collect();
        let onehot: Vec<f64> = joint_actions.iter().flat_map(|ja| joint::one_hot(action_counts, ja)).collect();
        let case = MixerCase {
            actions: (0..action_counts.len())
                .map(|i| joint_actions.iter().map(|ja| ja[i]).collect())
                .collect(),
            cond: random_tensor(rng, &[ROWS, c], 1.0),
            onehot: Tensor::new(vec![ROWS, dims.onehot_dim()], onehot)?,
            coeff: random_tensor(rng, &[ROWS], 1.0),
        };
        let (g, root) = mixer_loss(&mixer, &store, &case, true)?;
        if g.kink_margin() < KINK_MARGIN {
            continue;
        }
        let analytic = g.backward(root)?.by_name();
        let loss = |s: &ParamStore| -> Result<f64> {
            let (g, root) = mixer_loss(&mixer, s, &case, false)?;
            Ok(g.value(root).item())
        };
        let detached = spec.detach_advantages;
        let include = |name: &str| !(detached && name.starts_with("gc."));
        let (max_rel_error, worst, coordinates) = compare(&mut store, &analytic, &loss, &include)?;
        return Ok(GradCheckOutcome {
            max_rel_error,
            worst,
            coordinates,
            resampled,
        });
    }
    Err(Error::Config("could not draw an instance away from every kink".into()))
}

fn gradcheck_agents(rng: &mut impl Rng) -> Result<UtilityNetwork> {
    let shared = rng.gen_bool(0.5);
    let counts = if shared { vec![3, 3] } else { vec![3, 2] };
    let spec = EnvSpec::new(counts, 4, 2, 3, 0.9)?;
    let cfg = AgentConfig {
        window: 2,
        hidden: 6,
        shared,
    };
    UtilityNetwork::new(cfg, &spec)
}

fn utility_loss(agents: &UtilityNetwork, store: &ParamStore, windows: &[Vec<Vec<f64>>], coeff: &[Tensor], trainable: bool) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let bind = if trainable { Bind::train(store) } else { Bind::frozen(store) };
    let mut total = None;
    for (i, ws) in windows.iter().enumerate() {
        let refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
        let q = agents.utilities(&mut g, bind, i, &refs)?;
        let c = g.constant(coeff[i].clone());
        let weighted = g.mul(q, c)?;
        let s = g.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok((g, total.expect("at least two agents")))
}

/// Checks the utility network's parameter gradients on a random instance.
pub fn grad_check_utilities(rng: &mut impl Rng) -> Result<GradCheckOutcome> {
    let agents = gradcheck_agents(rng)?;
    for resampled in 0..MAX_RESAMPLES {
        let mut store = agents.init(rng);
        let windows: Vec<Vec<Vec<f64>>> = (0..agents.n_agents())
            .map(|i| (0..ROWS).map(|_| random_tensor(rng, &[agents.window_dim(i)], 1.0).into_data()).collect())
            .collect();
        let coeff: Vec<Tensor> = agents
            .action_counts()
            .iter()
            .map(|&a| random_tensor(rng, &[ROWS, a], 1.0))
            .collect();
        let (g, root) = utility_loss(&agents, &store, &windows, &coeff, true)?;
        if g.kink_margin() < KINK_MARGIN {
            continue;
        }
        let analytic = g.backward(root)?.by_name();
        let loss = |s: &ParamStore| -> Result<f64> {
            let (g, root) = utility_loss(&agents, s, &windows, &coeff, false)?;
            Ok(g.value(root).item())
        };
        let (max_rel_error, worst, coordinates) = compare(&mut store, &analytic, &loss, &|_| true)?;
        return Ok(GradCheckOutcome {
            max_rel_error,
            worst,
            coordinates,
            resampled,
        });
    }
    Err(Error::Config("could not draw an instance away from every kink".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachOutcome {
    /// Largest difference between agent-parameter gradients of the full
    /// output and of the fixee alone.
    pub max_abs_diff: f64,
    /// Smallest |w| over the rows (for `-lin`, over rows and agents).
    pub min_abs_w: f64,
}

/// Draws agents, a Q+FIX mixer and a batch of joint histories, then
/// compares `∂ΣQ/∂θ` with `∂ΣQ_fixee/∂θ` over the agent parameters θ using
/// two separate backward passes. With `zero_intervention` the fixing
/// networks output `w = 0`, `b = 0`.
pub fn detach_check(spec: &MixerSpec, zero_intervention: bool, rng: &mut impl Rng) -> Result<DetachOutcome> {
    if !spec.kind.is_additive_fix() {
        return Err(Error::Config(format!("detach check needs an additive fixing kind, got {}", spec.kind)));
    }
    let agents = gradcheck_agents(rng)?;
    let dims = MixerDims {
        action_counts: agents.action_counts().to_vec(),
        history_dim: agents.joint_window_dim(),
        state_dim: 2,
    };
    let mixer = Mixer::new(spec.clone(), dims.clone())?;
    let mut store = agents.init(rng);
    store.extend(mixer.init(rng));
    if zero_intervention {
        let raw = mixer.raw_weight_for(0.0);
        let n_w = mixer.fixing_w_net().map_or(1, |m| m.output_dim());
        mixer.set_fixing_constants(&mut store, &vec![raw; n_w], 0.0)?;
    }
    let n = agents.n_agents();
    let windows: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| (0..ROWS).map(|_| random_tensor(rng, &[agents.window_dim(i)], 1.0).into_data()).collect())
        .collect();
    let joint_actions: Vec<Vec<usize>> = (0..ROWS)
        .map(|_| dims.action_counts.iter().map(|&a| rng.gen_range(0..a)).collect())
        .collect();
    let mut cond = Vec::new();
    for r in 0..ROWS {
        let history: Vec<f64> = windows.iter().flat_map(|w| w[r].iter().copied()).collect();
        let state = random_tensor(rng, &[2], 1.0).into_data();
        cond.extend(spec.conditioning.build(&history, &state));
    }
    let cond = Tensor::new(vec![ROWS, mixer.cond_dim()], cond)?;
    let onehot = Tensor::new(
        vec![ROWS, dims.onehot_dim()],
        joint_actions.iter().flat_map(|ja| joint::one_hot(&dims.action_counts, ja)).collect(),
    )?;

    let pass = |fixee_only: bool| -> Result<(BTreeMap<String, Tensor>, Vec<f64>)> {
        let mut g = Graph::new();
        let bind = Bind::train(&store);
        let mut terms = Vec::with_capacity(n);
        for (i, ws) in windows.iter().enumerate() {
            let refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
            let q = agents.utilities(&mut g, bind, i, &refs)?;
            let acts: Vec<usize> = joint_actions.iter().map(|ja| ja[i]).collect();
            terms.push(AgentTerms::at_actions(&mut g, q, &acts)?);
        }
        let c = g.constant(cond.clone());
        let oh = g.constant(onehot.clone());
        let input = MixerInput {
            terms: &terms,
            cond: Some(c),
            joint_onehot: Some(oh),
        };
        let out = mixer.forward(&mut g, bind, &input, ForwardOptions::default())?;
        let target = if fixee_only {
            out.fixee.ok_or_else(|| Error::Config("mixer exposes no fixee".into()))?.q
        } else {
            out.q
        };
        let root = g.sum(target);
        let w = out.w.map_or_else(Vec::new, |w| g.value(w).data().to_vec());
        let grads = g
            .backward(root)?
            .by_name()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("mixer."))
            .collect();
        Ok((grads, w))
    };
    let (full, w) = pass(false)?;
    let (fixee, _) = pass(true)?;
    let mut max_abs_diff = 0.0f64;
    for name in store.names().filter(|n| !n.starts_with("mixer.")) {
        let len = store.get(name).map_or(0, Tensor::len);
        for k in 0..len {
            let a = full.get(name).map_or(0.0, |t| t.data()[k]);
            let b = fixee.get(name).map_or(0.0, |t| t.data()[k]);
            max_abs_diff = max_abs_diff.max((a - b).abs());
        }
    }
    Ok(DetachOutcome {
        max_abs_diff,
        min_abs_w: w.iter().fold(f64::INFINITY, |m, x| m.min(x.abs())),
    })
}
