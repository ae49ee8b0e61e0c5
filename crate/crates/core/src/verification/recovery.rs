//! Fixing layers that reproduce their fixee, and the Q+FIX ↔ QFIX
//! reparameterization.

use rand::Rng;

use super::random_utilities;
use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::mixers::{ForwardOptions, Mixer, MixerDims, MixerKind, MixerSpec, RowBatch};
use crate::nn::Bind;

struct Instance {
    dims: MixerDims,
    utilities: Vec<Vec<f64>>,
    history: Vec<f64>,
    state: Vec<f64>,
}

fn draw(rng: &mut impl Rng) -> Instance {
    let n = rng.gen_range(2..=3);
    let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(2..=5)).collect();
    Instance {
        utilities: random_utilities(rng, &counts),
        dims: MixerDims {
            action_counts: counts,
            history_dim: 3,
            state_dim: 2,
        },
        history: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        state: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Joint values and fixee values and maxima over all joint actions.
fn outputs(mixer: &Mixer, store: &ParamStore, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cond = mixer.spec().conditioning.build(&inst.history, &inst.state);
    let rows = RowBatch::all_joint_actions(&inst.dims, &inst.utilities, &cond)?;
    let mut g = Graph::new();
    let out = rows.forward(mixer, &mut g, Bind::frozen(store), ForwardOptions::default())?;
    let fixee = out.fixee.ok_or_else(|| Error::Config(format!("{} has no fixee", mixer.kind())))?;
    let vals = |v| g.value(v).data().to_vec();
    Ok((vals(out.q), vals(fixee.q), vals(fixee.v)))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Sets the fixing layer to the identity on the fixee (`w⁺ = 1, b = V_fixee`
/// for QFIX, `w = 0, b = 0` for Q+FIX) and returns the largest deviation
/// from the fixee over all joint actions.
pub fn fixee_recovery_error(kind: MixerKind, rng: &mut impl Rng) -> Result<f64> {
    if !kind.is_fixing() {
        return Err(Error::Config(format!("{kind} has no fixing layer")));
    }
    let inst = draw(rng);
    let mixer = Mixer::new(MixerSpec::new(kind).with_widths(8), inst.dims.clone())?;
    let mut store = mixer.init(rng);
    let n_w = mixer.fixing_w_net().map_or(1, |m| m.output_dim());
    let (_, _, v) = outputs(&mixer, &store, &inst)?;
    // V_fixee is the same for every joint action of one joint history
    let (w, b) = if kind.is_additive_fix() { (0.0, 0.0) } else { (1.0, v[0]) };
    mixer.set_fixing_constants(&mut store, &vec![mixer.raw_weight_for(w); n_w], b)?;
    let (q, fixee_q, _) = outputs(&mixer, &store, &inst)?;
    Ok(sup_diff(&q, &fixee_q))
}

/// Draws `(w, b)` and compares Q+FIX at `(w, b)` with QFIX at
/// `(w + 1, b + V_fixee)`, both wrapping the same fixee parameters.
pub fn reparameterization_error(additive: MixerKind, rng: &mut impl Rng) -> Result<f64> {
    let multiplicative = match additive {
        MixerKind::QplusfixSum => MixerKind::QfixSum,
        MixerKind::QplusfixMono => MixerKind::QfixMono,
        MixerKind::QplusfixLin => MixerKind::QfixLin,
        other => return Err(Error::Config(format!("{other} is not an additive fixing kind"))),
    };
    let inst = draw(rng);
    let plus = Mixer::new(MixerSpec::new(additive).with_widths(8), inst.dims.clone())?;
    let fix = Mixer::new(MixerSpec::new(multiplicative).with_widths(8), inst.dims.clone())?;
    let mut plus_store = plus.init(rng);
    let mut fix_store = plus_store.clone();
    let n_w = plus.fixing_w_net().map_or(1, |m| m.output_dim());
    let w: Vec<f64> = (0..n_w).map(|_| rng.gen_range(-0.9..3.0)).collect();
    let b = rng.gen_range(-2.0..2.0);
    let raw = |m: &Mixer, shift: f64| w.iter().map(|x| m.raw_weight_for(x + shift)).collect::<Vec<_>>();
    plus.set_fixing_constants(&mut plus_store, &raw(&plus, 0.0), b)?;
    let (_, _, v) = outputs(&plus, &plus_store, &inst)?;
    fix.set_fixing_constants(&mut fix_store, &raw(&fix, 1.0), b + v[0])?;
    let (q_plus, _, _) = outputs(&plus, &plus_store, &inst)?;
    let (q_fix, _, _) = outputs(&fix, &fix_store, &inst)?;
    Ok(sup_diff(&q_plus, &q_fix))
}
