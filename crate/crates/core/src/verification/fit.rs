use serde::{Deserialize, Serialize};

use super::{igm_check, JointValueTable, ARGMAX_TOL};
use crate::agents::AgentTerms;
use crate::autodiff::{AdamConfig, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::joint;
use crate::mixers::{ForwardOptions, Mixer, MixerDims, MixerSpec, RowBatch};
use crate::nn::Bind;
use crate::seed;

/// One fitting context: fixed utilities, a conditioning vector, and the
/// target value of every joint action (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitContext {
    pub utilities: Vec<Vec<f64>>,
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    /// Stop once the sup-norm error drops below this.
    pub tol: f64,
    /// Learn the utilities too (single context only). Skips the IGM
    /// precondition, since the target's utilities are only a starting point.
    pub free_utilities: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-2,
            tol: 1e-3,
            free_utilities: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub max_abs_error: f64,
    pub steps_used: usize,
    pub converged: bool,
}

const CHECK_EVERY: usize = 25;

fn free_utility_name(agent: usize) -> String {
    format!("fit.u{agent}")
}

/// Trains `store` so that the mixer reproduces every context's table.
/// Utilities stay fixed unless `opts.free_utilities` is set.
pub fn fit_contexts(mixer: &Mixer, store: &mut ParamStore, contexts: &[FitContext], opts: &FitOptions) -> Result<FitReport> {
    let dims = mixer.dims();
    let all = joint::enumerate(&dims.action_counts)?;
    if opts.free_utilities && contexts.len() != 1 {
        return Err(Error::Config("free utilities need exactly one context".into()));
    }
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for ctx in contexts {
        if ctx.target.len() != all.len() {
            return Err(Error::Shape {
                op: "fit_contexts",
                lhs: dims.action_counts.clone(),
                rhs: vec![ctx.target.len()],
            });
        }
        rows.extend(all.iter().map(|ja| (ctx.utilities.clone(), ctx.cond.clone(), ja.clone())));
        target.extend_from_slice(&ctx.target);
    }
    let batch = RowBatch::new(dims, rows)?;
    let n_rows = batch.len();
    let target_t = Tensor::vector(target.clone());
    if opts.free_utilities {
        for (i, u) in contexts[0].utilities.iter().enumerate() {
            store.insert(free_utility_name(i), Tensor::new(vec![1, u.len()], u.clone())?);
        }
    }
    let adam = AdamConfig::with_lr(opts.lr);
    let trainable = opts.free_utilities || store.names().any(|n| n.starts_with("mixer."));

    let sup = |q: &[f64]| q.iter().zip(&target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let mut steps_used = 0;
    let mut converged = false;
    loop {
        let mut g = Graph::new();
        let bind = Bind::train(store);
        let out = if opts.free_utilities {
            let ones = g.constant(Tensor::filled(&[n_rows, 1], 1.0));
            let mut terms = Vec::with_capacity(dims.n_agents());
            for (i, acts) in batch.actions().iter().enumerate() {
                let u = bind.var(&mut g, &free_utility_name(i))?;
                let q = g.matmul(ones, u)?;
                terms.push(AgentTerms::at_actions(&mut g, q, acts)?);
            }
            batch.forward_with_terms(mixer, &mut g, bind, &terms, ForwardOptions::default())?
        } else {
            batch.forward(mixer, &mut g, bind, ForwardOptions::default())?
        };
        if steps_used % CHECK_EVERY == 0 || steps_used == opts.steps || !trainable {
            let err = sup(g.value(out.q).data());
            if err < opts.tol {
                converged = true;
                break;
            }
            if steps_used >= opts.steps || !trainable {
                break;
            }
        }
        let y = g.constant(target_t.clone());
        let loss = g.mse(out.q, y)?;
        let grads = g.backward(loss)?.by_name();
        store.adam_step(&grads, &adam)?;
        steps_used += 1;
    }

    let max_abs_error = contexts
        .iter()
        .map(|ctx| -> Result<f64> {
            let utils = if opts.free_utilities {
                free_utilities(store, dims)?
            } else {
                ctx.utilities.clone()
            };
            let q = mixer.joint_values(store, &utils, &ctx.cond)?;
            Ok(q.iter().zip(&ctx.target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(FitReport {
        max_abs_error,
        steps_used,
        converged,
    })
}

/// Learned utilities after a free-utility fit.
pub fn free_utilities(store: &ParamStore, dims: &MixerDims) -> Result<Vec<Vec<f64>>> {
    (0..dims.n_agents())
        .map(|i| {
            store
                .get(&free_utility_name(i))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::UnknownParameter(free_utility_name(i)))
        })
        .collect()
}

/// Fits one joint-value table with the given mixer. The table must satisfy
/// IGM with its own utilities unless utilities are free. The mixer sees a
/// constant one-dimensional history and state.
pub fn fit_target_table(spec: &MixerSpec, table: &JointValueTable, opts: &FitOptions) -> Result<(FitReport, Mixer, ParamStore)> {
    if !opts.free_utilities {
        let report = igm_check(table, ARGMAX_TOL)?;
        if !report.holds {
            return Err(Error::NotIgm {
                witness: report.witness,
            });
        }
    }
    let dims = MixerDims {
        action_counts: table.action_counts.clone(),
        history_dim: 1,
        state_dim: 1,
    };
    let mixer = Mixer::new(spec.clone(), dims)?;
    let mut rng = seed::stream(opts.seed, 0, "fit");
    let mut store = mixer.init(&mut rng);
    let ctx = FitContext {
        utilities: table.utilities.clone(),
        cond: spec.conditioning.build(&[1.0], &[1.0]),
        target: table.values.clone(),
    };
    let report = fit_contexts(&mixer, &mut store, &[ctx], opts)?;
    Ok((report, mixer, store))
}
