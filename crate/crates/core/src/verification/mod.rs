//! Brute-force oracles: IGM checks, completeness fits, gradient checks.

mod additive;
mod fit;
mod gen;
mod gradcheck;
mod recovery;
pub mod stateful;
pub mod suites;

use serde::{Deserialize, Serialize};

pub use additive::{best_additive_fit, AdditiveFit};
pub use fit::{fit_contexts, fit_target_table, free_utilities, FitContext, FitOptions, FitReport};
pub use gen::{perturb_near_tie, random_igm_target, random_table, random_utilities, TargetParams};
pub use gradcheck::{detach_check, grad_check_mixer, grad_check_utilities, DetachOutcome, GradCheckOutcome};
pub use recovery::{fixee_recovery_error, reparameterization_error};
pub use stateful::{enumerate_histories, stateful_igm_check, JointHistory, StatefulReport};

use crate::error::{Error, Result};
use crate::joint;

/// Values within this distance of the maximum count as maximal.
pub const ARGMAX_TOL: f64 = 1e-9;

/// `Q(jh, ·)` over every joint action for one joint history, with the
/// per-agent utilities it is compared against. Row-major, last agent
/// fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointValueTable {
    pub action_counts: Vec<usize>,
    pub values: Vec<f64>,
    pub utilities: Vec<Vec<f64>>,
}

impl JointValueTable {
    pub fn new(values: Vec<f64>, utilities: Vec<Vec<f64>>) -> Result<Self> {
        let action_counts: Vec<usize> = utilities.iter().map(Vec::len).collect();
        let size = joint::joint_space_size(&action_counts);
        if size > joint::MAX_JOINT_ACTIONS {
            return Err(Error::JointSpaceTooLarge(size));
        }
        if action_counts.is_empty() || action_counts.contains(&0) || values.len() != size {
            return Err(Error::Shape {
                op: "joint_value_table",
                lhs: action_counts,
                rhs: vec![values.len()],
            });
        }
        if values.iter().chain(utilities.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Config("joint value table must be finite".into()));
        }
        Ok(Self {
            action_counts,
            values,
            utilities,
        })
    }

    /// Builds the table by evaluating `f` on every joint action.
    pub fn from_fn(utilities: Vec<Vec<f64>>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let counts: Vec<usize> = utilities.iter().map(Vec::len).collect();
        let values = joint::enumerate(&counts)?.iter().map(|ja| f(ja)).collect();
        Self::new(values, utilities)
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn get(&self, joint_action: &[usize]) -> f64 {
        self.values[joint::flat_index(&self.action_counts, joint_action)]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Joint advantage `Q(ja) − max Q`.
    pub fn joint_advantages(&self) -> Vec<f64> {
        let m = self.max();
        self.values.iter().map(|v| v - m).collect()
    }

    /// Individual advantages `q_i(a) − max q_i`.
    pub fn individual_advantages(&self) -> Vec<Vec<f64>> {
        self.utilities
            .iter()
            .map(|q| {
                let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                q.iter().map(|x| x - m).collect()
            })
            .collect()
    }

    /// Sup-norm distance to another table over the same joint actions.
    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Indices whose value lies within `tol` of the maximum.
pub fn argmax_set(values: &[f64], tol: f64) -> Vec<usize> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // same comparison as the advantage checks, so both agree bit for bit
    (0..values.len()).filter(|&i| values[i] - m >= -tol).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgmReport {
    pub holds: bool,
    pub joint_argmax_set: Vec<Vec<usize>>,
    pub individual_argmax_product: Vec<Vec<usize>>,
    /// First joint action in exactly one of the two sets.
    pub witness: Option<Vec<usize>>,
}

fn cartesian(sets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for set in sets {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |&a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    out
}

/// Compares the joint argmax set with the product of individual argmax
/// sets, both taken with tolerance `tol`.
pub fn igm_check(table: &JointValueTable, tol: f64) -> Result<IgmReport> {
    let counts = &table.action_counts;
    let all = joint::enumerate(counts)?;
    let joint_set: Vec<Vec<usize>> = argmax_set(&table.values, tol)
        .into_iter()
        .map(|k| all[k].clone())
        .collect();
    let per_agent: Vec<Vec<usize>> = table.utilities.iter().map(|q| argmax_set(q, tol)).collect();
    let product = cartesian(&per_agent);
    // both lists are in row-major order, so equality is elementwise
    let holds = joint_set == product;
    let witness = if holds {
        None
    } else {
        joint_set
            .iter()
            .find(|ja| !product.contains(ja))
            .or_else(|| product.iter().find(|ja| !joint_set.contains(ja)))
            .cloned()
    };
    Ok(IgmReport {
        holds,
        joint_argmax_set: joint_set,
        individual_argmax_product: product,
        witness,
    })
}

/// `∀ja: (∃i u_i(a_i) < −tol) ⟺ A(ja) < −tol`.
pub fn advantage_constraint_check(table: &JointValueTable, tol: f64) -> Result<bool> {
    let joint_adv = table.joint_advantages();
    let ind_adv = table.individual_advantages();
    for (k, ja) in joint::enumerate(&table.action_counts)?.iter().enumerate() {
        let any_negative = ja.iter().enumerate().any(|(i, &a)| ind_adv[i][a] < -tol);
        if any_negative != (joint_adv[k] < -tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The weaker constraint set: only `A(ja) = 0 ⟹ ∀i u_i(a_i) = 0` is
/// enforced. Accepts tables where every individual advantage is zero but
/// the joint advantage is negative, which are not IGM.
pub fn weak_advantage_constraint_check(table: &JointValueTable, tol: f64) -> Result<bool> {
    let joint_adv = table.joint_advantages();
    let ind_adv = table.individual_advantages();
    for (k, ja) in joint::enumerate(&table.action_counts)?.iter().enumerate() {
        let joint_max = joint_adv[k] >= -tol;
        let all_zero = ja.iter().enumerate().all(|(i, &a)| ind_adv[i][a] >= -tol);
        if joint_max && !all_zero {
            return Ok(false);
        }
    }
    Ok(true)
}
