//! Random instance generators for the property suites.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{JointValueTable, ARGMAX_TOL};
use crate::error::Result;
use crate::joint;

/// Ranges used by [`random_igm_target`].
#[derive(Clone, Debug, PartialEq)]
pub struct TargetParams {
    /// Utility margin of each agent's best action over the rest.
    pub gap: (f64, f64),
    /// Joint value at the optimum.
    pub value: (f64, f64),
    /// Magnitude of the (negative) joint advantage elsewhere.
    pub advantage: (f64, f64),
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            gap: (0.2, 1.5),
            value: (-2.0, 2.0),
            advantage: (0.2, 3.0),
        }
    }
}

/// Per-agent utilities in `[-2, 2]`.
pub fn random_utilities(rng: &mut impl Rng, action_counts: &[usize]) -> Vec<Vec<f64>> {
    action_counts
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}

/// A table with a unique optimum that is IGM with respect to its own
/// utilities. Every other joint value sits strictly below the optimum.
pub fn random_igm_target(rng: &mut impl Rng, action_counts: &[usize], p: &TargetParams) -> Result<JointValueTable> {
    let best: Vec<usize> = action_counts.iter().map(|&n| rng.gen_range(0..n)).collect();
    let utilities: Vec<Vec<f64>> = action_counts
        .iter()
        .zip(&best)
        .map(|(&n, &b)| {
            let top = rng.gen_range(-1.0..1.0);
            (0..n)
                .map(|a| if a == b { top } else { top - rng.gen_range(p.gap.0..p.gap.1) })
                .collect()
        })
        .collect();
    let v = rng.gen_range(p.value.0..p.value.1);
    let values = joint::enumerate(action_counts)?
        .iter()
        .map(|ja| if *ja == best { v } else { v - rng.gen_range(p.advantage.0..p.advantage.1) })
        .collect();
    JointValueTable::new(values, utilities)
}

/// Small-integer tables where ties are common. Half are built to satisfy
/// IGM (possibly with several optima), the rest are arbitrary.
pub fn random_table(rng: &mut impl Rng, action_counts: &[usize]) -> Result<JointValueTable> {
    let utilities: Vec<Vec<f64>> = action_counts
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(-2..=1) as f64).collect())
        .collect();
    let all = joint::enumerate(action_counts)?;
    let values = if rng.gen_bool(0.5) {
        let maxes: Vec<f64> = utilities.iter().map(|q| q.iter().copied().fold(f64::MIN, f64::max)).collect();
        let v = rng.gen_range(-3..=3) as f64;
        all.iter()
            .map(|ja| {
                let optimal = ja.iter().enumerate().all(|(i, &a)| utilities[i][a] == maxes[i]);
                if optimal {
                    v
                } else {
                    v - rng.gen_range(1..=3) as f64
                }
            })
            .collect()
    } else {
        all.iter().map(|_| rng.gen_range(-3..=3) as f64).collect()
    };
    JointValueTable::new(values, utilities)
}

/// Moves a few entries (joint values and utilities) to within a few
/// multiples of the argmax tolerance of their maximum, straddling the
/// tolerance boundary from both sides.
pub fn perturb_near_tie(rng: &mut impl Rng, table: &JointValueTable) -> Result<JointValueTable> {
    const OFFSETS: [f64; 6] = [0.0, 0.5, 0.999, 1.001, 2.0, 10.0];
    let mut values = table.values.clone();
    let mut utilities = table.utilities.clone();
    let nudge = |xs: &mut Vec<f64>, rng: &mut dyn rand::RngCore| {
        let m = xs.iter().copied().fold(f64::MIN, f64::max);
        let k = rng.gen_range(0..xs.len());
        let off = *OFFSETS.choose(rng).expect("non-empty");
        xs[k] = m - off * ARGMAX_TOL;
    };
    for _ in 0..rng.gen_range(1..=3) {
        nudge(&mut values, rng);
    }
    for q in utilities.iter_mut() {
        if rng.gen_bool(0.5) {
            nudge(q, rng);
        }
    }
    JointValueTable::new(values, utilities)
}
