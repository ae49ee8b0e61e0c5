use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::argmax;
use crate::error::{Error, Result};
use crate::joint;

/// Least-squares additive decomposition `Q ≈ Σ q_i(a_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFit {
    /// Minimum-norm per-agent tables. Any per-agent constant shifts that sum
    /// to zero give the same fit.
    pub utilities: Vec<Vec<f64>>,
    pub fitted: Vec<f64>,
    pub residual_sup: f64,
    /// Root-mean-square residual. Also a lower bound on the smallest sup
    /// error any additive decomposition can reach.
    pub residual_rms: f64,
    /// Lowest-index argmax of each fitted utility.
    pub greedy: Vec<usize>,
}

/// Solves the normal equations over the one-hot design matrix with an SVD
/// pseudo-inverse (the design is rank deficient by `N − 1`).
pub fn best_additive_fit(action_counts: &[usize], values: &[f64]) -> Result<AdditiveFit> {
    let all = joint::enumerate(action_counts)?;
    if values.len() != all.len() {
        return Err(Error::Shape {
            op: "best_additive_fit",
            lhs: action_counts.to_vec(),
            rhs: vec![values.len()],
        });
    }
    let cols: usize = action_counts.iter().sum();
    let mut x = DMatrix::<f64>::zeros(all.len(), cols);
    for (r, ja) in all.iter().enumerate() {
        for (c, v) in joint::one_hot(action_counts, ja).into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    let y = DVector::from_column_slice(values);
    let theta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::Config(format!("additive fit: {e}")))?;
    let fitted = &x * &theta;

    let mut utilities = Vec::with_capacity(action_counts.len());
    let mut offset = 0;
    for &n in action_counts {
        utilities.push(theta.as_slice()[offset..offset + n].to_vec());
        offset += n;
    }
    let resid: Vec<f64> = fitted.iter().zip(values).map(|(f, v)| f - v).collect();
    let residual_sup = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let residual_rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    let greedy = utilities.iter().map(|q| argmax(q)).collect();
    Ok(AdditiveFit {
        utilities,
        fitted: fitted.as_slice().to_vec(),
        residual_sup,
        residual_rms,
        greedy,
    })
}
