//! Enumeration of joint action spaces in row-major order (last agent varies
//! fastest).

use crate::error::{Error, Result};

/// Largest joint action space the exhaustive checks will enumerate.
pub const MAX_JOINT_ACTIONS: usize = 1_000_000;

pub fn joint_space_size(action_counts: &[usize]) -> usize {
    action_counts.iter().product()
}

/// Flat row-major index of a joint action.
pub fn flat_index(action_counts: &[usize], joint: &[usize]) -> usize {
    joint
        .iter()
        .zip(action_counts)
        .fold(0, |acc, (&a, &n)| acc * n + a)
}

/// Joint action at a flat row-major index.
pub fn unflatten(action_counts: &[usize], mut index: usize) -> Vec<usize> {
    let mut out = vec![0; action_counts.len()];
    for (slot, &n) in out.iter_mut().zip(action_counts).rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

/// Every joint action, in flat-index order.
pub fn enumerate(action_counts: &[usize]) -> Result<Vec<Vec<usize>>> {
    let size = joint_space_size(action_counts);
    if size > MAX_JOINT_ACTIONS {
        return Err(Error::JointSpaceTooLarge(size));
    }
    Ok((0..size).map(|i| unflatten(action_counts, i)).collect())
}

/// Concatenated per-agent one-hot encoding of a joint action.
pub fn one_hot(action_counts: &[usize], joint: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; action_counts.iter().sum()];
    let mut offset = 0;
    for (&a, &n) in joint.iter().zip(action_counts) {
        out[offset + a] = 1.0;
        offset += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn row_major_order() {
        let all = enumerate(&[2, 3]).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 0]);
        assert_eq!(all[1], vec![0, 1]);
        assert_eq!(all[3], vec![1, 0]);
        assert_eq!(one_hot(&[2, 3], &[1, 2]), vec![0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn oversize_space_is_rejected() {
        assert!(matches!(
            enumerate(&[1000, 1000, 2]),
            Err(Error::JointSpaceTooLarge(2_000_000))
        ));
    }

    proptest! {
        #[test]
        fn flatten_inverts_unflatten(counts in prop::collection::vec(1usize..6, 1..5), seed in 0usize..10_000) {
            let size = joint_space_size(&counts);
            let i = seed % size;
            prop_assert_eq!(flat_index(&counts, &unflatten(&counts, i)), i);
        }
    }
}
