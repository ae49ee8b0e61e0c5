use std::collections::VecDeque;

/// The last `k` (observation, previous-action one-hot) pairs for one agent,
/// zero-padded at the front until `k` steps have been seen.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    k: usize,
    obs_dim: usize,
    action_count: usize,
    entries: VecDeque<Vec<f64>>,
}

impl HistoryWindow {
    pub fn new(k: usize, obs_dim: usize, action_count: usize) -> Self {
        Self {
            k,
            obs_dim,
            action_count,
            entries: VecDeque::with_capacity(k),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.k * (self.obs_dim + self.action_count)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends the newest observation with the action taken just before it
    /// (`None` at the start of an episode).
    pub fn push(&mut self, obs: &[f64], prev_action: Option<usize>) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        let mut entry = obs.to_vec();
        entry.resize(self.obs_dim + self.action_count, 0.0);
        if let Some(a) = prev_action {
            entry[self.obs_dim + a] = 1.0;
        }
        if self.entries.len() == self.k {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Flattened features, oldest first.
    pub fn features(&self) -> Vec<f64> {
        let width = self.obs_dim + self.action_count;
        let mut out = vec![0.0; (self.k - self.entries.len()) * width];
        for e in &self.entries {
            out.extend_from_slice(e);
        }
        out
    }
}
