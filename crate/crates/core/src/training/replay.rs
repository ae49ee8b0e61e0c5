use std::collections::VecDeque;

use rand::Rng;

/// One stored step, with every agent's history window before and after.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub windows: Vec<Vec<f64>>,
    pub next_windows: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub next_state: Vec<f64>,
    pub joint_action: Vec<usize>,
    pub reward: f64,
    pub terminal: bool,
}

pub type Episode = Vec<StepRecord>;

/// Ring buffer of complete episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stores a finished episode, evicting the oldest when full. Empty
    /// episodes are ignored.
    pub fn push(&mut self, episode: Episode) {
        if episode.is_empty() {
            return;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Uniform sample of `n` episodes, with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Episode> {
        if self.episodes.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.episodes[rng.gen_range(0..self.episodes.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ep(tag: f64, len: usize) -> Episode {
        (0..len)
            .map(|t| StepRecord {
                windows: vec![],
                next_windows: vec![],
                state: vec![],
                next_state: vec![],
                joint_action: vec![],
                reward: tag,
                terminal: t + 1 == len,
            })
            .collect()
    }

    #[test]
    fn evicts_oldest_and_keeps_episodes_whole() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(ep(1.0, 3));
        buf.push(ep(2.0, 2));
        buf.push(ep(3.0, 1));
        buf.push(Vec::new());
        assert_eq!(buf.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for e in buf.sample(50, &mut rng) {
            assert!(e[0].reward != 1.0);
            assert!(e.last().unwrap().terminal);
            assert!(e.iter().all(|s| s.reward == e[0].reward));
        }
    }

    #[test]
    fn empty_buffer_samples_nothing() {
        let buf = ReplayBuffer::new(4);
        assert!(buf.sample(3, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }
}
