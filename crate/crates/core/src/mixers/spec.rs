use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Vdn,
    Qmix,
    Qplex,
    QfixSum,
    QfixMono,
    QfixLin,
    QplusfixSum,
    QplusfixMono,
    QplusfixLin,
}

/// The IGM-but-incomplete model a fixing layer wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixeeKind {
    Vdn,
    Qmix,
}

impl MixerKind {
    pub const ALL: [MixerKind; 9] = [
        MixerKind::Vdn,
        MixerKind::Qmix,
        MixerKind::Qplex,
        MixerKind::QfixSum,
        MixerKind::QfixMono,
        MixerKind::QfixLin,
        MixerKind::QplusfixSum,
        MixerKind::QplusfixMono,
        MixerKind::QplusfixLin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Vdn => "vdn",
            MixerKind::Qmix => "qmix",
            MixerKind::Qplex => "qplex",
            MixerKind::QfixSum => "qfix_sum",
            MixerKind::QfixMono => "qfix_mono",
            MixerKind::QfixLin => "qfix_lin",
            MixerKind::QplusfixSum => "qplusfix_sum",
            MixerKind::QplusfixMono => "qplusfix_mono",
            MixerKind::QplusfixLin => "qplusfix_lin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Fixee wrapped by a fixing layer. `-lin` variants fix the sum of
    /// advantages with per-agent weights, so their fixee is VDN.
    pub fn fixee(self) -> Option<FixeeKind> {
        match self {
            MixerKind::QfixSum | MixerKind::QfixLin | MixerKind::QplusfixSum | MixerKind::QplusfixLin => {
                Some(FixeeKind::Vdn)
            }
            MixerKind::QfixMono | MixerKind::QplusfixMono => Some(FixeeKind::Qmix),
            _ => None,
        }
    }

    pub fn uses_monotonic_net(self) -> bool {
        matches!(self, MixerKind::Qmix | MixerKind::QfixMono | MixerKind::QplusfixMono)
    }

    pub fn is_fixing(self) -> bool {
        self.fixee().is_some()
    }

    /// Multiplicative (QFIX) as opposed to additive (Q+FIX) fixing.
    pub fn is_multiplicative_fix(self) -> bool {
        matches!(self, MixerKind::QfixSum | MixerKind::QfixMono | MixerKind::QfixLin)
    }

    pub fn is_additive_fix(self) -> bool {
        matches!(
            self,
            MixerKind::QplusfixSum | MixerKind::QplusfixMono | MixerKind::QplusfixLin
        )
    }

    pub fn is_linear_fix(self) -> bool {
        matches!(self, MixerKind::QfixLin | MixerKind::QplusfixLin)
    }

    /// Kinds for which detaching the advantages changes gradients.
    pub fn supports_detach(self) -> bool {
        self == MixerKind::Qplex || self.is_additive_fix()
    }

    pub fn has_params(self) -> bool {
        self != MixerKind::Vdn
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What the mixer's auxiliary networks (hypernets, fixing nets, QPLEX
/// weights) see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Concatenated history windows of all agents.
    #[default]
    Stateless,
    /// History windows followed by the state vector.
    HistoryState,
    /// The state vector alone.
    StateOnly,
}

impl Conditioning {
    pub const ALL: [Conditioning; 3] = [
        Conditioning::Stateless,
        Conditioning::HistoryState,
        Conditioning::StateOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Stateless => "stateless",
            Conditioning::HistoryState => "history_state",
            Conditioning::StateOnly => "state_only",
        }
    }

    pub fn uses_history(self) -> bool {
        self != Conditioning::StateOnly
    }

    pub fn uses_state(self) -> bool {
        self != Conditioning::Stateless
    }

    /// Builds the conditioning vector from joint history features and state.
    pub fn build(self, history: &[f64], state: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(history.len() + state.len());
        if self.uses_history() {
            out.extend_from_slice(history);
        }
        if self.uses_state() {
            out.extend_from_slice(state);
        }
        out
    }
}

fn default_width() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerSpec {
    pub kind: MixerKind,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub detach_advantages: bool,
    /// Hidden width of the monotonic mixing network.
    #[serde(default = "default_width")]
    pub mixing_hidden: usize,
    /// Hidden width of hypernetworks and QPLEX weight networks.
    #[serde(default = "default_width")]
    pub hypernet_hidden: usize,
    /// Hidden width of the fixing `w` and `b` networks.
    #[serde(default = "default_width")]
    pub fixing_hidden: usize,
}

impl MixerSpec {
    pub fn new(kind: MixerKind) -> Self {
        Self {
            kind,
            conditioning: Conditioning::default(),
            detach_advantages: false,
            mixing_hidden: default_width(),
            hypernet_hidden: default_width(),
            fixing_hidden: default_width(),
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn with_detach(mut self, detach: bool) -> Self {
        self.detach_advantages = detach;
        self
    }

    pub fn with_widths(mut self, width: usize) -> Self {
        self.mixing_hidden = width;
        self.hypernet_hidden = width;
        self.fixing_hidden = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixing_hidden == 0 || self.hypernet_hidden == 0 || self.fixing_hidden == 0 {
            return Err(Error::Config("mixer hidden widths must be positive".into()));
        }
        if self.detach_advantages && !self.kind.supports_detach() {
            return Err(Error::Config(format!(
                "detach_advantages has no effect for {}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Sizes a mixer needs from the environment and agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerDims {
    pub action_counts: Vec<usize>,
    /// Total length of all agents' history windows.
    pub history_dim: usize,
    pub state_dim: usize,
}

impl MixerDims {
    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn onehot_dim(&self) -> usize {
        self.action_counts.iter().sum()
    }

    pub fn cond_dim(&self, conditioning: Conditioning) -> usize {
        let mut d = 0;
        if conditioning.uses_history() {
            d += self.history_dim;
        }
        if conditioning.uses_state() {
            d += self.state_dim;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in MixerKind::ALL {
            assert_eq!(MixerKind::parse(k.name()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(MixerKind::parse("wqmix"), None);
    }

    #[test]
    fn detach_only_where_meaningful() {
        assert!(MixerSpec::new(MixerKind::Vdn).with_detach(true).validate().is_err());
        assert!(MixerSpec::new(MixerKind::QfixSum).with_detach(true).validate().is_err());
        assert!(MixerSpec::new(MixerKind::Qplex).with_detach(true).validate().is_ok());
        assert!(MixerSpec::new(MixerKind::QplusfixMono).with_detach(true).validate().is_ok());
    }

    #[test]
    fn conditioning_layout() {
        let dims = MixerDims {
            action_counts: vec![3, 3],
            history_dim: 10,
            state_dim: 2,
        };
        assert_eq!(dims.cond_dim(Conditioning::Stateless), 10);
        assert_eq!(dims.cond_dim(Conditioning::HistoryState), 12);
        assert_eq!(dims.cond_dim(Conditioning::StateOnly), 2);
        assert_eq!(Conditioning::HistoryState.build(&[1.0], &[2.0]), vec![1.0, 2.0]);
        assert_eq!(Conditioning::StateOnly.build(&[1.0], &[2.0]), vec![2.0]);
    }
}
