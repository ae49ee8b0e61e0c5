//! Joint-value compositions: VDN, QMIX, QPLEX and the QFIX / Q+FIX family.
//!
//! Every mixer consumes per-agent `(q_i(a_i), v_i, u_i(a_i))` terms for a
//! batch of joint actions, plus a conditioning vector and the joint-action
//! one-hot, and produces `Q(jh, ja)` for each row.
//!
//! Fixing layers (QFIX) compute `Q = w⁺(·, ja) · A_fixee + b(·)` with
//! `w⁺ = |w| + 10e-8 > 0`. The additive form (Q+FIX) computes
//! `Q = Q_fixee + w · A_fixee + b` with `w = |w_raw + 1| − 1 + 10e-8 > −1`,
//! and `Δ = w · A_fixee + b` is the fixing intervention. `-lin` variants
//! replace the scalar weight with one weight per agent applied to `u_i`.

mod checkpoint;
mod spec;

use rand::Rng;

pub use checkpoint::MixerCheckpoint;
pub use spec::{Conditioning, FixeeKind, MixerDims, MixerKind, MixerSpec};

use crate::agents::AgentTerms;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::joint;
use crate::nn::{Bind, Mlp};

/// Additive epsilon used by every positivity transform (`10e-8 = 1e-7`).
pub const WEIGHT_EPS: f64 = 10e-8;

/// Deliberate defects used to confirm that the property checks catch a
/// broken mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the first-layer monotonic mixing weights, breaking
    /// monotonicity.
    NegateMonotonicWeights,
}

#[derive(Clone, Debug)]
struct MonotonicNets {
    w1: Mlp,
    b1: Mlp,
    w2: Mlp,
    b2: Mlp,
    hidden: usize,
}

#[derive(Clone, Debug)]
struct QplexNets {
    w: Mlp,
    b: Mlp,
    lambda: Mlp,
}

#[derive(Clone, Debug)]
struct FixingNets {
    w: Mlp,
    b: Mlp,
}

/// Inputs for one batch of rows.
#[derive(Clone, Copy, Debug)]
pub struct MixerInput<'a> {
    pub terms: &'a [AgentTerms],
    /// `[B, cond_dim]`; unused by VDN.
    pub cond: Option<Var>,
    /// `[B, Σ action_counts]`; used by fixing and QPLEX λ networks.
    pub joint_onehot: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Let the annealing loss on `Δ` reach the fixee through `A_fixee`.
    /// Off by default: `Δ` sees a detached advantage.
    pub delta_through_fixee: bool,
}

/// Fixee value, its maximum over joint actions, and the advantage.
#[derive(Clone, Copy, Debug)]
pub struct FixeeParts {
    pub q: Var,
    pub v: Var,
    pub a: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MixerOutput {
    /// `[B]` joint values.
    pub q: Var,
    /// Fixee decomposition for fixing kinds, and for VDN/QMIX themselves.
    pub fixee: Option<FixeeParts>,
    /// Fixing intervention `Δ` (additive kinds only).
    pub delta: Option<Var>,
    /// Transformed fixing weight: `[B]`, or `[B, N]` for `-lin`.
    pub w: Option<Var>,
    /// Fixing bias `[B]`.
    pub b: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Mixer {
    spec: MixerSpec,
    dims: MixerDims,
    mono: Option<MonotonicNets>,
    qplex: Option<QplexNets>,
    fixing: Option<FixingNets>,
    fault: Option<Fault>,
}

impl Mixer {
    pub fn new(spec: MixerSpec, dims: MixerDims) -> Result<Self> {
        spec.validate()?;
        if dims.n_agents() < 2 {
            return Err(Error::Config("mixers need at least two agents".into()));
        }
        let kind = spec.kind;
        let c = dims.cond_dim(spec.conditioning);
        let n = dims.n_agents();
        let hh = spec.hypernet_hidden;
        if kind.has_params() && c == 0 {
            return Err(Error::Config(format!(
                "{} conditioning yields an empty input",
                spec.conditioning.name()
            )));
        }
        let mono = kind.uses_monotonic_net().then(|| {
            let h = spec.mixing_hidden;
            MonotonicNets {
                w1: Mlp::new("mixer.mono.hyper_w1", &[c, hh, n * h]),
                b1: Mlp::new("mixer.mono.hyper_b1", &[c, h]),
                w2: Mlp::new("mixer.mono.hyper_w2", &[c, hh, h]),
                b2: Mlp::new("mixer.mono.hyper_b2", &[c, hh, 1]),
                hidden: h,
            }
        });
        let qplex = (kind == MixerKind::Qplex).then(|| QplexNets {
            w: Mlp::new("mixer.qplex.w", &[c, hh, n]),
            b: Mlp::new("mixer.qplex.b", &[c, hh, n]),
            lambda: Mlp::new("mixer.qplex.lambda", &[c + dims.onehot_dim(), hh, n]),
        });
        let fixing = kind.is_fixing().then(|| {
            let fh = spec.fixing_hidden;
            let w_out = if kind.is_linear_fix() { n } else { 1 };
            FixingNets {
                w: Mlp::new("mixer.fix.w", &[c + dims.onehot_dim(), fh, w_out]),
                b: Mlp::new("mixer.fix.b", &[c, fh, 1]),
            }
        });
        Ok(Self {
            spec,
            dims,
            mono,
            qplex,
            fixing,
            fault: None,
        })
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn spec(&self) -> &MixerSpec {
        &self.spec
    }

    pub fn kind(&self) -> MixerKind {
        self.spec.kind
    }

    pub fn dims(&self) -> &MixerDims {
        &self.dims
    }

    pub fn cond_dim(&self) -> usize {
        self.dims.cond_dim(self.spec.conditioning)
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let mut out = Vec::new();
        if let Some(m) = &self.mono {
            out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
        }
        if let Some(q) = &self.qplex {
            out.extend([&q.w, &q.b, &q.lambda]);
        }
        if let Some(f) = &self.fixing {
            out.extend([&f.w, &f.b]);
        }
        out
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for mlp in self.mlps() {
            mlp.init(&mut store, rng);
        }
        store
    }

    /// Fixing weight network (raw, before the positivity transform).
    pub fn fixing_w_net(&self) -> Option<&Mlp> {
        self.fixing.as_ref().map(|f| &f.w)
    }

    pub fn fixing_b_net(&self) -> Option<&Mlp> {
        self.fixing.as_ref().map(|f| &f.b)
    }

    /// Makes the fixing networks output constants: raw weight `w_raw` (one
    /// entry, or one per agent for `-lin`) and bias `b`.
    pub fn set_fixing_constants(&self, store: &mut ParamStore, w_raw: &[f64], b: f64) -> Result<()> {
        let f = self
            .fixing
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no fixing layer", self.kind())))?;
        f.w.set_constant_output(store, w_raw)?;
        f.b.set_constant_output(store, &[b])
    }

    /// Raw fixing output that the weight transform maps to `target`.
    /// Both transforms reduce to `x + eps` on the branch used here.
    pub fn raw_weight_for(&self, target: f64) -> f64 {
        target - WEIGHT_EPS
    }

    /// Sets the monotonic network so that `f(x) = Σ x_i` for every input
    /// with `Σ x_i > −offset`: a single active hidden unit with unit weights
    /// and bias `offset`, cancelled by the output bias.
    pub fn set_monotonic_to_sum(&self, store: &mut ParamStore, offset: f64) -> Result<()> {
        let m = self
            .mono
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no monotonic network", self.kind())))?;
        let (n, h) = (self.dims.n_agents(), m.hidden);
        let mut w1 = vec![0.0; n * h];
        for i in 0..n {
            w1[i * h] = 1.0;
        }
        let mut b1 = vec![0.0; h];
        b1[0] = offset;
        let mut w2 = vec![0.0; h];
        w2[0] = 1.0;
        m.w1.set_constant_output(store, &w1)?;
        m.b1.set_constant_output(store, &b1)?;
        m.w2.set_constant_output(store, &w2)?;
        m.b2.set_constant_output(store, &[-offset])
    }

    fn stack(g: &mut Graph, vars: &[Var]) -> Result<Var> {
        let cols = vars
            .iter()
            .map(|&v| {
                let b = g.value(v).len();
                g.reshape(v, &[b, 1])
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&cols)
    }

    fn flatten_col(g: &mut Graph, v: Var) -> Result<Var> {
        let b = g.value(v).shape()[0];
        g.reshape(v, &[b])
    }

    fn cond(&self, input: &MixerInput<'_>) -> Result<Var> {
        input
            .cond
            .ok_or_else(|| Error::Config(format!("{} needs a conditioning input", self.kind())))
    }

    fn cond_with_actions(&self, g: &mut Graph, input: &MixerInput<'_>) -> Result<Var> {
        let cond = self.cond(input)?;
        let onehot = input
            .joint_onehot
            .ok_or_else(|| Error::Config(format!("{} needs the joint action", self.kind())))?;
        g.concat(&[cond, onehot])
    }

    /// Monotonic mixing of `[B, N]` inputs given shared hypernet outputs.
    fn monotonic_apply(
        g: &mut Graph,
        x: Var,
        hyper: &(Var, Var, Var, Var),
    ) -> Result<Var> {
        let (w1, b1, w2, b2) = *hyper;
        let h = g.batched_vecmat(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let y = g.mul(h, w2)?;
        let y = g.sum_last_dim(y);
        g.add(y, b2)
    }

    fn monotonic_hyper(
        &self,
        g: &mut Graph,
        bind: Bind<'_>,
        cond: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let m = self.mono.as_ref().expect("monotonic kind");
        let w1 = m.w1.forward(g, bind, cond)?;
        let mut w1 = g.abs(w1);
        if self.fault == Some(Fault::NegateMonotonicWeights) {
            w1 = g.scale(w1, -1.0);
        }
        let b1 = m.b1.forward(g, bind, cond)?;
        let w2 = m.w2.forward(g, bind, cond)?;
        let w2 = g.abs(w2);
        let b2 = m.b2.forward(g, bind, cond)?;
        let b2 = Self::flatten_col(g, b2)?;
        Ok((w1, b1, w2, b2))
    }

    fn fixee(&self, g: &mut Graph, bind: Bind<'_>, input: &MixerInput<'_>) -> Result<FixeeParts> {
        let qs: Vec<Var> = input.terms.iter().map(|t| t.q).collect();
        let vs: Vec<Var> = input.terms.iter().map(|t| t.v).collect();
        let q_stack = Self::stack(g, &qs)?;
        let v_stack = Self::stack(g, &vs)?;
        if self.kind().uses_monotonic_net() {
            let cond = self.cond(input)?;
            let hyper = self.monotonic_hyper(g, bind, cond)?;
            let q = Self::monotonic_apply(g, q_stack, &hyper)?;
            let v = Self::monotonic_apply(g, v_stack, &hyper)?;
            let a = g.sub(q, v)?;
            Ok(FixeeParts { q, v, a })
        } else {
            let us: Vec<Var> = input.terms.iter().map(|t| t.u).collect();
            let u_stack = Self::stack(g, &us)?;
            let q = g.sum_last_dim(q_stack);
            let v = g.sum_last_dim(v_stack);
            let a = g.sum_last_dim(u_stack);
            Ok(FixeeParts { q, v, a })
        }
    }

    /// `|x| + eps`, range `(0, ∞)`.
    fn positive(g: &mut Graph, x: Var) -> Var {
        let a = g.abs(x);
        g.add_scalar(a, WEIGHT_EPS)
    }

    /// `|x + 1| − 1 + eps`, range `(−1, ∞)`.
    fn above_minus_one(g: &mut Graph, x: Var) -> Var {
        let s = g.add_scalar(x, 1.0);
        let a = g.abs(s);
        let a = g.add_scalar(a, -1.0);
        g.add_scalar(a, WEIGHT_EPS)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: Bind<'_>,
        input: &MixerInput<'_>,
        opts: ForwardOptions,
    ) -> Result<MixerOutput> {
        if input.terms.len() != self.dims.n_agents() {
            return Err(Error::Shape {
                op: "mixer",
                lhs: vec![self.dims.n_agents()],
                rhs: vec![input.terms.len()],
            });
        }
        let kind = self.kind();
        let detach = self.spec.detach_advantages;
        match kind {
            MixerKind::Vdn | MixerKind::Qmix => {
                let parts = self.fixee(g, bind, input)?;
                Ok(MixerOutput {
                    q: parts.q,
                    fixee: Some(parts),
                    delta: None,
                    w: None,
                    b: None,
                })
            }
            MixerKind::Qplex => {
                let nets = self.qplex.as_ref().expect("qplex nets");
                let cond = self.cond(input)?;
                let w = nets.w.forward(g, bind, cond)?;
                let w = Self::positive(g, w);
                let b = nets.b.forward(g, bind, cond)?;
                let ca = self.cond_with_actions(g, input)?;
                let lambda = nets.lambda.forward(g, bind, ca)?;
                let lambda = Self::positive(g, lambda);

                let vs: Vec<Var> = input.terms.iter().map(|t| t.v).collect();
                let us: Vec<Var> = input.terms.iter().map(|t| t.u).collect();
                let v = Self::stack(g, &vs)?;
                let mut u = Self::stack(g, &us)?;
                if detach {
                    u = g.stop_gradient(u);
                }
                let wv = g.mul(w, v)?;
                let values = g.add(wv, b)?;
                let value = g.sum_last_dim(values);
                let lw = g.mul(lambda, w)?;
                let adv = g.mul(lw, u)?;
                let adv = g.sum_last_dim(adv);
                let q = g.add(value, adv)?;
                Ok(MixerOutput {
                    q,
                    fixee: None,
                    delta: None,
                    w: None,
                    b: None,
                })
            }
            _ => self.forward_fixing(g, bind, input, opts),
        }
    }

    fn forward_fixing(
        &self,
        g: &mut Graph,
        bind: Bind<'_>,
        input: &MixerInput<'_>,
        opts: ForwardOptions,
    ) -> Result<MixerOutput> {
        let kind = self.kind();
        let nets = self.fixing.as_ref().expect("fixing nets");
        let detach = self.spec.detach_advantages;
        let parts = self.fixee(g, bind, input)?;

        let cond = self.cond(input)?;
        let ca = self.cond_with_actions(g, input)?;
        let w_raw = nets.w.forward(g, bind, ca)?;
        let w_raw = if kind.is_linear_fix() {
            w_raw
        } else {
            Self::flatten_col(g, w_raw)?
        };
        let w = if kind.is_additive_fix() {
            Self::above_minus_one(g, w_raw)
        } else {
            Self::positive(g, w_raw)
        };
        let b = nets.b.forward(g, bind, cond)?;
        let b = Self::flatten_col(g, b)?;

        // weighted advantage term, with the advantage optionally detached
        let weighted = |g: &mut Graph, detached: bool| -> Result<Var> {
            if kind.is_linear_fix() {
                let us: Vec<Var> = input.terms.iter().map(|t| t.u).collect();
                let mut u = Self::stack(g, &us)?;
                if detached {
                    u = g.stop_gradient(u);
                }
                let wu = g.mul(w, u)?;
                Ok(g.sum_last_dim(wu))
            } else {
                let a = if detached { g.stop_gradient(parts.a) } else { parts.a };
                g.mul(w, a)
            }
        };

        if kind.is_multiplicative_fix() {
            let wa = weighted(g, false)?;
            let q = g.add(wa, b)?;
            return Ok(MixerOutput {
                q,
                fixee: Some(parts),
                delta: None,
                w: Some(w),
                b: Some(b),
            });
        }

        let wa = weighted(g, detach)?;
        let intervention = g.add(wa, b)?;
        let q = g.add(parts.q, intervention)?;
        let delta = if opts.delta_through_fixee || detach {
            intervention
        } else {
            let wa = weighted(g, true)?;
            g.add(wa, b)?
        };
        Ok(MixerOutput {
            q,
            fixee: Some(parts),
            delta: Some(delta),
            w: Some(w),
            b: Some(b),
        })
    }

    /// Joint values for every joint action, given fixed utilities and a
    /// single conditioning vector. Row-major over joint actions.
    pub fn joint_values(&self, store: &ParamStore, utilities: &[Vec<f64>], cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let rows = RowBatch::all_joint_actions(&self.dims, utilities, cond)?;
        let out = rows.forward(self, &mut g, Bind::frozen(store), ForwardOptions::default())?;
        Ok(g.value(out.q).data().to_vec())
    }

    /// Mixer output for a single joint action.
    pub fn value_at(&self, store: &ParamStore, utilities: &[Vec<f64>], cond: &[f64], joint_action: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let rows = RowBatch::new(&self.dims, vec![(utilities.to_vec(), cond.to_vec(), joint_action.to_vec())])?;
        let out = rows.forward(self, &mut g, Bind::frozen(store), ForwardOptions::default())?;
        Ok(g.value(out.q).item())
    }
}

/// A batch of `(utilities, conditioning, joint action)` rows with utilities
/// supplied as constants. Used for table evaluation and fitting.
#[derive(Clone, Debug)]
pub struct RowBatch {
    utilities: Vec<Tensor>,
    actions: Vec<Vec<usize>>,
    cond: Tensor,
    onehot: Tensor,
}

impl RowBatch {
    pub fn new(dims: &MixerDims, rows: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)>) -> Result<Self> {
        let n = dims.n_agents();
        let r = rows.len();
        let cond_dim = rows.first().map_or(0, |row| row.1.len());
        let mut util_data: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut actions: Vec<Vec<usize>> = vec![Vec::with_capacity(r); n];
        let mut cond = Vec::with_capacity(r * cond_dim);
        let mut onehot = Vec::with_capacity(r * dims.onehot_dim());
        for (utils, c, ja) in &rows {
            if utils.len() != n || ja.len() != n || c.len() != cond_dim {
                return Err(Error::Shape {
                    op: "row_batch",
                    lhs: vec![n, cond_dim],
                    rhs: vec![utils.len(), c.len()],
                });
            }
            for i in 0..n {
                if utils[i].len() != dims.action_counts[i] || ja[i] >= dims.action_counts[i] {
                    return Err(Error::ActionOutOfRange {
                        agent: i,
                        action: ja[i],
                        count: dims.action_counts[i],
                    });
                }
                util_data[i].extend_from_slice(&utils[i]);
                actions[i].push(ja[i]);
            }
            cond.extend_from_slice(c);
            onehot.extend(joint::one_hot(&dims.action_counts, ja));
        }
        let utilities = util_data
            .into_iter()
            .zip(&dims.action_counts)
            .map(|(d, &a)| Tensor::new(vec![r, a], d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            utilities,
            actions,
            cond: Tensor::new(vec![r, cond_dim], cond)?,
            onehot: Tensor::new(vec![r, dims.onehot_dim()], onehot)?,
        })
    }

    pub fn all_joint_actions(dims: &MixerDims, utilities: &[Vec<f64>], cond: &[f64]) -> Result<Self> {
        let rows = joint::enumerate(&dims.action_counts)?
            .into_iter()
            .map(|ja| (utilities.to_vec(), cond.to_vec(), ja))
            .collect();
        Self::new(dims, rows)
    }

    pub fn len(&self) -> usize {
        self.cond.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs the mixer with utilities as constants.
    pub fn forward(&self, mixer: &Mixer, g: &mut Graph, bind: Bind<'_>, opts: ForwardOptions) -> Result<MixerOutput> {
        let terms = self
            .utilities
            .iter()
            .zip(&self.actions)
            .map(|(u, a)| {
                let q = g.constant(u.clone());
                AgentTerms::at_actions(g, q, a)
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward_with_terms(mixer, g, bind, &terms, opts)
    }

    /// Runs the mixer on caller-built agent terms (e.g. with utilities as
    /// differentiable leaves).
    pub fn forward_with_terms(
        &self,
        mixer: &Mixer,
        g: &mut Graph,
        bind: Bind<'_>,
        terms: &[AgentTerms],
        opts: ForwardOptions,
    ) -> Result<MixerOutput> {
        let cond = g.constant(self.cond.clone());
        let onehot = g.constant(self.onehot.clone());
        let input = MixerInput {
            terms,
            cond: Some(cond),
            joint_onehot: Some(onehot),
        };
        mixer.forward(g, bind, &input, opts)
    }

    pub fn utilities(&self) -> &[Tensor] {
        &self.utilities
    }

    pub fn actions(&self) -> &[Vec<usize>] {
        &self.actions
    }
}
