//! Per-agent utility networks over fixed-length history windows, and the
//! value/advantage split every mixer consumes.

mod window;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use window::HistoryWindow;

use crate::autodiff::{argmax, Graph, ParamStore, Tensor, Var};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Bind, Mlp};

fn default_window() -> usize {
    4
}
fn default_hidden() -> usize {
    64
}
fn default_shared() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// One network for all agents, with an agent-id one-hot appended.
    #[serde(default = "default_shared")]
    pub shared: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            hidden: default_hidden(),
            shared: default_shared(),
        }
    }
}

/// Two-layer MLP `Q_i(h_i, ·)` for every agent.
#[derive(Clone, Debug)]
pub struct UtilityNetwork {
    config: AgentConfig,
    action_counts: Vec<usize>,
    obs_dim: usize,
    nets: Vec<Mlp>,
}

impl UtilityNetwork {
    pub fn new(config: AgentConfig, env: &EnvSpec) -> Result<Self> {
        if config.window == 0 || config.hidden == 0 {
            return Err(Error::Config("agent window and hidden width must be positive".into()));
        }
        let n = env.n_agents;
        let counts = env.action_counts.clone();
        if config.shared && counts.iter().any(|&c| c != counts[0]) {
            return Err(Error::Config(
                "shared agent parameters require equal action counts".into(),
            ));
        }
        let nets = if config.shared {
            let input = config.window * (env.obs_dim + counts[0]) + n;
            let mlp = Mlp::new("agent.shared", &[input, config.hidden, counts[0]]);
            vec![mlp; n]
        } else {
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let input = config.window * (env.obs_dim + c);
                    Mlp::new(format!("agent.{i}"), &[input, config.hidden, c])
                })
                .collect()
        };
        Ok(Self {
            config,
            action_counts: counts,
            obs_dim: env.obs_dim,
            nets,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn new_window(&self, agent: usize) -> HistoryWindow {
        HistoryWindow::new(self.config.window, self.obs_dim, self.action_counts[agent])
    }

    pub fn window_dim(&self, agent: usize) -> usize {
        self.config.window * (self.obs_dim + self.action_counts[agent])
    }

    /// Sum of all agents' window feature lengths.
    pub fn joint_window_dim(&self) -> usize {
        (0..self.n_agents()).map(|i| self.window_dim(i)).sum()
    }

    pub fn net(&self, agent: usize) -> &Mlp {
        &self.nets[agent]
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        if self.config.shared {
            self.nets[0].init(&mut store, rng);
        } else {
            self.nets.iter().for_each(|m| m.init(&mut store, rng));
        }
        store
    }

    /// Parameter names that belong to `agent`'s network.
    pub fn param_names(&self, agent: usize) -> Vec<String> {
        let net = &self.nets[agent];
        (0..net.num_layers())
            .flat_map(|l| [net.weight_name(l), net.bias_name(l)])
            .collect()
    }

    fn input_row(&self, agent: usize, window: &[f64]) -> Vec<f64> {
        let mut row = window.to_vec();
        if self.config.shared {
            let mut id = vec![0.0; self.n_agents()];
            id[agent] = 1.0;
            row.extend(id);
        }
        row
    }

    /// Utilities for a batch of window features: `[B, action_count]`.
    pub fn utilities(
        &self,
        g: &mut Graph,
        bind: Bind<'_>,
        agent: usize,
        windows: &[&[f64]],
    ) -> Result<Var> {
        let expected = self.window_dim(agent);
        let mut data = Vec::new();
        for w in windows {
            if w.len() != expected {
                return Err(Error::Shape {
                    op: "utilities",
                    lhs: vec![expected],
                    rhs: vec![w.len()],
                });
            }
            data.extend(self.input_row(agent, w));
        }
        let cols = self.nets[agent].input_dim();
        let x = g.constant(Tensor::new(vec![windows.len(), cols], data)?);
        self.nets[agent].forward(g, bind, x)
    }

    /// Utilities for a single window, outside any training graph.
    pub fn utilities_of(&self, store: &ParamStore, agent: usize, window: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let q = self.utilities(&mut g, Bind::frozen(store), agent, &[window])?;
        Ok(g.value(q).data().to_vec())
    }
}

/// `q` over actions together with `v = max q` and `u = q − v`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTriple {
    pub q: Vec<f64>,
    pub v: f64,
    pub u: Vec<f64>,
}

impl UtilityTriple {
    /// Lowest-index maximal action.
    pub fn greedy(&self) -> usize {
        argmax(&self.q)
    }
}

pub fn decompose(q: &[f64]) -> Result<UtilityTriple> {
    if q.is_empty() {
        return Err(Error::Shape {
            op: "decompose",
            lhs: vec![],
            rhs: vec![],
        });
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("utilities must be finite".into()));
    }
    let v = q[argmax(q)];
    Ok(UtilityTriple {
        q: q.to_vec(),
        v,
        u: q.iter().map(|x| x - v).collect(),
    })
}

/// ε-greedy: with probability `epsilon` a uniformly random action, else the
/// lowest-index argmax.
pub fn select_action(q: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Graph-level `(q_i(a_i), v_i, u_i(a_i))` for a batch, each `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct AgentTerms {
    pub q: Var,
    pub v: Var,
    pub u: Var,
}

impl AgentTerms {
    /// Splits a `[B, A]` utility tensor at the chosen actions.
    pub fn at_actions(g: &mut Graph, utilities: Var, actions: &[usize]) -> Result<Self> {
        let q = g.gather_last_dim(utilities, actions)?;
        let v = g.max_last_dim(utilities)?;
        let u = g.sub(q, v)?;
        Ok(Self { q, v, u })
    }
}
