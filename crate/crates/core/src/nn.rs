//! Dense feed-forward layers stored in a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// A parameter store viewed either as trainable leaves or as constants.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if self.trainable {
            g.load(self.store, name)
        } else {
            g.load_frozen(self.store, name)
        }
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            store.init_uniform(self.weight_name(l), &[fan_in, fan_out], bound, rng);
            store.init_uniform(self.bias_name(l), &[fan_out], bound, rng);
        }
    }

    /// `x` is `[B, input_dim]`; returns `[B, output_dim]`.
    pub fn forward(&self, g: &mut Graph, bind: Bind<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = bind.var(g, &self.weight_name(l))?;
            let b = bind.var(g, &self.bias_name(l))?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if l + 1 < self.num_layers() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Zeroes the final weight matrix and sets the final bias, so the
    /// network outputs `values` for every input.
    pub fn set_constant_output(&self, store: &mut ParamStore, values: &[f64]) -> Result<()> {
        let last = self.num_layers() - 1;
        let shape = [self.sizes[last], self.output_dim()];
        store.set(&self.weight_name(last), Tensor::zeros(&shape))?;
        store.set(&self.bias_name(last), Tensor::vector(values.to_vec()))
    }
}
