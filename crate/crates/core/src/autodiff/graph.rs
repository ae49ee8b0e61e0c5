//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its forward value, so node order is always a valid topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchedVecMat(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumLastDim(usize),
    MaxLastDim(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    Mse(usize, usize),
    Concat(Vec<usize>),
    Scale(usize, f64),
    AddScalar(usize),
    Reshape(usize),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which operand of a binary elementwise op is broadcast over the leading
/// batch dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if a.len() == b.len() + 1 && a[1..] == *b {
        Ok(Broadcast::Rhs)
    } else if b.len() == a.len() + 1 && b[1..] == *a {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    kink_margin: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance of any relu/abs input from zero, or of any row max
    /// from its runner-up, seen so far. Finite-difference checks resample
    /// when this is small.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Loads a parameter from a store, as a trainable leaf.
    pub fn load(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.param(name, t.clone()))
    }

    /// Loads a parameter from a store as a constant (frozen).
    pub fn load_frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.constant(t.clone()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Per-row vector–matrix product: `x` is `[B, n]`, `w` is `[B, n*h]`
    /// holding one row-major `n × h` matrix per batch row; result `[B, h]`.
    pub fn batched_vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        let err = || Error::Shape {
            op: "batched_vecmat",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        if sx.len() != 2 || sw.len() != 2 || sx[0] != sw[0] || sx[1] == 0 || sw[1] % sx[1] != 0 {
            return Err(err());
        }
        let (batch, n) = (sx[0], sx[1]);
        let h = sw[1] / n;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * h];
        for b in 0..batch {
            for i in 0..n {
                let xi = xd[b * n + i];
                let row = &wd[b * n * h + i * h..b * n * h + (i + 1) * h];
                for (o, &wij) in out[b * h..(b + 1) * h].iter_mut().zip(row) {
                    *o += xi * wij;
                }
            }
        }
        let rg = self.any_grad(&[x.0, w.0]);
        Ok(self.push(
            Tensor::new(vec![batch, h], out)?,
            Op::BatchedVecMat(x.0, w.0),
            rg,
        ))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta.shape(), tb.shape())?;
        let out = match kind {
            Broadcast::None => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::Rhs => {
                let mut data = Vec::with_capacity(ta.len());
                for chunk in ta.data().chunks(tb.len().max(1)) {
                    data.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
                }
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::Lhs => {
                let mut data = Vec::with_capacity(tb.len());
                for chunk in tb.data().chunks(ta.len().max(1)) {
                    data.extend(ta.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                Tensor::new(tb.shape().to_vec(), data)?
            }
        };
        Ok((out, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let margin = t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.kink_margin = self.kink_margin.min(margin);
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::Relu(x.0), rg)
    }

    /// Elementwise absolute value; the derivative at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let margin = t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let data = t.data().iter().map(|v| v.abs()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.kink_margin = self.kink_margin.min(margin);
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::Abs(x.0), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.any_grad(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    pub fn sum_last_dim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = t.last_dim().max(1);
        let data: Vec<f64> = t.data().chunks(k).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data).expect("reduced shape");
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::SumLastDim(x.0), rg)
    }

    /// Row maximum over the last dimension. The gradient flows to the
    /// lowest-index maximal entry.
    pub fn max_last_dim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = t.last_dim();
        if k == 0 || t.shape().is_empty() {
            return Err(Error::Shape {
                op: "max_last_dim",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut idx = Vec::with_capacity(t.len() / k);
        let mut data = Vec::with_capacity(t.len() / k);
        let mut margin = f64::INFINITY;
        for row in t.data().chunks(k) {
            let i = super::tensor::argmax(row);
            let second = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            margin = margin.min(row[i] - second);
            idx.push(i);
            data.push(row[i]);
        }
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        self.kink_margin = self.kink_margin.min(margin);
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(out, Op::MaxLastDim(x.0, idx), rg))
    }

    /// Row-wise argmax over the last dimension (lowest index on ties). Not
    /// differentiable, so nothing is recorded.
    pub fn argmax_last_dim(&self, x: Var) -> Vec<usize> {
        self.value(x).argmax_last_dim()
    }

    /// Picks `x[b, index[b]]` from a `[B, k]` tensor, giving `[B]`.
    pub fn gather_last_dim(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::Shape {
                op: "gather_last_dim",
                lhs: s.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let k = s[1];
        let data = index
            .iter()
            .enumerate()
            .map(|(b, &i)| t.data()[b * k + i])
            .collect();
        let out = Tensor::new(vec![index.len()], data)?;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(out, Op::Gather(x.0, index.to_vec()), rg))
    }

    /// `½ · mean((a − b)²)`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.len().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(0.5 * s / n), Op::Mse(a.0, b.0), rg))
    }

    /// Concatenates along the last dimension. Inputs must agree on every
    /// other dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(ids), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::AddScalar(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Identity on values, zero on gradients.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rt.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[*a].requires_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for (da_row, g_row) in da.chunks_exact_mut(k.max(1)).zip(gd.chunks_exact(n.max(1))) {
                        for (d, b_row) in da_row.iter_mut().zip(tb.data().chunks_exact(n.max(1))) {
                            *d = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for (a_row, g_row) in ta.data().chunks_exact(k.max(1)).zip(gd.chunks_exact(n.max(1))) {
                        for (&aip, db_row) in a_row.iter().zip(db.chunks_exact_mut(n.max(1))) {
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &g) in db_row.iter_mut().zip(g_row) {
                                *d += aip * g;
                            }
                        }
                    }
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::BatchedVecMat(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let (batch, n) = (tx.shape()[0], tx.shape()[1]);
                let h = tw.shape()[1] / n;
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; batch * n];
                    for b in 0..batch {
                        for i in 0..n {
                            let row = &tw.data()[b * n * h + i * h..b * n * h + (i + 1) * h];
                            dx[b * n + i] = row
                                .iter()
                                .zip(&gd[b * h..(b + 1) * h])
                                .map(|(w, g)| w * g)
                                .sum();
                        }
                    }
                    accumulate(grads, *x, tx.shape(), dx);
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; batch * n * h];
                    for b in 0..batch {
                        for i in 0..n {
                            let xi = tx.data()[b * n + i];
                            for j in 0..h {
                                dw[b * n * h + i * h + j] = xi * gd[b * h + j];
                            }
                        }
                    }
                    accumulate(grads, *w, tw.shape(), dw);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ta, tb) = (val(*a), val(*b));
                let kind = broadcast_kind("add", ta.shape(), tb.shape()).expect("checked");
                if self.nodes[*a].requires_grad {
                    let da = reduce_broadcast(gd, ta.len(), kind == Broadcast::Lhs);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = reduce_broadcast(gd, tb.len(), kind == Broadcast::Rhs);
                    if sign < 0.0 {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let kind = broadcast_kind("mul", ta.shape(), tb.shape()).expect("checked");
                let (ka, kb) = (ta.len().max(1), tb.len().max(1));
                if self.nodes[*a].requires_grad {
                    let full = times_cycled(gd, tb.data(), kb);
                    let da = reduce_broadcast(&full, ta.len(), kind == Broadcast::Lhs);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.nodes[*b].requires_grad {
                    let full = times_cycled(gd, ta.data(), ka);
                    let db = reduce_broadcast(&full, tb.len(), kind == Broadcast::Rhs);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Abs(x) => {
                let tx = val(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Sum(x) => {
                let tx = val(*x);
                accumulate(grads, *x, tx.shape(), vec![gd[0]; tx.len()]);
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let n = tx.len().max(1) as f64;
                accumulate(grads, *x, tx.shape(), vec![gd[0] / n; tx.len()]);
            }
            Op::SumLastDim(x) => {
                let tx = val(*x);
                let k = tx.last_dim().max(1);
                let dx = (0..tx.len()).map(|i| gd[i / k]).collect();
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::MaxLastDim(x, idx) => {
                let tx = val(*x);
                let k = tx.last_dim();
                let mut dx = vec![0.0; tx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * k + i] = gd[r];
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Gather(x, idx) => {
                let tx = val(*x);
                let k = tx.shape()[1];
                let mut dx = vec![0.0; tx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * k + i] = gd[r];
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.len().max(1) as f64;
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| (x - y) * gd[0] / n)
                    .collect();
                if self.nodes[*b].requires_grad {
                    let db = diff.iter().map(|v| -v).collect();
                    accumulate(grads, *b, tb.shape(), db);
                }
                if self.nodes[*a].requires_grad {
                    accumulate(grads, *a, ta.shape(), diff);
                }
            }
            Op::Concat(ids) => {
                let widths: Vec<usize> = ids.iter().map(|&i| val(i).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { gd.len() / total };
                let mut offset = 0;
                for (&i, &w) in ids.iter().zip(&widths) {
                    if self.nodes[i].requires_grad {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, i, val(i).shape(), dx);
                    }
                    offset += w;
                }
            }
            Op::Scale(x, c) => {
                let tx = val(*x);
                accumulate(grads, *x, tx.shape(), gd.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let tx = val(*x);
                accumulate(grads, *x, tx.shape(), gd.to_vec());
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// Folds an output-shaped gradient back onto an operand that was broadcast
/// over the leading dimension.
fn reduce_broadcast(g: &[f64], len: usize, broadcast: bool) -> Vec<f64> {
    if !broadcast {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `g[i] * x[i % k]`, with `x` repeated over the leading dimension.
fn times_cycled(g: &[f64], x: &[f64], k: usize) -> Vec<f64> {
    if x.len() == g.len() {
        return g.iter().zip(x).map(|(a, b)| a * b).collect();
    }
    let mut out = Vec::with_capacity(g.len());
    for chunk in g.chunks(k) {
        out.extend(chunk.iter().zip(x).map(|(a, b)| a * b));
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[id] {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("grad shape")),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient for a node, or `None` if nothing reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a node, zero-filled when nothing reached it.
    pub fn wrt_or_zero(&self, graph: &Graph, v: Var) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Gradients of every named parameter on the graph. Parameters loaded
    /// more than once have their contributions summed.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            let Some(g) = self.grads.get(*id).and_then(Option::as_ref) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecv(g: &mut Graph, xs: &[f64]) -> Var {
        g.variable(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn add_relu_max_examples() {
        let mut g = Graph::new();
        let a = vecv(&mut g, &[1.0, 2.0]);
        let b = vecv(&mut g, &[0.5, -0.5]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1.5, 1.5]);

        let x = vecv(&mut g, &[-1.0, 0.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let m = g.constant(Tensor::from_rows(&[vec![1.0, 3.0, 2.0]]).unwrap());
        let mx = g.max_last_dim(m).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0]);
        assert_eq!(g.argmax_last_dim(m), vec![1]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"));
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
        // a leading batch dimension broadcasts
        let d = g.constant(Tensor::zeros(&[3]));
        let ad = g.add(a, d).unwrap();
        assert_eq!(g.value(ad).shape(), &[2, 3]);
    }

    #[test]
    fn stop_gradient_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![2.5]));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y).data(), &[2.5]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let sx = g.stop_gradient(x);
        let p = g.mul(x, sx).unwrap();
        let root = g.sum(p);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.stop_gradient(sq);
        let root = g.sum(s);
        let grads = g.backward(root).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt_or_zero(&g, x).data(), &[0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::vector(vec![0.3, -1.0, 4.0]));
        let root = g.sum(p);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.by_name()["p"].data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let p = g.param("p", Tensor::vector(vec![2.0]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let loss = g.mse(p, zero).unwrap();
        assert_eq!(g.value(loss).item(), 2.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn abs_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.0, -2.0, 3.0]));
        let a = g.abs(x);
        let root = g.sum(a);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, -1.0, 1.0]);
        assert_eq!(g.kink_margin(), 0.0);
    }

    #[test]
    fn repeated_param_gradients_sum() {
        let mut g = Graph::new();
        let a = g.param("w", Tensor::vector(vec![1.0]));
        let b = g.param("w", Tensor::vector(vec![1.0]));
        let s = g.add(a, b).unwrap();
        let root = g.sum(s);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.by_name()["w"].data(), &[2.0]);
    }
}
