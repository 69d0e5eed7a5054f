//! Reverse-mode differentiation over a Wengert tape.
//!
//! Ops are evaluated eagerly as they are recorded; the tape keeps every value
//! so that backward can read what it needs. Node ids are insertion indices, so
//! insertion order is a topological order and backward walks it in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::norm::{self, NormLayout};
use crate::tensor::{self, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over its rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { x: Var, rows: (usize, usize), cols: (usize, usize) },
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    Norm { x: Var, gamma: Var, beta: Var, layout: NormLayout },
    L2Normalize { x: Var, groups: usize },
    TokenShift { x: Var, prev: Var, mu: Var },
    StateScan { init: Var, decay: Var, kappa: Var, rate: Var, key: Var, value: Var, heads: usize },
    HeadReadout { query: Var, states: Var, heads: usize },
    HeadEncode { input: Var, states: Var, heads: usize },
    HeadProject { x: Var, proj: Var, heads: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::Norm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::TokenShift { .. } => "token_shift",
            Op::StateScan { .. } => "state_scan",
            Op::HeadReadout { .. } => "head_readout",
            Op::HeadEncode { .. } => "head_encode",
            Op::HeadProject { .. } => "head_project",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    pub fn is_softmax(&self) -> bool {
        matches!(self, Op::SoftmaxCrossEntropy { .. })
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::L2Normalize { x, .. } => vec![*x],
            Op::TokenShift { x, prev, mu } => vec![*x, *prev, *mu],
            Op::StateScan { init, decay, kappa, rate, key, value, .. } => {
                vec![*init, *decay, *kappa, *rate, *key, *value]
            }
            Op::HeadReadout { query, states, .. } => vec![*query, *states],
            Op::HeadEncode { input, states, .. } => vec![*input, *states],
            Op::HeadProject { x, proj, .. } => vec![*x, *proj],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<F> {
    op: Op,
    value: Arc<Tensor<F>>,
}

/// Append-only record of evaluated ops.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    /// Names of the parameter leaves recorded on this tape, in insertion order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_value(Op::Leaf, Arc::new(value))
    }

    pub fn param(&mut self, name: impl Into<String>, value: Arc<Tensor<F>>) -> Var {
        self.push_value(Op::Param(name.into()), value)
    }

    fn push_value(&mut self, op: Op, value: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        if cfg!(debug_assertions) && !value.is_finite() && op.inputs().iter().all(|&v| self.value(v).is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        Ok(self.push_value(op, Arc::new(value)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        self.push(Op::Slice { x, rows, cols })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather { table, ids: ids.to_vec() })
    }
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout) -> Result<Var> {
        self.push(Op::Norm { x, gamma, beta, layout })
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        self.norm(x, gamma, beta, NormLayout::plain(cols, eps))
    }
    pub fn l2_normalize(&mut self, x: Var, groups: usize) -> Result<Var> {
        self.push(Op::L2Normalize { x, groups })
    }
    pub fn token_shift(&mut self, x: Var, prev: Var, mu: Var) -> Result<Var> {
        self.push(Op::TokenShift { x, prev, mu })
    }
    #[allow(clippy::too_many_arguments)]
    pub fn state_scan(
        &mut self,
        init: Var,
        decay: Var,
        kappa: Var,
        rate: Var,
        key: Var,
        value: Var,
        heads: usize,
    ) -> Result<Var> {
        self.push(Op::StateScan { init, decay, kappa, rate, key, value, heads })
    }
    pub fn head_readout(&mut self, query: Var, states: Var, heads: usize) -> Result<Var> {
        self.push(Op::HeadReadout { query, states, heads })
    }
    pub fn head_encode(&mut self, input: Var, states: Var, heads: usize) -> Result<Var> {
        self.push(Op::HeadEncode { input, states, heads })
    }
    pub fn head_project(&mut self, x: Var, proj: Var, heads: usize) -> Result<Var> {
        self.push(Op::HeadProject { x, proj, heads })
    }
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() })
    }

    fn eval(&self, op: &Op) -> Result<Tensor<F>> {
        let v = |x: &Var| -> &Tensor<F> { &self.nodes[x.0].value };
        Ok(match op {
            Op::Leaf | Op::Param(_) => {
                return Err(Error::Contract("leaves carry their own values".into()));
            }
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Mul(a, b) => v(a).mul(v(b))?,
            Op::AddRow(a, r) => {
                let (a, r) = (v(a), v(r));
                if r.shape() != (1, a.cols()) {
                    return Err(Error::shape("add_row", a.shape(), r.shape()));
                }
                let mut out = a.clone();
                for t in 0..out.rows() {
                    for (o, &b) in out.row_mut(t).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(a, s) => v(a).scale(F::of(*s)),
            Op::AddScalar(a, s) => {
                let s = F::of(*s);
                v(a).map(|x| x + s)
            }
            Op::Relu(a) => v(a).relu(),
            Op::Sigmoid(a) => v(a).sigmoid(),
            Op::Exp(a) => v(a).exp(),
            Op::Transpose(a) => v(a).transpose(),
            Op::ConcatCols(parts) => Tensor::concat_cols(&parts.iter().map(v).collect::<Vec<_>>())?,
            Op::ConcatRows(parts) => Tensor::concat_rows(&parts.iter().map(v).collect::<Vec<_>>())?,
            Op::Slice { x, rows, cols } => v(x).slice(rows.0, rows.1, cols.0, cols.1)?,
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Gather { table, ids } => kernels::gather_rows(v(table), ids)?,
            Op::Norm { x, gamma, beta, layout } => norm::norm_forward(v(x), v(gamma), v(beta), layout)?,
            Op::L2Normalize { x, groups } => kernels::l2_normalize(v(x), *groups)?,
            Op::TokenShift { x, prev, mu } => kernels::token_shift(v(x), v(prev), v(mu))?,
            Op::StateScan { init, decay, kappa, rate, key, value, heads } => {
                kernels::state_scan(v(init), v(decay), v(kappa), v(rate), v(key), v(value), *heads)?
            }
            Op::HeadReadout { query, states, heads } => kernels::head_readout(v(query), v(states), *heads)?,
            Op::HeadEncode { input, states, heads } => kernels::head_encode(v(input), v(states), *heads)?,
            Op::HeadProject { x, proj, heads } => kernels::head_project(v(x), v(proj), *heads)?,
            Op::SoftmaxCrossEntropy { logits, targets } => kernels::softmax_cross_entropy(v(logits), targets)?,
        })
    }

    /// Recompute every non-leaf node from its recorded inputs and require a
    /// bitwise match with the stored value.
    pub fn replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let again = self.eval(&node.op)?;
            let same = again.shape() == node.value.shape()
                && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits_eq(*b));
            if !same {
                return Err(Error::Contract(format!("replay mismatch at node {i} ({})", node.op.name())));
            }
        }
        Ok(())
    }

    /// Gradients of a scalar node with respect to every node that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, shapes, params })
    }

    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let v = |x: &Var| -> &Tensor<F> { &self.nodes[x.0].value };
        let out = &self.nodes[id].value;
        let mut acc = |var: Var, t: Tensor<F>| {
            if var.0 >= grads.len() {
                return;
            }
            match &mut grads[var.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = bv.transpose();
                let mut da = Tensor::zeros(av.rows(), av.cols());
                tensor::matmul_acc(g.data(), bt.data(), da.data_mut(), g.rows(), g.cols(), bt.cols());
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                tensor::matmul_tn_acc(av.data(), g.data(), db.data_mut(), av.rows(), av.cols(), g.cols());
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(v(b)).expect("same shape"));
                acc(*b, g.mul(v(a)).expect("same shape"));
            }
            Op::AddRow(a, r) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for t in 0..g.rows() {
                    for (d, &x) in dr.data_mut().iter_mut().zip(g.row(t)) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*r, dr);
            }
            Op::Scale(a, s) => acc(*a, g.scale(F::of(*s))),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = v(a);
                let d = Tensor::new(
                    x.rows(),
                    x.cols(),
                    x.data().iter().zip(g.data()).map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() }).collect(),
                )
                .expect("shape");
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = out.map(|y| y * (F::one() - y)).mul(g).expect("shape");
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, out.mul(g).expect("shape")),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = v(p).cols();
                    acc(*p, g.slice(0, g.rows(), c0, c0 + w).expect("in range"));
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let h = v(p).rows();
                    acc(*p, g.slice(r0, r0 + h, 0, g.cols()).expect("in range"));
                    r0 += h;
                }
            }
            Op::Slice { x, rows, cols } => {
                let src = v(x);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in rows.0..rows.1 {
                    for c in cols.0..cols.1 {
                        d.set(r, c, g.get(r - rows.0, c - cols.0));
                    }
                }
                acc(*x, d);
            }
            Op::Sum(a) => {
                let x = v(a);
                acc(*a, Tensor::full(x.rows(), x.cols(), g.data()[0]));
            }
            Op::Gather { table, ids } => {
                let tv = v(table);
                let mut d = Tensor::zeros(tv.rows(), tv.cols());
                for (t, &id) in ids.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(id).iter_mut().zip(g.row(t)) {
                        *dv += gv;
                    }
                }
                acc(*table, d);
            }
            Op::Norm { x, gamma, beta, layout } => {
                let (dx, dg, db) = norm::norm_backward(v(x), v(gamma), layout, g);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::L2Normalize { x, groups } => acc(*x, kernels::l2_normalize_backward(v(x), out, g, *groups)),
            Op::TokenShift { x, prev, mu } => {
                let (dx, dp, dm) = kernels::token_shift_backward(v(x), v(prev), v(mu), g);
                acc(*x, dx);
                acc(*prev, dp);
                acc(*mu, dm);
            }
            Op::StateScan { init, decay, kappa, rate, key, value, heads } => {
                let sg = kernels::state_scan_backward(
                    v(init),
                    v(decay),
                    v(kappa),
                    v(rate),
                    v(key),
                    v(value),
                    out,
                    g,
                    *heads,
                );
                acc(*init, sg.init);
                acc(*decay, sg.decay);
                acc(*kappa, sg.kappa);
                acc(*rate, sg.rate);
                acc(*key, sg.key);
                acc(*value, sg.value);
            }
            Op::HeadReadout { query, states, heads } => {
                let (dq, ds) = kernels::head_readout_backward(v(query), v(states), g, *heads);
                acc(*query, dq);
                acc(*states, ds);
            }
            Op::HeadEncode { input, states, heads } => {
                let (dx, ds) = kernels::head_encode_backward(v(input), v(states), g, *heads);
                acc(*input, dx);
                acc(*states, ds);
            }
            Op::HeadProject { x, proj, heads } => {
                let (dx, dp) = kernels::head_project_backward(v(x), v(proj), g, *heads);
                acc(*x, dx);
                acc(*proj, dp);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                acc(*logits, kernels::softmax_cross_entropy_backward(v(logits), targets, g.data()[0]));
            }
        }
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<F: Real> BitsEq for F {
    fn to_bits_eq(self, other: Self) -> bool {
        // Same value, or both NaN; distinguishes +0 from -0 via the sign bit.
        (self == other && self.is_sign_negative() == other.is_sign_negative()) || (self.is_nan() && other.is_nan())
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(String, usize)>,
}

impl<F: Real> Grads<F> {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients of all parameter leaves keyed by name. A name bound more
    /// than once has its contributions summed.
    pub fn params(&self) -> BTreeMap<String, Tensor<F>> {
        let mut out: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (name, id) in &self.params {
            let g = self.wrt(Var(*id));
            match out.get_mut(name) {
                Some(e) => e.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::full(3, 2, 1.0));
    }

    #[test]
    fn unused_param_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param("used", Arc::new(Tensor::full(1, 2, 2.0)));
        let unused = tape.param("unused", Arc::new(Tensor::full(2, 2, 1.0)));
        let s = tape.sum(used).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(2, 2));
        assert_eq!(g.params()["unused"], Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[6.0]);
    }

    #[test]
    fn replay_reproduces_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(2, 3, |r, c| (r as f64 - c as f64) * 0.3));
        let b = tape.leaf(Tensor::from_fn(3, 2, |r, c| (r + c) as f64 * 0.1));
        let m = tape.matmul(a, b).unwrap();
        let e = tape.exp(m).unwrap();
        let _ = tape.sum(e).unwrap();
        tape.replay().unwrap();
    }
}
