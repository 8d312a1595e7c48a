//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward computation; node ids are topologically
//! ordered by construction, and [`Graph::backward`] walks them in reverse with
//! a fixed accumulation order, so gradients are bit-reproducible. Graphs built
//! with [`Graph::no_grad`] skip all backward bookkeeping (used for the teacher
//! pathway and for inference).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, EPS_NUM};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// A named trainable value with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat, insertion-ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], optionally rescaled.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut RngState,
    ) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.uniform_in(-bound, bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.params[id.0].name
        );
        self.params[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        p.grad = p.grad.add(g).expect("gradient shape matches parameter");
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad = p.grad.scale(c);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Order-sensitive checksum of all parameter bits, for reproducibility logs.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// One recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_leaves: Vec<(ParamId, usize)>,
    param_memo: HashMap<ParamId, usize>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            param_leaves: Vec::new(),
            param_memo: HashMap::new(),
        }
    }

    /// A graph that records values only; backward is unavailable.
    pub fn no_grad() -> Self {
        let mut g = Graph::new();
        g.grad_enabled = false;
        g
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

    fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node { value, needs_grad, back: if needs_grad { back } else { None } });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Parameter leaf. Repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.param_memo.get(&id) {
            return Var(node);
        }
        let v = self.push(store.value(id).clone(), true, None);
        self.param_memo.insert(id, v.0);
        self.param_leaves.push((id, v.0));
        v
    }

    // ---- binary ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.matmul_nt(&tb).expect("matmul back a")),
                    (ib, ta.matmul_tn(g).expect("matmul back b")),
                ]
            })),
        )
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b)).expect("matmul_nt shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.matmul(&tb).expect("matmul_nt back a")),
                    (ib, g.matmul_tn(&ta).expect("matmul_nt back b")),
                ]
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.scale(-1.0))])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b)).expect("mul shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.mul(&tb).expect("mul back a")),
                    (ib, g.mul(&ta).expect("mul back b")),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).div(self.value(b)).expect("div shapes");
        let needs = self.needs(a) || self.needs(b);
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                let da = g.div(&tb).expect("div back a");
                let bb = tb.mul(&tb).expect("div back b2");
                let db = g.mul(&ta).expect("div back b").div(&bb).expect("div back b3").scale(-1.0);
                vec![(ia, da), (ib, db)]
            })),
        )
    }

    // ---- broadcast ops ----

    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Var {
        let value = self.value(m).add_row_vec(self.value(v)).expect("add_row_vec shapes");
        let needs = self.needs(m) || self.needs(v);
        let (im, iv) = (m.0, v.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![(im, g.clone()), (iv, g.sum_axis(0).expect("add_row_vec back"))]
            })),
        )
    }

    pub fn add_col_vec(&mut self, m: Var, v: Var) -> Var {
        let value = self.value(m).add_col_vec(self.value(v)).expect("add_col_vec shapes");
        let needs = self.needs(m) || self.needs(v);
        let (im, iv) = (m.0, v.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![(im, g.clone()), (iv, g.sum_axis(1).expect("add_col_vec back"))]
            })),
        )
    }

    pub fn mul_row_vec(&mut self, m: Var, v: Var) -> Var {
        let value = self.value(m).mul_row_vec(self.value(v)).expect("mul_row_vec shapes");
        let needs = self.needs(m) || self.needs(v);
        let (tm, tv) = (self.value(m).clone(), self.value(v).clone());
        let (im, iv) = (m.0, v.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![
                    (im, g.mul_row_vec(&tv).expect("mul_row_vec back m")),
                    (iv, g.mul(&tm).expect("x").sum_axis(0).expect("mul_row_vec back v")),
                ]
            })),
        )
    }

    pub fn mul_col_vec(&mut self, m: Var, v: Var) -> Var {
        let value = self.value(m).mul_col_vec(self.value(v)).expect("mul_col_vec shapes");
        let needs = self.needs(m) || self.needs(v);
        let (tm, tv) = (self.value(m).clone(), self.value(v).clone());
        let (im, iv) = (m.0, v.0);
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                vec![
                    (im, g.mul_col_vec(&tv).expect("mul_col_vec back m")),
                    (iv, g.mul(&tm).expect("x").sum_axis(1).expect("mul_col_vec back v")),
                ]
            })),
        )
    }

    pub fn repeat_row(&mut self, v: Var, m: usize) -> Var {
        let value = self.value(v).repeat_row(m).expect("repeat_row shape");
        let needs = self.needs(v);
        let iv = v.0;
        self.push(
            value,
            needs,
            Some(Box::new(move |g| vec![(iv, g.sum_axis(0).expect("repeat_row back"))])),
        )
    }

    /// Contiguous row block [start, start+len) of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        assert!(start + len <= rows, "slice_rows out of range");
        let value = Tensor::new(
            vec![len, cols],
            src.data()[start * cols..(start + len) * cols].to_vec(),
        )
        .expect("slice shape");
        let needs = self.needs(a);
        let ia = a.0;
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                let mut data = vec![0.0; rows * cols];
                data[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![(ia, Tensor::new(vec![rows, cols], data).expect("slice back"))]
            })),
        )
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let value = self.value(a).row(r).expect("row shape");
        let needs = self.needs(a);
        let shape = self.value(a).shape().to_vec();
        let ia = a.0;
        self.push(
            value,
            needs,
            Some(Box::new(move |g| {
                let cols = shape[1];
                let mut data = vec![0.0; shape[0] * cols];
                data[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                vec![(ia, Tensor::new(shape.clone(), data).expect("row back"))]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).reshape(shape).expect("reshape size");
        let back_shape = self.value(a).shape().to_vec();
        self.unary(a, value, move |g| {
            g.reshape(back_shape.clone()).expect("reshape back")
        })
    }

    // ---- unary ops ----

    fn unary(
        &mut self,
        a: Var,
        value: Tensor,
        dback: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        let needs = self.needs(a);
        let ia = a.0;
        self.push(value, needs, Some(Box::new(move |g| vec![(ia, dback(g))])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.unary(a, value, move |g| g.scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).add_scalar(c);
        self.unary(a, value, |g| g.clone())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let out = value.clone();
        self.unary(a, value, move |g| g.mul(&out).expect("exp back"))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let x = self.value(a).clone();
        self.unary(a, value, move |g| g.div(&x).expect("ln back"))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let out = value.clone();
        self.unary(a, value, move |g| {
            g.div(&out.scale(2.0)).expect("sqrt back")
        })
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        let out = value.clone();
        self.unary(a, value, move |g| {
            g.mul(&out).expect("x").mul(&out).expect("recip back").scale(-1.0)
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let x = self.value(a).clone();
        self.unary(a, value, move |g| {
            g.mul(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })).expect("relu back")
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let out = value.clone();
        self.unary(a, value, move |g| {
            let d = out.mul(&out.map(|y| 1.0 - y)).expect("x");
            g.mul(&d).expect("sigmoid back")
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let out = value.clone();
        self.unary(a, value, move |g| {
            g.mul(&out.map(|y| 1.0 - y * y)).expect("tanh back")
        })
    }

    /// softplus(x) = ln(1 + e^x), computed stably; derivative is sigmoid(x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let x = self.value(a).clone();
        self.unary(a, value, move |g| {
            g.mul(&x.map(|v| 1.0 / (1.0 + (-v).exp()))).expect("softplus back")
        })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.unary(a, value, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        let shape = self.value(a).shape().to_vec();
        self.unary(a, value, move |g| Tensor::full(&shape, g.item() / n))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(axis).expect("sum_axis shape");
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        self.unary(a, value, move |g| {
            if axis == 0 {
                g.repeat_row(m).expect("sum_axis back 0")
            } else {
                Tensor::ones(&[m, n]).mul_col_vec(g).expect("sum_axis back 1")
            }
        })
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).softmax_axis(axis).expect("softmax shape");
        let out = value.clone();
        self.unary(a, value, move |g| softmax_backward(&out, g, axis))
    }

    /// Column-wise softmax over contiguous row groups of size `group`: for
    /// every column, rows [k*group, (k+1)*group) normalize independently.
    pub fn softmax_col_groups(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        assert!(group >= 1 && rows % group == 0, "rows must split into groups");
        let mut data = src.data().to_vec();
        for base in (0..rows).step_by(group) {
            for c in 0..cols {
                let mut mx = f64::NEG_INFINITY;
                for r in 0..group {
                    mx = mx.max(data[(base + r) * cols + c]);
                }
                let mut z = 0.0;
                for r in 0..group {
                    let idx = (base + r) * cols + c;
                    let v = (data[idx] - mx).exp();
                    data[idx] = v;
                    z += v;
                }
                for r in 0..group {
                    data[(base + r) * cols + c] /= z;
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data).expect("grouped softmax shape");
        let out = value.clone();
        self.unary(a, value, move |g| {
            let yd = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; rows * cols];
            for base in (0..rows).step_by(group) {
                for c in 0..cols {
                    let mut dot = 0.0;
                    for r in 0..group {
                        let idx = (base + r) * cols + c;
                        dot += gd[idx] * yd[idx];
                    }
                    for r in 0..group {
                        let idx = (base + r) * cols + c;
                        dx[idx] = yd[idx] * (gd[idx] - dot);
                    }
                }
            }
            Tensor::new(vec![rows, cols], dx).expect("grouped softmax back")
        })
    }

    // ---- composite helpers ----

    /// Sum of elementwise product, as a scalar node.
    pub fn dot_all(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Row-wise L2 normalization with the crate-wide epsilon in the denominator.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        let ss = self.sum_axis(sq, 1);
        let norm = self.sqrt_guarded(ss);
        let denom = self.add_scalar(norm, EPS_NUM);
        let inv = self.recip(denom);
        self.mul_col_vec(a, inv)
    }

    /// sqrt with a tiny floor inside, keeping the derivative finite at zero.
    pub fn sqrt_guarded(&mut self, a: Var) -> Var {
        let shifted = self.add_scalar(a, 1e-12);
        self.sqrt(shifted)
    }

    // ---- backward ----

    /// Reverse sweep from `root` (usually a scalar loss). Gradients accumulate
    /// in decreasing node-id order, which is a fixed topological order.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        let mut by_node: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        by_node.resize(self.nodes.len(), None);
        by_node[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        for id in (0..=root.0).rev() {
            let Some(g) = by_node[id].clone() else { continue };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&g) {
                    if !self.nodes[pid].needs_grad {
                        continue;
                    }
                    by_node[pid] = Some(match by_node[pid].take() {
                        Some(acc) => acc.add(&contrib).expect("grad accumulation shape"),
                        None => contrib,
                    });
                }
            }
        }
        Grads { by_node }
    }

    /// Adds this graph's parameter-leaf gradients into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for &(pid, node) in &self.param_leaves {
            if let Some(g) = &grads.by_node[node] {
                store.add_grad(pid, g);
            }
        }
    }

    /// Parameter gradients as (id, tensor) pairs in leaf-creation order, for
    /// accumulation outside the graph (e.g. batched reduction in clip order).
    pub fn param_grad_pairs(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.param_leaves
            .iter()
            .filter_map(|&(pid, node)| grads.by_node[node].clone().map(|g| (pid, g)))
            .collect()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; y.len()];
    let yd = y.data();
    let gd = g.data();
    for k in 0..outer {
        for j in 0..inner {
            let base = k * extent * inner + j;
            let mut dot = 0.0;
            for e in 0..extent {
                let idx = base + e * inner;
                dot += gd[idx] * yd[idx];
            }
            for e in 0..extent {
                let idx = base + e * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("softmax back shape")
}

/// Central-difference gradient of `loss_fn` for each listed parameter,
/// (f(x+h) - f(x-h)) / 2h per coordinate. Intended for tests and the
/// gradient-check command; `loss_fn` must be deterministic.
pub fn finite_diff_gradient(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
) -> Result<Vec<Tensor>> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.value(id).clone();
        let n = base.len();
        let mut grad = vec![0.0; n];
        for c in 0..n {
            let orig = base.data()[c];
            let mut probe = |x: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[c] = x;
                store.set_value(id, Tensor::new(base.shape().to_vec(), data).unwrap());
                let v = loss_fn(store);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!(
                            "finite_diff_gradient: loss at parameter '{}' coordinate {}",
                            store.get(id).name,
                            c
                        ),
                    });
                }
                Ok(v)
            };
            let fp = probe(orig + step);
            let fm = probe(orig - step);
            store.set_value(id, base.clone());
            grad[c] = (fp? - fm?) / (2.0 * step);
        }
        out.push(Tensor::new(base.shape().to_vec(), grad).unwrap());
    }
    Ok(out)
}

/// Relative error |g - h| / max(1, |g|, |h|), maximized over coordinates.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&g, &h)| (g - h).abs() / 1.0f64.max(g.abs()).max(h.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn finite_diff_matches_analytic_on_norm_sq() {
        let (mut store, ids) =
            store_with(&[("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let grads = finite_diff_gradient(&mut store, &ids, 1e-5, &mut |s| {
            s.value(ids[0]).data().iter().map(|v| v * v).sum()
        })
        .unwrap();
        assert!((grads[0].data()[0] - 2.0).abs() < 1e-6);
        assert!((grads[0].data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let (mut store, ids) = store_with(&[("x", Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap())]);
        let grads =
            finite_diff_gradient(&mut store, &ids, 1e-5, &mut |_| 42.0).unwrap();
        assert!(grads[0].max_abs() == 0.0);
    }

    #[test]
    fn finite_diff_reports_nonfinite_loss() {
        let (mut store, ids) = store_with(&[("bad", Tensor::scalar(1.0))]);
        let err = finite_diff_gradient(&mut store, &ids, 1e-5, &mut |_| f64::NAN);
        assert!(err.is_err());
    }

    /// Checks one graph-built scalar loss against central differences.
    fn check_graph_loss(
        build: impl Fn(&mut Graph, &ParamStore, &[ParamId]) -> Var,
        params: &[(&str, Tensor)],
        tol: f64,
    ) {
        let (mut store, ids) = store_with(params);
        let mut g = Graph::new();
        let loss = build(&mut g, &store, &ids);
        assert_eq!(g.value(loss).len(), 1);
        let grads = g.backward(loss);
        store.zero_grads();
        g.accumulate_param_grads(&grads, &mut store);
        let analytic: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();

        let numeric = finite_diff_gradient(&mut store, &ids, 1e-5, &mut |s| {
            let mut g = Graph::new();
            let loss = build(&mut g, s, &ids);
            g.value(loss).item()
        })
        .unwrap();

        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = max_rel_error(a, n);
            assert!(err <= tol, "relative error {err} > {tol}");
        }
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.2, 0.4, 0.9, -1.1]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9]).unwrap();
        check_graph_loss(
            |g, s, ids| {
                let va = g.param(s, ids[0]);
                let vb = g.param(s, ids[1]);
                let prod = g.matmul(va, vb);
                let sm = g.softmax_axis(prod, 0);
                let act = g.tanh(sm);
                let sq = g.mul(act, act);
                g.sum(sq)
            },
            &[("a", a), ("b", b)],
            1e-6,
        );
    }

    #[test]
    fn elementwise_chain_gradients() {
        let x = Tensor::new(vec![4], vec![0.2, -0.4, 1.5, -2.0]).unwrap();
        check_graph_loss(
            |g, s, ids| {
                let v = g.param(s, ids[0]);
                let sp = g.softplus(v);
                let sg = g.sigmoid(sp);
                let e = g.exp(sg);
                let shifted = g.add_scalar(e, 1.0);
                let l = g.ln(shifted);
                g.sum(l)
            },
            &[("x", x)],
            1e-6,
        );
    }

    #[test]
    fn broadcast_and_row_gradients() {
        let m = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let v = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let c = Tensor::new(vec![3], vec![0.3, 0.9, -0.5]).unwrap();
        check_graph_loss(
            |g, s, ids| {
                let vm = g.param(s, ids[0]);
                let vv = g.param(s, ids[1]);
                let vc = g.param(s, ids[2]);
                let a = g.add_row_vec(vm, vv);
                let b = g.mul_col_vec(a, vc);
                let r = g.row(b, 1);
                let rep = g.repeat_row(r, 4);
                let n = g.l2_normalize_rows(rep);
                let s2 = g.mul(n, n);
                g.sum(s2)
            },
            &[("m", m), ("v", v), ("c", c)],
            1e-5,
        );
    }

    #[test]
    fn div_and_reductions_gradients() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.5, 1.5, 2.5, 3.5]).unwrap();
        check_graph_loss(
            |g, s, ids| {
                let va = g.param(s, ids[0]);
                let vb = g.param(s, ids[1]);
                let q = g.div(va, vb);
                let col = g.sum_axis(q, 1);
                let sq = g.mul(col, col);
                g.mean(sq)
            },
            &[("a", a), ("b", b)],
            1e-6,
        );
    }

    #[test]
    fn no_grad_graph_skips_bookkeeping() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::no_grad();
        let v = g.param(&store, id);
        let y = g.mul(v, v);
        assert_eq!(g.value(y).item(), 4.0);
    }

    #[test]
    fn shared_param_leaf_accumulates_both_paths() {
        // y = w*w + 3w  =>  dy/dw = 2w + 3
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let sq = g.mul(w1, w2);
        let lin = g.scale(w1, 3.0);
        let y = g.add(sq, lin);
        let grads = g.backward(y);
        g.accumulate_param_grads(&grads, &mut store);
        assert!((store.grad(id).item() - 7.0).abs() < 1e-12);
    }
}
