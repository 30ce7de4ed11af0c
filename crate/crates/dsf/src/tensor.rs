//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node and
//! returns a lightweight [`Tensor`] handle. Node ids are assigned in
//! construction order, so the node vector is already topologically sorted and
//! [`Tensor::backward`] is a single reverse sweep. Evaluation is strictly
//! sequential, so identical inputs reproduce bit-identical outputs.

use std::cell::RefCell;

use crate::error::{DsfError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Tensor `t` combined with a scalar (single-element) node `s`.
    AddScalarT { t: usize, s: usize },
    MulScalarT { t: usize, s: usize },
    Scale { t: usize, c: f64 },
    // `c` is carried for debug dumps; the derivative of x + c ignores it.
    AddConst { t: usize, #[allow(dead_code)] c: f64 },
    Neg { t: usize },
    Log { t: usize },
    Exp { t: usize },
    Tanh { t: usize },
    Sigmoid { t: usize },
    Relu { t: usize },
    Clamp { t: usize, lo: f64, hi: f64 },
    /// Row-broadcast bias add: `[n, d] + [d]`.
    AddRow { x: usize, b: usize },
    SumAll { t: usize },
    MeanAll { t: usize },
    SumAxis { t: usize, axis: usize },
    MeanAxis { t: usize, axis: usize },
    ConcatCols { a: usize, b: usize },
    Transpose { t: usize },
    LogSumExpRows { t: usize },
    GatherRows { t: usize, idx: Vec<usize> },
    PairwiseSqDist { t: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Rebuilt per batch.
#[derive(Debug, Default)]
pub struct Graph {
    inner: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`]; cheap to copy.
#[derive(Debug, Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> usize {
        debug_assert_eq!(numel(&shape), values.len());
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn tensor(&self, id: usize) -> Tensor<'_> {
        Tensor { graph: self, id }
    }

    /// Differentiable leaf (a model parameter or input we want gradients for).
    pub fn leaf(&self, shape: &[usize], values: &[f64]) -> Tensor<'_> {
        let id = self.push(shape.to_vec(), values.to_vec(), Op::Leaf, true);
        self.tensor(id)
    }

    /// Non-differentiable constant.
    pub fn constant(&self, shape: &[usize], values: &[f64]) -> Tensor<'_> {
        let id = self.push(shape.to_vec(), values.to_vec(), Op::Constant, false);
        self.tensor(id)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.constant(&[1], &[v])
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

// Cache-friendly matmul kernels. `nn`: plain, `nt`: b transposed, `tn`: a transposed.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    // a: m×n, b: k×n, out: m×k with out[i,p] = Σ_j a[i,j]·b[p,j]
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (aj, bj) in arow.iter().zip(brow) {
                acc += aj * bj;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a: m×k, b: m×n, out: k×n with out[p,j] = Σ_i a[i,p]·b[i,j]
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

impl<'g> Tensor<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow()[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.inner.borrow()[self.id].values.clone()
    }

    /// Accumulated gradient, if a backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow()[self.id].grad.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.inner.borrow();
        assert_eq!(nodes[self.id].values.len(), 1, "item() on non-scalar");
        nodes[self.id].values[0]
    }

    fn is_scalar(&self) -> bool {
        self.graph.inner.borrow()[self.id].values.len() == 1
    }

    fn unary(&self, op: Op, values: Vec<f64>) -> Tensor<'g> {
        let shape = self.shape();
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self.graph.push(shape, values, op, rg);
        self.graph.tensor(id)
    }

    /// Copies values into a fresh constant node, severing gradient flow.
    pub fn detach(&self) -> Tensor<'g> {
        let shape = self.shape();
        let values = self.values();
        let id = self.graph.push(shape, values, Op::Constant, false);
        self.graph.tensor(id)
    }

    pub fn matmul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DsfError::Dimension(format!(
                "matmul shapes {:?} x {:?} are incompatible",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_nn(&self.values(), &other.values(), m, k, n);
        let rg = {
            let nodes = self.graph.inner.borrow();
            nodes[self.id].requires_grad || nodes[other.id].requires_grad
        };
        let id = self.graph.push(
            vec![m, n],
            values,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            rg,
        );
        Ok(self.graph.tensor(id))
    }

    fn binary_elementwise(
        &self,
        other: Tensor<'g>,
        name: &str,
        apply: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
        scalar_op: Option<impl Fn(usize, usize) -> Op>,
    ) -> Result<Tensor<'g>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa == sb {
            let values: Vec<f64> = self
                .values()
                .iter()
                .zip(other.values().iter())
                .map(|(&x, &y)| apply(x, y))
                .collect();
            let rg = {
                let nodes = self.graph.inner.borrow();
                nodes[self.id].requires_grad || nodes[other.id].requires_grad
            };
            let id = self
                .graph
                .push(sa, values, op(self.id, other.id), rg);
            return Ok(self.graph.tensor(id));
        }
        // Scalar-against-tensor broadcast only.
        if let Some(make) = scalar_op {
            if other.is_scalar() {
                let s = other.values()[0];
                let values: Vec<f64> = self.values().iter().map(|&x| apply(x, s)).collect();
                let rg = {
                    let nodes = self.graph.inner.borrow();
                    nodes[self.id].requires_grad || nodes[other.id].requires_grad
                };
                let id = self.graph.push(sa, values, make(self.id, other.id), rg);
                return Ok(self.graph.tensor(id));
            }
        }
        Err(DsfError::Dimension(format!(
            "{name} shapes {:?} vs {:?} (only scalar broadcast is allowed)",
            sa, sb
        )))
    }

    pub fn add(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        if self.is_scalar() && !other.is_scalar() {
            return other.add(*self);
        }
        self.binary_elementwise(
            other,
            "add",
            |x, y| x + y,
            |a, b| Op::Add { a, b },
            Some(|t, s| Op::AddScalarT { t, s }),
        )
    }

    pub fn sub(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        if self.shape() != other.shape() {
            // scalar cases compose from add/neg
            return self.add(other.neg());
        }
        self.binary_elementwise(
            other,
            "sub",
            |x, y| x - y,
            |a, b| Op::Sub { a, b },
            None::<fn(usize, usize) -> Op>,
        )
    }

    pub fn mul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        if self.is_scalar() && !other.is_scalar() {
            return other.mul(*self);
        }
        self.binary_elementwise(
            other,
            "mul",
            |x, y| x * y,
            |a, b| Op::Mul { a, b },
            Some(|t, s| Op::MulScalarT { t, s }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| c * x).collect();
        self.unary(Op::Scale { t: self.id, c }, values)
    }

    pub fn add_const(&self, c: f64) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| x + c).collect();
        self.unary(Op::AddConst { t: self.id, c }, values)
    }

    pub fn neg(&self) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| -x).collect();
        self.unary(Op::Neg { t: self.id }, values)
    }

    pub fn log(&self) -> Result<Tensor<'g>> {
        let vals = self.values();
        if let Some(bad) = vals.iter().find(|v| **v <= 0.0) {
            return Err(DsfError::Domain(format!(
                "log of non-positive value {bad}; clamp inputs first"
            )));
        }
        let values = vals.iter().map(|&x| x.ln()).collect();
        Ok(self.unary(Op::Log { t: self.id }, values))
    }

    pub fn exp(&self) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| x.exp()).collect();
        self.unary(Op::Exp { t: self.id }, values)
    }

    pub fn tanh(&self) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| x.tanh()).collect();
        self.unary(Op::Tanh { t: self.id }, values)
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        let values = self
            .values()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.unary(Op::Sigmoid { t: self.id }, values)
    }

    pub fn relu(&self) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| x.max(0.0)).collect();
        self.unary(Op::Relu { t: self.id }, values)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<'g> {
        let values = self.values().iter().map(|&x| x.clamp(lo, hi)).collect();
        self.unary(Op::Clamp { t: self.id, lo, hi }, values)
    }

    /// `[n, d] + [d]` bias addition broadcast over rows.
    pub fn add_row(&self, bias: Tensor<'g>) -> Result<Tensor<'g>> {
        let sx = self.shape();
        let sb = bias.shape();
        if sx.len() != 2 || numel(&sb) != sx[1] {
            return Err(DsfError::Dimension(format!(
                "add_row shapes {:?} + {:?}",
                sx, sb
            )));
        }
        let (n, d) = (sx[0], sx[1]);
        let xv = self.values();
        let bv = bias.values();
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                values[i * d + j] = xv[i * d + j] + bv[j];
            }
        }
        let rg = {
            let nodes = self.graph.inner.borrow();
            nodes[self.id].requires_grad || nodes[bias.id].requires_grad
        };
        let id = self.graph.push(
            vec![n, d],
            values,
            Op::AddRow {
                x: self.id,
                b: bias.id,
            },
            rg,
        );
        Ok(self.graph.tensor(id))
    }

    pub fn sum_all(&self) -> Tensor<'g> {
        let v: f64 = self.values().iter().sum();
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self
            .graph
            .push(vec![1], vec![v], Op::SumAll { t: self.id }, rg);
        self.graph.tensor(id)
    }

    pub fn mean_all(&self) -> Tensor<'g> {
        let vals = self.values();
        let v: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self
            .graph
            .push(vec![1], vec![v], Op::MeanAll { t: self.id }, rg);
        self.graph.tensor(id)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 2 || axis > 1 {
            return Err(DsfError::Dimension(format!(
                "axis {axis} invalid for shape {:?} (2-d tensors only)",
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let vals = self.values();
        let (out_shape, mut out) = if axis == 0 {
            (vec![d], vec![0.0; d])
        } else {
            (vec![n], vec![0.0; n])
        };
        for i in 0..n {
            for j in 0..d {
                let o = if axis == 0 { j } else { i };
                out[o] += vals[i * d + j];
            }
        }
        let count = if axis == 0 { n } else { d } as f64;
        if mean {
            for o in out.iter_mut() {
                *o /= count;
            }
        }
        let op = if mean {
            Op::MeanAxis { t: self.id, axis }
        } else {
            Op::SumAxis { t: self.id, axis }
        };
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self.graph.push(out_shape, out, op, rg);
        Ok(self.graph.tensor(id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'g>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<'g>> {
        self.reduce_axis(axis, true)
    }

    /// Concatenates two `[n, ·]` tensors along columns.
    pub fn concat_cols(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(DsfError::Dimension(format!(
                "concat_cols shapes {:?} | {:?}",
                sa, sb
            )));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let av = self.values();
        let bv = other.values();
        let mut values = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            values.extend_from_slice(&av[i * da..(i + 1) * da]);
            values.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let rg = {
            let nodes = self.graph.inner.borrow();
            nodes[self.id].requires_grad || nodes[other.id].requires_grad
        };
        let id = self.graph.push(
            vec![n, da + db],
            values,
            Op::ConcatCols {
                a: self.id,
                b: other.id,
            },
            rg,
        );
        Ok(self.graph.tensor(id))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(DsfError::Dimension(format!(
                "transpose needs a 2-d tensor, got {:?}",
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let vals = self.values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = vals[i * d + j];
            }
        }
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self
            .graph
            .push(vec![d, n], out, Op::Transpose { t: self.id }, rg);
        Ok(self.graph.tensor(id))
    }

    /// Row-wise log-sum-exp of a `[n, c]` tensor, numerically stabilized.
    pub fn log_sum_exp_rows(&self) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(DsfError::Dimension(format!(
                "log_sum_exp_rows needs a 2-d tensor, got {:?}",
                s
            )));
        }
        let (n, c) = (s[0], s[1]);
        let vals = self.values();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &vals[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            out[i] = mx + sum.ln();
        }
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self
            .graph
            .push(vec![n], out, Op::LogSumExpRows { t: self.id }, rg);
        Ok(self.graph.tensor(id))
    }

    /// Picks one column per row of a `[n, c]` tensor: out[i] = x[i, idx[i]].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(DsfError::Dimension(format!(
                "gather_rows on shape {:?} with {} indices",
                s,
                idx.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(DsfError::Data(format!(
                "gather_rows index {bad} out of range for {c} columns"
            )));
        }
        let vals = self.values();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| vals[i * c + j]).collect();
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self.graph.push(
            vec![n],
            out,
            Op::GatherRows {
                t: self.id,
                idx: idx.to_vec(),
            },
            rg,
        );
        Ok(self.graph.tensor(id))
    }

    /// Pairwise squared Euclidean distances of the rows of a `[n, d]` tensor.
    pub fn pairwise_sqdist(&self) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(DsfError::Dimension(format!(
                "pairwise_sqdist needs a 2-d tensor, got {:?}",
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let vals = self.values();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let ri = &vals[i * d..(i + 1) * d];
                let rj = &vals[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for (a, b) in ri.iter().zip(rj) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        let rg = self.graph.inner.borrow()[self.id].requires_grad;
        let id = self
            .graph
            .push(vec![n, n], out, Op::PairwiseSqDist { t: self.id }, rg);
        Ok(self.graph.tensor(id))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        let nodes_len = self.graph.len();
        {
            let nodes = self.graph.inner.borrow();
            if nodes[self.id].values.len() != 1 {
                return Err(DsfError::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    nodes[self.id].shape
                )));
            }
        }
        // Transient adjoints for this sweep; folded into persistent grads at the end.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes_len];
        adj[self.id] = Some(vec![1.0]);

        let mut nodes = self.graph.inner.borrow_mut();
        for id in (0..=self.id).rev() {
            let out_adj = match adj[id].take() {
                Some(a) => a,
                None => continue,
            };
            if !nodes[id].requires_grad {
                continue;
            }
            let op = nodes[id].op.clone();
            macro_rules! seed {
                ($target:expr) => {
                    adj[$target].get_or_insert_with(|| vec![0.0; nodes[$target].values.len()])
                };
            }
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let n = nodes[b].shape[1];
                    let da = matmul_nt(&out_adj, &nodes[b].values, m, n, k);
                    let db = matmul_tn(&nodes[a].values, &out_adj, m, k, n);
                    for (g, v) in seed!(a).iter_mut().zip(&da) {
                        *g += v;
                    }
                    for (g, v) in seed!(b).iter_mut().zip(&db) {
                        *g += v;
                    }
                }
                Op::Add { a, b } => {
                    for (g, v) in seed!(a).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                    for (g, v) in seed!(b).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, v) in seed!(a).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                    for (g, v) in seed!(b).iter_mut().zip(&out_adj) {
                        *g -= v;
                    }
                }
                Op::Mul { a, b } => {
                    let bv = nodes[b].values.clone();
                    let av = nodes[a].values.clone();
                    for ((g, v), x) in seed!(a).iter_mut().zip(&out_adj).zip(&bv) {
                        *g += v * x;
                    }
                    for ((g, v), x) in seed!(b).iter_mut().zip(&out_adj).zip(&av) {
                        *g += v * x;
                    }
                }
                Op::AddScalarT { t, s } => {
                    for (g, v) in seed!(t).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                    seed!(s)[0] += out_adj.iter().sum::<f64>();
                }
                Op::MulScalarT { t, s } => {
                    let sv = nodes[s].values[0];
                    let tv = nodes[t].values.clone();
                    for (g, v) in seed!(t).iter_mut().zip(&out_adj) {
                        *g += v * sv;
                    }
                    seed!(s)[0] += out_adj.iter().zip(&tv).map(|(v, x)| v * x).sum::<f64>();
                }
                Op::Scale { t, c } => {
                    for (g, v) in seed!(t).iter_mut().zip(&out_adj) {
                        *g += v * c;
                    }
                }
                Op::AddConst { t, .. } => {
                    for (g, v) in seed!(t).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                }
                Op::Neg { t } => {
                    for (g, v) in seed!(t).iter_mut().zip(&out_adj) {
                        *g -= v;
                    }
                }
                Op::Log { t } => {
                    let tv = nodes[t].values.clone();
                    for ((g, v), x) in seed!(t).iter_mut().zip(&out_adj).zip(&tv) {
                        *g += v / x;
                    }
                }
                Op::Exp { t } => {
                    let yv = nodes[id].values.clone();
                    for ((g, v), y) in seed!(t).iter_mut().zip(&out_adj).zip(&yv) {
                        *g += v * y;
                    }
                }
                Op::Tanh { t } => {
                    let yv = nodes[id].values.clone();
                    for ((g, v), y) in seed!(t).iter_mut().zip(&out_adj).zip(&yv) {
                        *g += v * (1.0 - y * y);
                    }
                }
                Op::Sigmoid { t } => {
                    let yv = nodes[id].values.clone();
                    for ((g, v), y) in seed!(t).iter_mut().zip(&out_adj).zip(&yv) {
                        *g += v * y * (1.0 - y);
                    }
                }
                Op::Relu { t } => {
                    let tv = nodes[t].values.clone();
                    for ((g, v), x) in seed!(t).iter_mut().zip(&out_adj).zip(&tv) {
                        if *x > 0.0 {
                            *g += v;
                        }
                    }
                }
                Op::Clamp { t, lo, hi } => {
                    let tv = nodes[t].values.clone();
                    for ((g, v), x) in seed!(t).iter_mut().zip(&out_adj).zip(&tv) {
                        if *x > lo && *x < hi {
                            *g += v;
                        }
                    }
                }
                Op::AddRow { x, b } => {
                    let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
                    for (g, v) in seed!(x).iter_mut().zip(&out_adj) {
                        *g += v;
                    }
                    let gb = seed!(b);
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += out_adj[i * d + j];
                        }
                    }
                }
                Op::SumAll { t } => {
                    let v = out_adj[0];
                    for g in seed!(t).iter_mut() {
                        *g += v;
                    }
                }
                Op::MeanAll { t } => {
                    let count = nodes[t].values.len() as f64;
                    let v = out_adj[0] / count;
                    for g in seed!(t).iter_mut() {
                        *g += v;
                    }
                }
                Op::SumAxis { t, axis } | Op::MeanAxis { t, axis } => {
                    let mean = matches!(nodes[id].op, Op::MeanAxis { .. });
                    let (n, d) = (nodes[t].shape[0], nodes[t].shape[1]);
                    let count = if axis == 0 { n } else { d } as f64;
                    let gt = seed!(t);
                    for i in 0..n {
                        for j in 0..d {
                            let o = if axis == 0 { j } else { i };
                            let mut v = out_adj[o];
                            if mean {
                                v /= count;
                            }
                            gt[i * d + j] += v;
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let n = nodes[id].shape[0];
                    let da = nodes[a].shape[1];
                    let db = nodes[b].shape[1];
                    {
                        let ga = seed!(a);
                        for i in 0..n {
                            for j in 0..da {
                                ga[i * da + j] += out_adj[i * (da + db) + j];
                            }
                        }
                    }
                    let gb = seed!(b);
                    for i in 0..n {
                        for j in 0..db {
                            gb[i * db + j] += out_adj[i * (da + db) + da + j];
                        }
                    }
                }
                Op::Transpose { t } => {
                    let (d, n) = (nodes[id].shape[0], nodes[id].shape[1]);
                    let gt = seed!(t);
                    for i in 0..d {
                        for j in 0..n {
                            gt[j * d + i] += out_adj[i * n + j];
                        }
                    }
                }
                Op::LogSumExpRows { t } => {
                    let (n, c) = (nodes[t].shape[0], nodes[t].shape[1]);
                    let tv = nodes[t].values.clone();
                    let yv = nodes[id].values.clone();
                    let gt = seed!(t);
                    for i in 0..n {
                        for j in 0..c {
                            gt[i * c + j] += out_adj[i] * (tv[i * c + j] - yv[i]).exp();
                        }
                    }
                }
                Op::GatherRows { t, ref idx } => {
                    let c = nodes[t].shape[1];
                    let gt = seed!(t);
                    for (i, &j) in idx.iter().enumerate() {
                        gt[i * c + j] += out_adj[i];
                    }
                }
                Op::PairwiseSqDist { t } => {
                    let (n, d) = (nodes[t].shape[0], nodes[t].shape[1]);
                    let tv = nodes[t].values.clone();
                    let gt = seed!(t);
                    for i in 0..n {
                        for j in 0..n {
                            let w = out_adj[i * n + j] + out_adj[j * n + i];
                            if w == 0.0 {
                                continue;
                            }
                            for q in 0..d {
                                gt[i * d + q] += 2.0 * w * (tv[i * d + q] - tv[j * d + q]);
                            }
                        }
                    }
                }
            }
            // Fold this node's adjoint into its persistent gradient.
            let node = &mut nodes[id];
            let grad = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.values.len()]);
            for (g, v) in grad.iter_mut().zip(&out_adj) {
                *g += v;
            }
        }
        Ok(())
    }
}

/// Result of comparing analytic gradients against central finite differences.
#[derive(Debug)]
pub struct GradCheckReport {
    /// (parameter index, max relative error over its elements)
    pub per_param: Vec<(usize, f64)>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Checks the backward pass of `build` against central finite differences.
///
/// `build` must be deterministic: it is re-invoked with perturbed copies of
/// `params` and must construct the same graph each time. Leaves are handed to
/// it in the order of `params`.
pub fn grad_check<F>(
    build: F,
    params: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    if step <= 0.0 {
        return Err(DsfError::Contract("grad_check step must be positive".into()));
    }
    let base: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();

    let run = |values: &[Vec<f64>]| -> Result<(Graph, usize)> {
        let g = Graph::new();
        let loss_id = {
            let leaves: Vec<Tensor<'_>> = params
                .iter()
                .zip(values)
                .map(|((shape, _), v)| g.leaf(shape, v))
                .collect();
            build(&g, &leaves)?.id()
        };
        Ok((g, loss_id))
    };

    // Analytic gradients.
    let (g, loss_id) = run(&base)?;
    let loss = Tensor { graph: &g, id: loss_id };
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|p| {
            // Leaves are pushed first, in order, by the runner.
            let t = Tensor { graph: &g, id: p };
            t.grad().unwrap_or_else(|| vec![0.0; base[p].len()])
        })
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let (g, loss_id) = run(values)?;
        let loss = Tensor { graph: &g, id: loss_id };
        Ok(loss.item())
    };

    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    for p in 0..params.len() {
        let mut worst = 0.0f64;
        for e in 0..base[p].len() {
            let mut plus = base.clone();
            plus[p][e] += step;
            let mut minus = base.clone();
            minus[p][e] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let r = rel_err(analytic[p][e], numeric);
            worst = worst.max(r);
        }
        max_rel = max_rel.max(worst);
        per_param.push((p, worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let i2 = g.constant(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = g.leaf(&[2, 2], &[3.0, -1.5, 2.0, 7.25]);
        let c = i2.matmul(m).unwrap();
        assert_eq!(c.values(), m.values());
    }

    #[test]
    fn matmul_hand_case() {
        let g = Graph::new();
        let a = g.leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = g.leaf(&[2, 1], &[1.0, 1.0]);
        let c = a.matmul(b).unwrap();
        assert_eq!(c.values(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let g = Graph::new();
        let a = g.leaf(&[2, 3], &[0.0; 6]);
        let b = g.leaf(&[2, 2], &[0.0; 4]);
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_vals(&mut rng, 20);
        let b = rand_vals(&mut rng, 12);
        let report = grad_check(
            |_g, leaves| {
                let c = leaves[0].matmul(leaves[1])?;
                Ok(c.mul(c)?.sum_all())
            },
            &[(vec![5, 4], a), (vec![4, 3], b)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let g = Graph::new();
        let x = g.leaf(&[1], &[0.0]);
        assert_relative_eq!(x.sigmoid().item(), 0.5);
        let y = x.tanh();
        assert_relative_eq!(y.item(), 0.0);
        y.sum_all().backward().unwrap();
        assert_relative_eq!(x.grad().unwrap()[0], 1.0);
    }

    #[test]
    fn exp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vals(&mut rng, 9);
        let report = grad_check(
            |_g, leaves| {
                Ok(leaves[0].exp().sum_all())
            },
            &[(vec![3, 3], x)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn log_rejects_non_positive() {
        let g = Graph::new();
        let x = g.leaf(&[2], &[1.0, -0.5]);
        assert!(matches!(x.log(), Err(DsfError::Domain(_))));
    }

    #[test]
    fn reductions_hand_cases() {
        let g = Graph::new();
        let x = g.leaf(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(x.mean_all().item(), 2.5);

        let m = g.leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.sum_axis(0).unwrap().values(), vec![4.0, 6.0]);
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let g = Graph::new();
        let x = g.leaf(&[4], &[1.0, 2.0, 3.0, 4.0]);
        x.mean_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn backward_square() {
        let g = Graph::new();
        let x = g.leaf(&[1], &[3.0]);
        let loss = x.mul(x).unwrap();
        loss.backward().unwrap();
        assert_relative_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(&[2], &[1.0, 2.0]);
        assert!(matches!(x.backward(), Err(DsfError::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let g = Graph::new();
        let x = g.leaf(&[1], &[3.0]);
        let loss = x.mul(x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_relative_eq!(x.grad().unwrap()[0], 12.0);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_vals(&mut rng, 12);
        let x = rand_vals(&mut rng, 4);
        let report = grad_check(
            |_g, leaves| {
                let wx = leaves[1].matmul(leaves[0])?; // [1,4]x[4,3]
                Ok(wx.sigmoid().sum_all())
            },
            &[(vec![4, 3], w), (vec![1, 4], x)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_detects_corrupted_rule() {
        // A "wrong" analytic gradient simulated by checking exp against
        // the loss of 2·exp: the mismatch must be flagged.
        let x = vec![0.3, -0.2];
        let (g, id) = {
            let g = Graph::new();
            let t = g.leaf(&[2], &x);
            let loss = t.exp().sum_all();
            let id = loss.id();
            (g, id)
        };
        let loss = Tensor { graph: &g, id };
        loss.backward().unwrap();
        loss.backward().unwrap(); // doubled grads stand in for a broken rule
        let analytic = Tensor { graph: &g, id: 0 }.grad().unwrap();
        let step = 1e-5;
        for (e, a) in analytic.iter().enumerate() {
            let mut plus = x.clone();
            plus[e] += step;
            let mut minus = x.clone();
            minus[e] -= step;
            let f = |v: &[f64]| {
                let g = Graph::new();
                g.leaf(&[2], v).exp().sum_all().item()
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            assert!(rel_err(*a, numeric) > 1e-4);
        }
    }

    #[test]
    fn grad_check_zero_function_passes() {
        let report = grad_check(
            |_g, leaves| {
                Ok(leaves[0].scale(0.0).sum_all())
            },
            &[(vec![3], vec![1.0, -2.0, 0.5])],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward(l1 + l2) == backward(l1) then backward(l2)
        let build = |mode: u8| {
            let g = Graph::new();
            let x = g.leaf(&[2], &[0.7, -0.4]);
            let l1 = x.tanh().sum_all();
            let l2 = x.mul(x).unwrap().sum_all();
            match mode {
                0 => l1.add(l2).unwrap().backward().unwrap(),
                _ => {
                    l1.backward().unwrap();
                    l2.backward().unwrap();
                }
            }
            Tensor { graph: &g, id: 0 }.grad().unwrap()
        };
        let joint = build(0);
        let split = build(1);
        for (a, b) in joint.iter().zip(&split) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn deterministic_rebuild_is_bit_identical() {
        let run = || {
            let g = Graph::new();
            let x = g.leaf(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
            let y = x.tanh().matmul(x).unwrap().sigmoid().sum_all();
            y.item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn scalar_broadcast_only() {
        let g = Graph::new();
        let x = g.leaf(&[2, 2], &[1.0; 4]);
        let s = g.scalar(2.0);
        assert_eq!(x.mul(s).unwrap().values(), vec![2.0; 4]);
        let row = g.leaf(&[2], &[1.0, 1.0]);
        assert!(x.add(row).is_err());
    }

    #[test]
    fn concat_and_gather() {
        let g = Graph::new();
        let a = g.leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = g.leaf(&[2, 1], &[9.0, 8.0]);
        let c = a.concat_cols(b).unwrap();
        assert_eq!(c.values(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let picked = c.gather_rows(&[2, 0]).unwrap();
        assert_eq!(picked.values(), vec![9.0, 3.0]);
        picked.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![1.0, 0.0]);
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pairwise_sqdist_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = rand_vals(&mut rng, 8);
        let report = grad_check(
            |_g, leaves| {
                let d = leaves[0].pairwise_sqdist()?;
                Ok(d.scale(-0.5).exp().sum_all())
            },
            &[(vec![4, 2], u)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn log_sum_exp_rows_matches_direct() {
        let g = Graph::new();
        let x = g.leaf(&[1, 3], &[1.0, 2.0, 3.0]);
        let lse = x.log_sum_exp_rows().unwrap();
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert_relative_eq!(lse.values()[0], direct, max_relative = 1e-12);
    }
}
