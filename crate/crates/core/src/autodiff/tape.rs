use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use nalgebra::DMatrix;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named variables on a tape, e.g. the parameters of a network.
pub type VarMap = BTreeMap<String, Var>;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Relu(Var),
    Exp(Var),
    LogSumExpRows(Var),
    Solve(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumTo(..) => "sum_to",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::Solve(..) => "solve",
        }
    }

    fn parents(&self) -> ([Option<Var>; 2], usize) {
        match *self {
            Op::Leaf => ([None, None], 0),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Solve(a, b) => {
                ([Some(a), Some(b)], 2)
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogSumExpRows(a) => ([Some(a), None], 1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Position on a tape; everything recorded after it can be discarded with
/// [`Tape::truncate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

/// Result of [`Tape::grad`]: one gradient per requested variable.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Var>,
    /// Positions (into the `wrt` slice) that the output does not depend on.
    /// Their gradient is a zero tensor.
    pub unreachable: Vec<usize>,
}

/// Gradients keyed by parameter name, see [`Tape::grad_map`].
#[derive(Debug, Clone)]
pub struct GradMap {
    pub grads: VarMap,
    pub unreachable: Vec<String>,
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation. Gradients are themselves built from recorded operations,
/// so they can be differentiated again.
///
/// A tape is single-owner; operations take `&self` and use interior
/// mutability so expressions can nest.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(true),
        }
    }

    /// Toggle the per-operation NaN/Inf check (on by default).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.len())
    }

    /// Drop every node recorded after `mark`. Vars created since then become
    /// dangling and must not be used.
    pub fn truncate(&self, mark: Checkpoint) {
        self.nodes.borrow_mut().truncate(mark.0);
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn op(&self, v: Var) -> Op {
        self.nodes.borrow()[v.0].op
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Record a constant or parameter.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Leaves for every tensor in `params`, keyed by the same names.
    pub fn leaves<'a, I>(&self, params: I) -> VarMap
    where
        I: IntoIterator<Item = (&'a String, &'a Tensor)>,
    {
        params
            .into_iter()
            .map(|(k, t)| (k.clone(), self.leaf(t.clone())))
            .collect()
    }

    /// A constant copy of `v` with no history.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.leaf((*value).clone())
    }

    // ---- primitives ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("add", a, b)?;
        self.push(zip_with(&va, &vb, |x, y| x + y), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("sub", a, b)?;
        self.push(zip_with(&va, &vb, |x, y| x - y), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.same_shape("mul", a, b)?;
        self.push(zip_with(&va, &vb, |x, y| x * y), Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        self.push(va.map(|x| x * c), Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let ((m, k), (k2, n)) = match (va.dims2(), vb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let out = gemm(m, k, n, va.values(), vb.values());
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        self.push(transpose(&va)?, Op::Transpose(a))
    }

    /// Broadcast `a` to `shape`. `a` is either a scalar or has the same rank
    /// with every extent equal to 1 or to the target extent.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.shape() == shape {
            return Ok(a);
        }
        check_broadcast("broadcast_to", va.shape(), shape)?;
        self.push(broadcast(&va, shape), Op::BroadcastTo(a))
    }

    /// Sum `a` down to `shape`, the inverse of [`Tape::broadcast_to`].
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.shape() == shape {
            return Ok(a);
        }
        check_broadcast("sum_to", shape, va.shape())?;
        self.push(reduce(&va, shape), Op::SumTo(a))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        self.push(va.map(|x| if x > 0.0 { x } else { 0.0 }), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        self.push(va.map(f64::exp), Op::Exp(a))
    }

    /// Row-wise log-sum-exp of a matrix, giving an `(n, 1)` column.
    pub fn logsumexp_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        self.push(logsumexp_rows(&va)?, Op::LogSumExpRows(a))
    }

    /// Solve `a · x = b` for square `a`.
    pub fn solve(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "solve",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let ((n, n2), (m, _)) = match (va.dims2(), vb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(mismatch()),
        };
        if n != n2 || n != m {
            return Err(mismatch());
        }
        self.push(solve(&va, &vb)?, Op::Solve(a, b))
    }

    // ---- composites ----------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.sum_to(a, &[])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = numel(&self.shape(a));
        if n == 0 {
            return Err(Error::Empty("tensor in mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_to(b, &self.shape(a))?;
        self.add(a, b)
    }

    /// `a ⊙ b` with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_to(b, &self.shape(a))?;
        self.mul(a, b)
    }

    /// Row sums of a matrix as an `(n, 1)` column.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        match shape[..] {
            [n, _] => self.sum_to(a, &[n, 1]),
            _ => Err(Error::invalid(format!("sum_rows expects a matrix, got {shape:?}"))),
        }
    }

    /// Mean squared error over every element.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean softmax cross-entropy of `logits` (n, k) against integer labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let (n, k) = match shape[..] {
            [n, k] => (n, k),
            _ => return Err(Error::invalid(format!("logits must be a matrix, got {shape:?}"))),
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(Error::Empty("batch in cross-entropy"));
        }
        let mut onehot = Tensor::zeros(&[n, k]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
            }
            onehot.values_mut()[i * k + y] = 1.0;
        }
        let onehot = self.leaf(onehot);
        let lse = self.logsumexp_rows(logits)?;
        let picked = self.sum_rows(self.mul(logits, onehot)?)?;
        let nll = self.sub(lse, picked)?;
        self.mean(nll)
    }

    // ---- differentiation -------------------------------------------------

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded expressions of
    /// the forward graph and can be differentiated again. Without it they are
    /// constant leaves and the intermediate backward nodes are discarded.
    /// Variables the output does not depend on get a zero gradient and are
    /// listed in [`Gradients::unreachable`].
    pub fn grad(&self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NotScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        let mark = self.checkpoint();
        let n = output.0 + 1;

        let mut needs = vec![false; n];
        for w in wrt {
            if w.0 < n {
                needs[w.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] {
                    let (ps, np) = nodes[i].op.parents();
                    needs[i] = ps[..np].iter().flatten().any(|p| needs[p.0]);
                }
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.leaf(Tensor::full(out_value.shape(), 1.0)));
        let result = (|| -> Result<()> {
            for i in (0..n).rev() {
                let Some(g) = adj[i] else { continue };
                if !needs[i] {
                    continue;
                }
                let node = Var(i);
                let op = self.op(node);
                for (parent, contrib) in self.backward(op, node, g, &needs)? {
                    adj[parent.0] = Some(match adj[parent.0] {
                        None => contrib,
                        Some(acc) => self.add(acc, contrib)?,
                    });
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            self.truncate(mark);
            return Err(e);
        }

        let found: Vec<Option<Var>> = wrt
            .iter()
            .map(|w| if w.0 < n { adj[w.0] } else { None })
            .collect();
        let unreachable = found
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_none())
            .map(|(pos, _)| pos)
            .collect();
        let grads = if create_graph {
            found
                .iter()
                .zip(wrt)
                .map(|(g, w)| g.unwrap_or_else(|| self.leaf(Tensor::zeros(&self.shape(*w)))))
                .collect()
        } else {
            let values: Vec<Tensor> = found
                .iter()
                .zip(wrt)
                .map(|(g, w)| match g {
                    Some(g) => (*self.value(*g)).clone(),
                    None => Tensor::zeros(&self.shape(*w)),
                })
                .collect();
            self.truncate(mark);
            values.into_iter().map(|t| self.leaf(t)).collect()
        };
        Ok(Gradients { grads, unreachable })
    }

    /// [`Tape::grad`] over a named variable set.
    pub fn grad_map(&self, output: Var, wrt: &VarMap, create_graph: bool) -> Result<GradMap> {
        let names: Vec<&String> = wrt.keys().collect();
        let vars: Vec<Var> = wrt.values().copied().collect();
        let g = self.grad(output, &vars, create_graph)?;
        Ok(GradMap {
            grads: names.iter().map(|k| (*k).clone()).zip(g.grads).collect(),
            unreachable: g.unreachable.into_iter().map(|i| names[i].clone()).collect(),
        })
    }

    /// Vector-Jacobian contributions of `node` to each parent that needs one.
    fn backward(&self, op: Op, node: Var, g: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: Var| needs[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    out.push((a, self.scale(g, c)?));
                }
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if want(a) {
                    out.push((a, self.transpose(g)?));
                }
            }
            Op::BroadcastTo(a) => {
                if want(a) {
                    out.push((a, self.sum_to(g, &self.shape(a))?));
                }
            }
            Op::SumTo(a) => {
                if want(a) {
                    out.push((a, self.broadcast_to(g, &self.shape(a))?));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.leaf(mask);
                    out.push((a, self.mul(g, mask)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    out.push((a, self.mul(g, node)?));
                }
            }
            Op::LogSumExpRows(a) => {
                if want(a) {
                    let shape = self.shape(a);
                    let lse = self.broadcast_to(node, &shape)?;
                    let softmax = self.exp(self.sub(a, lse)?)?;
                    let gb = self.broadcast_to(g, &shape)?;
                    out.push((a, self.mul(gb, softmax)?));
                }
            }
            Op::Solve(a, b) => {
                // x = a⁻¹b:  ḡb = a⁻ᵀ g,  ḡa = −ḡb xᵀ
                let at = self.transpose(a)?;
                let gb = self.solve(at, g)?;
                if want(a) {
                    let xt = self.transpose(node)?;
                    out.push((a, self.neg(self.matmul(gb, xt)?)?));
                }
                if want(b) {
                    out.push((b, gb));
                }
            }
        }
        Ok(out)
    }

    // ---- replay --------------------------------------------------------

    /// Recompute every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = |x: Var| &values[x.0];
            let t = match node.op {
                Op::Leaf => (*node.value).clone(),
                Op::Add(a, b) => zip_with(v(a), v(b), |x, y| x + y),
                Op::Sub(a, b) => zip_with(v(a), v(b), |x, y| x - y),
                Op::Mul(a, b) => zip_with(v(a), v(b), |x, y| x * y),
                Op::Scale(a, c) => v(a).map(|x| x * c),
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (v(a).dims2()?, v(b).dims2()?);
                    Tensor::matrix(m, n, gemm(m, k, n, v(a).values(), v(b).values()))?
                }
                Op::Transpose(a) => transpose(v(a))?,
                Op::BroadcastTo(a) => broadcast(v(a), node.value.shape()),
                Op::SumTo(a) => reduce(v(a), node.value.shape()),
                Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
                Op::Exp(a) => v(a).map(f64::exp),
                Op::LogSumExpRows(a) => logsumexp_rows(v(a))?,
                Op::Solve(a, b) => solve(v(a), v(b))?,
            };
            values.push(t);
        }
        Ok(values)
    }

    /// Whether [`Tape::replay`] reproduces every recorded value bit-for-bit.
    pub fn verify_replay(&self) -> Result<bool> {
        let replayed = self.replay()?;
        let nodes = self.nodes.borrow();
        Ok(nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| n.value.bit_eq(r)))
    }
}

// ---- kernels -------------------------------------------------------------

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), values).expect("same shape")
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: `a` is m×k, `b` is k×n and `c` is m×n, all row-major and
    // contiguous, matching the strides passed here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let src = a.values();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

fn check_broadcast(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.is_empty()
        || (small.len() == big.len()
            && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: small.to_vec(),
            rhs: big.to_vec(),
        })
    }
}

/// Strides of `small` viewed inside `big`, zero along broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    if small.is_empty() {
        return vec![0; big.len()];
    }
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[i] = if small[i] == 1 && big[i] != 1 { 0 } else { acc };
        acc *= small[i];
    }
    strides
}

/// Visit every index of `big` in row-major order with the matching offset
/// into a broadcast operand of the given strides.
fn for_each_offset(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(big);
    if total == 0 {
        return;
    }
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast(a: &Tensor, shape: &[usize]) -> Tensor {
    let strides = broadcast_strides(a.shape(), shape);
    let src = a.values();
    let mut out = vec![0.0; numel(shape)];
    for_each_offset(shape, &strides, |flat, off| out[flat] = src[off]);
    Tensor::new(shape.to_vec(), out).expect("broadcast shape")
}

fn reduce(a: &Tensor, shape: &[usize]) -> Tensor {
    let strides = broadcast_strides(shape, a.shape());
    let src = a.values();
    let mut out = vec![0.0; numel(shape)];
    for_each_offset(a.shape(), &strides, |flat, off| out[off] += src[flat]);
    Tensor::new(shape.to_vec(), out).expect("reduce shape")
}

fn logsumexp_rows(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let out = a
        .values()
        .chunks(c.max(1))
        .take(r)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor::matrix(r, 1, out)
}

fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, _) = a.dims2()?;
    let (_, m) = b.dims2()?;
    let lu = DMatrix::from_row_slice(n, n, a.values()).lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let min = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    if n > 0 && (min.is_nan() || min <= max * n as f64 * f64::EPSILON) {
        return Err(Error::Singular { op: "solve" });
    }
    let rhs = DMatrix::from_row_slice(n, m, b.values());
    let x = lu.solve(&rhs).ok_or(Error::Singular { op: "solve" })?;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = x[(i, j)];
        }
    }
    Tensor::matrix(n, m, out)
}
