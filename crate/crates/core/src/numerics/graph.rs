//! Define-by-run reverse-mode automatic differentiation on dense f64 tensors.
//!
//! Values are computed eagerly as operations are recorded, so the tape is
//! always in topological order and `backward` is a single reverse sweep.
//! Graphs are rebuilt every optimization step; nothing is retained across
//! steps except leaf tensors owned by the caller.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
#[allow(dead_code)] // constants are kept on the op for Debug output
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Softplus(usize),
    Gelu(usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    RowSoftmax(usize),
    RowMean(usize),
    Sum(usize),
    SumCanonical(usize),
    DistSoftmax {
        q: usize,
        k: usize,
        alpha: usize,
        bias: Option<Rc<Tensor>>,
        inv_sqrt: f64,
    },
    Gather(usize, Rc<Vec<usize>>),
    ConcatRows(usize, usize),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowMean(..) => "row_mean",
            Op::Sum(..) => "sum",
            Op::SumCanonical(..) => "sum_canonical",
            Op::DistSoftmax { .. } => "dist_softmax",
            Op::Gather(..) => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

type Inner = Rc<RefCell<Vec<Node>>>;

/// Handle to a computation tape.
#[derive(Clone)]
pub struct Graph {
    nodes: Inner,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one value on the tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    nodes: Inner,
    id: usize,
}

/// Per-node adjoints produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a variable, if it participated in the objective.
    pub fn wrt(&self, v: &Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the variable did not participate.
    pub fn wrt_or_zeros(&self, v: &Var) -> Tensor {
        let shape = v.shape();
        match self.wrt(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

/// Effective 2-D view (rows, cols) of a rank <= 2 shape.
fn eff2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("rank > 2 is rejected at construction"),
    }
}

fn broadcast_out_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (ar, ac) = eff2(a);
    let (br, bc) = eff2(b);
    let or = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        return None;
    };
    let oc = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        return None;
    };
    Some(match a.len().max(b.len()) {
        0 => vec![],
        1 => vec![oc],
        _ => vec![or, oc],
    })
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.borrow().len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.borrow_mut().push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var {
            nodes: self.nodes.clone(),
            id,
        })
    }

    /// Bind a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward will produce an adjoint for it.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    /// Bind a tensor as a non-differentiable constant.
    pub fn constant(&self, mut t: Tensor) -> Result<Var> {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.nodes.borrow()[self.id].value.numel()
    }

    pub fn value(&self) -> Tensor {
        self.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.nodes.borrow()[self.id].value.scalar_value()
    }

    fn same_graph(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.nodes, &other.nodes) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    fn graph(&self) -> Graph {
        Graph {
            nodes: self.nodes.clone(),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[self.id].value)
    }

    fn needs_grad(&self) -> bool {
        self.nodes.borrow()[self.id].needs_grad
    }

    fn binary(&self, other: &Var, make: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_graph(other)?;
        let (value, shape_err) = {
            let nodes = self.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            match broadcast_out_shape(a.shape(), b.shape()) {
                None => (
                    Tensor::scalar(0.0),
                    Some(format!("{:?} vs {:?}", a.shape(), b.shape())),
                ),
                Some(out_shape) => {
                    let ad = a.data();
                    let bd = b.data();
                    let big = ad.len().max(bd.len()) >= kernels::PAR_ELEM_THRESHOLD;
                    let out = if a.shape() == b.shape() {
                        if big {
                            ad.par_iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
                        } else {
                            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
                        }
                    } else if b.numel() == 1 {
                        let b0 = bd[0];
                        if big {
                            ad.par_iter().map(|&x| f(x, b0)).collect()
                        } else {
                            ad.iter().map(|&x| f(x, b0)).collect()
                        }
                    } else if a.numel() == 1 {
                        let a0 = ad[0];
                        if big {
                            bd.par_iter().map(|&y| f(a0, y)).collect()
                        } else {
                            bd.iter().map(|&y| f(a0, y)).collect()
                        }
                    } else {
                        let (or, oc) = eff2(&out_shape);
                        let (ar, ac) = eff2(a.shape());
                        let (br, bc) = eff2(b.shape());
                        let mut out = vec![0.0; or * oc];
                        for i in 0..or {
                            let ia = if ar == 1 { 0 } else { i };
                            let ib = if br == 1 { 0 } else { i };
                            let orow = &mut out[i * oc..(i + 1) * oc];
                            for (j, o) in orow.iter_mut().enumerate() {
                                let ja = if ac == 1 { 0 } else { j };
                                let jb = if bc == 1 { 0 } else { j };
                                *o = f(ad[ia * ac + ja], bd[ib * bc + jb]);
                            }
                        }
                        out
                    };
                    (Tensor::new(out_shape, out)?, None)
                }
            }
        };
        let op = make(self.id, other.id);
        if let Some(details) = shape_err {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                node: self.nodes.borrow().len(),
                details,
            });
        }
        let needs = self.needs_grad() || other.needs_grad();
        self.graph().push(op, value, needs)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    fn unary(&self, make: fn(usize) -> Op, f: fn(f64) -> f64) -> Result<Var> {
        let value = self.with(|t| {
            let data: Vec<f64> = if t.numel() >= kernels::PAR_ELEM_THRESHOLD {
                t.data().par_iter().map(|&v| f(v)).collect()
            } else {
                t.data().iter().map(|&v| f(v)).collect()
            };
            Tensor::new(t.shape().to_vec(), data)
        })?;
        self.graph().push(make(self.id), value, self.needs_grad())
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(Op::Softplus, kernels::softplus)
    }

    pub fn gelu(&self) -> Result<Var> {
        self.unary(Op::Gelu, kernels::gelu)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let value = self.with(|t| {
            let data = t.data().iter().map(|&v| c * v).collect();
            Tensor::new(t.shape().to_vec(), data)
        })?;
        self.graph().push(Op::Scale(self.id, c), value, self.needs_grad())
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        let value = self.with(|t| {
            let data = t.data().iter().map(|&v| c + v).collect();
            Tensor::new(t.shape().to_vec(), data)
        })?;
        self.graph()
            .push(Op::AddScalar(self.id, c), value, self.needs_grad())
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other)?;
        let node = self.nodes.borrow().len();
        let value = {
            let nodes = self.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    node,
                    details: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            kernels::matmul_nn(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        let needs = self.needs_grad() || other.needs_grad();
        self.graph().push(Op::MatMul(self.id, other.id), value, needs)
    }

    pub fn transpose(&self) -> Result<Var> {
        let node = self.nodes.borrow().len();
        let value = self.with(|t| {
            if t.shape().len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    node,
                    details: format!("{:?}", t.shape()),
                });
            }
            let (n, m) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = t.data()[i * m + j];
                }
            }
            Tensor::new(vec![m, n], out)
        })?;
        self.graph()
            .push(Op::Transpose(self.id), value, self.needs_grad())
    }

    /// Fused distance-penalized attention rows for one head:
    /// softmax_j( <q_i, k_j> / sqrt(d_h) - alpha |i - j| + bias_ij ).
    ///
    /// `self` is q [n, d_h], `key` is k [n, d_h], `alpha` is a scalar
    /// variable, `bias` an optional constant [n, n] validity matrix whose
    /// entries are 0 or -inf.
    pub fn dist_softmax(&self, key: &Var, alpha: &Var, bias: Option<&Tensor>) -> Result<Var> {
        self.same_graph(key)?;
        self.same_graph(alpha)?;
        let node = self.nodes.borrow().len();
        let value = {
            let nodes = self.nodes.borrow();
            let q = &nodes[self.id].value;
            let k = &nodes[key.id].value;
            let a = &nodes[alpha.id].value;
            if q.shape().len() != 2 || q.shape() != k.shape() || a.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "dist_softmax",
                    node,
                    details: format!(
                        "q {:?}, k {:?}, alpha numel {}",
                        q.shape(),
                        k.shape(),
                        a.numel()
                    ),
                });
            }
            let n = q.shape()[0];
            let dh = q.shape()[1];
            if let Some(b) = bias {
                if b.shape() != [n, n] {
                    return Err(Error::ShapeMismatch {
                        op: "dist_softmax",
                        node,
                        details: format!("bias {:?} for {n} tokens", b.shape()),
                    });
                }
            }
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; n * n];
            if !kernels::dist_softmax_fwd(
                q.data(),
                k.data(),
                n,
                dh,
                a.data()[0],
                inv_sqrt,
                bias.map(|b| b.data()),
                &mut out,
            ) {
                return Err(Error::NonFinite {
                    op: "dist_softmax",
                    node,
                });
            }
            Tensor::new(vec![n, n], out)?
        };
        let dh = self.shape()[1];
        let needs = self.needs_grad() || key.needs_grad() || alpha.needs_grad();
        self.graph().push(
            Op::DistSoftmax {
                q: self.id,
                k: key.id,
                alpha: alpha.id,
                bias: bias.map(|b| Rc::new(b.clone())),
                inv_sqrt: 1.0 / (dh as f64).sqrt(),
            },
            value,
            needs,
        )
    }

    /// Softmax along the last dimension of a 2-D tensor.
    pub fn row_softmax(&self) -> Result<Var> {
        let node = self.nodes.borrow().len();
        let value = self.with(|t| {
            if t.shape().len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "row_softmax",
                    node,
                    details: format!("{:?}", t.shape()),
                });
            }
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; n * d];
            if !kernels::softmax_rows(t.data(), n, d, &mut out) {
                return Err(Error::NonFinite {
                    op: "row_softmax",
                    node,
                });
            }
            Tensor::new(vec![n, d], out)
        })?;
        self.graph()
            .push(Op::RowSoftmax(self.id), value, self.needs_grad())
    }

    /// Mean along the last dimension: [n, d] -> [n, 1].
    pub fn row_mean(&self) -> Result<Var> {
        let node = self.nodes.borrow().len();
        let value = self.with(|t| {
            if t.shape().len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "row_mean",
                    node,
                    details: format!("{:?}", t.shape()),
                });
            }
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let inv = 1.0 / d as f64;
            let out = (0..n)
                .map(|i| t.data()[i * d..(i + 1) * d].iter().sum::<f64>() * inv)
                .collect();
            Tensor::new(vec![n, 1], out)
        })?;
        self.graph()
            .push(Op::RowMean(self.id), value, self.needs_grad())
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let value = self.with(|t| Tensor::scalar(t.data().iter().sum::<f64>()));
        self.graph().push(Op::Sum(self.id), value, self.needs_grad())
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self) -> Result<Var> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum of all entries accumulated in a canonical (sorted) order, so the
    /// result is bitwise invariant under permutations of the entries.
    pub fn sum_canonical(&self) -> Result<Var> {
        let value = self.with(|t| {
            let mut sorted = t.data().to_vec();
            sorted.sort_by(f64::total_cmp);
            Tensor::scalar(sorted.iter().sum::<f64>())
        });
        self.graph()
            .push(Op::SumCanonical(self.id), value, self.needs_grad())
    }

    /// Differentiable gather by flat index: out[i] = self[indices[i]].
    pub fn gather(&self, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let node = self.nodes.borrow().len();
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                node,
                details: format!("{} indices for shape {:?}", indices.len(), out_shape),
            });
        }
        let value = self.with(|t| {
            let data = t.data();
            let mut out = Vec::with_capacity(indices.len());
            for &ix in indices {
                if ix >= data.len() {
                    return Err(Error::ShapeMismatch {
                        op: "gather",
                        node,
                        details: format!("index {} out of range for numel {}", ix, data.len()),
                    });
                }
                out.push(data[ix]);
            }
            Tensor::new(out_shape.to_vec(), out)
        })?;
        self.graph().push(
            Op::Gather(self.id, Rc::new(indices.to_vec())),
            value,
            self.needs_grad(),
        )
    }

    /// Row selection from a 2-D tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                node: self.nodes.borrow().len(),
                details: format!("gather_rows on shape {:?}", shape),
            });
        }
        let d = shape[1];
        let mut idx = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for j in 0..d {
                idx.push(r * d + j);
            }
        }
        self.gather(&idx, &[rows.len(), d])
    }

    /// Column `k` of a 2-D tensor as an [n, 1] tensor.
    pub fn col(&self, k: usize) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 || k >= shape[1] {
            return Err(Error::ShapeMismatch {
                op: "gather",
                node: self.nodes.borrow().len(),
                details: format!("col {} of shape {:?}", k, shape),
            });
        }
        let (n, m) = (shape[0], shape[1]);
        let idx: Vec<usize> = (0..n).map(|i| i * m + k).collect();
        self.gather(&idx, &[n, 1])
    }

    /// Single element of any tensor as a scalar.
    pub fn at(&self, flat: usize) -> Result<Var> {
        self.gather(&[flat], &[])
    }

    pub fn concat_rows(&self, other: &Var) -> Result<Var> {
        self.same_graph(other)?;
        let node = self.nodes.borrow().len();
        let value = {
            let nodes = self.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    node,
                    details: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let mut out = Vec::with_capacity(a.numel() + b.numel());
            out.extend_from_slice(a.data());
            out.extend_from_slice(b.data());
            Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], out)?
        };
        let needs = self.needs_grad() || other.needs_grad();
        self.graph()
            .push(Op::ConcatRows(self.id, other.id), value, needs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let node = self.nodes.borrow().len();
        let value = self.with(|t| {
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    node,
                    details: format!("{:?} -> {:?}", t.shape(), shape),
                });
            }
            Tensor::new(shape.to_vec(), t.data().to_vec())
        })?;
        self.graph()
            .push(Op::Reshape(self.id), value, self.needs_grad())
    }

    /// Sum of squares of all entries, as a scalar.
    pub fn sq_norm(&self) -> Result<Var> {
        self.square()?.sum()
    }

    /// Reverse sweep from a scalar root; adjoints for every node that
    /// requires gradients.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let ensure = |grads: &mut Vec<Option<Vec<f64>>>, j: usize| {
                if grads[j].is_none() && nodes[j].needs_grad {
                    grads[j] = Some(vec![0.0; nodes[j].value.numel()]);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for the caller
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    ensure(&mut grads, *a);
                    ensure(&mut grads, *b);
                    let same = av.shape() == bv.shape();
                    if same && matches!(node.op, Op::Add(..) | Op::Sub(..)) {
                        if let Some(ga) = grads[*a].as_mut() {
                            for (gv, &go) in ga.iter_mut().zip(&g) {
                                *gv += go;
                            }
                        }
                        if let Some(gb) = grads[*b].as_mut() {
                            for (gv, &go) in gb.iter_mut().zip(&g) {
                                *gv += sign * go;
                            }
                        }
                    } else if same && matches!(node.op, Op::Mul(..)) {
                        if let Some(ga) = grads[*a].as_mut() {
                            for ((gv, &go), &y) in ga.iter_mut().zip(&g).zip(bv.data()) {
                                *gv += go * y;
                            }
                        }
                        if let Some(gb) = grads[*b].as_mut() {
                            for ((gv, &go), &x) in gb.iter_mut().zip(&g).zip(av.data()) {
                                *gv += go * x;
                            }
                        }
                    } else {
                        let (or, oc) = eff2(node.value.shape());
                        let (ar, ac) = eff2(av.shape());
                        let (br, bc) = eff2(bv.shape());
                        for i in 0..or {
                            let ia = if ar == 1 { 0 } else { i };
                            let ib = if br == 1 { 0 } else { i };
                            for j in 0..oc {
                                let ja = if ac == 1 { 0 } else { j };
                                let jb = if bc == 1 { 0 } else { j };
                                let go = g[i * oc + j];
                                let (da, db) = match node.op {
                                    Op::Add(..) | Op::Sub(..) => (go, sign * go),
                                    Op::Mul(..) => (
                                        go * bv.data()[ib * bc + jb],
                                        go * av.data()[ia * ac + ja],
                                    ),
                                    Op::Div(..) => {
                                        let bvv = bv.data()[ib * bc + jb];
                                        let avv = av.data()[ia * ac + ja];
                                        (go / bvv, -go * avv / (bvv * bvv))
                                    }
                                    _ => unreachable!(),
                                };
                                if let Some(ga) = grads[*a].as_mut() {
                                    ga[ia * ac + ja] += da;
                                }
                                if let Some(gb) = grads[*b].as_mut() {
                                    gb[ib * bc + jb] += db;
                                }
                            }
                        }
                    }
                }
                Op::Neg(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (gv, &go) in ga.iter_mut().zip(&g) {
                            *gv -= go;
                        }
                    }
                }
                Op::Exp(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            *gv += go * y;
                        }
                    }
                }
                Op::Log(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &x) in ga.iter_mut().zip(&g).zip(nodes[*a].value.data()) {
                            *gv += go / x;
                        }
                    }
                }
                Op::Sqrt(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            *gv += go * 0.5 / y;
                        }
                    }
                }
                Op::Tanh(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            *gv += go * (1.0 - y * y);
                        }
                    }
                }
                Op::Softplus(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &x) in ga.iter_mut().zip(&g).zip(nodes[*a].value.data()) {
                            *gv += go * kernels::sigmoid(x);
                        }
                    }
                }
                Op::Gelu(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        let x = nodes[*a].value.data();
                        if ga.len() >= kernels::PAR_ELEM_THRESHOLD {
                            ga.par_iter_mut().zip(&g).zip(x).for_each(|((gv, &go), &xv)| {
                                *gv += go * kernels::gelu_grad(xv);
                            });
                        } else {
                            for ((gv, &go), &xv) in ga.iter_mut().zip(&g).zip(x) {
                                *gv += go * kernels::gelu_grad(xv);
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for ((gv, &go), &x) in ga.iter_mut().zip(&g).zip(nodes[*a].value.data()) {
                            if x > 0.0 {
                                *gv += go;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (gv, &go) in ga.iter_mut().zip(&g) {
                            *gv += c * go;
                        }
                    }
                }
                Op::AddScalar(a, _) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (gv, &go) in ga.iter_mut().zip(&g) {
                            *gv += go;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        // dA += G @ B^T
                        kernels::matmul_nt(&g, bv.data(), m, n, k, ga);
                    }
                    ensure(&mut grads, *b);
                    if let Some(gb) = grads[*b].as_mut() {
                        // dB += A^T @ G
                        kernels::matmul_tn(av.data(), &g, k, m, n, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for i in 0..m {
                            for j in 0..n {
                                ga[j * m + i] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::RowSoftmax(a) => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let y = node.value.data();
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        let mut dl = vec![0.0; n * d];
                        kernels::softmax_rows_bwd(&g, y, n, d, &mut dl);
                        for (gv, &dv) in ga.iter_mut().zip(&dl) {
                            *gv += dv;
                        }
                    }
                }
                Op::DistSoftmax {
                    q,
                    k,
                    alpha,
                    bias: _,
                    inv_sqrt,
                } => {
                    let qv = &nodes[*q].value;
                    let kv = &nodes[*k].value;
                    let n = qv.shape()[0];
                    let dh = qv.shape()[1];
                    let a_out = node.value.data();
                    let mut dl = vec![0.0; n * n];
                    kernels::softmax_rows_bwd(&g, a_out, n, n, &mut dl);
                    ensure(&mut grads, *alpha);
                    if let Some(gaa) = grads[*alpha].as_mut() {
                        // serial reduction keeps the result bitwise stable
                        let mut acc = 0.0;
                        for i in 0..n {
                            let row = &dl[i * n..(i + 1) * n];
                            for (j, &dv) in row.iter().enumerate() {
                                acc -= dv * (i as f64 - j as f64).abs();
                            }
                        }
                        gaa[0] += acc;
                    }
                    if dl.len() >= kernels::PAR_ELEM_THRESHOLD {
                        dl.par_iter_mut().for_each(|dv| *dv *= inv_sqrt);
                    } else {
                        for dv in dl.iter_mut() {
                            *dv *= inv_sqrt;
                        }
                    }
                    ensure(&mut grads, *q);
                    if let Some(gq) = grads[*q].as_mut() {
                        // dQ += dl @ K
                        kernels::matmul_nn(&dl, kv.data(), n, n, dh, gq);
                    }
                    ensure(&mut grads, *k);
                    if let Some(gk) = grads[*k].as_mut() {
                        // dK += dl^T @ Q
                        kernels::matmul_tn(&dl, qv.data(), n, n, dh, gk);
                    }
                }
                Op::RowMean(a) => {
                    let d = nodes[*a].value.shape()[1];
                    let inv = 1.0 / d as f64;
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (i, &go) in g.iter().enumerate() {
                            for gv in &mut ga[i * d..(i + 1) * d] {
                                *gv += go * inv;
                            }
                        }
                    }
                }
                Op::Sum(a) | Op::SumCanonical(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        let go = g[0];
                        for gv in ga.iter_mut() {
                            *gv += go;
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (&ix, &go) in idx.iter().zip(&g) {
                            ga[ix] += go;
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = nodes[*a].value.numel();
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (gv, &go) in ga.iter_mut().zip(&g[..na]) {
                            *gv += go;
                        }
                    }
                    ensure(&mut grads, *b);
                    if let Some(gb) = grads[*b].as_mut() {
                        for (gv, &go) in gb.iter_mut().zip(&g[na..]) {
                            *gv += go;
                        }
                    }
                }
                Op::Reshape(a) => {
                    ensure(&mut grads, *a);
                    if let Some(ga) = grads[*a].as_mut() {
                        for (gv, &go) in ga.iter_mut().zip(&g) {
                            *gv += go;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &Graph, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_grad())
            .unwrap()
    }

    #[test]
    fn graph_softmax_symmetry() {
        let g = Graph::new();
        let x = leaf(&g, &[1, 2], vec![0.0, 0.0]);
        let y = x.row_softmax().unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn graph_matmul_identity() {
        let g = Graph::new();
        let eye = g
            .constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let a = leaf(&g, &[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let y = eye.matmul(&a).unwrap();
        assert_eq!(y.value().data(), a.value().data());
    }

    #[test]
    fn graph_softplus_zero() {
        let g = Graph::new();
        let x = leaf(&g, &[], vec![0.0]);
        let y = x.softplus().unwrap();
        assert!((y.scalar_value() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> grad 6
        let g = Graph::new();
        let x = leaf(&g, &[], vec![3.0]);
        let y = x.square().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let g = Graph::new();
        let x = leaf(&g, &[2], vec![1.0, 2.0]);
        let c = g.constant(Tensor::new(vec![2], vec![5.0, 7.0]).unwrap()).unwrap();
        let y = c.sum().unwrap();
        let grads = y.backward().unwrap();
        // x never participated: its gradient is exactly zero
        assert!(grads.wrt(&x).is_none());
        assert_eq!(grads.wrt_or_zeros(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_leaf_gets_none() {
        let g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let y = x.sum().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.wrt(&x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = leaf(&g, &[2], vec![1.0, 2.0]);
        assert!(matches!(
            x.backward(),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_reports_op() {
        let g = Graph::new();
        let a = leaf(&g, &[2, 2], vec![1.0; 4]);
        let b = leaf(&g, &[3, 2], vec![1.0; 6]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_detected_with_node_identity() {
        let g = Graph::new();
        let x = leaf(&g, &[], vec![-1.0]);
        match x.log() {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn broadcast_add_row_bias() {
        let g = Graph::new();
        let x = leaf(&g, &[2, 3], vec![0., 1., 2., 3., 4., 5.]);
        let b = leaf(&g, &[3], vec![10., 20., 30.]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.value().data(), &[10., 21., 32., 13., 24., 35.]);
        let s = y.sum().unwrap();
        let grads = s.backward().unwrap();
        assert_eq!(grads.wrt(&b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn broadcast_col_and_outer() {
        // [2,1] against [1,3] -> [2,3]
        let g = Graph::new();
        let a = leaf(&g, &[2, 1], vec![1.0, 2.0]);
        let b = leaf(&g, &[1, 3], vec![3.0, 4.0, 5.0]);
        let y = a.mul(&b).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.value().data(), &[3., 4., 5., 6., 8., 10.]);
        let grads = y.sum().unwrap().backward().unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[12.0, 12.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn gather_and_scatter_gradient() {
        let g = Graph::new();
        let x = leaf(&g, &[4], vec![1., 2., 3., 4.]);
        let y = x.gather(&[0, 0, 3], &[3]).unwrap();
        assert_eq!(y.value().data(), &[1., 1., 4.]);
        let grads = y.sum().unwrap().backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_rows_roundtrip() {
        let g = Graph::new();
        let a = leaf(&g, &[1, 2], vec![1., 2.]);
        let b = leaf(&g, &[2, 2], vec![3., 4., 5., 6.]);
        let y = a.concat_rows(&b).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        let w = g
            .constant(Tensor::new(vec![3, 2], vec![1., 1., 2., 2., 3., 3.]).unwrap())
            .unwrap();
        let grads = y.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn forward_deterministic_bitwise() {
        let build = || {
            let g = Graph::new();
            let x = leaf(&g, &[2, 2], vec![0.3, -1.7, 2.9, 0.01]);
            let y = x.gelu().unwrap().row_softmax().unwrap().sum().unwrap();
            y.scalar_value().to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn sum_canonical_is_permutation_invariant() {
        let data = vec![1e16, 3.25, -1e16, -7.5, 0.125, 2.0, -1.0];
        let mut perm = data.clone();
        // a couple of adversarial reorderings must give identical bits
        perm.reverse();
        let sum_of = |d: &[f64]| {
            let g = Graph::new();
            let x = g.leaf(Tensor::new(vec![d.len()], d.to_vec()).unwrap().with_grad()).unwrap();
            x.sum_canonical().unwrap().scalar_value().to_bits()
        };
        assert_eq!(sum_of(&data), sum_of(&perm));
        let mut rot = data.clone();
        rot.rotate_left(3);
        assert_eq!(sum_of(&data), sum_of(&rot));
    }

    #[test]
    fn sum_canonical_backward_is_all_ones() {
        let g = Graph::new();
        let x = leaf(&g, &[3], vec![5.0, -2.0, 7.0]);
        let y = x.sum_canonical().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let g = Graph::new();
        let x = leaf(&g, &[3], vec![0.5, -0.25, 1.5]);
        let f1 = x.tanh().unwrap().sum().unwrap();
        let f2 = x.square().unwrap().sum().unwrap();
        let both = f1.add(&f2).unwrap();
        let gb = both.backward().unwrap();
        let g1 = f1.backward().unwrap();
        let g2 = f2.backward().unwrap();
        let lhs = gb.wrt(&x).unwrap();
        for i in 0..3 {
            let rhs = g1.wrt(&x).unwrap()[i] + g2.wrt(&x).unwrap()[i];
            assert!((lhs[i] - rhs).abs() < 1e-15);
        }
    }
}
