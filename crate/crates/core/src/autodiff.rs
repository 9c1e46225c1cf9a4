//! Minimal reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! A [`Tape`] records nodes in evaluation order. Every node holds its forward
//! value, computed eagerly when recorded. Scalars are vectors of length one.
//! [`Tape::backward`] sweeps the tape in reverse and returns the gradient of a
//! scalar node with respect to one leaf, leaving the tape untouched so the
//! sweep can be repeated for several outputs sharing one forward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · g`.
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * gr;
            }
        }
        out
    }
}

/// Identifier of a node on one particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recordable operations. The operand count is fixed per kind except
/// [`Primitive::Concat`], which takes one or more.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `W x + b`.
    Affine {
        weight: Arc<Matrix>,
        bias: Arc<Vec<f64>>,
    },
    Add,
    Sub,
    /// `c · x`.
    Scale(f64),
    /// `x + c` elementwise.
    Shift(f64),
    /// Elementwise product.
    Mul,
    Tanh,
    Sigmoid,
    Square,
    Exp,
    Log,
    Sum,
    Mean,
    /// `ln Σ exp(xᵢ)`, evaluated with a max shift.
    LogSumExp,
    Softmax,
    L2Norm,
    /// `x / ‖x‖`.
    Normalize,
    Dot,
    CosineSimilarity,
    Slice {
        start: usize,
        len: usize,
    },
    Concat,
}

impl Primitive {
    fn arity(&self) -> Option<usize> {
        use Primitive::*;
        match self {
            Add | Sub | Mul | Dot | CosineSimilarity => Some(2),
            Concat => None,
            _ => Some(1),
        }
    }

    fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            Affine { .. } => "affine",
            Add => "add",
            Sub => "sub",
            Scale(_) => "scale",
            Shift(_) => "shift",
            Mul => "mul",
            Tanh => "tanh",
            Sigmoid => "sigmoid",
            Square => "square",
            Exp => "exp",
            Log => "log",
            Sum => "sum",
            Mean => "mean",
            LogSumExp => "logsumexp",
            Softmax => "softmax",
            L2Norm => "l2-norm",
            Normalize => "normalize",
            Dot => "dot",
            CosineSimilarity => "cosine-similarity",
            Slice { .. } => "slice",
            Concat => "concat",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Apply(Primitive, Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn checked(&self, id: NodeId) -> Result<&[f64]> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_slice())
            .ok_or(Error::UnknownNode(id.0))
    }

    /// Appends `primitive` applied to `operands`, evaluating it immediately.
    pub fn record(&mut self, primitive: Primitive, operands: &[NodeId]) -> Result<NodeId> {
        for &id in operands {
            self.checked(id)?;
        }
        match primitive.arity() {
            Some(n) if n != operands.len() => {
                return Err(Error::Contract(format!(
                    "{} takes {n} operand(s), got {}",
                    primitive.name(),
                    operands.len()
                )))
            }
            None if operands.is_empty() => {
                return Err(Error::Contract("concat needs at least one operand".into()))
            }
            _ => {}
        }
        let value = self.forward(&primitive, operands)?;
        Ok(self.push(Op::Apply(primitive, operands.to_vec()), value))
    }

    fn forward(&self, primitive: &Primitive, operands: &[NodeId]) -> Result<Vec<f64>> {
        use Primitive::*;
        let a = self.value(operands[0]);
        let same_len = |b: &[f64]| -> Result<()> {
            if a.len() == b.len() {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{}: operand lengths {} and {} differ",
                    primitive.name(),
                    a.len(),
                    b.len()
                )))
            }
        };
        let value = match primitive {
            Affine { weight, bias } => {
                if weight.cols() != a.len() || weight.rows() != bias.len() {
                    return Err(Error::Contract(format!(
                        "affine: weight {}x{}, bias {}, input {}",
                        weight.rows(),
                        weight.cols(),
                        bias.len(),
                        a.len()
                    )));
                }
                let mut y = weight.matvec(a);
                for (yi, bi) in y.iter_mut().zip(bias.iter()) {
                    *yi += bi;
                }
                y
            }
            Add | Sub | Mul => {
                let b = self.value(operands[1]);
                same_len(b)?;
                let f = match primitive {
                    Add => |x: f64, y: f64| x + y,
                    Sub => |x: f64, y: f64| x - y,
                    _ => |x: f64, y: f64| x * y,
                };
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
            }
            Scale(c) => a.iter().map(|x| c * x).collect(),
            Shift(c) => a.iter().map(|x| x + c).collect(),
            Tanh => a.iter().map(|x| x.tanh()).collect(),
            Sigmoid => a.iter().map(|&x| sigmoid(x)).collect(),
            Square => a.iter().map(|x| x * x).collect(),
            Exp => a.iter().map(|x| x.exp()).collect(),
            Log => {
                if let Some(x) = a.iter().find(|&&x| x < 0.0) {
                    return Err(Error::Numeric(format!("log of negative value {x}")));
                }
                a.iter().map(|x| x.ln()).collect()
            }
            Sum => vec![a.iter().sum()],
            Mean => {
                non_empty(a, primitive)?;
                vec![a.iter().sum::<f64>() / a.len() as f64]
            }
            LogSumExp => {
                non_empty(a, primitive)?;
                vec![logsumexp(a)]
            }
            Softmax => {
                non_empty(a, primitive)?;
                softmax(a)
            }
            L2Norm => vec![norm(a)],
            Normalize => {
                let n = norm(a);
                if n == 0.0 {
                    return Err(Error::Singularity("normalize of the zero vector".into()));
                }
                a.iter().map(|x| x / n).collect()
            }
            Dot => {
                let b = self.value(operands[1]);
                same_len(b)?;
                vec![dot(a, b)]
            }
            CosineSimilarity => {
                let b = self.value(operands[1]);
                same_len(b)?;
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::Singularity(
                        "cosine similarity with a zero vector".into(),
                    ));
                }
                vec![dot(a, b) / (na * nb)]
            }
            Slice { start, len } => {
                if start + len > a.len() {
                    return Err(Error::Contract(format!(
                        "slice {start}..{} out of bounds for length {}",
                        start + len,
                        a.len()
                    )));
                }
                a[*start..start + len].to_vec()
            }
            Concat => operands
                .iter()
                .flat_map(|&id| self.value(id).iter().copied())
                .collect(),
        };
        Ok(value)
    }

    /// Gradient of the scalar node `output` with respect to `leaf`.
    ///
    /// Only nodes on a path from `leaf` to `output` contribute; a leaf the
    /// output does not depend on gets a zero vector.
    pub fn backward(&self, output: NodeId, leaf: NodeId) -> Result<Vec<f64>> {
        let out_len = self.checked(output)?.len();
        let leaf_len = self.checked(leaf)?.len();
        if out_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, node {} has length {out_len}",
                output.0
            )));
        }
        if leaf > output {
            return Ok(vec![0.0; leaf_len]);
        }

        // Nodes that depend on `leaf`; adjoints elsewhere are never needed.
        let mut depends = vec![false; output.0 + 1];
        depends[leaf.0] = true;
        for i in leaf.0 + 1..=output.0 {
            if let Op::Apply(_, ops) = &self.nodes[i].op {
                depends[i] = ops.iter().any(|o| depends[o.0]);
            }
        }
        if !depends[output.0] {
            return Ok(vec![0.0; leaf_len]);
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(vec![1.0]);
        for i in (leaf.0 + 1..=output.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let Op::Apply(primitive, ops) = &self.nodes[i].op else {
                continue;
            };
            for (k, &operand) in ops.iter().enumerate() {
                if !depends[operand.0] {
                    continue;
                }
                let contrib = self.vjp(primitive, ops, i, k, &g)?;
                match &mut adjoints[operand.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(adjoints[leaf.0]
            .take()
            .unwrap_or_else(|| vec![0.0; leaf_len]))
    }

    /// Vector-Jacobian product of node `node` with respect to operand `k`.
    fn vjp(
        &self,
        primitive: &Primitive,
        ops: &[NodeId],
        node: usize,
        k: usize,
        g: &[f64],
    ) -> Result<Vec<f64>> {
        use Primitive::*;
        let y = &self.nodes[node].value;
        let x = self.value(ops[k]);
        let other = || self.value(ops[1 - k]);
        let out = match primitive {
            Affine { weight, .. } => weight.matvec_t(g),
            Add => g.to_vec(),
            Sub => {
                if k == 0 {
                    g.to_vec()
                } else {
                    g.iter().map(|v| -v).collect()
                }
            }
            Scale(c) => g.iter().map(|v| c * v).collect(),
            Shift(_) => g.to_vec(),
            Mul => g.iter().zip(other()).map(|(a, b)| a * b).collect(),
            Tanh => g.iter().zip(y).map(|(a, t)| a * (1.0 - t * t)).collect(),
            Sigmoid => g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect(),
            Square => g.iter().zip(x).map(|(a, v)| 2.0 * v * a).collect(),
            Exp => g.iter().zip(y).map(|(a, e)| a * e).collect(),
            Log => {
                if x.contains(&0.0) {
                    return Err(Error::Singularity("gradient of log at 0".into()));
                }
                g.iter().zip(x).map(|(a, v)| a / v).collect()
            }
            Sum => vec![g[0]; x.len()],
            Mean => vec![g[0] / x.len() as f64; x.len()],
            LogSumExp => softmax(x).into_iter().map(|p| g[0] * p).collect(),
            Softmax => {
                let gy = dot(g, y);
                y.iter().zip(g).map(|(p, a)| p * (a - gy)).collect()
            }
            L2Norm => {
                let n = y[0];
                if n == 0.0 {
                    return Err(Error::Singularity(
                        "gradient of l2-norm at the origin".into(),
                    ));
                }
                x.iter().map(|v| g[0] * v / n).collect()
            }
            Normalize => {
                // y = x/‖x‖ is never produced from the origin; forward rejects it.
                let n = norm(x);
                let gy = dot(g, y);
                g.iter().zip(y).map(|(a, u)| (a - u * gy) / n).collect()
            }
            Dot => other().iter().map(|b| g[0] * b).collect(),
            CosineSimilarity => {
                let b = other();
                let (na, nb) = (norm(x), norm(b));
                let c = y[0];
                x.iter()
                    .zip(b)
                    .map(|(a, bb)| g[0] * (bb / (na * nb) - c * a / (na * na)))
                    .collect()
            }
            Slice { start, len } => {
                let mut out = vec![0.0; x.len()];
                out[*start..start + len].copy_from_slice(g);
                out
            }
            Concat => {
                let offset: usize = ops[..k].iter().map(|&o| self.value(o).len()).sum();
                g[offset..offset + x.len()].to_vec()
            }
        };
        Ok(out)
    }

    // Convenience wrappers. Operands produced by this tape are always valid,
    // so only shape and domain errors can surface.

    pub fn affine(
        &mut self,
        weight: Arc<Matrix>,
        bias: Arc<Vec<f64>>,
        x: NodeId,
    ) -> Result<NodeId> {
        self.record(Primitive::Affine { weight, bias }, &[x])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Primitive::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Primitive::Shift(c), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sigmoid, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Square, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Log, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mean, &[a])
    }
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::LogSumExp, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Softmax, &[a])
    }
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::L2Norm, &[a])
    }
    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Normalize, &[a])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Dot, &[a, b])
    }
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::CosineSimilarity, &[a, b])
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Primitive::Slice { start, len }, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(Primitive::Concat, parts)
    }
    /// `Σ (a - b)²`.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.sum(sq)
    }
}

fn non_empty(a: &[f64], primitive: &Primitive) -> Result<()> {
    if a.is_empty() {
        Err(Error::Contract(format!(
            "{} of an empty vector",
            primitive.name()
        )))
    } else {
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn logsumexp(a: &[f64]) -> f64 {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function value not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Componentwise error used by gradient audits: `|a − b| / max(|a|, |b|, atol/rtol)`.
///
/// A component passes at relative tolerance `rtol` iff its scaled error is at
/// most `rtol`, which is the same as `|a − b| ≤ rtol·max(|a|,|b|)` or
/// `|a − b| ≤ atol`.
pub fn scaled_error(a: f64, b: f64, rtol: f64, atol: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(atol / rtol)
}

pub fn max_scaled_error(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| scaled_error(x, y, rtol, atol))
        .fold(0.0, f64::max)
}
