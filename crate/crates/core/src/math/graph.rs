//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] is built for one training step: parameters and inputs are
//! registered as leaves, every operation appends a node whose inputs are
//! already on the tape, and [`Graph::backward`] walks the tape once in reverse.
//! Leaf gradients accumulate across backward calls until
//! [`Graph::zero_grads`].

use super::tensor::{matmul_into, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    SubRowMax(Var),
    RowSum(Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | SubCol(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | ClampMin(a, _)
            | SubRowMax(a) | RowSum(a) | Sum(a) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Element-wise operations addressable by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    MaxSubtract,
}

/// Second operand of [`Graph::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    None,
    Tensor(Var),
    Scalar(f64),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `tensor` as a leaf, tracking gradients iff the tensor does.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.values().to_vec())
            .expect("valid tensor");
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn parameter(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor, op: Op, a: Var) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(out, Op::MatMul(a, b), a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.binary(out, Op::Add(a, b), a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        Ok(self.binary(out, Op::Sub(a, b), a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.binary(out, Op::Mul(a, b), a, b))
    }

    /// `a[r×c] + row[c]` broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        Ok(self.binary(out, Op::AddRow(a, row), a, row))
    }

    /// `a[r×c] - col[r×1]` broadcast over columns.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let cv = self.value(col);
        if cv.len() != r {
            return shape_err(format!(
                "column broadcast of {:?} onto {:?}",
                cv.shape(),
                self.value(a).shape()
            ));
        }
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ci = cv.values()[i];
            out.extend(av[i * c..(i + 1) * c].iter().map(|v| v - ci));
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.binary(out, Op::SubCol(a, col), a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.unary(out, Op::Scale(a, s), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.unary(out, Op::AddScalar(a), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.unary(out, Op::Relu(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).exp();
        self.unary(out, Op::Exp(a), a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log()?;
        Ok(self.unary(out, Op::Log(a), a))
    }

    /// `max(a, lo)`; gradient passes only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|v| v.max(lo));
        self.unary(out, Op::ClampMin(a, lo), a)
    }

    /// Subtracts each row's maximum (first maximal entry on ties).
    pub fn sub_row_max(&mut self, a: Var) -> Var {
        let out = self.value(a).sub_row_max();
        self.unary(out, Op::SubRowMax(a), a)
    }

    /// Sums each row, producing `r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let sums = (0..r).map(|i| t.values()[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::matrix(r, 1, sums).expect("r >= 1");
        self.unary(out, Op::RowSum(a), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(out, Op::Sum(a), a)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Operand) -> Result<Var> {
        let need_tensor = |b: Operand| match b {
            Operand::Tensor(v) => Ok(v),
            _ => contract_err(format!("{op:?} needs a tensor operand")),
        };
        match op {
            Elementwise::Add => match b {
                Operand::Scalar(s) => Ok(self.add_scalar(a, s)),
                _ => self.add(a, need_tensor(b)?),
            },
            Elementwise::Sub => match b {
                Operand::Scalar(s) => Ok(self.add_scalar(a, -s)),
                _ => self.sub(a, need_tensor(b)?),
            },
            Elementwise::Mul => match b {
                Operand::Scalar(s) => Ok(self.scale(a, s)),
                _ => self.mul(a, need_tensor(b)?),
            },
            Elementwise::Scale(s) => Ok(self.scale(a, s)),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::MaxSubtract => Ok(self.sub_row_max(a)),
        }
    }

    /// Propagates d`loss`/d(node) to every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return contract_err("backward on an empty record");
        }
        if !self.value(loss).is_scalar() {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.values();
        let val = |v: Var| self.nodes[v.0].value.values();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        let mut send = |v: Var, contribution: Vec<f64>| {
            if !wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.nodes[a.0].value.dims2();
                let c = self.nodes[b.0].value.cols();
                if wants(a) {
                    // dA = dOut · Bᵀ
                    let bt = transpose(val(b), k, c);
                    let mut da = vec![0.0; r * k];
                    matmul_into(g, &bt, &mut da, r, c, k);
                    send(a, da);
                }
                if wants(b) {
                    // dB = Aᵀ · dOut
                    let at = transpose(val(a), r, k);
                    let mut db = vec![0.0; k * c];
                    matmul_into(&at, g, &mut db, k, r, c);
                    send(b, db);
                }
            }
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    send(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    send(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                send(a, g.to_vec());
                if wants(row) {
                    let c = self.nodes[row.0].value.len();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    send(row, dr);
                }
            }
            Op::SubCol(a, col) => {
                send(a, g.to_vec());
                if wants(col) {
                    let c = node.value.cols();
                    send(col, g.chunks(c).map(|ch| -ch.iter().sum::<f64>()).collect());
                }
            }
            Op::Scale(a, s) => send(a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => send(a, g.to_vec()),
            Op::Relu(a) => send(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => send(a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(a) => send(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
            Op::ClampMin(a, lo) => send(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > lo { *g } else { 0.0 })
                    .collect(),
            ),
            Op::SubRowMax(a) => {
                let (r, c) = node.value.dims2();
                let x = val(a);
                let mut da = g.to_vec();
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let arg = argmax_first(row);
                    let total: f64 = g[i * c..(i + 1) * c].iter().sum();
                    da[i * c + arg] -= total;
                }
                send(a, da);
            }
            Op::RowSum(a) => {
                let c = self.nodes[a.0].value.cols();
                let mut da = Vec::with_capacity(g.len() * c);
                for &gi in g {
                    da.extend(std::iter::repeat_n(gi, c));
                }
                send(a, da);
            }
            Op::Sum(a) => send(a, vec![g[0]; self.nodes[a.0].value.len()]),
        }
    }

    /// Indices of every node whose inputs are all earlier on the tape.
    /// Always true by construction; exposed for tests.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().flatten().all(|v| v.0 < i))
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Tensor(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn param(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(shape, values).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let theta = g.leaf(&param(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]));
        let loss = g.sum(theta);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gives_theta() {
        let values = vec![0.5, -1.0, 2.0, 3.0];
        let mut g = Graph::new();
        let theta = g.leaf(&param(vec![4], values.clone()));
        let sq = g.mul(theta, theta).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), values.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let theta = g.leaf(&param(vec![2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(theta), Err(Error::Contract(_))));
        assert!(matches!(Graph::new().backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let theta = g.leaf(&param(vec![2], vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let prod = g.mul(theta, c).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
        assert!(g.is_topologically_ordered());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let theta = g.leaf(&param(vec![2], vec![1.0, 2.0]));
        let loss = g.sum(theta);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn elementwise_dispatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.elementwise(Elementwise::Relu, a, Operand::None).unwrap();
        assert_eq!(g.value(r).values(), &[0.0, 0.0, 2.0]);
        let s = g.elementwise(Elementwise::Scale(0.0), a, Operand::None).unwrap();
        assert_eq!(g.value(s).values(), &[0.0, 0.0, 0.0]);
        assert!(g.elementwise(Elementwise::Log, a, Operand::None).is_err());
        assert!(g.elementwise(Elementwise::Mul, a, Operand::None).is_err());
    }
}
