//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its output, so
//! nodes are stored in topological order by construction. `backward` walks the
//! node list once in reverse, applying each primitive's local vector-Jacobian
//! product and accumulating into its inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Rows-times-columns threshold above which matmul splits rows across threads.
/// Each output row is computed independently, so results do not depend on the
/// thread count.
const PAR_MATMUL_WORK: usize = 1 << 16;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `var`, if `var`
    /// requires a gradient.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }

    /// Number of recorded non-leaf operations whose backward rule ran.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    };
    if n * m * p >= PAR_MATMUL_WORK && p > 0 {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else if p > 0 {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

/// `g (n×p) · bᵀ` where `b` is `m×p`.
fn matmul_nt(g: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let g_row = &g[i * p..(i + 1) * p];
        for (k, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[k * p..(k + 1) * p];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if n * m * p >= PAR_MATMUL_WORK && m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else if m > 0 {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `aᵀ · g` where `a` is `n×m` and `g` is `n×p`.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    let row = |(k, out_row): (usize, &mut [f64])| {
        for i in 0..n {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let g_row = &g[i * p..(i + 1) * p];
            for (o, &gij) in out_row.iter_mut().zip(g_row) {
                *o += aik * gij;
            }
        }
    };
    if n * m * p >= PAR_MATMUL_WORK && p > 0 {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else if p > 0 {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::BackwardBeforeForward);
        }
        self.nodes.get(v.idx).ok_or(Error::BackwardBeforeForward)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a constant (no gradient) leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let expected = numel(&shape);
        if expected != values.len() {
            return Err(Error::BadTensorLength {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.check(v)].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[self.check(v)];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        v.idx
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(a)?;
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, op, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad || nb.requires_grad);
        Ok(self.push(shape, value, op, rg))
    }

    /// 2-D matrix product `[n, m] × [m, p] → [n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (n, m, p) = (na.shape[0], na.shape[1], nb.shape[1]);
        let value = matmul_raw(&na.value, &nb.value, n, m, p);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![n, p], value, Op::MatMul(a.idx, b.idx), rg))
    }

    /// Batched product `[B, n, m] × [B, m, p] → [B, n, p]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 3
            || nb.shape.len() != 3
            || na.shape[0] != nb.shape[0]
            || na.shape[2] != nb.shape[1]
        {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (bs, n, m, p) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
        let mut value = Vec::with_capacity(bs * n * p);
        for k in 0..bs {
            value.extend(matmul_raw(
                &na.value[k * n * m..(k + 1) * n * m],
                &nb.value[k * m * p..(k + 1) * m * p],
                n,
                m,
                p,
            ));
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![bs, n, p], value, Op::BatchMatMul(a.idx, b.idx), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let na = self.node(a)?;
        if numel(&shape) != na.value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: na.shape.clone(),
                rhs: shape,
            });
        }
        let (value, rg) = (na.value.clone(), na.requires_grad);
        Ok(self.push(shape, value, Op::Reshape(a.idx), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.idx, b.idx), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.idx, b.idx), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.idx, b.idx), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nr) = (self.node(a)?, self.node(row)?);
        let cols = match na.shape.as_slice() {
            [_, c] => *c,
            _ => 0,
        };
        if na.shape.len() != 2 || nr.value.len() != cols || nr.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nr.shape.clone(),
            });
        }
        let value = na
            .value
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(&nr.value).map(|(&x, &y)| f(x, y)))
            .collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad || nr.requires_grad);
        Ok(self.push(shape, value, op, rg))
    }

    /// Broadcast-add a length-`m` row to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a.idx, row.idx), |x, y| x + y)
    }

    /// Broadcast-multiply every row of an `[n, m]` matrix by a length-`m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a.idx, row.idx), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.idx, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a.idx), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.idx), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a.idx), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a.idx), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip(a.idx), |x| 1.0 / x)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a.idx), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a.idx), f64::cos)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let (s, rg) = (na.value.iter().sum(), na.requires_grad);
        Ok(self.push(Vec::new(), vec![s], Op::Sum(a.idx), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        if na.value.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean",
                lhs: na.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let s = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let rg = na.requires_grad;
        Ok(self.push(Vec::new(), vec![s], Op::Mean(a.idx), rg))
    }

    /// Mean over the leading axis: `[n, m] → [m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let (n, m) = match na.shape.as_slice() {
            [n, m] if *n > 0 => (*n, *m),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "mean_rows",
                    lhs: na.shape.clone(),
                    rhs: Vec::new(),
                })
            }
        };
        let mut out = vec![0.0; m];
        for r in na.value.chunks(m.max(1)) {
            out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = na.requires_grad;
        Ok(self.push(vec![m], out, Op::MeanRows(a.idx), rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(vec![1.0]);
        let mut visited = 0;

        for idx in (0..=output.idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let needs = |i: usize| self.nodes[i].requires_grad;
            let val = |i: usize| self.nodes[i].value.as_slice();
            match node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (n, m) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let p = self.nodes[b].shape[1];
                    if needs(a) {
                        accumulate(&mut grads[a], matmul_nt(&g, val(b), n, m, p));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], matmul_tn(val(a), &g, n, m, p));
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let sa = &self.nodes[a].shape;
                    let (bs, n, m) = (sa[0], sa[1], sa[2]);
                    let p = self.nodes[b].shape[2];
                    if needs(a) {
                        let mut da = Vec::with_capacity(bs * n * m);
                        for k in 0..bs {
                            da.extend(matmul_nt(
                                &g[k * n * p..(k + 1) * n * p],
                                &val(b)[k * m * p..(k + 1) * m * p],
                                n,
                                m,
                                p,
                            ));
                        }
                        accumulate(&mut grads[a], da);
                    }
                    if needs(b) {
                        let mut db = Vec::with_capacity(bs * m * p);
                        for k in 0..bs {
                            db.extend(matmul_tn(
                                &val(a)[k * n * m..(k + 1) * n * m],
                                &g[k * n * p..(k + 1) * n * p],
                                n,
                                m,
                                p,
                            ));
                        }
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads[a], g),
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], g.iter().map(|x| -x).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let d = g.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads[a], d);
                    }
                    if needs(b) {
                        let d = g.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads[b], d);
                    }
                }
                Op::AddRow(a, r) => {
                    let m = self.nodes[r].value.len();
                    if needs(r) {
                        let mut dr = vec![0.0; m];
                        for row in g.chunks(m.max(1)) {
                            dr.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        accumulate(&mut grads[r], dr);
                    }
                    if needs(a) {
                        accumulate(&mut grads[a], g);
                    }
                }
                Op::MulRow(a, r) => {
                    let m = self.nodes[r].value.len();
                    let row = val(r);
                    if needs(r) {
                        let mut dr = vec![0.0; m];
                        for (grow, arow) in g.chunks(m.max(1)).zip(val(a).chunks(m.max(1))) {
                            for j in 0..m {
                                dr[j] += grow[j] * arow[j];
                            }
                        }
                        accumulate(&mut grads[r], dr);
                    }
                    if needs(a) {
                        let da = g
                            .chunks(m.max(1))
                            .flat_map(|gr| gr.iter().zip(row).map(|(x, y)| x * y))
                            .collect();
                        accumulate(&mut grads[a], da);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a], g.iter().map(|x| c * x).collect()),
                Op::AddScalar(a) => accumulate(&mut grads[a], g),
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(val(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Square(a) => {
                    let d = g.iter().zip(val(a)).map(|(g, x)| 2.0 * x * g).collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Sqrt(a) => {
                    let d = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| 0.5 * g / y)
                        .collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Recip(a) => {
                    let d = g.iter().zip(&node.value).map(|(g, y)| -g * y * y).collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Sin(a) => {
                    let d = g.iter().zip(val(a)).map(|(g, x)| g * x.cos()).collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Cos(a) => {
                    let d = g.iter().zip(val(a)).map(|(g, x)| -g * x.sin()).collect();
                    accumulate(&mut grads[a], d);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    accumulate(&mut grads[a], vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    accumulate(&mut grads[a], vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a].shape[0] as f64;
                    let m = self.nodes[a].shape[1];
                    let mut d = Vec::with_capacity(self.nodes[a].value.len());
                    for _ in 0..self.nodes[a].shape[0] {
                        d.extend(g[..m].iter().map(|x| x / n));
                    }
                    accumulate(&mut grads[a], d);
                }
            }
        }

        // Intermediate gradients were consumed above; keep only the leaves.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let a: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let i3 = tape.constant(vec![3, 3], eye).unwrap();
        let av = tape.constant(vec![3, 3], a.clone()).unwrap();
        let out = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(out), a.as_slice());
    }

    #[test]
    fn sum_reduce() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.5, 2.5]).unwrap();
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.scalar(s), 4.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-1.0, 2.0]).with_grad());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.25).with_grad());
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn backward_on_unrecorded_value_is_rejected() {
        let mut other = Tape::new();
        let y = other.constant(vec![], vec![1.0]).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(y),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.3, -0.2]).with_grad());
        let a = tape.sin(x).unwrap();
        let b = tape.cos(x).unwrap();
        let c = tape.mul(a, b).unwrap();
        let d = tape.sum(c).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.visited_ops(), 4);
        // d/dx sin x cos x = cos 2x
        for (gx, x) in g.get(x).unwrap().iter().zip([0.3f64, -0.2]) {
            assert!((gx - (2.0 * x).cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_have_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let x = tape.leaf(&Tensor::vector(vec![3.0, 4.0]).with_grad());
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }
}
