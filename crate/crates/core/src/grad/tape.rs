//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node. Tapes are cheap and
//! meant to be thrown away after each step.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, Vec<f64>),
    Tanh(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    ConcatCols(Vec<usize>),
    Gather(usize, Vec<usize>),
    /// Cached softmax probabilities, labels and whether the loss is a mean.
    CrossEntropy { logits: usize, probs: Tensor, labels: Vec<usize>, mean: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&nodes[*b].value)?;
                    let gb = nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_rows();
                    accumulate(&mut grads, *b, reshape_like(gb, &nodes[*b].value));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&nodes[*b].value)?;
                    let gb = g.mul(&nodes[*a].value)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::ScaleRows(a, f) => accumulate(&mut grads, *a, g.scale_rows(f)?),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh'", |gi, y| gi * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(&nodes[*a].value, "square'", |gi, x| 2.0 * gi * x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let src = &nodes[*a].value;
                    accumulate(&mut grads, *a, Tensor::full(src.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let src = &nodes[*a].value;
                    let v = g.item() / src.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(src.shape(), v));
                }
                Op::SumCols(a) => {
                    let src = &nodes[*a].value;
                    let m = src.cols();
                    let mut data = Vec::with_capacity(src.len());
                    for &gi in g.data() {
                        data.extend(std::iter::repeat_n(gi, m));
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(src.shape().to_vec(), data));
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let src = &nodes[p].value;
                        let w = src.cols();
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::from_parts(src.shape().to_vec(), data));
                    }
                }
                Op::Gather(table, idx) => {
                    let src = &nodes[*table].value;
                    let mut gt = Tensor::zeros(src.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::CrossEntropy { logits, probs, labels, mean } => {
                    let scale = if *mean { g.item() / labels.len() as f64 } else { g.item() };
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        gl.row_mut(r)[y] -= 1.0;
                    }
                    let gl = gl.scale(scale);
                    accumulate(&mut grads, *logits, reshape_like(gl, &nodes[*logits].value));
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), t.into_data())
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; all zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let m = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Row-wise softmax. Max-subtracted, so large logits do not overflow.
pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Per-row `-log softmax(logits)[label]`, computed with log-sum-exp.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let c = logits.cols();
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= c {
                return Err(Error::contract(format!("label {y} out of range for {c} classes")));
            }
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - row[y])
        })
        .collect()
}

/// Cross-entropy of a single logit vector against `label`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    Ok(cross_entropy_rows(&logits.as_matrix(), &[label])?[0])
}

/// Mean of squared element differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>, node: Op) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            f(&a, &b).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::Shape { op, detail },
                other => other,
            })?
        };
        Ok(self.tape.push(value, node))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "matmul", |a, b| a.matmul(b), Op::MatMul(self.id, rhs.id))
    }

    /// Broadcast-adds a bias vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, "add_row", |a, b| a.add_row_vector(b), Op::AddRow(self.id, bias.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a.add(b), Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a.sub(b), Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a.mul(b), Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(self, factors: &[f64]) -> Result<Var<'t>> {
        let v = self.value().scale_rows(factors)?;
        Ok(self.tape.push(v, Op::ScaleRows(self.id, factors.to_vec())))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.push(v, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.push(v, Op::Mean(self.id))
    }

    /// Sums each row of an `[n, m]` matrix into a length-`n` vector.
    pub fn sum_cols(self) -> Var<'t> {
        let v = {
            let src = self.value();
            let data = (0..src.rows()).map(|i| src.row(i).iter().sum()).collect();
            Tensor::vector(data)
        };
        self.tape.push(v, Op::SumCols(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?
            .tape;
        let v = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Selects rows of a table (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = {
            let table = self.value();
            if let Some(&bad) = indices.iter().find(|&&i| i >= table.rows()) {
                return Err(Error::Lookup { kind: "table row", id: bad });
            }
            table.select_rows(indices)
        };
        Ok(self.tape.push(v, Op::Gather(self.id, indices.to_vec())))
    }

    fn cross_entropy_impl(self, labels: &[usize], mean: bool) -> Result<Var<'t>> {
        let (loss, probs) = {
            let logits = self.value().as_matrix();
            let per_row = cross_entropy_rows(&logits, labels)?;
            let total: f64 = per_row.iter().sum();
            let loss = if mean { total / labels.len() as f64 } else { total };
            (loss, softmax_rows(&logits))
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, probs, labels: labels.to_vec(), mean },
        ))
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        self.cross_entropy_impl(labels, true)
    }

    /// Summed cross-entropy over rows; each row's gradient is independent of the batch size.
    pub fn cross_entropy_sum(self, labels: &[usize]) -> Result<Var<'t>> {
        self.cross_entropy_impl(labels, false)
    }

    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(target)?.square().mean())
    }
}
