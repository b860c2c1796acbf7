use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Attributes travel inside the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m,k] · [k,n]`
    MatMul,
    /// Elementwise sum; the right operand may also be a bias row `[n]` or `[1,n]`.
    Add,
    ElementwiseMul,
    Relu,
    Sigmoid,
    /// Concatenation of 2-D inputs along columns.
    ConcatLastAxis,
    /// `x / max(‖x‖, eps)` per row.
    L2NormalizeRows { eps: f64 },
    ScaleByConstant(f64),
    /// Mean cross-entropy of row logits against `labels`; scalar output.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Transpose,
    /// Sum of all entries; scalar output.
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::ElementwiseMul => "ElementwiseMul",
            OpKind::Relu => "ReLU",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::ConcatLastAxis => "ConcatLastAxis",
            OpKind::L2NormalizeRows { .. } => "L2NormalizeRows",
            OpKind::ScaleByConstant(_) => "ScaleByConstant",
            OpKind::SoftmaxCrossEntropy { .. } => "SoftmaxCrossEntropy",
            OpKind::Transpose => "Transpose",
            OpKind::Sum => "Sum",
        }
    }
}

#[derive(Debug)]
struct Record {
    op: OpKind,
    inputs: Vec<Var>,
    /// Forward context the backward rule needs (row norms, softmax probabilities).
    saved: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    record: Option<Record>,
}

/// Single-use Wengert list. Records are appended in execution order, so the
/// tape is topologically sorted by construction; [`Tape::backward`] consumes it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            tensor,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].tensor
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].tensor.grad()
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[var.0].tensor, Tensor::scalar(0.0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Arity {
                op: op.name(),
                msg: format!("unknown input handle {}", bad.0),
            });
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].tensor).collect();
        let (out, saved) = forward(&op, &tensors)?;
        let requires_grad = tensors.iter().any(|t| t.requires_grad());
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            tensor: out.with_requires_grad(requires_grad),
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatLastAxis, parts)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::L2NormalizeRows { eps }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::ScaleByConstant(factor), &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    /// Reverse sweep from `loss`. Every leaf that requires grad receives a
    /// gradient buffer (zeros when unreachable). The tape cannot be reused.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = &self.nodes[loss.0].tensor;
        if root.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Err(Error::NoGradient);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(record) = &self.nodes[idx].record else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = record
                .inputs
                .iter()
                .map(|v| &self.nodes[v.0].tensor)
                .collect();
            let output = &self.nodes[idx].tensor;
            let input_grads = backward_rule(record, &inputs, output, &upstream);
            for (var, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if node.record.is_none() && node.tensor.requires_grad() {
                let g = grad.unwrap_or_else(|| vec![0.0; node.tensor.len()]);
                node.tensor.set_grad(g)?;
            }
            node.record = None;
        }
        self.consumed = true;
        Ok(())
    }
}

fn expect_arity(op: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Arity {
            op: op.name(),
            msg: format!("expected {n} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

fn expect_matrix(op: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Arity {
            op: op.name(),
            msg: format!("expected a 2-D tensor, got shape {other:?}"),
        }),
    }
}

fn shape_err(op: &OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// True when `b` can be added to every row of `a`.
fn is_bias_row(a: &Tensor, b: &Tensor) -> bool {
    match (a.shape(), b.shape()) {
        ([_, n], [m]) => m == n,
        ([_, n], [1, m]) => m == n,
        _ => false,
    }
}

fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let none = Vec::new;
    match op {
        OpKind::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = expect_matrix(op, a)?;
            let (k2, n) = expect_matrix(op, b)?;
            if k != k2 {
                return Err(shape_err(op, a, b));
            }
            let out = kernels::matmul(a.values(), b.values(), m, k, n);
            Ok((Tensor::matrix(m, n, out)?, none()))
        }
        OpKind::Add => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let values: Vec<f64> = if a.shape() == b.shape() {
                a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()
            } else if is_bias_row(a, b) {
                let n = b.len();
                a.values()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + b.values()[i % n])
                    .collect()
            } else {
                return Err(shape_err(op, a, b));
            };
            Ok((Tensor::new(a.shape().to_vec(), values)?, none()))
        }
        OpKind::ElementwiseMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, a, b));
            }
            let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
            Ok((Tensor::new(a.shape().to_vec(), values)?, none()))
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::ScaleByConstant(_) => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            let f: Box<dyn Fn(f64) -> f64> = match op {
                OpKind::Relu => Box::new(|x: f64| x.max(0.0)),
                OpKind::Sigmoid => Box::new(kernels::sigmoid),
                OpKind::ScaleByConstant(c) => {
                    let c = *c;
                    Box::new(move |x| c * x)
                }
                _ => unreachable!(),
            };
            let values = a.values().iter().map(|&x| f(x)).collect();
            Ok((Tensor::new(a.shape().to_vec(), values)?, none()))
        }
        OpKind::ConcatLastAxis => {
            if inputs.is_empty() {
                return Err(Error::Arity {
                    op: op.name(),
                    msg: "expected at least one input".into(),
                });
            }
            let (rows, _) = expect_matrix(op, inputs[0])?;
            let mut widths = Vec::with_capacity(inputs.len());
            for t in inputs {
                let (r, c) = expect_matrix(op, t)?;
                if r != rows {
                    return Err(shape_err(op, inputs[0], t));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut values = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    values.extend_from_slice(t.row(r));
                }
            }
            Ok((Tensor::matrix(rows, total, values)?, none()))
        }
        OpKind::L2NormalizeRows { eps } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            let (rows, cols) = expect_matrix(op, a)?;
            let mut denoms = Vec::with_capacity(rows);
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = a.row(r);
                let denom = kernels::norm(row).max(*eps);
                if denom == 0.0 {
                    return Err(Error::invalid(
                        "eps",
                        format!("row {r} has zero norm and eps is 0"),
                    ));
                }
                values.extend(row.iter().map(|x| x / denom));
                denoms.push(denom);
            }
            Ok((Tensor::matrix(rows, cols, values)?, denoms))
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            let (rows, classes) = expect_matrix(op, a)?;
            if rows == 0 || labels.len() != rows {
                return Err(Error::Arity {
                    op: op.name(),
                    msg: format!("{} labels for {rows} logit rows", labels.len()),
                });
            }
            let mut probs = Vec::with_capacity(rows * classes);
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
                let row = a.row(r);
                let (p, lse) = kernels::softmax_row(row);
                total += lse - row[label];
                probs.extend(p);
            }
            Ok((Tensor::scalar(total / rows as f64), probs))
        }
        OpKind::Transpose => {
            expect_arity(op, inputs, 1)?;
            let (r, c) = expect_matrix(op, inputs[0])?;
            let values = kernels::transpose(inputs[0].values(), r, c);
            Ok((Tensor::matrix(c, r, values)?, none()))
        }
        OpKind::Sum => {
            expect_arity(op, inputs, 1)?;
            Ok((Tensor::scalar(inputs[0].values().iter().sum()), none()))
        }
    }
}

/// Vector-Jacobian product for one record. Inputs that do not require grad get `None`.
fn backward_rule(
    record: &Record,
    inputs: &[&Tensor],
    output: &Tensor,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let wants = |i: usize| inputs[i].requires_grad();
    match &record.op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![
                wants(0).then(|| kernels::matmul_b_transposed(g, b.values(), m, k, n)),
                wants(1).then(|| kernels::matmul_a_transposed(a.values(), g, m, k, n)),
            ]
        }
        OpKind::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let gb = wants(1).then(|| {
                if a.shape() == b.shape() {
                    g.to_vec()
                } else {
                    let n = b.len();
                    let mut acc = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % n] += v;
                    }
                    acc
                }
            });
            vec![wants(0).then(|| g.to_vec()), gb]
        }
        OpKind::ElementwiseMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let prod = |other: &Tensor| g.iter().zip(other.values()).map(|(x, y)| x * y).collect();
            vec![wants(0).then(|| prod(b)), wants(1).then(|| prod(a))]
        }
        OpKind::Relu => {
            let x = inputs[0].values();
            let gx = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            vec![Some(gx)]
        }
        OpKind::Sigmoid => {
            let y = output.values();
            vec![Some(g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect())]
        }
        OpKind::ScaleByConstant(c) => vec![Some(g.iter().map(|gv| c * gv).collect())],
        OpKind::ConcatLastAxis => {
            let rows = output.shape()[0];
            let total = output.shape()[1];
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let w = t.shape()[1];
                out.push(wants(i).then(|| {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    part
                }));
                offset += w;
            }
            out
        }
        OpKind::L2NormalizeRows { eps } => {
            let x = inputs[0];
            let cols = x.shape()[1];
            let y = output.values();
            let mut gx = Vec::with_capacity(x.len());
            for (r, &denom) in record.saved.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                let (yr, gr) = (&y[span.clone()], &g[span]);
                if kernels::norm(x.row(r)) > *eps {
                    let proj = kernels::dot(yr, gr);
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * proj) / denom));
                } else {
                    gx.extend(gr.iter().map(|gv| gv / denom));
                }
            }
            vec![Some(gx)]
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let classes = inputs[0].shape()[1];
            let scale = g[0] / labels.len() as f64;
            let mut gx = record.saved.clone();
            for (r, &label) in labels.iter().enumerate() {
                gx[r * classes + label] -= 1.0;
            }
            gx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(gx)]
        }
        OpKind::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            vec![Some(kernels::transpose(g, c, r))]
        }
        OpKind::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
    }
}
