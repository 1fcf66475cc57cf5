use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ScaleLast(Var, Var),
    ShiftLast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Kron(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed primitives.
///
/// Nodes are appended in execution order; [`Tape::backward`] walks them in
/// exact reverse order and accumulates gradients additively, so a value read
/// by k operations receives the sum of k contributions.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
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

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Records a leaf; it takes part in backward iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(nodes.len() - 1)
    }

    /// Records a named parameter leaf once per tape. Later calls with the same
    /// key return the first handle, so shared parameters accumulate into one
    /// gradient buffer.
    pub fn param(&self, key: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.borrow().get(key) {
            return v;
        }
        let v = self.leaf(t);
        self.params.borrow_mut().insert(key.to_string(), v);
        v
    }

    /// Makes `key` resolve to an existing value; used to substitute a probe
    /// tensor for a named parameter.
    pub fn bind_param(&self, key: &str, var: Var) {
        self.params.borrow_mut().insert(key.to_string(), var);
    }

    pub fn param_var(&self, key: &str) -> Option<Var> {
        self.params.borrow().get(key).copied()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("unary keeps shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let width = match t.shape().last() {
                Some(&w) => w,
                None => {
                    return Err(TensorError::Domain {
                        op: "softmax",
                        reason: "rank-0 input has no axis to normalize".into(),
                    })
                }
            };
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(width) {
                softmax_in_place(row);
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    /// Normalizes each last-axis row to zero mean and unit (population)
    /// variance. No affine terms; see [`Tape::scale_last`] / [`Tape::shift_last`].
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (v, inv_std) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let width = *t.shape().last().ok_or_else(|| TensorError::Domain {
                op: "layer_norm",
                reason: "rank-0 input".into(),
            })?;
            let mut out = t.data().to_vec();
            let mut inv_std = Vec::with_capacity(out.len() / width);
            for row in out.chunks_mut(width) {
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std.push(is);
            }
            (Tensor::new(t.shape().to_vec(), out)?, inv_std)
        };
        Ok(self.push(v, Op::LayerNorm { x: a, inv_std }, &[a]))
    }

    fn last_axis_vector_check(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (tx, tv) = (&nodes[x.0].value, &nodes[v.0].value);
        if tv.rank() != 1 || tx.shape().last() != Some(&tv.shape()[0]) {
            return Err(TensorError::Dimension {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Multiplies every last-axis row of `x` elementwise by the vector `v`.
    pub fn scale_last(&self, x: Var, v: Var) -> Result<Var> {
        self.last_axis_vector_check("scale_last", x, v)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tv) = (&nodes[x.0].value, &nodes[v.0].value);
            let w = tv.numel();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, a)| a * tv.data()[i % w])
                .collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::ScaleLast(x, v), &[x, v]))
    }

    /// Adds the vector `v` to every last-axis row of `x`.
    pub fn shift_last(&self, x: Var, v: Var) -> Result<Var> {
        self.last_axis_vector_check("shift_last", x, v)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tv) = (&nodes[x.0].value, &nodes[v.0].value);
            let w = tv.numel();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, a)| a + tv.data()[i % w])
                .collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::ShiftLast(x, v), &[x, v]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            super::matmul(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "transpose",
                    expected: 2,
                    got: t.shape().to_vec(),
                });
            }
            let (m, n) = (t.shape()[0], t.shape()[1]);
            Tensor::new(vec![n, m], transpose_raw(t.data(), m, n))?
        };
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(shape.to_vec(), t.data().to_vec()).map_err(|_| TensorError::Dimension {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            })?
        };
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
            let base = nodes[first.0].value.shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: axis + 1,
                    got: base,
                });
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let agrees =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !agrees {
                    return Err(TensorError::Dimension {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes indices `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(TensorError::Rank {
                    op: "slice",
                    expected: axis + 1,
                    got: shape.to_vec(),
                });
            }
            if start >= end || end > shape[axis] {
                return Err(TensorError::Domain {
                    op: "slice",
                    reason: format!("range {start}..{end} invalid for axis {axis} of {shape:?}"),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[axis];
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = end - start;
            Tensor::new(out_shape, data)?
        };
        Ok(self.push(v, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Row lookup into a rank-2 table: output is `[ids.len(), cols]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "gather_rows",
                    expected: 2,
                    got: t.shape().to_vec(),
                });
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            if ids.is_empty() {
                return Err(TensorError::Domain {
                    op: "gather_rows",
                    reason: "no indices".into(),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::Domain {
                        op: "gather_rows",
                        reason: format!("index {id} out of range for {rows} rows"),
                    });
                }
                data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
            }
            Tensor::new(vec![ids.len(), cols], data)?
        };
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn kron(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            super::kron(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(v, Op::Kron(a, b), &[a, b]))
    }

    /// Mean token cross-entropy of `logits: [m, classes]` against `targets`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            if t.rank() != 2 {
                return Err(TensorError::Rank {
                    op: "cross_entropy",
                    expected: 2,
                    got: t.shape().to_vec(),
                });
            }
            let (m, c) = (t.shape()[0], t.shape()[1]);
            if targets.len() != m {
                return Err(TensorError::Dimension {
                    op: "cross_entropy",
                    lhs: t.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
                return Err(TensorError::Domain {
                    op: "cross_entropy",
                    reason: format!("target {bad} out of range for {c} classes"),
                });
            }
            let mut probs = t.data().to_vec();
            let mut loss = 0.0;
            for (row, &y) in probs.chunks_mut(c).zip(targets) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[y];
                softmax_in_place(row);
            }
            (loss / m as f64, probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            for (input, delta) in node_backward(&nodes, node, &g) {
                if !nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            needs: nodes.iter().map(|n| n.needs_grad).collect(),
            params: self.params.borrow().clone(),
        })
    }
}

fn node_backward(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(tb).map(|(x, y)| x * y).collect()),
                (*b, g.iter().zip(ta).map(|(x, y)| x * y).collect()),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
        Op::Relu(a) => {
            let x = val(*a).data();
            vec![(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())]
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let w = *node.value.shape().last().expect("softmax rank");
            let mut out = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks(w).zip(y.chunks(w)).zip(out.chunks_mut(w)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![(*a, out)]
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let w = *node.value.shape().last().expect("layer_norm rank");
            let mut out = vec![0.0; g.len()];
            for (r, ((gr, yr), or)) in g.chunks(w).zip(y.chunks(w)).zip(out.chunks_mut(w)).enumerate() {
                let mean_g = gr.iter().sum::<f64>() / w as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                }
            }
            vec![(*x, out)]
        }
        Op::ScaleLast(x, v) => {
            let (tx, tv) = (val(*x).data(), val(*v).data());
            let w = tv.len();
            let gx = g.iter().enumerate().map(|(i, gi)| gi * tv[i % w]).collect();
            let mut gv = vec![0.0; w];
            for (i, gi) in g.iter().enumerate() {
                gv[i % w] += gi * tx[i];
            }
            vec![(*x, gx), (*v, gv)]
        }
        Op::ShiftLast(x, v) => {
            let w = val(*v).numel();
            let mut gv = vec![0.0; w];
            for (i, gi) in g.iter().enumerate() {
                gv[i % w] += gi;
            }
            vec![(*x, g.to_vec()), (*v, gv)]
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let bt = transpose_raw(tb.data(), k, n);
            let at = transpose_raw(ta.data(), m, k);
            vec![(*a, matmul_raw(g, &bt, m, n, k)), (*b, matmul_raw(&at, g, k, m, n))]
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            vec![(*a, transpose_raw(g, s[0], s[1]))]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let chunk = val(*p).shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    (*p, d)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let in_shape = val(*x).shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = in_shape[*axis];
            let taken = node.value.shape()[*axis] * inner;
            let mut d = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                d[dst..dst + taken].copy_from_slice(&g[o * taken..(o + 1) * taken]);
            }
            vec![(*x, d)]
        }
        Op::GatherRows { table, ids } => {
            let t = val(*table);
            let cols = t.shape()[1];
            let mut d = vec![0.0; t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..cols {
                    d[id * cols + c] += g[r * cols + c];
                }
            }
            vec![(*table, d)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Kron(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (p, q) = (ta.shape()[0], ta.shape()[1]);
            let (r, s) = (tb.shape()[0], tb.shape()[1]);
            let cols = q * s;
            let mut ga = vec![0.0; p * q];
            let mut gb = vec![0.0; r * s];
            for i in 0..p {
                for j in 0..q {
                    let aij = ta.data()[i * q + j];
                    for k in 0..r {
                        for l in 0..s {
                            let gv = g[(i * r + k) * cols + j * s + l];
                            ga[i * q + j] += gv * tb.data()[k * s + l];
                            gb[k * s + l] += gv * aij;
                        }
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).shape()[1];
            let m = targets.len() as f64;
            let mut d = probs.clone();
            for (row, &y) in d.chunks_mut(c).zip(targets) {
                row[y] -= 1.0;
                for x in row.iter_mut() {
                    *x *= g[0] / m;
                }
            }
            vec![(*logits, d)]
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    needs: Vec<bool>,
    params: HashMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`: `None` for values that do not require
    /// gradients, zeros for differentiable leaves the loss never reached.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if !self.needs[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Some(Tensor::new(shape, data).expect("gradient shape"))
    }

    /// Gradient for a parameter registered with [`Tape::param`].
    pub fn param(&self, key: &str) -> Option<Tensor> {
        self.params.get(key).and_then(|&v| self.wrt(v))
    }

    /// Adds the gradient of `v` into `t`'s buffer (no-op when `t` is frozen).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.wrt(v) {
            t.accumulate_grad(g.data());
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
