use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Added to masked logits before exponentiation; `exp` of it underflows to exactly 0.
pub const MASK_FILL: f64 = -1e30;
/// Probabilities are clamped to this before taking a log.
pub const PROB_EPSILON: f64 = 1e-12;
pub const LAYER_NORM_EPSILON: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        pad_left: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConstMul {
        x: Var,
        factor: Vec<f64>,
    },
    RowScale {
        x: Var,
        factor: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        p: Var,
        gold: usize,
    },
    Embed {
        frozen: Var,
        special: Option<Var>,
        ids: Vec<usize>,
    },
}

struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the parameters a graph touched, ordered by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.entries.iter().map(|(id, t)| (*id, t))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so any prefix is topologically sorted and backward is a single
/// reverse sweep.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<'s>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store; leaves come from [`Graph::input`].
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: Vec::new(),
        }
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present once `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf holding `value`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf borrowing a stored parameter. Repeated calls return the same node,
    /// so a parameter used twice (shared encoders) collects one summed gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Leaf,
            requires_grad: p.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            (self.value(a).data(), k, 1),
            (self.value(b).data(), n, 1),
            (&mut out, n, 1),
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `x[.., c] + b[c]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not match last axis of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % c])
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[r, c] + b[r]`, broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_col")?;
        if self.value(b).numel() != r {
            return Err(Error::shape(
                "add_col",
                format!("bias {:?} does not match rows of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i / c])
            .collect();
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddCol(x, b), rg))
    }

    /// `x[.., c] ⊙ w[c]`, broadcast over rows.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(w).numel() != c {
            return Err(Error::shape(
                "mul_row",
                format!("weight {:?} does not match last axis of {:?}", self.shape(w), self.shape(x)),
            ));
        }
        let wd = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i % c])
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::MulRow(x, w), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Time-axis cross-correlation with symmetric "same" zero padding.
    /// `x[T×Cin]`, `kernel[K×Cin×Cout]` with odd K, `bias[Cout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let k = self.shape(kernel).first().copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d needs an odd kernel width for symmetric padding, got {k}"
            )));
        }
        self.conv1d_padded(x, kernel, bias, (k - 1) / 2)
    }

    /// Like [`Graph::conv1d`] with `pad_left` zeros before the sequence and
    /// `K - 1 - pad_left` after, so the output length still equals `T`.
    pub fn conv1d_padded(&mut self, x: Var, kernel: Var, bias: Var, pad_left: usize) -> Result<Var> {
        let (t, cin) = self.value(x).dims2("conv1d")?;
        let (k, kin, cout) = match self.shape(kernel) {
            &[k, i, o] => (k, i, o),
            other => {
                return Err(Error::shape(
                    "conv1d",
                    format!("kernel must be K×Cin×Cout, got {other:?}"),
                ))
            }
        };
        if kin != cin || self.value(bias).numel() != cout || pad_left >= k {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}, pad_left {pad_left} are incompatible",
                    self.shape(x),
                    self.shape(kernel),
                    self.shape(bias)
                ),
            ));
        }
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out: Vec<f64> = (0..t * cout).map(|i| bd[i % cout]).collect();
        for tap in 0..k {
            if let Some((t0, s0, len)) = conv_window(t, tap, pad_left) {
                gemm(
                    (len, cin, cout),
                    (&xd[s0 * cin..], cin, 1),
                    (&wd[tap * cin * cout..], cout, 1),
                    (&mut out[t0 * cout..], cout, 1),
                    1.0,
                );
            }
        }
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv1d {
                x,
                kernel,
                bias,
                pad_left,
            },
            rg,
        ))
    }

    /// Softmax over the last axis. `mask`, when given, has either one entry per
    /// column (shared by every row) or one per element; masked entries come out
    /// exactly 0. A row with no unmasked entry is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(x).last_dim();
        let total = self.value(x).numel();
        if let Some(m) = mask {
            if m.len() != n && m.len() != total {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of length {} for input {:?}", m.len(), self.shape(x)),
                ));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; total];
        for (r, (row_in, row_out)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let row_mask = mask.map(|m| if m.len() == n { m } else { &m[r * n..(r + 1) * n] });
            if let Some(m) = row_mask {
                if !m.iter().any(|&b| b) {
                    return Err(Error::InvalidMask(format!("row {r} has no unmasked entry")));
                }
            }
            for (j, o) in row_out.iter_mut().enumerate() {
                let fill = match row_mask {
                    Some(m) if !m[j] => MASK_FILL,
                    _ => 0.0,
                };
                *o = row_in[j] + fill;
            }
            let max = row_out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for o in row_out.iter_mut() {
                *o = (*o - max).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis of {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. `p == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factor: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &factor, |a, f| a * f);
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ConstMul { x, factor }, rg))
    }

    /// Zeroes the rows whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(Error::shape(
                "mask_rows",
                format!("mask of length {} for {:?}", mask.len(), self.shape(x)),
            ));
        }
        let c = self.value(x).last_dim();
        let factor: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if mask[i / c] { *v } else { 0.0 })
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowScale { x, factor }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let rows = self.value(first).rows();
        let lead: Vec<usize> = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("leading axes of {:?} and {:?} differ", self.shape(first), s),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).last_dim();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} outside last axis of {:?}", start + len, self.shape(x)),
            ));
        }
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank ≥ 1") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).squared_norm();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `-ln p[gold]` of a probability vector, with `p` clamped at [`PROB_EPSILON`].
    pub fn cross_entropy(&mut self, p: Var, gold: usize) -> Result<Var> {
        let n = self.value(p).numel();
        if gold >= n {
            return Err(Error::shape(
                "cross_entropy",
                format!("gold index {gold} outside distribution of {n}"),
            ));
        }
        let prob = self.value(p).data()[gold].max(PROB_EPSILON);
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(-prob.ln()), Op::CrossEntropy { p, gold }, rg))
    }

    /// Row lookup `table[ids]`. When `special` is given, ids 0 and 1 read
    /// from its two rows instead of from `frozen`.
    pub fn embed(&mut self, frozen: Var, special: Option<Var>, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(frozen).dims2("embed")?;
        if let Some(s) = special {
            if self.shape(s) != [2, d] {
                return Err(Error::shape(
                    "embed",
                    format!("special rows {:?} must be [2, {d}]", self.shape(s)),
                ));
            }
        }
        if ids.is_empty() {
            return Err(Error::shape("embed", "empty id sequence"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embed", format!("id {id} outside vocabulary of {v}")));
            }
            let row = match special {
                Some(s) if id < 2 => &self.value(s).data()[id * d..(id + 1) * d],
                _ => &self.value(frozen).data()[id * d..(id + 1) * d],
            };
            out.extend_from_slice(row);
        }
        let mut inputs = vec![frozen];
        inputs.extend(special);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed {
                frozen,
                special,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding into the gradient of every
    /// reachable leaf that requires one. Calling it twice doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let Graph {
            nodes, leaf_grads, ..
        } = self;
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let mut acc = Accumulator {
                adj: &mut adj,
                nodes,
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    match &mut leaf_grads[i] {
                        Some(buf) => buf.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (acc.value(*a).shape()[0], acc.value(*a).shape()[1]);
                    let n = acc.value(*b).shape()[1];
                    if acc.needs(*a) {
                        let bd = acc.value(*b).data().to_vec();
                        acc.add(*a, |da| gemm((m, n, k), (gd, n, 1), (&bd, 1, n), (da, k, 1), 1.0));
                    }
                    if acc.needs(*b) {
                        let ad = acc.value(*a).data().to_vec();
                        acc.add(*b, |db| gemm((k, m, n), (&ad, 1, k), (gd, n, 1), (db, n, 1), 1.0));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (acc.value(*x).shape()[0], acc.value(*x).shape()[1]);
                    acc.add(*x, |dx| {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += gd[j * r + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc.add(*a, |d| add_into(d, gd));
                    acc.add(*b, |d| add_into(d, gd));
                }
                Op::Mul(a, b) => {
                    let bv = acc.value(*b).data().to_vec();
                    let av = acc.value(*a).data().to_vec();
                    acc.add(*a, |d| d.iter_mut().zip(gd.iter().zip(&bv)).for_each(|(d, (g, y))| *d += g * y));
                    acc.add(*b, |d| d.iter_mut().zip(gd.iter().zip(&av)).for_each(|(d, (g, x))| *d += g * x));
                }
                Op::Scale(x, f) => acc.add(*x, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g * f)),
                Op::AddRow(x, b) => {
                    acc.add(*x, |d| add_into(d, gd));
                    let c = acc.value(*b).numel();
                    acc.add(*b, |d| gd.iter().enumerate().for_each(|(i, g)| d[i % c] += g));
                }
                Op::AddCol(x, b) => {
                    acc.add(*x, |d| add_into(d, gd));
                    let c = acc.value(*x).last_dim();
                    acc.add(*b, |d| gd.iter().enumerate().for_each(|(i, g)| d[i / c] += g));
                }
                Op::MulRow(x, w) => {
                    let c = acc.value(*w).numel();
                    let wv = acc.value(*w).data().to_vec();
                    let xv = acc.value(*x).data().to_vec();
                    acc.add(*x, |d| gd.iter().enumerate().for_each(|(i, g)| d[i] += g * wv[i % c]));
                    acc.add(*w, |d| gd.iter().enumerate().for_each(|(i, g)| d[i % c] += g * xv[i]));
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    acc.add(*x, |d| {
                        for ((d, g), o) in d.iter_mut().zip(gd).zip(out) {
                            if *o > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Conv1d {
                    x,
                    kernel,
                    bias,
                    pad_left,
                } => {
                    let (t, cin) = (acc.value(*x).shape()[0], acc.value(*x).shape()[1]);
                    let (k, cout) = (acc.value(*kernel).shape()[0], acc.value(*kernel).shape()[2]);
                    let pad_left = *pad_left;
                    if acc.needs(*x) {
                        let wd = acc.value(*kernel).data().to_vec();
                        acc.add(*x, |dx| {
                            for tap in 0..k {
                                if let Some((t0, s0, len)) = conv_window(t, tap, pad_left) {
                                    gemm(
                                        (len, cout, cin),
                                        (&gd[t0 * cout..], cout, 1),
                                        (&wd[tap * cin * cout..], 1, cout),
                                        (&mut dx[s0 * cin..], cin, 1),
                                        1.0,
                                    );
                                }
                            }
                        });
                    }
                    if acc.needs(*kernel) {
                        let xd = acc.value(*x).data().to_vec();
                        acc.add(*kernel, |dw| {
                            for tap in 0..k {
                                if let Some((t0, s0, len)) = conv_window(t, tap, pad_left) {
                                    gemm(
                                        (cin, len, cout),
                                        (&xd[s0 * cin..], 1, cin),
                                        (&gd[t0 * cout..], cout, 1),
                                        (&mut dw[tap * cin * cout..], cout, 1),
                                        1.0,
                                    );
                                }
                            }
                        });
                    }
                    acc.add(*bias, |db| gd.iter().enumerate().for_each(|(i, g)| db[i % cout] += g));
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    acc.add(*x, |dx| {
                        for ((dr, gr), yr) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for j in 0..n {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = acc.value(*gain).numel();
                    let gv = acc.value(*gain).data().to_vec();
                    acc.add(*x, |dx| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &gd[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let dh: Vec<f64> = gr.iter().zip(&gv).map(|(g, w)| g * w).collect();
                            let mean_dh = dh.iter().sum::<f64>() / c as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                dx[r * c + j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                    acc.add(*gain, |d| gd.iter().zip(xhat).enumerate().for_each(|(i, (g, h))| d[i % c] += g * h));
                    acc.add(*bias, |d| gd.iter().enumerate().for_each(|(i, g)| d[i % c] += g));
                }
                Op::ConstMul { x, factor } => {
                    acc.add(*x, |d| d.iter_mut().zip(gd.iter().zip(factor)).for_each(|(d, (g, f))| *d += g * f));
                }
                Op::RowScale { x, factor } => {
                    let c = acc.value(*x).last_dim();
                    acc.add(*x, |d| gd.iter().enumerate().for_each(|(i, g)| d[i] += g * factor[i / c]));
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| acc.value(p).last_dim()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = gd.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        acc.add(p, |d| {
                            for r in 0..rows {
                                add_into(&mut d[r * w..(r + 1) * w], &gd[r * total + offset..r * total + offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceLast { x, start } => {
                    let c = acc.value(*x).last_dim();
                    let len = node.value.last_dim();
                    let start = *start;
                    acc.add(*x, |d| {
                        for (r, gr) in gd.chunks(len).enumerate() {
                            add_into(&mut d[r * c + start..r * c + start + len], gr);
                        }
                    });
                }
                Op::Reshape(x) => acc.add(*x, |d| add_into(d, gd)),
                Op::Sum(x) => acc.add(*x, |d| d.iter_mut().for_each(|v| *v += gd[0])),
                Op::SumSquares(x) => {
                    let xv = acc.value(*x).data().to_vec();
                    acc.add(*x, |d| d.iter_mut().zip(&xv).for_each(|(d, x)| *d += 2.0 * x * gd[0]));
                }
                Op::CrossEntropy { p, gold } => {
                    let prob = acc.value(*p).data()[*gold];
                    acc.add(*p, |d| {
                        if prob > PROB_EPSILON {
                            d[*gold] -= gd[0] / prob;
                        }
                    });
                }
                Op::Embed { frozen, special, ids } => {
                    let d = acc.value(*frozen).shape()[1];
                    if let Some(s) = special {
                        acc.add(*s, |ds| {
                            for (r, &id) in ids.iter().enumerate().filter(|(_, &id)| id < 2) {
                                add_into(&mut ds[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                            }
                        });
                    }
                    acc.add(*frozen, |df| {
                        for (r, &id) in ids.iter().enumerate() {
                            if special.is_some() && id < 2 {
                                continue;
                            }
                            add_into(&mut df[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Gradients of every stored parameter this graph used.
    pub fn gradients(&self) -> Gradients {
        let mut entries: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g.clone())))
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Gradients { entries }
    }
}

struct Accumulator<'a, 's> {
    adj: &'a mut [Option<Tensor>],
    nodes: &'a [Node<'s>],
}

impl Accumulator<'_, '_> {
    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.adj[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(buf.data_mut());
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// For one kernel tap, the output rows `t0..t0+len` that read input rows
/// `s0..s0+len`, or `None` when the tap falls entirely in the padding.
fn conv_window(t: usize, tap: usize, pad_left: usize) -> Option<(usize, usize, usize)> {
    let t0 = pad_left.saturating_sub(tap);
    let t1 = (t + pad_left).saturating_sub(tap).min(t);
    (t1 > t0).then(|| (t0, t0 + tap - pad_left, t1 - t0))
}

/// `C = A·B + beta·C` over strided row-major views.
/// Each operand is `(data, row_stride, col_stride)`; `dims` is `(m, k, n)`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    (c, rsc, csc): (&mut [f64], usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
        assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
    }
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
