//! Tape-based reverse-mode automatic differentiation over small dense
//! tensors.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every variable that depends on a differentiable leaf.
//! Values are `f32`; reductions accumulate in `f64`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not depend on a differentiable input")]
    Detached,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv1d { x: Var, k: Var, dilation: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn get_data(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

/// Operation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`.
fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`.
fn gemm_nt_acc(g: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn gemm_tn_acc(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, rec, g))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, rec: Op) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| f(*x)).collect(),
        };
        let g = self.needs(a);
        self.push(t, rec, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, rec: Op) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(b) != [n] {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().enumerate().map(|(i, x)| f(*x, vb.data[i % n])).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, rec, g))
    }

    /// Add a vector along the last axis (bias).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("add_row", a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    /// Multiply by a vector along the last axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("mul_row", a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f32::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|x| !(**x > 0.0)) {
            return Err(TensorError::Invalid {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(a, f32::ln, Op::Log(a)))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap_or(&0);
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, n) = (self.value(a).len() / k.max(1), sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().expect("non-empty") = n;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), g))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        for i in 0..bs {
            gemm_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![bs, m, n], data: out }, Op::BatchMatMul(a, b), g))
    }

    /// Swap the last two axes of a 3-D tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "transpose_last",
                reason: format!("expected 3-D, got {s:?}"),
            });
        }
        let (bs, m, n) = (s[0], s[1], s[2]);
        let v = &self.value(a).data;
        let mut out = vec![0.0; v.len()];
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = v[b * m * n + i * n + j];
                }
            }
        }
        let g = self.needs(a);
        Ok(self.push(Tensor { shape: vec![bs, n, m], data: out }, Op::TransposeLast(a), g))
    }

    /// Softmax over the last axis after adding `mask` (shape `[m, n]`,
    /// broadcast over leading axes, or the full shape of `a`). Use a large
    /// negative mask value to exclude entries.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let va = self.value(a);
        let n = va.last_dim();
        let rows = va.len() / n.max(1);
        if let Some(m) = mask {
            let ok = m.shape == va.shape
                || (m.shape.len() == 2 && va.shape.len() >= 2 && m.shape[..] == va.shape[va.shape.len() - 2..]);
            if !ok {
                return Err(shape_err("softmax", &va.shape, &m.shape));
            }
        }
        let mut out = vec![0.0f32; va.len()];
        for r in 0..rows {
            let row = &va.data[r * n..(r + 1) * n];
            let mrow = mask.map(|m| {
                let mr = (r * n) % m.len();
                &m.data[mr..mr + n]
            });
            let shifted: Vec<f32> = row
                .iter()
                .enumerate()
                .map(|(j, x)| x + mrow.map_or(0.0, |m| m[j]))
                .collect();
            let max = shifted.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(&shifted) {
                *o = (x - max).exp();
                total += *o as f64;
            }
            let inv = (1.0 / total) as f32;
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= inv;
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data: out,
        };
        let g = self.needs(a);
        Ok(self.push(t, Op::Softmax(a), g))
    }

    /// `len` entries from `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let v = &self.value(a).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let g = self.needs(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { a, axis, start }, g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} for shape {first:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, d)| i != axis && *d != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p).data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { parts: parts.to_vec(), axis }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let t = Tensor {
            shape,
            data: self.value(a).data.clone(),
        };
        let g = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    /// `[B, T, H*d] -> [B*H, T, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(TensorError::Invalid {
                op: "split_heads",
                reason: format!("{heads} heads for shape {s:?}"),
            });
        }
        let (bs, t, d) = (s[0], s[1], s[2] / heads);
        let v = &self.value(a).data;
        let mut out = vec![0.0; v.len()];
        for b in 0..bs {
            for h in 0..heads {
                for i in 0..t {
                    let src = b * t * heads * d + i * heads * d + h * d;
                    let dst = (b * heads + h) * t * d + i * d;
                    out[dst..dst + d].copy_from_slice(&v[src..src + d]);
                }
            }
        }
        let g = self.needs(a);
        Ok(self.push(Tensor { shape: vec![bs * heads, t, d], data: out }, Op::SplitHeads { a, heads }, g))
    }

    /// `[B*H, T, d] -> [B, T, H*d]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(TensorError::Invalid {
                op: "merge_heads",
                reason: format!("{heads} heads for shape {s:?}"),
            });
        }
        let (bs, t, d) = (s[0] / heads, s[1], s[2]);
        let v = &self.value(a).data;
        let mut out = vec![0.0; v.len()];
        for b in 0..bs {
            for h in 0..heads {
                for i in 0..t {
                    let dst = b * t * heads * d + i * heads * d + h * d;
                    let src = (b * heads + h) * t * d + i * d;
                    out[dst..dst + d].copy_from_slice(&v[src..src + d]);
                }
            }
        }
        let g = self.needs(a);
        Ok(self.push(Tensor { shape: vec![bs, t, heads * d], data: out }, Op::MergeHeads { a, heads }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().map(|x| *x as f64).sum();
        let g = self.needs(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data.iter().map(|x| *x as f64).sum();
        let m = (s / v.len().max(1) as f64) as f32;
        let g = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), g)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let data = v
            .data
            .chunks(n.max(1))
            .map(|c| c.iter().map(|x| *x as f64).sum::<f64>() as f32)
            .collect();
        let mut shape = v.shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let g = self.needs(a);
        self.push(Tensor { shape, data }, Op::SumLast(a), g)
    }

    /// Dilated causal convolution: `x [B, T, Cin]`, `k [s, Cin, Cout]`,
    /// `y[b, t] = sum_tau x[b, t - dilation * tau] k[tau]`, with zeros before
    /// the start of the sequence.
    pub fn dilated_causal_conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[1] || sk[0] == 0 || dilation == 0 {
            return Err(shape_err("dilated_causal_conv1d", &sx, &sk));
        }
        let (bs, t, cin) = (sx[0], sx[1], sx[2]);
        let (s, cout) = (sk[0], sk[2]);
        let (vx, vk) = (&self.value(x).data, &self.value(k).data);
        let mut out = vec![0.0f32; bs * t * cout];
        for b in 0..bs {
            for i in 0..t {
                let orow = &mut out[(b * t + i) * cout..(b * t + i + 1) * cout];
                for tau in 0..s {
                    let Some(src) = i.checked_sub(dilation * tau) else { break };
                    let xrow = &vx[(b * t + src) * cin..(b * t + src + 1) * cin];
                    let kmat = &vk[tau * cin * cout..(tau + 1) * cin * cout];
                    gemm_acc(xrow, kmat, orow, 1, cin, cout);
                }
            }
        }
        let g = self.needs(x) || self.needs(k);
        Ok(self.push(Tensor { shape: vec![bs, t, cout], data: out }, Op::Conv1d { x, k, dilation }, g))
    }

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d) + mask) v` for
    /// `q [B, m, d]`, `k, v [B, n, d]`. The mask is `[m, n]` and additive.
    /// Returns the output and the attention weights.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let d = self.value(q).last_dim();
        let kt = self.transpose_last(k)?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f32).sqrt());
        let weights = self.softmax(scores, mask)?;
        let out = self.bmm(weights, v)?;
        Ok((out, weights))
    }

    /// Gradients of the scalar `output` with respect to every variable.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.needs(output) {
            return Err(TensorError::Detached);
        }
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    /// Derivative of the scalar `output` with respect to entry `index` of
    /// `input`.
    pub fn grad_wrt_input(&self, output: Var, input: Var, index: usize) -> Result<f32> {
        let g = self.backward(output)?;
        g.get_data(input).map(|d| d[index]).ok_or(TensorError::Detached)
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let n = val(*b).len();
                acc(*b, &mut |s| {
                    let mut tot = vec![0.0f64; n];
                    for (i, gv) in g.iter().enumerate() {
                        tot[i % n] += *gv as f64;
                    }
                    s.iter_mut().zip(tot).for_each(|(s, t)| *s += t as f32);
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                let n = vb.len();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % n];
                    }
                });
                acc(*b, &mut |s| {
                    let mut tot = vec![0.0f64; n];
                    for (i, gv) in g.iter().enumerate() {
                        tot[i % n] += (*gv * va[i]) as f64;
                    }
                    s.iter_mut().zip(tot).for_each(|(s, t)| *s += t as f32);
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(x[i]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n) = (vb.shape[0], vb.shape[1]);
                let m = va.len() / k.max(1);
                acc(*a, &mut |s| gemm_nt_acc(g, &vb.data, s, m, k, n));
                acc(*b, &mut |s| gemm_tn_acc(&va.data, g, s, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (bs, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[2]);
                acc(*a, &mut |s| {
                    for i in 0..bs {
                        gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data[i * k * n..(i + 1) * k * n],
                            &mut s[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..bs {
                        gemm_tn_acc(
                            &va.data[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut s[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::TransposeLast(a) => {
                let sh = &node.value.shape;
                let (bs, n, m) = (sh[0], sh[1], sh[2]);
                acc(*a, &mut |s| {
                    for b in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                s[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                acc(*a, &mut |s| {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - dot as f32);
                        }
                    }
                });
            }
            Op::Slice { a, axis, start } => {
                let src = &val(*a).shape;
                let (outer, n, inner) = split_at_axis(src, *axis);
                let len = node.value.shape[*axis];
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let gb = o * len * inner;
                        for i in 0..len * inner {
                            s[base + i] += g[gb + i];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).shape[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let gb = o * total * inner + offset * inner;
                            for i in 0..n * inner {
                                s[o * n * inner + i] += g[gb + i];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::SplitHeads { a, heads } => {
                let sh = &node.value.shape;
                let (bs, t, d) = (sh[0] / heads, sh[1], sh[2]);
                acc(*a, &mut |s| {
                    for b in 0..bs {
                        for h in 0..*heads {
                            for i in 0..t {
                                let src = b * t * heads * d + i * heads * d + h * d;
                                let dst = (b * heads + h) * t * d + i * d;
                                for c in 0..d {
                                    s[src + c] += g[dst + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, heads } => {
                let sh = &node.value.shape;
                let (bs, t, d) = (sh[0], sh[1], sh[2] / heads);
                acc(*a, &mut |s| {
                    for b in 0..bs {
                        for h in 0..*heads {
                            for i in 0..t {
                                let dst = b * t * heads * d + i * heads * d + h * d;
                                let src = (b * heads + h) * t * d + i * d;
                                for c in 0..d {
                                    s[src + c] += g[dst + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f32;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::SumLast(a) => {
                let n = val(*a).last_dim();
                acc(*a, &mut |s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i / n];
                    }
                })
            }
            Op::Conv1d { x, k, dilation } => {
                let (vx, vk) = (val(*x), val(*k));
                let (bs, t, cin) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let (sz, cout) = (vk.shape[0], vk.shape[2]);
                acc(*x, &mut |s| {
                    for b in 0..bs {
                        for i in 0..t {
                            let grow = &g[(b * t + i) * cout..(b * t + i + 1) * cout];
                            for tau in 0..sz {
                                let Some(src) = i.checked_sub(dilation * tau) else { break };
                                let kmat = &vk.data[tau * cin * cout..(tau + 1) * cin * cout];
                                gemm_nt_acc(grow, kmat, &mut s[(b * t + src) * cin..(b * t + src + 1) * cin], 1, cin, cout);
                            }
                        }
                    }
                });
                acc(*k, &mut |s| {
                    for b in 0..bs {
                        for i in 0..t {
                            let grow = &g[(b * t + i) * cout..(b * t + i + 1) * cout];
                            for tau in 0..sz {
                                let Some(src) = i.checked_sub(dilation * tau) else { break };
                                let xrow = &vx.data[(b * t + src) * cin..(b * t + src + 1) * cin];
                                gemm_tn_acc(xrow, grow, &mut s[tau * cin * cout..(tau + 1) * cin * cout], 1, cin, cout);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Additive causal mask `[t, t]`: 0 on and below the diagonal, `-1e9` above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data[i * t + j] = MASKED;
        }
    }
    m
}

/// Additive causal mask that keeps, for row `i`, only `i` itself and the
/// positions `i - 2^k` for `k >= 0`.
pub fn log_sparse_mask(t: usize) -> Tensor {
    let mut m = Tensor::full(vec![t, t], MASKED);
    for i in 0..t {
        m.data[i * t + i] = 0.0;
        let mut step = 1;
        while step <= i {
            m.data[i * t + i - step] = 0.0;
            step *= 2;
        }
    }
    m
}

/// Value standing in for minus infinity in additive masks.
pub const MASKED: f32 = -1e9;
