use super::kernels::{self, AttnGeom, MatView};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        av: MatView,
        bv: MatView,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    SumAll(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    L2Normalize(Var),
    Softmax(Var),
    LogSoftmax(Var),
    StopGradient(Var),
    Attention {
        qkv: Var,
        geom: AttnGeom,
        probs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::GatherRows(x, _)
            | Op::Reshape(x)
            | Op::SumAxis { x, .. }
            | Op::SumAll(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Gelu(x)
            | Op::L2Normalize(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::StopGradient(x) => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { qkv, .. } => vec![*qkv],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::SumAxis { mean: false, .. } => "sum_axis",
            Op::SumAxis { mean: true, .. } => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::StopGradient(..) => "stop_gradient",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a computation graph in creation order. Backward replays it in
/// reverse creation order, which is a valid topological order and fixes the
/// gradient accumulation order.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient buffer for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor, zero-filled when no gradient reached it.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Inputs recorded for `v` (empty for leaves).
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Counts recorded nodes by operation tag.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[x])
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op_name, &av.shape, &bv.shape)?;
        Ok(Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must have one element, got {:?}", sv.shape)));
        }
        let c = sv.data[0];
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * c).collect(),
        };
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::shape("add_row", format!("row of {} for {cols} columns", bv.numel())));
        }
        let mut data = xv.data.clone();
        for r in data.chunks_exact_mut(cols) {
            for (v, &bb) in r.iter_mut().zip(&bv.data) {
                *v += bb;
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = matrix_dims("matmul", &self.nodes[a.0].value.shape)?;
        let (br, bc) = matrix_dims("matmul", &self.nodes[b.0].value.shape)?;
        let av = MatView { rows: ar, cols: ac, trans: ta };
        let bv = MatView { rows: br, cols: bc, trans: tb };
        let (m, k) = av.dims();
        let (k2, n) = bv.dims();
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2} ({m}x{k} · {k2}x{n})")));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(&self.nodes[a.0].value.data, av, &self.nodes[b.0].value.data, bv, &mut out, false);
        let out = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(out, Op::MatMul { a, b, av, bv }, &[a, b]))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = matrix_dims("transpose", &xv.shape)?;
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data[i * c + j];
            }
        }
        let out = Tensor { shape: vec![c, r], data };
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Stacks matrices along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<F>> = parts
            .iter()
            .map(|v| {
                let t = &self.nodes[v.0].value;
                matrix_dims("concat_rows", &t.shape).map(|_| t.clone())
            })
            .collect::<Result<_>>()?;
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects (and possibly repeats) rows; also serves as row slicing.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let op = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= xv.shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {:?}", xv.shape)));
        }
        let outer: usize = xv.shape[..axis].iter().product();
        let len = xv.shape[axis];
        let inner: usize = xv.shape[axis + 1..].iter().product();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = F::of(1.0 / len as f64);
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape: Vec<usize> = xv.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::SumAxis { x, outer, len, inner, mean }, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let cols = xv.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {} / offset {} for {cols} columns", gv.numel(), bv.numel()),
            ));
        }
        let mut data = vec![F::zero(); xv.numel()];
        let (xhat, rstd) = kernels::layer_norm(&xv.data, &gv.data, &bv.data, F::of(eps), &mut data);
        let out = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    fn row_op(&mut self, x: Var, op: Op<F>, f: fn(&[F], usize, &mut [F])) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut data = vec![F::zero(); xv.numel()];
        f(&xv.data, xv.cols(), &mut data);
        let out = Tensor { shape: xv.shape.clone(), data };
        self.push(out, op, &[x])
    }

    /// Scales each row (last axis) to unit Euclidean norm, with the norm
    /// floored at 1e-12.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        self.row_op(x, Op::L2Normalize(x), kernels::l2_normalize_rows)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.row_op(x, Op::Softmax(x), kernels::softmax_rows)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.row_op(x, Op::LogSoftmax(x), kernels::log_softmax_rows)
    }

    /// Identity in the forward pass; blocks every gradient path backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.clone();
        self.push(out, Op::StopGradient(x), &[x])
    }

    /// Multi-head self-attention over packed `[q | k | v]` rows. Rows are
    /// grouped into consecutive sequences of length `seq`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let qv = &self.nodes[qkv.0].value;
        let (rows, cols) = matrix_dims("attention", &qv.shape)?;
        if cols % 3 != 0 || (cols / 3) % heads != 0 {
            return Err(Error::shape("attention", format!("{cols} columns for {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("attention", format!("{rows} rows in sequences of {seq}")));
        }
        let geom = AttnGeom { seq, heads, width: cols / 3, causal };
        let mut data = vec![F::zero(); rows * geom.width];
        let probs = kernels::attention(&qv.data, geom, &mut data);
        let out = Tensor { shape: vec![rows, geom.width], data };
        Ok(self.push(out, Op::Attention { qkv, geom, probs }, &[qkv]))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); n.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c)),
            Op::ScaleBy(x, s) => {
                let c = val(*s).data[0];
                let xv = &val(*x).data;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<F>());
            }
            Op::AddRow(x, b) => {
                let cols = val(*b).numel();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for r in g.chunks_exact(cols) {
                        add_into(d, r);
                    }
                });
            }
            Op::MatMul { a, b, av, bv } => {
                let (_, n) = bv.dims();
                let (m, _) = av.dims();
                let gview = MatView { rows: m, cols: n, trans: false };
                let (adata, bdata) = (&val(*a).data, &val(*b).data);
                // dA = dC · op(B)ᵀ (stored orientation follows av.trans).
                acc(*a, &mut |d| {
                    if av.trans {
                        kernels::matmul(bdata, *bv, g, gview.flipped(), d, true);
                    } else {
                        kernels::matmul(g, gview, bdata, bv.flipped(), d, true);
                    }
                });
                // dB = op(A)ᵀ · dC (stored orientation follows bv.trans).
                acc(*b, &mut |d| {
                    if bv.trans {
                        kernels::matmul(g, gview.flipped(), adata, *av, d, true);
                    } else {
                        kernels::matmul(adata, av.flipped(), g, gview, d, true);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = val(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::SumAxis { x, outer, len, inner, mean } => {
                let scale = if *mean { F::of(1.0 / *len as f64) } else { F::one() };
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for ((a, &gy), &yv) in d.iter_mut().zip(g).zip(y) {
                        *a += gy * yv;
                    }
                });
            }
            Op::Log(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |d| {
                    for ((a, &gy), &v) in d.iter_mut().zip(g).zip(xv) {
                        *a += gy / v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &val(*x).data;
                acc(*x, &mut |d| {
                    for ((a, &gy), &v) in d.iter_mut().zip(g).zip(xv) {
                        *a += gy * kernels::gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &val(*gain).data;
                acc(*x, &mut |d| kernels::layer_norm_backward(xhat, rstd, gv, g, Some(d), None, None));
                acc(*gain, &mut |d| kernels::layer_norm_backward(xhat, rstd, gv, g, None, Some(d), None));
                acc(*bias, &mut |d| kernels::layer_norm_backward(xhat, rstd, gv, g, None, None, Some(d)));
            }
            Op::L2Normalize(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| kernels::l2_normalize_rows_backward(&xv.data, &node.value.data, g, xv.cols(), d));
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                acc(*x, &mut |d| kernels::softmax_rows_backward(&node.value.data, g, cols, d));
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                acc(*x, &mut |d| kernels::log_softmax_rows_backward(&node.value.data, g, cols, d));
            }
            Op::Attention { qkv, geom, probs } => {
                let qv = &val(*qkv).data;
                acc(*qkv, &mut |d| kernels::attention_backward(qv, probs, g, *geom, d));
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
