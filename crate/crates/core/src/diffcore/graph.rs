//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive operation in evaluation order. Node ids
//! are therefore a topological order, and [`Graph::backward`] walks them in
//! reverse, visiting each node once and accumulating input gradients
//! additively.

use super::kernels::{self, ConvGeom};
use super::params::ParamTree;
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Dense { x: Var, w: Var, b: Var },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool2(Var),
    Upsample2(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GatherLast(Var, Vec<usize>),
    Mse(Var, Var),
    BceMasked { logits: Var, target: Tensor<T>, mask: Tensor<T> },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record: values of every node plus the op that produced it.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Sign of every element entering a relu or leaky relu, in record order.
    pub fn kink_signs(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()))
            .collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf bound to `path` in a [`ParamTree`].
    pub fn param(&mut self, path: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((path.to_string(), v));
        v
    }

    /// Registers `tree[path]` as a trainable leaf.
    pub fn param_from(&mut self, tree: &ParamTree<T>, path: &str) -> Result<Var, DiffError> {
        let value = tree
            .get(path)
            .ok_or_else(|| DiffError::UnknownParam(path.to_string()))?
            .clone();
        Ok(self.param(path, value))
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm_nn(m, n, k, self.value(a).data(), self.value(b).data(), out.data_mut());
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bs, m, n]);
        {
            let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            let od = out.data_mut();
            for i in 0..bs {
                kernels::gemm_nn(
                    m,
                    n,
                    k,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::BatchMatMul(a, b), ng))
    }

    /// Fully connected layer `x[R,I] · w[I,O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(shape_err("dense", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (r, i, o) = (sx[0], sx[1], sw[1]);
        let mut out = Tensor::zeros(&[r, o]);
        {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm_nn(r, o, i, self.value(x).data(), self.value(w).data(), out.data_mut());
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, ng))
    }

    /// Adds `b[C]` to every row of `x[R,C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_bias", format!("x {:?}, b {:?}", sx, sb)));
        }
        let c = sx[1];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, bv);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, DiffError> {
        let mut acc = *vars
            .first()
            .ok_or_else(|| shape_err("add_all", "no inputs".into()))?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = t(s);
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s: T = t(s);
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Stride-1 convolution of `x[B,Ci,H,W]` with `w[Co,Ci,kh,kw]`, bias `b[Co]`,
    /// and `pad` zero cells on every border.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, DiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err("conv2d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (bs, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            pad,
            h_out: h + 2 * pad - kh + 1,
            w_out: wd + 2 * pad - kw + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[bs, c_out, geom.h_out, geom.w_out]);
        {
            let xd = self.nodes[x.0].value.data();
            let wdta = self.nodes[w.0].value.data();
            let bias = self.nodes[b.0].value.data();
            let od = out.data_mut();
            let mut cols = vec![T::zero(); rows * cols_n];
            let img = c_in * h * wd;
            let per = c_out * cols_n;
            for i in 0..bs {
                kernels::im2col(&geom, &xd[i * img..(i + 1) * img], &mut cols);
                let o = &mut od[i * per..(i + 1) * per];
                for (co, chunk) in o.chunks_mut(cols_n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[co]);
                }
                kernels::gemm_nn(c_out, cols_n, rows, wdta, &cols, o);
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("avg_pool2", format!("{:?}", s)));
        }
        let (ho, wo) = (s[2] / 2, s[3] / 2);
        let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let q: T = t(0.25);
            for plane in 0..s[0] * s[1] {
                let src = &xd[plane * s[2] * s[3]..];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let r0 = 2 * oy * s[3] + 2 * ox;
                        let r1 = r0 + s[3];
                        od[plane * ho * wo + oy * wo + ox] =
                            (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * q;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2", format!("{:?}", s)));
        }
        let (h2, w2) = (s[2] * 2, s[3] * 2);
        let mut out = Tensor::zeros(&[s[0], s[1], h2, w2]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..s[0] * s[1] {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        od[plane * h2 * w2 + y * w2 + xx] = xd[plane * s[2] * s[3] + (y / 2) * s[3] + xx / 2];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample2(x), ng))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s: T = t(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (t(lo), t(hi));
        self.unary(x, Op::Clamp(x, l, h), move |v| v.max(l).min(h))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("minimum", a, b)?;
        let out = self.zip_with(a, b, |x, y| if x <= y { x } else { y });
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Minimum(a, b), ng))
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize, DiffError> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| shape_err(op, "rank-0 input".into()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let c = self.last_dim("softmax", x)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let c = self.last_dim("log_softmax", x)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {} for rank {}", axis, first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", s, first, axis)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Gathers rows (slices along axis 0); indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err("select_rows", format!("rows {:?} of {:?}", rows, s)));
        }
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        let xd = self.value(x).data();
        for &r in rows {
            data.extend_from_slice(&xd[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64_lossy()).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(t(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|v| v.to_f64_lossy()).sum();
        let m = s / xv.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(t(m)), Op::Mean(x), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let c = self.last_dim("sum_last", x)?;
        let s = self.shape(x).to_vec();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| t(row.iter().map(|v| v.to_f64_lossy()).sum::<f64>()))
            .collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SumLast(x), ng))
    }

    /// Picks `x[r, idx[r]]` from a rank-2 tensor.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err("gather_last", format!("{:?} with {} indices", s, idx.len())));
        }
        let xd = self.value(x).data();
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &i)| xd[r * s[1] + i]).collect();
        let out = Tensor::new(vec![s[0]], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherLast(x, idx.to_vec()), ng))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av
            .iter()
            .zip(bv)
            .map(|(x, y)| {
                let d = x.to_f64_lossy() - y.to_f64_lossy();
                d * d
            })
            .sum();
        let m = s / av.len() as f64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(t(m)), Op::Mse(a, b), ng))
    }

    /// Binary cross-entropy of `sigmoid(logits)` against `target`, restricted to
    /// pixels where `mask` is non-zero and averaged over the mask count.
    /// Masked-out pixels contribute exactly zero to value and gradient.
    pub fn bce_with_mask(
        &mut self,
        logits: Var,
        target: Tensor<T>,
        mask: Tensor<T>,
    ) -> Result<Var, DiffError> {
        let s = self.shape(logits);
        if target.shape() != s || mask.shape() != s {
            return Err(shape_err(
                "bce_with_mask",
                format!("logits {:?}, target {:?}, mask {:?}", s, target.shape(), mask.shape()),
            ));
        }
        let count: f64 = mask.data().iter().map(|m| m.to_f64_lossy()).sum();
        let mut total = 0.0f64;
        for ((l, y), m) in self.value(logits).data().iter().zip(target.data()).zip(mask.data()) {
            if *m == T::zero() {
                continue;
            }
            let (l, y, m) = (l.to_f64_lossy(), y.to_f64_lossy(), m.to_f64_lossy());
            total += m * (softplus(l) - y * l);
        }
        let loss = total / count.max(1.0);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(t(loss)),
            Op::BceMasked {
                logits,
                target,
                mask,
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(DiffError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for every entry of `params`; entries not on any path
    /// to the loss receive exact zeros.
    pub fn param_grads(&self, loss: Var, params: &ParamTree<T>) -> Result<ParamTree<T>, DiffError> {
        let grads = self.backward(loss)?;
        let mut out = params.zeros_like();
        for (path, v) in &self.params {
            if let Some(g) = grads.get(*v) {
                out.get_mut(path)
                    .ok_or_else(|| DiffError::UnknownParam(path.clone()))?
                    .add_assign(g);
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("slot initialised"));
    }

    fn acc_zip(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>, f: impl Fn(usize, T) -> T) {
        self.acc(grads, v, |dst| {
            for (i, (d, &gv)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                *d += f(i, gv);
            }
        });
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |da| kernels::gemm_nt(m, k, n, g.data(), bd, da.data_mut()));
                self.acc(grads, *b, |db| kernels::gemm_tn(k, n, m, ad, g.data(), db.data_mut()));
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                self.acc(grads, *a, |da| {
                    for i in 0..bs {
                        kernels::gemm_nt(
                            m,
                            k,
                            n,
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..bs {
                        kernels::gemm_tn(
                            k,
                            n,
                            m,
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (r, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |dx| kernels::gemm_nt(r, i, o, g.data(), wd, dx.data_mut()));
                self.acc(grads, *w, |dw| kernels::gemm_tn(i, o, r, xd, g.data(), dw.data_mut()));
                self.acc(grads, *b, |db| col_sums(g.data(), o, db.data_mut()));
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                self.acc_zip(grads, *x, g, |_, gv| gv);
                self.acc(grads, *b, |db| col_sums(g.data(), c, db.data_mut()));
            }
            Op::Add(a, b) => {
                self.acc_zip(grads, *a, g, |_, gv| gv);
                self.acc_zip(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_zip(grads, *a, g, |_, gv| gv);
                self.acc_zip(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_zip(grads, *a, g, |i, gv| gv * bd[i]);
                self.acc_zip(grads, *b, g, |i, gv| gv * ad[i]);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_zip(grads, *a, g, |_, gv| gv * s);
            }
            Op::AddScalar(a) => self.acc_zip(grads, *a, g, |_, gv| gv),
            Op::Conv2d { x, w, b, geom } => {
                let bs = self.shape(*x)[0];
                let c_out = self.shape(*w)[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img = geom.c_in * geom.h * geom.w;
                let per = c_out * cols_n;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let gd = g.data();
                self.acc(grads, *b, |db| {
                    let dbd = db.data_mut();
                    for i in 0..bs {
                        for (co, chunk) in gd[i * per..(i + 1) * per].chunks(cols_n).enumerate() {
                            dbd[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                });
                let mut cols = vec![T::zero(); rows * cols_n];
                self.acc(grads, *w, |dw| {
                    for i in 0..bs {
                        kernels::im2col(geom, &xd[i * img..(i + 1) * img], &mut cols);
                        kernels::gemm_nt(c_out, rows, cols_n, &gd[i * per..(i + 1) * per], &cols, dw.data_mut());
                    }
                });
                self.acc(grads, *x, |dx| {
                    for i in 0..bs {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(rows, cols_n, c_out, wd, &gd[i * per..(i + 1) * per], &mut cols);
                        kernels::col2im(geom, &cols, &mut dx.data_mut()[i * img..(i + 1) * img]);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (ho, wo) = (s[2] / 2, s[3] / 2);
                let q: T = t(0.25);
                self.acc(grads, *x, |dx| {
                    let dd = dx.data_mut();
                    for plane in 0..s[0] * s[1] {
                        let base = plane * s[2] * s[3];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g.data()[plane * ho * wo + oy * wo + ox] * q;
                                let r0 = base + 2 * oy * s[3] + 2 * ox;
                                let r1 = r0 + s[3];
                                dd[r0] += gv;
                                dd[r0 + 1] += gv;
                                dd[r1] += gv;
                                dd[r1 + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (h2, w2) = (s[2] * 2, s[3] * 2);
                self.acc(grads, *x, |dx| {
                    let dd = dx.data_mut();
                    for plane in 0..s[0] * s[1] {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                dd[plane * s[2] * s[3] + (yy / 2) * s[3] + xx / 2] +=
                                    g.data()[plane * h2 * w2 + yy * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(x, s) => {
                let xd = self.value(*x).data();
                let s = *s;
                self.acc_zip(grads, *x, g, |i, gv| if xd[i] > T::zero() { gv } else { gv * s });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.acc_zip(grads, *x, g, |i, gv| if xd[i] > T::zero() { gv } else { T::zero() });
            }
            Op::Sigmoid(x) => self.acc_zip(grads, *x, g, |i, gv| gv * y[i] * (T::one() - y[i])),
            Op::Tanh(x) => self.acc_zip(grads, *x, g, |i, gv| gv * (T::one() - y[i] * y[i])),
            Op::Exp(x) => self.acc_zip(grads, *x, g, |i, gv| gv * y[i]),
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.acc_zip(grads, *x, g, |i, gv| {
                    if xd[i] >= lo && xd[i] <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_zip(grads, *a, g, |i, gv| if ad[i] <= bd[i] { gv } else { T::zero() });
                self.acc_zip(grads, *b, g, |i, gv| if ad[i] <= bd[i] { T::zero() } else { gv });
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().expect("rank >= 1");
                self.acc(grads, *x, |dx| {
                    for ((dxr, yr), gr) in dx.data_mut().chunks_mut(c).zip(y.chunks(c)).zip(g.data().chunks(c)) {
                        let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = *node.value.shape().last().expect("rank >= 1");
                self.acc(grads, *x, |dx| {
                    for ((dxr, yr), gr) in dx.data_mut().chunks_mut(c).zip(y.chunks(c)).zip(g.data().chunks(c)) {
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..c {
                            dxr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inner: usize = node.value.shape()[axis + 1..].iter().product();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    self.acc(grads, v, |dv| {
                        let dd = dv.data_mut();
                        for o in 0..outer {
                            let src = &g.data()[o * total + offset..o * total + offset + block];
                            for (d, &s) in dd[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::SelectRows(x, rows) => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                self.acc(grads, *x, |dx| {
                    let dd = dx.data_mut();
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g.data()[k * inner..(k + 1) * inner];
                        for (d, &s) in dd[r * inner..(r + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_zip(grads, *x, g, |_, gv| gv),
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, |dx| dx.data_mut().iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(x) => {
                let gv = g.item() / t(self.value(*x).len() as f64);
                self.acc(grads, *x, |dx| dx.data_mut().iter_mut().for_each(|d| *d += gv));
            }
            Op::SumLast(x) => {
                let c = *self.shape(*x).last().expect("rank >= 1");
                self.acc(grads, *x, |dx| {
                    for (row, &gv) in dx.data_mut().chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::GatherLast(x, idx) => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        dx.data_mut()[r * c + i] += g.data()[r];
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = g.item().to_f64_lossy() * 2.0 / ad.len() as f64;
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    self.acc(grads, v, |d| {
                        for (i, dv) in d.data_mut().iter_mut().enumerate() {
                            *dv += t(sign * (ad[i].to_f64_lossy() - bd[i].to_f64_lossy()) * k);
                        }
                    });
                }
            }
            Op::BceMasked { logits, target, mask } => {
                let count: f64 = mask.data().iter().map(|m| m.to_f64_lossy()).sum();
                let k = g.item().to_f64_lossy() / count.max(1.0);
                let ld = self.value(*logits).data();
                self.acc(grads, *logits, |dl| {
                    for (i, d) in dl.data_mut().iter_mut().enumerate() {
                        let m = mask.data()[i];
                        if m == T::zero() {
                            continue;
                        }
                        let p = sigmoid(ld[i]).to_f64_lossy();
                        *d += t(m.to_f64_lossy() * (p - target.data()[i].to_f64_lossy()) * k);
                    }
                });
            }
        }
    }
}

/// Gradients indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn col_sums<T: Scalar>(g: &[T], cols: usize, out: &mut [T]) {
    for row in g.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus(l: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p()
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}
