//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the parameters that were read
//! through [`Graph::param`]. Graphs are cheap and single-use: build one per
//! forward pass.

use crate::error::{dim_err, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[L, D] + [D]`
    AddRows(Var, Var),
    /// `[L, D] * [D]`
    MulRows(Var, Var),
    /// `[C, ..] + [C]`
    AddChannels(Var, Var),
    /// `[C, ..] * [C]`
    MulChannels(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Silu(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Conv2d(Box<ConvCache>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Upsample2x(Var),
    Sum(Var),
    MseTo { x: Var, target: Tensor },
}

#[derive(Debug)]
struct ConvCache {
    x: Var,
    w: Var,
    in_shape: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    cols: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(dim_err!("add_rows {:?} + {:?}", xv.shape(), bv.shape()));
        }
        let d = xv.shape()[1];
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % d];
        }
        Ok(self.push(out, Op::AddRows(x, b)))
    }

    pub fn mul_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(dim_err!("mul_rows {:?} * {:?}", xv.shape(), bv.shape()));
        }
        let d = xv.shape()[1];
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv.data()[i % d];
        }
        Ok(self.push(out, Op::MulRows(x, b)))
    }

    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.len() != xv.rows() {
            return Err(dim_err!("add_channels {:?} + {:?}", xv.shape(), vv.shape()));
        }
        let inner = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vv.data()[i / inner];
        }
        Ok(self.push(out, Op::AddChannels(x, v)))
    }

    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.len() != xv.rows() {
            return Err(dim_err!("mul_channels {:?} * {:?}", xv.shape(), vv.shape()));
        }
        let inner = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= vv.data()[i / inner];
        }
        Ok(self.push(out, Op::MulChannels(x, v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(dim_err!("transpose needs 2-d, got {:?}", av.shape()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = Tensor::from_parts(vec![n, m], transpose_raw(av.data(), m, n));
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    /// Row-wise softmax over the trailing dimension of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(dim_err!("softmax_rows needs 2-d, got {:?}", av.shape()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = av.clone();
        for r in 0..m {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Zero-mean, unit-variance normalisation of every row (no affine).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::NormalizeRows { x: a, inv_std })
    }

    /// 2-d convolution on a `[C, H, W]` input with a `[O, C, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(dim_err!("conv2d input {:?} kernel {:?}", xs, ws));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(dim_err!("conv2d kernel {k} larger than padded input {:?}", xs));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(x).data(), [c, h, wd], k, stride, pad, ho, wo);
        let out = matmul_raw(self.value(w).data(), &cols, o, c * k * k, ho * wo);
        let value = Tensor::from_parts(vec![o, ho, wo], out);
        Ok(self.push(
            value,
            Op::Conv2d(Box::new(ConvCache {
                x,
                w,
                in_shape: [c, h, wd],
                kernel: k,
                stride,
                pad,
                out_hw: (ho, wo),
                cols,
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || start + len > av.shape()[1] {
            return Err(dim_err!("slice_cols {start}+{len} of {:?}", av.shape()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x: a, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(dim_err!("concat_cols row mismatch {:?}", s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Concatenate along the leading axis (channels for `[C, H, W]`).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(dim_err!(
                    "concat_rows trailing shape {:?} vs {:?}",
                    v.shape(),
                    tail
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 3 {
            return Err(dim_err!("upsample2x needs [C,H,W], got {:?}", av.shape()));
        }
        let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = av.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, 2 * h, 2 * w], out),
            Op::Upsample2x(a),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean squared error against a constant target.
    pub fn mse_to(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = self.value(a);
        av.expect_same_shape(target)?;
        let n = av.len() as f64;
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(s),
            Op::MseTo {
                x: a,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y).unwrap();
                    let gb = g.zip_map(self.value(*a), |d, x| d * x).unwrap();
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g.scale(*s)),
                Op::AddRows(x, b) => {
                    let d = self.value(*b).len();
                    let mut gb = vec![0.0; d];
                    for (j, v) in g.data().iter().enumerate() {
                        gb[j % d] += v;
                    }
                    acc(&mut grads, *x, &g);
                    acc(&mut grads, *b, &Tensor::from_parts(self.shape(*b).to_vec(), gb));
                }
                Op::MulRows(x, b) => {
                    let (xv, bv) = (self.value(*x), self.value(*b));
                    let d = bv.len();
                    let mut gx = g.clone();
                    let mut gb = vec![0.0; d];
                    for (j, gv) in gx.data_mut().iter_mut().enumerate() {
                        gb[j % d] += *gv * xv.data()[j];
                        *gv *= bv.data()[j % d];
                    }
                    acc(&mut grads, *x, &gx);
                    acc(&mut grads, *b, &Tensor::from_parts(bv.shape().to_vec(), gb));
                }
                Op::AddChannels(x, v) => {
                    let c = self.value(*v).len();
                    let inner = g.len() / c;
                    let gv: Vec<f64> = (0..c)
                        .map(|ch| g.data()[ch * inner..(ch + 1) * inner].iter().sum())
                        .collect();
                    acc(&mut grads, *x, &g);
                    acc(&mut grads, *v, &Tensor::from_parts(self.shape(*v).to_vec(), gv));
                }
                Op::MulChannels(x, v) => {
                    let vv = self.value(*v);
                    let xv = self.value(*x);
                    let c = vv.len();
                    let inner = g.len() / c;
                    let mut gx = g.clone();
                    let mut gv = vec![0.0; c];
                    for (j, d) in gx.data_mut().iter_mut().enumerate() {
                        let ch = j / inner;
                        gv[ch] += *d * xv.data()[j];
                        *d *= vv.data()[ch];
                    }
                    acc(&mut grads, *x, &gx);
                    acc(&mut grads, *v, &Tensor::from_parts(vv.shape().to_vec(), gv));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(g.data(), &bt, m, n, k);
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, g.data(), k, m, n);
                    acc(&mut grads, *a, &Tensor::from_parts(vec![m, k], ga));
                    acc(&mut grads, *b, &Tensor::from_parts(vec![k, n], gb));
                }
                Op::Transpose(a) => {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    acc(
                        &mut grads,
                        *a,
                        &Tensor::from_parts(vec![m, n], transpose_raw(g.data(), n, m)),
                    );
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.shape(*a).to_vec()).unwrap();
                    acc(&mut grads, *a, &ga);
                }
                Op::Silu(a) => {
                    let ga = g
                        .zip_map(self.value(*a), |d, x| {
                            let s = sigmoid(x);
                            d * s * (1.0 + x * (1.0 - s))
                        })
                        .unwrap();
                    acc(&mut grads, *a, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    let mut ga = g.clone();
                    for r in 0..y.shape()[0] {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &mut ga.data_mut()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::NormalizeRows { x, inv_std } => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut gx = g.clone();
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &mut gx.data_mut()[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = inv_std[r] * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Conv2d(cache) => {
                    let ConvCache {
                        x,
                        w,
                        in_shape,
                        kernel,
                        stride,
                        pad,
                        out_hw,
                        cols,
                    } = cache.as_ref();
                    let wv = self.value(*w);
                    let o = wv.shape()[0];
                    let ckk = in_shape[0] * kernel * kernel;
                    let p = out_hw.0 * out_hw.1;
                    let cols_t = transpose_raw(cols, ckk, p);
                    let gw = matmul_raw(g.data(), &cols_t, o, p, ckk);
                    acc(&mut grads, *w, &Tensor::from_parts(wv.shape().to_vec(), gw));
                    if !matches!(self.nodes[x.0].op, Op::Constant) {
                        let wt = transpose_raw(wv.data(), o, ckk);
                        let gcols = matmul_raw(&wt, g.data(), ckk, o, p);
                        let gx = col2im(&gcols, *in_shape, *kernel, *stride, *pad, *out_hw);
                        acc(&mut grads, *x, &Tensor::from_parts(in_shape.to_vec(), gx));
                    }
                }
                Op::SliceCols { x, start } => {
                    let xs = self.shape(*x);
                    let (m, n) = (xs[0], xs[1]);
                    let len = g.shape()[1];
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    acc(&mut grads, *x, &Tensor::from_parts(vec![m, n], gx));
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = (g.shape()[0], g.shape()[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(&mut grads, p, &Tensor::from_parts(vec![m, w], gp));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = Tensor::from_parts(
                            self.shape(p).to_vec(),
                            g.data()[off..off + n].to_vec(),
                        );
                        acc(&mut grads, p, &gp);
                        off += n;
                    }
                }
                Op::Upsample2x(a) => {
                    let s = self.shape(*a);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ga[(ch * h + y / 2) * w + x / 2] +=
                                    g.data()[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                    acc(&mut grads, *a, &Tensor::from_parts(vec![c, h, w], ga));
                }
                Op::Sum(a) => {
                    let d = g.data()[0];
                    acc(&mut grads, *a, &Tensor::full(self.shape(*a).to_vec(), d));
                }
                Op::MseTo { x, target } => {
                    let d = g.data()[0];
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    let gx = xv.zip_map(target, |a, t| 2.0 * (a - t) * d / n).unwrap();
                    acc(&mut grads, *x, &gx);
                }
            }
        }

        let mut out = vec![None; self.store.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out[pid] = grads[v.0].take();
            }
        }
        Gradients::from_vec(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(
    x: &[f64],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let p = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}
