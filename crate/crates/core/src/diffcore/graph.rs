//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! valid topological order and backward is a single reverse sweep.

use super::tensor::DiffTensor;
use crate::error::{Error, Result};

/// Lower clamp applied inside `log` so that `0 * log 0` stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    Negate,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Normalize {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    freed: bool,
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output coordinates whose tap `kx` lands inside `[0, len)`.
fn tap_range(out_len: usize, len: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let (kx, s, p, len) = (kx as isize, stride as isize, padding as isize, len as isize);
    let lo = if p > kx { (p - kx + s - 1) / s } else { 0 };
    let hi_incl = (len - 1 + p - kx).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Visits every (output row, input row) pair and the contiguous run of
    /// valid output columns for tap `(ky, kx)`.
    #[inline]
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (lo, hi) = tap_range(self.ow, self.w, kx, self.stride, self.padding);
        if lo >= hi {
            return;
        }
        for oy in 0..self.oh {
            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            // ix = ox * stride + kx - padding, offset by lo
            let ix0 = lo * self.stride + kx - self.padding;
            f(oy, iy as usize, lo, hi, ix0);
        }
    }

    fn forward(&self, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cout * self.oh * self.ow];
        for o in 0..self.cout {
            for c in 0..self.cin {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = kernel[((o * self.cin + c) * self.k + ky) * self.k + kx];
                        self.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                            let xrow = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                            let orow = &mut out[(o * self.oh + oy) * self.ow..(o * self.oh + oy + 1) * self.ow];
                            for (n, ox) in (lo..hi).enumerate() {
                                orow[ox] += wv * xrow[ix0 + n * self.stride];
                            }
                        });
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], kernel: &[f64], g: &[f64], gx: Option<&mut [f64]>, gk: Option<&mut [f64]>) {
        if let Some(gx) = gx {
            for o in 0..self.cout {
                for c in 0..self.cin {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wv = kernel[((o * self.cin + c) * self.k + ky) * self.k + kx];
                            self.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                                let grow = &g[(o * self.oh + oy) * self.ow..];
                                let xrow = &mut gx[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                                for (n, ox) in (lo..hi).enumerate() {
                                    xrow[ix0 + n * self.stride] += wv * grow[ox];
                                }
                            });
                        }
                    }
                }
            }
        }
        if let Some(gk) = gk {
            for o in 0..self.cout {
                for c in 0..self.cin {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let mut acc = 0.0;
                            self.for_each_row(ky, kx, |oy, iy, lo, hi, ix0| {
                                let grow = &g[(o * self.oh + oy) * self.ow..];
                                let xrow = &x[(c * self.h + iy) * self.w..];
                                for (n, ox) in (lo..hi).enumerate() {
                                    acc += grow[ox] * xrow[ix0 + n * self.stride];
                                }
                            });
                            gk[((o * self.cin + c) * self.k + ky) * self.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len) / dst_len
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `t` onto the tape as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &DiffTensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = DiffTensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Snapshot of a node's value (gradient not included).
    pub fn tensor(&self, v: Var) -> DiffTensor {
        let n = self.node(v);
        DiffTensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    // ---- element-wise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Scale(c), None) => Ok(self.scale(a, c)),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Exp, None) => Ok(self.exp(a)),
            (Elementwise::Log, None) => Ok(self.log(a)),
            (Elementwise::Negate, None) => Ok(self.neg(a)),
            (kind, b) => Err(Error::InvalidArgument(format!(
                "{kind:?} called with {} operand(s)",
                if b.is_some() { 2 } else { 1 }
            ))),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (shape, value) = if na.shape == nb.shape {
            (
                na.shape.clone(),
                na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            (na.shape.clone(), na.value.iter().map(|&x| f(x, y)).collect())
        } else if na.value.len() == 1 {
            let x = na.value[0];
            (nb.shape.clone(), nb.value.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    // ---- structured ops -----------------------------------------------

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(input, kernel, stride, padding)?;
        let out = geom.forward(&self.node(input).value, &self.node(kernel).value);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![geom.cout, geom.oh, geom.ow],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    fn conv_geom(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (&[cin, h, w], &[cout, kin, k, k2]) = (self.shape(input), self.shape(kernel)) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", self.shape(input), self.shape(kernel)),
            ));
        };
        if kin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {:?} incompatible with input {:?} (needs odd square kernel)",
                    self.shape(kernel),
                    self.shape(input)
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        match (conv_out_dim(h, k, stride, padding), conv_out_dim(w, k, stride, padding)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(ConvGeom {
                cin,
                h,
                w,
                cout,
                k,
                oh,
                ow,
                stride,
                padding,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("non-positive output for {h}x{w}, k={k}, stride={stride}, padding={padding}"),
            )),
        }
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` map.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (shape, c) = (self.shape(input).to_vec(), self.shape(bias).to_vec());
        if shape.is_empty() || c != [shape[0]] {
            return Err(Error::shape("channel_bias", format!("bias {c:?} for input {shape:?}")));
        }
        let plane = shape[1..].iter().product::<usize>();
        let b = &self.node(bias).value;
        let value = self
            .node(input)
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i / plane])
            .collect();
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(shape, value, rg, Op::ChannelBias { input, bias }))
    }

    /// Nearest-neighbour resize of a `[C, H, W]` map to `[C, out_h, out_w]`.
    pub fn upsample_nearest(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("upsample_nearest", format!("{:?}", self.shape(input))));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("upsample_nearest", "zero-sized target"));
        }
        let x = &self.node(input).value;
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for oy in 0..out_h {
                let sy = nearest_src(oy, h, out_h);
                for ox in 0..out_w {
                    out.push(x[(ch * h + sy) * w + nearest_src(ox, w, out_w)]);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, out_h, out_w], out, rg, Op::Upsample(input)))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, value, rg, Op::Concat(parts.to_vec())))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let x = &self.node(input).value;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..n {
                    let e = (x[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    out[idx(i)] /= s;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(shape, out, rg, Op::Softmax { input, axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = &self.node(input).value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(new_shape, out, rg, Op::Narrow { input, axis, start }))
    }

    /// Divides by the sum along `axis`, so every fibre sums to one.
    pub fn normalize(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("normalize", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = &self.node(input).value;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let s: f64 = (0..n).map(|i| x[idx(i)]).sum();
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NonFinite(format!("normalize: fibre sum {s}")));
                }
                for i in 0..n {
                    out[idx(i)] = x[idx(i)] / s;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(shape, out, rg, Op::Normalize { input, axis }))
    }

    /// Same values viewed with a different shape of equal size.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(input).len();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} to {shape:?}", self.shape(input))));
        }
        let value = self.value(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(shape, value, rg, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.rg(input);
        self.push(vec![1], vec![s], rg, Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(input);
        self.push(vec![1], vec![s], rg, Op::Mean(input))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, input: Var) -> Var {
        let n = self.value(input).iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(input);
        self.push(vec![1], vec![n], rg, Op::L2Norm(input))
    }

    /// Cosine similarity of two flattened tensors of equal size.
    ///
    /// Two zero vectors give 1, exactly one zero vector gives 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (c, _, _) = cosine_parts(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![c], rg, Op::Cosine(a, b)))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar; the tape cannot be replayed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.sweep(loss)?;
        self.freed = true;
        Ok(())
    }

    /// Reverse sweep that keeps the tape, so backward may run again.
    /// Gradients from repeated sweeps add up.
    pub fn backward_retain(&mut self, loss: Var) -> Result<()> {
        self.sweep(loss)
    }

    fn sweep(&mut self, loss: Var) -> Result<()> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => self.nodes[id].grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        macro_rules! with_slot {
            ($v:expr, |$s:ident| $body:block) => {{
                let v: Var = $v;
                if self.rg(v) {
                    let len = self.nodes[v.0].value.len();
                    let mut buf = grads[v.0].take().unwrap_or_else(|| vec![0.0; len]);
                    {
                        let $s: &mut [f64] = &mut buf;
                        $body
                    }
                    grads[v.0] = Some(buf);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with_slot!(*a, |s| { reduce_into(s, g, 1.0) });
                with_slot!(*b, |s| { reduce_into(s, g, sign) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                with_slot!(*a, |s| { mul_grad_into(s, g, vb) });
                with_slot!(*b, |s| { mul_grad_into(s, g, va) });
            }
            Op::Scale(a, c) => with_slot!(*a, |s| { reduce_into(s, g, *c) }),
            Op::Neg(a) => with_slot!(*a, |s| { reduce_into(s, g, -1.0) }),
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                with_slot!(*a, |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => with_slot!(*a, |s| {
                for ((s, &gi), &y) in s.iter_mut().zip(g).zip(&node.value) {
                    *s += gi * y;
                }
            }),
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                with_slot!(*a, |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > LOG_FLOOR {
                            *s += gi / xi;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let geom = self
                    .conv_geom(*input, *kernel, *stride, *padding)
                    .expect("validated at forward");
                let (x, k) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
                let take = |grads: &mut [Option<Vec<f64>>], v: Var| {
                    self.rg(v).then(|| {
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
                    })
                };
                let mut gx = take(grads, *input);
                let mut gk = take(grads, *kernel);
                geom.backward(x, k, g, gx.as_deref_mut(), gk.as_deref_mut());
                if gx.is_some() {
                    grads[input.0] = gx;
                }
                if gk.is_some() {
                    grads[kernel.0] = gk;
                }
            }
            Op::ChannelBias { input, bias } => {
                let plane = node.shape[1..].iter().product::<usize>();
                with_slot!(*input, |s| { reduce_into(s, g, 1.0) });
                with_slot!(*bias, |s| {
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        s[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample(input) => {
                let (&[c, h, w], &[_, oh, ow]) = (self.nodes[input.0].shape.as_slice(), node.shape.as_slice()) else {
                    unreachable!()
                };
                with_slot!(*input, |s| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            let sy = nearest_src(oy, h, oh);
                            for ox in 0..ow {
                                s[(ch * h + sy) * w + nearest_src(ox, w, ow)] += g[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    with_slot!(p, |s| { reduce_into(s, &g[offset..offset + len], 1.0) });
                    offset += len;
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                with_slot!(*input, |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                s[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Narrow { input, axis, start } => {
                let src_shape = &self.nodes[input.0].shape;
                let (outer, n, inner) = axis_split(src_shape, *axis);
                let len = node.shape[*axis];
                with_slot!(*input, |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                        reduce_into_slice(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Normalize { input, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let (x, y) = (&self.nodes[input.0].value, &node.value);
                with_slot!(*input, |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let sum: f64 = (0..n).map(|i| x[idx(i)]).sum();
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                s[idx(i)] += (g[idx(i)] - dot) / sum;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => with_slot!(*a, |s| { reduce_into_slice(s, g) }),
            Op::Sum(a) => with_slot!(*a, |s| { s.iter_mut().for_each(|v| *v += g[0]) }),
            Op::Mean(a) => with_slot!(*a, |s| {
                let d = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += d);
            }),
            Op::L2Norm(a) => {
                let norm = node.value[0];
                let x = &self.nodes[a.0].value;
                if norm > 0.0 {
                    with_slot!(*a, |s| {
                        for (s, &xi) in s.iter_mut().zip(x) {
                            *s += g[0] * xi / norm;
                        }
                    });
                } else {
                    with_slot!(*a, |_s| {});
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (c, na, nb) = cosine_parts(va, vb);
                let defined = na > 0.0 && nb > 0.0;
                with_slot!(*a, |s| {
                    if defined {
                        for ((s, &ai), &bi) in s.iter_mut().zip(va).zip(vb) {
                            *s += g[0] * (bi / (na * nb) - c * ai / (na * na));
                        }
                    }
                });
                with_slot!(*b, |s| {
                    if defined {
                        for ((s, &ai), &bi) in s.iter_mut().zip(va).zip(vb) {
                            *s += g[0] * (ai / (na * nb) - c * bi / (nb * nb));
                        }
                    }
                });
            }
        }
    }
}

/// Returns `(cosine, |a|, |b|)` with the zero-vector conventions applied.
fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
        _ => 0.0,
    };
    (c, na, nb)
}

/// `s += sign * g`, summing `g` down when `s` is a broadcast scalar.
fn reduce_into(s: &mut [f64], g: &[f64], sign: f64) {
    if s.len() == g.len() {
        for (s, &gi) in s.iter_mut().zip(g) {
            *s += sign * gi;
        }
    } else {
        s[0] += sign * g.iter().sum::<f64>();
    }
}

fn reduce_into_slice(s: &mut [f64], g: &[f64]) {
    for (s, &gi) in s.iter_mut().zip(g) {
        *s += gi;
    }
}

/// Gradient of one factor of a (possibly broadcast) product.
fn mul_grad_into(s: &mut [f64], g: &[f64], other: &[f64]) {
    match (s.len() == g.len(), other.len() == g.len()) {
        (true, true) => {
            for ((s, &gi), &o) in s.iter_mut().zip(g).zip(other) {
                *s += gi * o;
            }
        }
        (true, false) => {
            let o = other[0];
            for (s, &gi) in s.iter_mut().zip(g) {
                *s += gi * o;
            }
        }
        (false, _) => {
            s[0] += g.iter().zip(other.iter().cycle()).map(|(gi, o)| gi * o).sum::<f64>();
        }
    }
}
