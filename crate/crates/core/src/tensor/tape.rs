use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Clamp range applied to log standard deviations before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Matmul(Var, Var),
    Conv2d(Var, Var, Option<Var>),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Log { x: Var, floor: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    Cumsum { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    ScaleShift { x: Var, scale: Var, shift: Var },
    GaussianSample { mu: Var, log_sigma: Var, noise: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    consumed: bool,
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

fn clamp_log_sigma(v: f64) -> f64 {
    v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf without gradient (inputs, targets, detached states).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, &[], "constant")
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let value = store.get(id).value.clone();
        let v = self.push(value, Op::Param(id), &[], "parameter")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, op, &[a, b], name)
    }

    fn unary_map(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|v| f(*v)).collect())?;
        self.push(value, op, &[x], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_map(x, Op::AddConst(x), "add_const", |v| v + c)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_map(x, Op::MulConst(x, c), "mul_const", |v| v * c)
    }

    fn scalar_value(&self, s: Var, name: &str) -> Result<f64> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(Error::ShapeMismatch(format!("{name}: expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Tensor times a scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_value(s, "mul_scalar")?;
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|v| v * c).collect())?;
        self.push(value, Op::MulScalar(x, s), &[x, s], "mul_scalar")
    }

    /// Tensor divided by a scalar node.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_value(s, "div_scalar")?;
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|v| v / c).collect())?;
        self.push(value, Op::DivScalar(x, s), &[x, s], "div_scalar")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = alloc::vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                let row = &vb[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += aip * bv;
                }
            }
        }
        self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// 3x3 convolution with zero "same" padding: `x [Ci, H, W]`,
    /// `w [Co, Ci, 3, 3]`, optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::ShapeMismatch(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        let (ci_n, h, wd) = (sx[0], sx[1], sx[2]);
        let co_n = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [co_n] {
                return Err(Error::ShapeMismatch(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = alloc::vec![0.0; co_n * hw];
        if let Some(b) = bias {
            for (co, bv) in self.value(b).data().iter().enumerate() {
                out[co * hw..(co + 1) * hw].iter_mut().for_each(|o| *o = *bv);
            }
        }
        for co in 0..co_n {
            let yo = &mut out[co * hw..(co + 1) * hw];
            for ci in 0..ci_n {
                let xi = &xv[ci * hw..(ci + 1) * hw];
                for kh in 0..3 {
                    let (i0, i1) = valid_range(h, kh);
                    for kw in 0..3 {
                        let wk = wv[((co * ci_n + ci) * 3 + kh) * 3 + kw];
                        let (j0, j1) = valid_range(wd, kw);
                        for i in i0..i1 {
                            let ii = i + kh - 1;
                            let yrow = &mut yo[i * wd + j0..i * wd + j1];
                            let xrow = &xi[ii * wd + j0 + kw - 1..ii * wd + j1 + kw - 1];
                            for (yv, xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wk * xv;
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = alloc::vec![x, w];
        inputs.extend(bias);
        self.push(Tensor::new(&[co_n, h, wd], out)?, Op::Conv2d(x, w, bias), &inputs, "conv2d")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Gelu(x), "gelu", gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Exp(x), "exp", libm::exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Sqrt(x), "sqrt", libm::sqrt)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary_map(x, Op::Log { x, floor }, "log", |v| libm::log(v.max(floor)))
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary_map(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis)?;
        let src = vx.data();
        let mut out = alloc::vec![0.0; src.len()];
        for o in 0..outer {
            for q in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + q;
                let m = (0..n).fold(f64::NEG_INFINITY, |m, k| m.max(src[idx(k)]));
                let mut total = 0.0;
                for k in 0..n {
                    let e = libm::exp(src[idx(k)] - m);
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push(value, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis)?;
        let mut out = vx.data().to_vec();
        for o in 0..outer {
            for k in 1..n {
                for q in 0..inner {
                    out[(o * n + k) * inner + q] += out[(o * n + k - 1) * inner + q];
                }
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push(value, Op::Cumsum { x, axis }, &[x], "cumsum")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis)?;
        let src = vx.data();
        let mut out = alloc::vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for q in 0..inner {
                    out[o * inner + q] += src[(o * n + k) * inner + q];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, &[x], "sum_axis")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, parts, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, n, inner) = split_axis(vx.shape(), axis)?;
        if start + len > n {
            return Err(Error::ShapeMismatch(format!("narrow {start}+{len} beyond {n}")));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&vx.data()[from..from + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, &[x], "narrow")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Per-channel modulation `x * (1 + scale[c]) + shift[c]` for `x [C, ...]`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.shape()[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "scale_shift on {:?} with {:?} / {:?}",
                vx.shape(),
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let per = vx.numel() / c;
        let (sv, tv) = (self.value(scale).data(), self.value(shift).data());
        let out = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + sv[i / per]) + tv[i / per])
            .collect();
        let value = Tensor::new(vx.shape(), out)?;
        self.push(value, Op::ScaleShift { x, scale, shift }, &[x, scale, shift], "scale_shift")
    }

    /// Reparameterized Gaussian draw `mu + exp(clamp(log_sigma)) * noise` with
    /// externally supplied standard-normal `noise`.
    pub fn gaussian_sample(&mut self, mu: Var, log_sigma: Var, noise: Tensor) -> Result<Var> {
        self.same_shape(mu, log_sigma, "gaussian_sample")?;
        if noise.shape() != self.shape(mu) {
            return Err(Error::ShapeMismatch(format!(
                "noise {:?} vs mu {:?}",
                noise.shape(),
                self.shape(mu)
            )));
        }
        let out = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_sigma).data())
            .zip(noise.data())
            .map(|((m, ls), n)| m + libm::exp(clamp_log_sigma(*ls)) * n)
            .collect();
        let value = Tensor::new(self.shape(mu), out)?;
        self.push(value, Op::GaussianSample { mu, log_sigma, noise }, &[mu, log_sigma], "gaussian_sample")
    }

    /// Reverse pass from the scalar `root`, seeded with `seed`, adding parameter
    /// gradients into `grads`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, root: Var, seed: f64, grads: &mut Gradients) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; rebuild the graph".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Tape(format!("backward root must be scalar, got {:?}", self.shape(root))));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Tensor>> = alloc::vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::new(self.shape(root), alloc::vec![seed])?);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj, grads)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let nodes = &self.nodes;
        // Adds into the adjoint of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            debug_assert!(v.0 < i, "tape is topologically ordered");
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.add(*id, g),
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] / vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= gd[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += c * g));
            }
            Op::MulScalar(x, sc) => {
                let c = self.value(*sc).item();
                let vx = self.value(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += c * g));
                let dot: f64 = vx.iter().zip(gd).map(|(a, b)| a * b).sum();
                acc(*sc, &mut |s| s[0] += dot);
            }
            Op::DivScalar(x, sc) => {
                let c = self.value(*sc).item();
                let vx = self.value(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g / c));
                let dot: f64 = vx.iter().zip(gd).map(|(a, b)| a * b).sum();
                acc(*sc, &mut |s| s[0] -= dot / (c * c));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for p in 0..k {
                            let row = &vb[p * n..(p + 1) * n];
                            s[r * k + p] += gd[r * n..(r + 1) * n].iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = va[r * k + p];
                            for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                                *sv += a_rp * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv2d(x, w, bias) => {
                let sx = self.shape(*x);
                let (ci_n, h, wd) = (sx[0], sx[1], sx[2]);
                let co_n = self.shape(*w)[0];
                let hw = h * wd;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(b) = bias {
                    acc(*b, &mut |s| {
                        for co in 0..co_n {
                            s[co] += gd[co * hw..(co + 1) * hw].iter().sum::<f64>();
                        }
                    });
                }
                acc(*w, &mut |s| {
                    for co in 0..co_n {
                        let go = &gd[co * hw..(co + 1) * hw];
                        for ci in 0..ci_n {
                            let xi = &xv[ci * hw..(ci + 1) * hw];
                            for kh in 0..3 {
                                let (i0, i1) = valid_range(h, kh);
                                for kw in 0..3 {
                                    let (j0, j1) = valid_range(wd, kw);
                                    let mut total = 0.0;
                                    for r in i0..i1 {
                                        let ii = r + kh - 1;
                                        let grow = &go[r * wd + j0..r * wd + j1];
                                        let xrow = &xi[ii * wd + j0 + kw - 1..ii * wd + j1 + kw - 1];
                                        total += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    s[((co * ci_n + ci) * 3 + kh) * 3 + kw] += total;
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for co in 0..co_n {
                        let go = &gd[co * hw..(co + 1) * hw];
                        for ci in 0..ci_n {
                            let si = &mut s[ci * hw..(ci + 1) * hw];
                            for kh in 0..3 {
                                let (i0, i1) = valid_range(h, kh);
                                for kw in 0..3 {
                                    let wk = wv[((co * ci_n + ci) * 3 + kh) * 3 + kw];
                                    let (j0, j1) = valid_range(wd, kw);
                                    for r in i0..i1 {
                                        let ii = r + kh - 1;
                                        let grow = &go[r * wd + j0..r * wd + j1];
                                        let srow = &mut si[ii * wd + j0 + kw - 1..ii * wd + j1 + kw - 1];
                                        for (sv, gv) in srow.iter_mut().zip(grow) {
                                            *sv += wk * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * gelu_grad(vx[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if vx[k] > 0.0 {
                            s[k] += gd[k];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * y[k];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * 0.5 / y[k];
                    }
                });
            }
            Op::Log { x, floor } => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if vx[k] > *floor {
                            s[k] += gd[k] / vx[k];
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if vx[k] > *lo && vx[k] < *hi {
                            s[k] += gd[k];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis)?;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + q;
                            let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                s[idx(k)] += y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Cumsum { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis)?;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let mut run = 0.0;
                            for k in (0..n).rev() {
                                let idx = (o * n + k) * inner + q;
                                run += gd[idx];
                                s[idx] += run;
                            }
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis)?;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for k in 0..n {
                            for q in 0..inner {
                                s[(o * n + k) * inner + q] += gd[o * inner + q];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis)?;
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (sv, gv) in s[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *sv += gv;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis)?;
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (sv, gv) in dst.iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::ScaleShift { x, scale, shift } => {
                let vx = self.value(*x).data();
                let c = self.shape(*x)[0];
                let per = vx.len() / c;
                let sv = self.value(*scale).data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * (1.0 + sv[k / per]);
                    }
                });
                acc(*scale, &mut |s| {
                    for ch in 0..c {
                        let r = ch * per..(ch + 1) * per;
                        s[ch] += gd[r.clone()].iter().zip(&vx[r]).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
                acc(*shift, &mut |s| {
                    for ch in 0..c {
                        s[ch] += gd[ch * per..(ch + 1) * per].iter().sum::<f64>();
                    }
                });
            }
            Op::GaussianSample { mu, log_sigma, noise } => {
                let ls = self.value(*log_sigma).data();
                let nz = noise.data();
                acc(*mu, &mut |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += g));
                acc(*log_sigma, &mut |s| {
                    for k in 0..s.len() {
                        if ls[k] > LOG_SIGMA_MIN && ls[k] < LOG_SIGMA_MAX {
                            s[k] += gd[k] * libm::exp(ls[k]) * nz[k];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Output index range along one spatial axis for kernel tap `k` (0..3).
fn valid_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}
