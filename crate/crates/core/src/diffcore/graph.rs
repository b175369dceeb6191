//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value plus whatever it needs for the backward
//! sweep; [`Graph::backward`] then walks the nodes in reverse creation order,
//! which is a valid topological order because inputs always precede outputs.

use crate::error::{config_err, usage_err, Error, Result};

use super::real::Real;
use super::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    /// Pad by repeating edge pixels instead of zeros.
    pub replicate: bool,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            replicate: false,
        }
    }
}

enum Op<T> {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleCols(Var, Vec<T>),
    MulRowScalar(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SpatialSoftmax {
        x: Var,
        temperature: T,
        probs: Vec<T>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    SoftmaxLast(Var),
    Bmm(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    AffineRows {
        x: Var,
        mats: Vec<T>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Angle {
        a: Var,
        b: Vec<T>,
        cos: Vec<T>,
        active: Vec<bool>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite<T: Real>(what: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values entering {what}")))
    }
}

impl<T: Real> Graph<T> {
    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: no node requires a gradient and no backward
    /// buffers are kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is tracked (a parameter or a checked input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Input, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.val(x).iter().map(|&v| v * s).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same numel");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Multiplies column `j` of the trailing axis by `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d != factors.len() {
            return Err(config_err!(
                "scale_cols: trailing dim {d} but {} factors",
                factors.len()
            ));
        }
        let data = self
            .val(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i % d])
            .collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScaleCols(x, factors.to_vec()), rg))
    }

    /// `y[r, :] = x[r, :] * s[r]` for `x: [R, d]` and `s` with `R` elements.
    pub fn mul_row_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        let rows = self.value(x).numel() / d.max(1);
        if self.value(s).numel() != rows {
            return Err(config_err!(
                "mul_row_scalar: {rows} rows but scalar tensor {:?}",
                self.shape(s)
            ));
        }
        let sv = self.val(s);
        let data = self.val(x).iter().enumerate().map(|(i, &v)| v * sv[i / d]).collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulRowScalar(x, s), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.val(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same numel");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    // ---------------------------------------------------------------- dense

    /// `x: [.., in]`, `w: [out, in]`, `b: [out]` -> `[.., out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(config_err!("linear: weight must be 2-d, got {:?}", ws));
        }
        let (out, inp) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if last_dim(&xs) != inp || xs.is_empty() {
            return Err(config_err!("linear: input {:?} incompatible with weight {:?}", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(config_err!(
                    "linear: bias {:?} does not match {out} outputs",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.val(b);
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            inp,
            out,
            T::one(),
            self.val(x),
            false,
            self.val(w),
            true,
            T::one(),
            &mut y,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::from_vec(&shape, y)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(config_err!("bmm: incompatible shapes {:?} x {:?}", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![T::zero(); bt * m * n];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..bt {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_vec(&[bt, m, n], c)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    // ---------------------------------------------------------------- conv

    /// Cross-correlation of `x: [B, C, H, W]` (or `[C, H, W]`) with
    /// `w: [Co, C, k, k]` plus optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let unbatched = xs.len() == 3;
        let (bn, c, h, wd) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(config_err!("conv2d: input must be [C,H,W] or [B,C,H,W], got {:?}", xs)),
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(config_err!(
                "conv2d: weight {:?} incompatible with input {:?} (need [Co, {c}, k, k])",
                ws,
                xs
            ));
        }
        let (co, k) = (ws[0], ws[2]);
        if spec.stride == 0 {
            return Err(config_err!("conv2d: stride must be >= 1"));
        }
        if h + 2 * spec.padding < k || wd + 2 * spec.padding < k {
            return Err(config_err!(
                "conv2d: spatial dims {h}x{wd} with padding {} smaller than kernel {k}",
                spec.padding
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(config_err!(
                    "conv2d: bias {:?} does not match {co} channels",
                    self.shape(b)
                ));
            }
        }
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - k) / spec.stride + 1;
        let ckk = c * k * k;
        let plane = ho * wo;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        let mut out = vec![T::zero(); bn * co * plane];
        let mut all_cols = if rg {
            vec![T::zero(); bn * ckk * plane]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); ckk * plane];
        {
            let xv = self.val(x);
            let wv = self.val(w);
            let bv = b.map(|b| self.val(b));
            for i in 0..bn {
                let cols: &mut [T] = if rg {
                    &mut all_cols[i * ckk * plane..(i + 1) * ckk * plane]
                } else {
                    &mut scratch
                };
                im2col(
                    &xv[i * c * h * wd..(i + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    k,
                    spec,
                    ho,
                    wo,
                    cols,
                );
                let o = &mut out[i * co * plane..(i + 1) * co * plane];
                if let Some(bv) = bv {
                    for (ch, chunk) in o.chunks_mut(plane).enumerate() {
                        chunk.fill(bv[ch]);
                    }
                }
                T::gemm(co, ckk, plane, T::one(), wv, false, cols, false, T::one(), o);
            }
        }
        let shape = if unbatched {
            vec![co, ho, wo]
        } else {
            vec![bn, co, ho, wo]
        };
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols: all_cols,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over the two trailing axes (floor).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(config_err!("max_pool2: need at least 2 dims, got {:?}", xs));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(config_err!("max_pool2: spatial dims {h}x{w} too small"));
        }
        let planes = self.value(x).numel() / (h * w);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = ho;
        shape[n - 1] = wo;
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        if !rg {
            argmax.clear();
        }
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Softmax over each `h x w` plane followed by the expected (row, col)
    /// position: `[.., h, w] -> [.., 2]`, in map pixel units.
    pub fn spatial_softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(config_err!("spatial_softmax: need at least 2 dims, got {:?}", xs));
        }
        if !(temperature > T::zero()) {
            return Err(config_err!("spatial_softmax: temperature must be positive"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h == 0 || w == 0 {
            return Err(config_err!("spatial_softmax: empty feature map"));
        }
        check_finite("spatial_softmax", self.val(x))?;
        let hw = h * w;
        let planes = self.value(x).numel() / hw;
        let xv = self.val(x);
        let mut probs = vec![T::zero(); planes * hw];
        let mut out = vec![T::zero(); planes * 2];
        for p in 0..planes {
            let f = &xv[p * hw..(p + 1) * hw];
            let pr = &mut probs[p * hw..(p + 1) * hw];
            let m = f.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (q, &v) in pr.iter_mut().zip(f) {
                *q = ((v - m) / temperature).exp();
                z += *q;
            }
            let (mut eu, mut ev) = (T::zero(), T::zero());
            for (idx, q) in pr.iter_mut().enumerate() {
                *q = *q / z;
                eu += *q * T::of((idx / w) as f64);
                ev += *q * T::of((idx % w) as f64);
            }
            out[2 * p] = eu;
            out[2 * p + 1] = ev;
        }
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.push(2);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        if !rg {
            probs.clear();
        }
        Ok(self.push(value, Op::SpatialSoftmax { x, temperature, probs }, rg))
    }

    /// Max over the two trailing axes: `[.., h, w] -> [..]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(config_err!("global_max_pool: need [.., C, h, w], got {:?}", xs));
        }
        let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
        let planes = self.value(x).numel() / hw;
        let xv = self.val(x);
        let mut out = Vec::with_capacity(planes);
        let mut argmax = Vec::with_capacity(planes);
        for p in 0..planes {
            let mut best = p * hw;
            for idx in p * hw..(p + 1) * hw {
                if xv[idx] > xv[best] {
                    best = idx;
                }
            }
            out.push(xv[best]);
            argmax.push(best);
        }
        let value = Tensor::from_vec(&xs[..xs.len() - 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Mean over the two trailing axes: `[.., h, w] -> [..]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(config_err!("global_avg_pool: need [.., C, h, w], got {:?}", xs));
        }
        let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
        let inv = T::one() / T::of(hw as f64);
        let out = self
            .val(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&xs[..xs.len() - 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax", self.val(x))?;
        let d = last_dim(self.shape(x));
        let mut out = self.val(x).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxLast(x), rg))
    }

    // ---------------------------------------------------------------- layout

    /// Concatenation along the trailing axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| usage_err!("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(config_err!("concat: leading dims {:?} vs {:?}", lead, s));
            }
            dims.push(last_dim(s));
        }
        let total: usize = dims.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &d) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.val(p)[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = last_dim(&xs);
        if xs.is_empty() || start + len > d {
            return Err(config_err!("slice_last: range {start}..{} out of {d}", start + len));
        }
        let out = self
            .val(x)
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Selects entries along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(config_err!("gather_rows on a scalar"));
        }
        let stride = self.value(x).numel() / xs[0].max(1);
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= xs[0] {
                return Err(config_err!("gather_rows: row {r} out of {}", xs[0]));
            }
            out.extend_from_slice(&self.val(x)[r * stride..(r + 1) * stride]);
        }
        let mut shape = xs;
        shape[0] = rows.len();
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Per-row affine map with constant coefficients:
    /// `y[r] = mats[r] * x[r] + bias[r]` where `x: [R, din]`,
    /// `mats: R x (dout x din)` row-major and `bias: R x dout`.
    pub fn affine_rows(&mut self, x: Var, mats: &[T], bias: &[T], dout: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = last_dim(&xs);
        let rows = self.value(x).numel() / din.max(1);
        if mats.len() != rows * dout * din || bias.len() != rows * dout {
            return Err(config_err!(
                "affine_rows: {rows} rows of dim {din} need {} coefficients and {} offsets",
                rows * dout * din,
                rows * dout
            ));
        }
        let xv = self.val(x);
        let mut out = bias.to_vec();
        for r in 0..rows {
            for o in 0..dout {
                let mut s = T::zero();
                for i in 0..din {
                    s += mats[(r * dout + o) * din + i] * xv[r * din + i];
                }
                out[r * dout + o] += s;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AffineRows { x, mats: mats.to_vec() }, rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.val(x).iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sum over the trailing axis: `[.., d] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(config_err!("sum_last on a scalar"));
        }
        let d = last_dim(&xs);
        let out = self.val(x).chunks(d).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::from_vec(&xs[..xs.len() - 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumLast(x), rg))
    }

    /// Row-wise angle `acos(clamp(a.b / (|a| |b|), -1+eps, 1-eps))` between
    /// `a: [R, d]` and constant rows `b`. Rows where either norm is below
    /// `1e-8` yield 0 and pass no gradient.
    pub fn angle_to(&mut self, a: Var, b: &[T], eps: T) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        let d = last_dim(&xs);
        if xs.is_empty() || b.len() != self.value(a).numel() {
            return Err(config_err!(
                "angle_to: target has {} values for input {:?}",
                b.len(),
                xs
            ));
        }
        let tiny = T::of(1e-8);
        let av = self.val(a);
        let rows = av.len() / d;
        let mut out = vec![T::zero(); rows];
        let mut cos = vec![T::zero(); rows];
        let mut active = vec![false; rows];
        for r in 0..rows {
            let ar = &av[r * d..(r + 1) * d];
            let br = &b[r * d..(r + 1) * d];
            let na = ar.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = br.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na < tiny || nb < tiny {
                continue;
            }
            let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            let c = dot / (na * nb);
            cos[r] = c;
            active[r] = true;
            let lo = -T::one() + eps;
            let hi = T::one() - eps;
            out[r] = c.max(lo).min(hi).acos();
        }
        let value = Tensor::from_vec(&xs[..xs.len() - 1], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::Angle {
                a,
                b: b.to_vec(),
                cos,
                active,
                eps,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of every tracked node with respect to the scalar
    /// `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.grad_enabled {
            return Err(usage_err!("backward on an inference-only graph"));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let y = node.value.data();
        let v = |var: Var| nodes[var.0].value.data();
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc_with(grads, nodes, *a, |k| gy[k]);
                acc_with(grads, nodes, *b, |k| gy[k]);
            }
            Op::Sub(a, b) => {
                acc_with(grads, nodes, *a, |k| gy[k]);
                acc_with(grads, nodes, *b, |k| -gy[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                acc_with(grads, nodes, *a, |k| gy[k] * bv[k]);
                acc_with(grads, nodes, *b, |k| gy[k] * av[k]);
            }
            Op::Scale(x, s) => acc_with(grads, nodes, *x, |k| gy[k] * *s),
            Op::ScaleCols(x, f) => {
                let d = f.len();
                acc_with(grads, nodes, *x, |k| gy[k] * f[k % d]);
            }
            Op::MulRowScalar(x, s) => {
                let (xv, sv) = (v(*x), v(*s));
                let d = xv.len() / sv.len().max(1);
                acc_with(grads, nodes, *x, |k| gy[k] * sv[k / d]);
                acc_with(grads, nodes, *s, |r| {
                    (0..d).map(|j| gy[r * d + j] * xv[r * d + j]).sum()
                });
            }
            Op::Relu(x) => acc_with(grads, nodes, *x, |k| if y[k] > T::zero() { gy[k] } else { T::zero() }),
            Op::Tanh(x) => acc_with(grads, nodes, *x, |k| gy[k] * (T::one() - y[k] * y[k])),
            Op::Sigmoid(x) => acc_with(grads, nodes, *x, |k| gy[k] * y[k] * (T::one() - y[k])),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let ws = nodes[w.0].value.shape();
                let (out, inp) = (ws[0], ws[1]);
                let rows = xv.len() / inp;
                if let Some(gx) = acc(grads, nodes, *x) {
                    T::gemm(rows, out, inp, T::one(), gy, false, wv, false, T::one(), gx);
                }
                if let Some(gw) = acc(grads, nodes, *w) {
                    T::gemm(out, rows, inp, T::one(), gy, true, xv, false, T::one(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = acc(grads, nodes, *b) {
                        for row in gy.chunks(out) {
                            for (g, &r) in gb.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    }
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (v(*a), v(*b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    for t in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gy[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            true,
                            T::one(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for t in 0..bt {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[t * m * k..(t + 1) * m * k],
                            true,
                            &gy[t * m * n..(t + 1) * m * n],
                            false,
                            T::one(),
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let xs = nodes[x.0].value.shape();
                let (bn, c, h, wd) = if xs.len() == 3 {
                    (1, xs[0], xs[1], xs[2])
                } else {
                    (xs[0], xs[1], xs[2], xs[3])
                };
                let ws = nodes[w.0].value.shape();
                let (co, k) = (ws[0], ws[2]);
                let ys = node.value.shape();
                let (ho, wo) = (ys[ys.len() - 2], ys[ys.len() - 1]);
                let plane = ho * wo;
                let ckk = c * k * k;
                let wv = v(*w);
                if let Some(gw) = acc(grads, nodes, *w) {
                    for t in 0..bn {
                        T::gemm(
                            co,
                            plane,
                            ckk,
                            T::one(),
                            &gy[t * co * plane..(t + 1) * co * plane],
                            false,
                            &cols[t * ckk * plane..(t + 1) * ckk * plane],
                            true,
                            T::one(),
                            gw,
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = acc(grads, nodes, *b) {
                        for t in 0..bn {
                            for (ch, chunk) in gy[t * co * plane..(t + 1) * co * plane].chunks(plane).enumerate() {
                                gb[ch] += chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if let Some(gx) = acc(grads, nodes, *x) {
                    let mut dcols = vec![T::zero(); ckk * plane];
                    for t in 0..bn {
                        T::gemm(
                            ckk,
                            co,
                            plane,
                            T::one(),
                            wv,
                            true,
                            &gy[t * co * plane..(t + 1) * co * plane],
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            k,
                            *spec,
                            ho,
                            wo,
                            &mut gx[t * c * h * wd..(t + 1) * c * h * wd],
                        );
                    }
                }
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += gy[k];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let n = nodes[x.0].value.numel();
                let hw = n / y.len();
                let inv = T::one() / T::of(hw as f64);
                acc_with(grads, nodes, *x, |k| gy[k / hw] * inv);
            }
            Op::SpatialSoftmax { x, temperature, probs } => {
                let xs = nodes[x.0].value.shape();
                let w = xs[xs.len() - 1];
                let hw = xs[xs.len() - 2] * w;
                let inv_t = T::one() / *temperature;
                acc_with(grads, nodes, *x, |k| {
                    let p = k / hw;
                    let idx = k % hw;
                    let (gu, gv) = (gy[2 * p], gy[2 * p + 1]);
                    let (eu, ev) = (y[2 * p], y[2 * p + 1]);
                    let row = T::of((idx / w) as f64);
                    let col = T::of((idx % w) as f64);
                    probs[k] * (gu * (row - eu) + gv * (col - ev)) * inv_t
                });
            }
            Op::SoftmaxLast(x) => {
                let d = last_dim(node.value.shape());
                let dots: Vec<T> = gy
                    .chunks(d)
                    .zip(y.chunks(d))
                    .map(|(g, s)| g.iter().zip(s).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc_with(grads, nodes, *x, |k| y[k] * (gy[k] - dots[k / d]));
            }
            Op::Concat(parts) => {
                let total = last_dim(node.value.shape());
                let mut off = 0;
                for &p in parts {
                    let d = last_dim(nodes[p.0].value.shape());
                    acc_with(grads, nodes, p, |k| gy[(k / d) * total + off + k % d]);
                    off += d;
                }
            }
            Op::Slice { x, start } => {
                let len = last_dim(node.value.shape());
                let d = last_dim(nodes[x.0].value.shape());
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (r, row) in gy.chunks(len).enumerate() {
                        for (j, &g) in row.iter().enumerate() {
                            gx[r * d + start + j] += g;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc_with(grads, nodes, *x, |k| gy[k]),
            Op::GatherRows { x, rows } => {
                let stride = y.len() / rows.len().max(1);
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..stride {
                            gx[r * stride + j] += gy[i * stride + j];
                        }
                    }
                }
            }
            Op::AffineRows { x, mats } => {
                let din = last_dim(nodes[x.0].value.shape());
                let dout = last_dim(node.value.shape());
                acc_with(grads, nodes, *x, |k| {
                    let (r, i) = (k / din, k % din);
                    (0..dout)
                        .map(|o| mats[(r * dout + o) * din + i] * gy[r * dout + o])
                        .sum()
                });
            }
            Op::SumAll(x) => acc_with(grads, nodes, *x, |_| gy[0]),
            Op::MeanAll(x) => {
                let n = T::of(nodes[x.0].value.numel().max(1) as f64);
                acc_with(grads, nodes, *x, |_| gy[0] / n);
            }
            Op::SumLast(x) => {
                let d = last_dim(nodes[x.0].value.shape());
                acc_with(grads, nodes, *x, |k| gy[k / d]);
            }
            Op::Angle { a, b, cos, active, eps } => {
                let av = v(*a);
                let d = av.len() / cos.len().max(1);
                let lo = -T::one() + *eps;
                let hi = T::one() - *eps;
                // Per-row coefficient pieces, computed once.
                let coef: Vec<Option<(T, T, T)>> = (0..cos.len())
                    .map(|r| {
                        let c = cos[r];
                        if !active[r] || c <= lo || c >= hi {
                            return None;
                        }
                        let ar = &av[r * d..(r + 1) * d];
                        let br = &b[r * d..(r + 1) * d];
                        let na = ar.iter().map(|&x| x * x).sum::<T>().sqrt();
                        let nb = br.iter().map(|&x| x * x).sum::<T>().sqrt();
                        let dtheta = -gy[r] / (T::one() - c * c).sqrt();
                        Some((dtheta, T::one() / (na * nb), c / (na * na)))
                    })
                    .collect();
                acc_with(grads, nodes, *a, |k| match coef[k / d] {
                    Some((dt, inv_nn, c_na2)) => dt * (b[k] * inv_nn - av[k] * c_na2),
                    None => T::zero(),
                });
            }
        }
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn acc_with<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(g) = acc(grads, nodes, v) {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += f(i);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    let p = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let mut ii = (oi * spec.stride + ki) as isize - p;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if spec.replicate {
                        ii = ii.clamp(0, h as isize - 1);
                    } else if ii < 0 || ii >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[ch * h * w + ii as usize * w..ch * h * w + (ii as usize + 1) * w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let mut jj = (oj * spec.stride + kj) as isize - p;
                        if spec.replicate {
                            jj = jj.clamp(0, w as isize - 1);
                        }
                        *o = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    let p = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let mut ii = (oi * spec.stride + ki) as isize - p;
                    if spec.replicate {
                        ii = ii.clamp(0, h as isize - 1);
                    } else if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let mut jj = (oj * spec.stride + kj) as isize - p;
                        if spec.replicate {
                            jj = jj.clamp(0, w as isize - 1);
                        }
                        if jj >= 0 && jj < w as isize {
                            dx[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}
