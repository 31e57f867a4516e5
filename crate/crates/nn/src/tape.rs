//! Define-by-run reverse-mode autodiff.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! context needed for its vector-Jacobian product. [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into the parameters of a
//! [`ParamStore`]; gradients add up across calls until zeroed.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{col2im, gemm, im2col, permute_into, split_axis, Conv2dGeom};
use crate::param::{BufferUpdate, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Normalization layers use batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Parameter ids of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormOpts {
    /// Axis holding the normalized features.
    pub axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + c` for a constant `c`; gradient passes through unchanged.
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Abs(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    param_vars: HashMap<ParamId, Var>,
    buffer_updates: Vec<BufferUpdate>,
    macs: u64,
    trace: Option<Vec<(String, Vec<usize>)>>,
    kink_hash: Option<u64>,
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15))
        .wrapping_mul(0x1000_0000_01b3)
        .rotate_left(17)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a - two_pi * (a / two_pi).round();
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
            macs: 0,
            trace: None,
            kink_hash: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Records `(label, shape)` pairs passed to [`Tape::mark`].
    pub fn with_shape_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Hashes every ReLU mask and max-pool argmax so callers can detect
    /// whether two evaluations took the same piecewise-linear branch.
    pub fn with_kink_tracking(mut self) -> Self {
        self.kink_hash = Some(0);
        self
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kink_hash
    }

    pub fn mark(&mut self, label: impl Into<String>, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((label.into(), self.nodes[v.0].shape.clone()));
        }
    }

    pub fn shape_trace(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Multiply-accumulate count of all linear and convolution kernels run
    /// on this tape.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Input whose gradient is returned by [`Tape::backward`].
    pub fn input_with_grad(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Param(id),
            p.trainable,
        );
        self.param_vars.insert(id, v);
        v
    }

    /// `y = x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (n_out, k) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(shape_err("linear", format!("bias {:?}, out {n_out}", self.shape(b))));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut y = vec![0.0; m * n_out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(n_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(m, k, n_out, 1.0, self.value(x), false, self.value(w), true, 1.0, &mut y);
        self.macs += (m * k * n_out) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, y, Op::Linear { x, w, b }, rg))
    }

    /// Valid (unpadded) 1D convolution. `x` is `[B, C, L]`, `w` is
    /// `[O, C, K]`, output `[B, O, (L - K) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || ws[2] > xs[2] || stride == 0 {
            return Err(shape_err("conv1d", format!("x {xs:?}, w {ws:?}, stride {stride}")));
        }
        let (bsz, c, l) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let lo = (l - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![0.0; bsz * o * lo];
        for bi in 0..bsz {
            for oc in 0..o {
                let bias = b.map_or(0.0, |b| self.nodes[b.0].value[oc]);
                for t in 0..lo {
                    let mut acc = bias;
                    for ic in 0..c {
                        let xrow = &xv[(bi * c + ic) * l..];
                        let wrow = &wv[(oc * c + ic) * k..(oc * c + ic + 1) * k];
                        for (kk, wk) in wrow.iter().enumerate() {
                            acc += wk * xrow[t * stride + kk];
                        }
                    }
                    y[(bi * o + oc) * lo + t] = acc;
                }
            }
        }
        self.macs += (bsz * o * lo * c * k) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![bsz, o, lo], y, Op::Conv1d { x, w, b, stride }, rg))
    }

    /// 2D convolution over `[B, C, H, W]` with `w` as `[O, C, kh, kw]`.
    /// Output spatial size is `(in + 2 * padding - k) / stride + 1`
    /// (floor), so `k = 3, padding = 1` keeps the size at stride 1 and
    /// yields `ceil(in / 2)` at stride 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4
            || ws.len() != 4
            || xs[1] != ws[1]
            || stride == 0
            || xs[2] + 2 * padding < ws[2]
            || xs[3] + 2 * padding < ws[3]
        {
            return Err(shape_err(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, stride {stride}, padding {padding}"),
            ));
        }
        let o = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let g = Conv2dGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
        };
        let (ho, wo) = g.out_hw();
        let npos = ho * wo;
        let krows = g.col_rows();
        let img = g.channels * g.height * g.width;
        let mut y = vec![0.0; xs[0] * o * npos];
        let mut cols = vec![0.0; krows * npos];
        for bi in 0..xs[0] {
            im2col(&self.nodes[x.0].value[bi * img..(bi + 1) * img], &g, &mut cols);
            let out = &mut y[bi * o * npos..(bi + 1) * o * npos];
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for (oc, row) in out.chunks_mut(npos).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[oc]);
                }
            }
            gemm(
                o,
                krows,
                npos,
                1.0,
                &self.nodes[w.0].value,
                false,
                &cols,
                false,
                1.0,
                out,
            );
        }
        self.macs += (xs[0] * o * npos * krows) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![xs[0], o, ho, wo],
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        if let Some(h) = self.kink_hash {
            let mut h = mix(h, 0x5e1u64);
            for chunk in self.nodes[x.0].value.chunks(64) {
                let mut bits = 0u64;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > 0.0 {
                        bits |= 1 << i;
                    }
                }
                h = mix(h, bits);
            }
            self.kink_hash = Some(h);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Relu(x), rg)
    }

    /// Batch normalization over every axis except `opts.axis`.
    ///
    /// In `Train` mode batch statistics are used and a running-statistics
    /// update (biased mean, unbiased variance) is queued; see
    /// [`Tape::take_buffer_updates`]. In `Eval` mode it is the affine map
    /// `gamma * (x - running_mean) / sqrt(running_var + eps) + beta`.
    pub fn batch_norm(&mut self, store: &ParamStore, x: Var, ids: &BatchNormIds, opts: BatchNormOpts) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if opts.axis >= shape.len() {
            return Err(shape_err("batch_norm", format!("axis {} of {shape:?}", opts.axis)));
        }
        let (outer, c, inner) = split_axis(&shape, opts.axis);
        for id in [ids.gamma, ids.beta, ids.running_mean, ids.running_var] {
            if store.tensor(id).numel() != c {
                return Err(shape_err(
                    "batch_norm",
                    format!("feature axis {c} vs parameter `{}`", store.get(id).name),
                ));
            }
        }
        let gamma = self.param(store, ids.gamma);
        let beta = self.param(store, ids.beta);
        let n = outer * inner;
        let xv = &self.nodes[x.0].value;
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    var[ch] += xv[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        } else {
            (
                store.tensor(ids.running_mean).data().to_vec(),
                store.tensor(ids.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + opts.eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        if batch_stats {
            let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            self.buffer_updates.push(BufferUpdate {
                id: ids.running_mean,
                batch_value: mean,
                momentum: opts.momentum,
            });
            self.buffer_updates.push(BufferUpdate {
                id: ids.running_var,
                batch_value: var.iter().map(|v| v * unbiased).collect(),
                momentum: opts.momentum,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis: opts.axis,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Max over `axis`, which is removed from the shape. Ties resolve to the
    /// lowest index.
    pub fn max_pool_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_pool_over_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, a, inner) = split_axis(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut y = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..a {
                let src = &xv[(o * a + j) * inner..(o * a + j + 1) * inner];
                let dst = &mut y[o * inner..(o + 1) * inner];
                let am = &mut argmax[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        am[i] = j;
                    }
                }
            }
        }
        if let Some(h) = self.kink_hash {
            let h = argmax.iter().fold(mix(h, 0x9a7), |h, &i| mix(h, i as u64));
            self.kink_hash = Some(h);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, y, Op::MaxPool { x, axis, argmax }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?.0)
            .unwrap()
            .shape
            .clone();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<_> = xs.iter().map(|&v| self.shape(v).to_vec()).collect();
                return Err(shape_err("concat", format!("axis {axis}, shapes {shapes:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let a = self.nodes[v.0].shape[axis];
                y.extend_from_slice(&self.nodes[v.0].value[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, y, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let mut y = vec![0.0; self.value(x).len()];
        permute_into(self.value(x), &shape, axes, &mut y);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(x);
        Ok(self.push(out_shape, y, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x), rg))
    }

    /// Collapses every axis from `start` on into one, preserving row-major
    /// element order.
    pub fn flatten(&mut self, x: Var, start: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start >= s.len() {
            return Err(shape_err("flatten", format!("start {start} of {s:?}")));
        }
        let mut shape = s[..start].to_vec();
        shape.push(s[start..].iter().product());
        self.reshape(x, &shape)
    }

    /// `x[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, a, inner) = split_axis(&shape, axis);
        let len = end - start;
        let xv = self.value(x);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&xv[(o * a + start) * inner..(o * a + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, y, Op::Slice { x, axis, start }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), y, Op::Scale(x, s), rg)
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err(
                "add_const",
                format!("{:?} vs {} constants", self.shape(x), c.len()),
            ));
        }
        let y = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), y, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} vs {} constants", self.shape(x), c.len()),
            ));
        }
        let y = self.value(x).iter().zip(c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), y, Op::MulConst(x, c.to_vec()), rg))
    }

    /// Wraps the selected columns (last axis) of `x` to `(-pi, pi]`. The
    /// wrap is a piecewise constant shift, so its derivative is one.
    pub fn wrap_angle_columns(&mut self, x: Var, columns: &[bool]) -> Result<Var> {
        let shape = self.shape(x);
        let last = *shape.last().unwrap_or(&0);
        if columns.len() != last {
            return Err(shape_err(
                "wrap_angle_columns",
                format!("{shape:?} vs mask {}", columns.len()),
            ));
        }
        let shift: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if columns[i % last] { wrap_angle(v) - v } else { 0.0 })
            .collect();
        self.add_const(x, &shift)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), y, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.abs()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), y, Op::Abs(x), rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = vec![self.value(x).iter().sum()];
        let rg = self.rg(x);
        self.push(vec![1], y, Op::Sum(x), rg)
    }

    /// Propagates `d loss / d node` back through the tape.
    ///
    /// Parameter gradients are added to the store (they accumulate across
    /// calls until [`ParamStore::zero_grad`]). Gradients of inputs created
    /// with [`Tape::input_with_grad`] are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<HashMap<Var, Vec<f64>>> {
        let ls = &self.nodes[loss.0];
        if ls.value.len() != 1 {
            return Err(NnError::NotScalar(ls.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut inputs = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    inputs.insert(Var(i), g);
                }
                Op::Param(id) => store.get_mut(*id).tensor.accumulate_grad(&g),
                Op::Linear { x, w, b } => {
                    let k = *self.nodes[w.0].shape.last().unwrap();
                    let n_out = self.nodes[w.0].shape[0];
                    let m = g.len() / n_out.max(1);
                    if self.rg(*x) {
                        let mut dx = vec![0.0; m * k];
                        gemm(m, n_out, k, 1.0, &g, false, &self.nodes[w.0].value, false, 0.0, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; n_out * k];
                        gemm(n_out, m, k, 1.0, &g, true, &self.nodes[x.0].value, false, 0.0, &mut dw);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let mut db = vec![0.0; n_out];
                        for row in g.chunks(n_out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Conv1d { x, w, b, stride } => {
                    let xs = &self.nodes[x.0].shape;
                    let ws = &self.nodes[w.0].shape;
                    let (bsz, c, l) = (xs[0], xs[1], xs[2]);
                    let (o, k) = (ws[0], ws[2]);
                    let lo = node.shape[2];
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; o];
                    for bi in 0..bsz {
                        for oc in 0..o {
                            for t in 0..lo {
                                let gy = g[(bi * o + oc) * lo + t];
                                db[oc] += gy;
                                for ic in 0..c {
                                    for kk in 0..k {
                                        let xi = (bi * c + ic) * l + t * stride + kk;
                                        let wi = (oc * c + ic) * k + kk;
                                        dx[xi] += gy * wv[wi];
                                        dw[wi] += gy * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let xs = &self.nodes[x.0].shape;
                    let ws = &self.nodes[w.0].shape;
                    let geom = Conv2dGeom {
                        channels: xs[1],
                        height: xs[2],
                        width: xs[3],
                        kh: ws[2],
                        kw: ws[3],
                        stride: *stride,
                        padding: *padding,
                    };
                    let o = ws[0];
                    let (ho, wo) = geom.out_hw();
                    let npos = ho * wo;
                    let krows = geom.col_rows();
                    let img = geom.channels * geom.height * geom.width;
                    let mut cols = vec![0.0; krows * npos];
                    let mut dcols = vec![0.0; krows * npos];
                    let mut dw = vec![0.0; o * krows];
                    let mut dx = if self.rg(*x) {
                        vec![0.0; xs[0] * img]
                    } else {
                        Vec::new()
                    };
                    let wv = &self.nodes[w.0].value;
                    for bi in 0..xs[0] {
                        let gy = &g[bi * o * npos..(bi + 1) * o * npos];
                        if self.rg(*w) {
                            im2col(&self.nodes[x.0].value[bi * img..(bi + 1) * img], &geom, &mut cols);
                            gemm(o, npos, krows, 1.0, gy, false, &cols, true, 1.0, &mut dw);
                        }
                        if self.rg(*x) {
                            gemm(krows, o, npos, 1.0, wv, true, gy, false, 0.0, &mut dcols);
                            col2im(&dcols, &geom, &mut dx[bi * img..(bi + 1) * img]);
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let mut db = vec![0.0; o];
                        for (j, row) in g.chunks(npos).enumerate() {
                            db[j % o] += row.iter().sum::<f64>();
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(gy, &v)| if v > 0.0 { *gy } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    axis,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (outer, c, inner) = split_axis(&node.shape, *axis);
                    let n = (outer * inner) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                dgamma[ch] += g[i] * xhat[i];
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let gv = &self.nodes[gamma.0].value;
                        let mut dx = vec![0.0; g.len()];
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let s = gv[ch] * inv_std[ch];
                                for i in base..base + inner {
                                    dx[i] = if *batch_stats {
                                        s * (g[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                    } else {
                                        s * g[i]
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::MaxPool { x, axis, argmax } => {
                    let xs = &self.nodes[x.0].shape;
                    let (outer, a, inner) = split_axis(xs, *axis);
                    let mut dx = vec![0.0; outer * a * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            dx[(o * a + j) * inner + i] += g[o * inner + i];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = split_axis(&node.shape, *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let a = self.nodes[v.0].shape[*axis];
                        if self.rg(v) {
                            let mut dv = Vec::with_capacity(outer * a * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dv.extend_from_slice(&g[start..start + a * inner]);
                            }
                            accumulate(&mut grads, v, dv);
                        }
                        offset += a;
                    }
                }
                Op::Permute { x, axes } => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let mut dx = vec![0.0; g.len()];
                    permute_into(&g, &node.shape, &inv, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) | Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Slice { x, axis, start } => {
                    let xs = &self.nodes[x.0].shape;
                    let (outer, a, inner) = split_axis(xs, *axis);
                    let len = node.shape[*axis];
                    let mut dx = vec![0.0; outer * a * inner];
                    for o in 0..outer {
                        let dst = (o * a + start) * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(g, v)| g * v).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(g, v)| g * v).collect());
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.iter().map(|v| v * s).collect()),
                Op::MulConst(x, c) => accumulate(&mut grads, *x, g.iter().zip(c).map(|(g, c)| g * c).collect()),
                Op::Exp(x) => accumulate(&mut grads, *x, g.iter().zip(&node.value).map(|(g, y)| g * y).collect()),
                Op::Abs(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| {
                            if v > 0.0 {
                                *g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
        Ok(inputs)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input_with_grad(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        let g = tape.backward(s, &mut ParamStore::new()).unwrap();
        assert_eq!(g[&x], vec![1.0; 6]);
    }

    #[test]
    fn half_square_sum_gradient_is_identity() {
        let data = [0.3, -1.2, 4.0, 2.5];
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input_with_grad(&t(&[4], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half, &mut ParamStore::new()).unwrap();
        assert_eq!(g[&x], data.to_vec());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input_with_grad(&t(&[2], &[1.0, 2.0]));
        let err = tape.backward(x, &mut ParamStore::new()).unwrap_err();
        assert!(matches!(err, NnError::NotScalar(s) if s == vec![2]));
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), true)
            .unwrap();
        let b = store.add("b", Tensor::zeros(&[3]), true).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let xdata = [1.0, 2.0, 3.0, -4.0, 5.0, -6.0];
        let x = tape.input(&t(&[2, 3], &xdata));
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = tape.linear(x, wv, Some(bv)).unwrap();
        assert_eq!(tape.value(y), &xdata);
        assert_eq!(tape.macs(), 18);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(&Tensor::zeros(&[2, 3]));
        let w = tape.input(&Tensor::zeros(&[4, 5]));
        let err = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn max_pool_of_equal_rows_is_that_row() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(&t(&[2, 3], &[1.0, -2.0, 5.0, 1.0, -2.0, 5.0]));
        let y = tape.max_pool_over_axis(x, 0).unwrap();
        assert_eq!(tape.shape(y), &[3]);
        assert_eq!(tape.value(y), &[1.0, -2.0, 5.0]);
    }

    #[test]
    fn shared_param_node_is_reused() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]), true).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        assert_eq!(tape.param(&store, w), tape.param(&store, w));
    }

    #[test]
    fn flatten_preserves_order() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(&t(&[2, 3, 4], &data));
        let y = tape.flatten(x, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 12]);
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn wrap_columns_only_touches_masked() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(&t(&[1, 2], &[6.2, 6.2]));
        let y = tape.wrap_angle_columns(x, &[false, true]).unwrap();
        assert_eq!(tape.value(y)[0], 6.2);
        assert!((tape.value(y)[1] - (6.2 - std::f64::consts::TAU)).abs() < 1e-12);
    }

    #[test]
    fn conv2d_stride_two_uses_floor_size() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(&Tensor::zeros(&[1, 2, 7, 8]));
        let w = tape.input(&Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
        let y1 = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y1), &[1, 3, 7, 8]);
    }
}
