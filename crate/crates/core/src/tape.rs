//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation called on a [`Tape`] computes its value eagerly and appends a
//! node recording its inputs and whatever intermediates its gradient rule
//! needs. Nodes only reference earlier nodes, so walking the list backwards is
//! a valid reverse topological order. [`Tape::backward`] consumes the tape:
//! a second call, or a call before anything was recorded, is a state error.

use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hyper-parameters and storage handles of one batch-norm site.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormRef {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Interleave(Var, Var),
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    SoftmaxXent {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradients of the non-parameter leaves after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::input`]; `None` if unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Operation record for one forward pass over a parameter store.
pub struct Tape<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Tape {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; start a new forward pass".into(),
            ));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{name} output")));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant/data leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, Op::Leaf)
    }

    /// Leaf for a parameter; repeated calls within one pass share the leaf.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = self.store.param(id);
        let name = p.name.clone();
        let value = p.value.clone();
        let v = self.push(&name, value, Op::Leaf)?;
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        self.push(
            "conv2d",
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
        )
    }

    /// Batch normalisation over (n, h, w) per channel. Train mode uses batch
    /// statistics and updates the running buffers; eval mode uses the buffers.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormRef) -> Result<Var> {
        let gamma = self.param(bn.gamma)?;
        let beta = self.param(bn.beta)?;
        let s = self.shape(x);
        let (c, plane) = (s.c, s.plane());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::invalid(format!(
                "batch_norm: scale/shift length {} != channels {c}",
                self.value(gamma).len()
            )));
        }
        let m = s.n * plane;
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if m < 2 {
                return Err(Error::invalid(format!(
                    "batch_norm: train mode needs at least 2 values per channel, got {m} for input {s}"
                )));
            }
            let xd = self.value(x).data();
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for n in 0..s.n {
                    let base = (n * c + ch) * plane;
                    acc += xd[base..base + plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                mean[ch] = acc / m as f64;
                let mut sq = 0.0;
                for n in 0..s.n {
                    let base = (n * c + ch) * plane;
                    sq += xd[base..base + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean[ch];
                            d * d
                        })
                        .sum::<f64>();
                }
                var[ch] = sq / m as f64;
            }
            let mom = bn.momentum;
            let unbias = m as f64 / (m as f64 - 1.0);
            let rm = self.store.buffer_mut(bn.running_mean);
            for (r, &mu) in rm.value.data_mut().iter_mut().zip(&mean) {
                *r = T::lit((1.0 - mom) * r.as_f64() + mom * mu);
            }
            let rv = self.store.buffer_mut(bn.running_var);
            for (r, &v) in rv.value.data_mut().iter_mut().zip(&var) {
                *r = T::lit((1.0 - mom) * r.as_f64() + mom * v * unbias);
            }
            (mean, var)
        } else {
            let mean = self
                .store
                .buffer(bn.running_mean)
                .value
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let var = self
                .store
                .buffer(bn.running_var)
                .value
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect();
            (mean, var)
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::lit(1.0 / (v + bn.eps).sqrt()))
            .collect();
        let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
        let xv = self.value(x);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        {
            let (xh, yd) = (xhat.data_mut(), y.data_mut());
            for (idx, &v) in xv.data().iter().enumerate() {
                let ch = (idx / plane) % c;
                let h = (v - mean[ch]) * inv_std[ch];
                xh[idx] = h;
                yd[idx] = gd[ch] * h + bd[ch];
            }
        }
        self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.tanh());
        self.push("tanh", y, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push("add", y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push("sub", y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push("mul", y, Op::Mul(a, b))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::invalid(format!(
                "concat_channels: batch/spatial mismatch {sa} vs {sb}"
            )));
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(out.numel());
        let (ca, cb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            data.extend_from_slice(&ad[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&bd[n * cb..(n + 1) * cb]);
        }
        let y = Tensor::from_vec(out, data)?;
        self.push("concat_channels", y, Op::Concat(a, b))
    }

    /// Channel interleave of equal-shaped maps: `[a0, b0, a1, b1, ...]`.
    pub fn interleave_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("interleave_channels", self.shape(a), self.shape(b))?;
        let s = self.shape(a);
        let plane = s.plane();
        let out = Shape::new(s.n, 2 * s.c, s.h, s.w);
        let mut data = Vec::with_capacity(out.numel());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for (pa, pb) in ad.chunks(plane).zip(bd.chunks(plane)) {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        let y = Tensor::from_vec(out, data)?;
        self.push("interleave_channels", y, Op::Interleave(a, b))
    }

    /// Mean over (h, w): `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        if plane == 0 {
            return Err(Error::invalid("global_avgpool: empty spatial extent"));
        }
        let scale = T::lit(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * scale)
            .collect();
        let y = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
        self.push("global_avgpool", y, Op::GlobalAvgPool(x))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let s = self.shape(x);
        if kernel == 0
            || stride == 0
            || padding >= kernel
            || s.h + 2 * padding < kernel
            || s.w + 2 * padding < kernel
        {
            return Err(Error::invalid(format!(
                "max_pool: kernel {kernel}, stride {stride}, padding {padding} invalid for input {s}"
            )));
        }
        let oh = (s.h + 2 * padding - kernel) / stride + 1;
        let ow = (s.w + 2 * padding - kernel) / stride + 1;
        let out = Shape::new(s.n, s.c, oh, ow);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(out.numel());
        let mut argmax = Vec::with_capacity(out.numel());
        for plane in 0..s.n * s.c {
            let base = plane * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * s.w + ix as usize;
                            if xd[idx] > best || at == usize::MAX {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(at);
                }
            }
        }
        let y = Tensor::from_vec(out, y)?;
        self.push("max_pool", y, Op::MaxPool { x, argmax })
    }

    /// Affine map `(n, k, 1, 1) -> (n, m, 1, 1)` with weight `(m, k, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.h != 1 || sx.w != 1 {
            return Err(Error::invalid(format!(
                "linear: input must be (n, k, 1, 1), got {sx}"
            )));
        }
        if sw.c * sw.h * sw.w != sx.c {
            return Err(Error::invalid(format!(
                "linear: weight {sw} does not accept {} input features",
                sx.c
            )));
        }
        let (n, k, m) = (sx.n, sx.c, sw.n);
        let mut y = Tensor::zeros(Shape::new(n, m, 1, 1));
        gemm_nt(
            n,
            k,
            m,
            self.value(x).data(),
            self.value(w).data(),
            y.data_mut(),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != m {
                return Err(Error::invalid(format!(
                    "linear: bias length {} != outputs {m}",
                    bd.len()
                )));
            }
            for row in y.data_mut().chunks_mut(m) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v += bv);
            }
        }
        self.push("linear", y, Op::Linear { x, w, b })
    }

    /// Per-channel rescale: `x (n,c,h,w) * s (n,c,1,1)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss != Shape::new(sx.n, sx.c, 1, 1) {
            return Err(Error::invalid(format!(
                "scale_channels: scale {ss} does not match input {sx}"
            )));
        }
        let plane = sx.plane();
        let sd = self.value(s).data();
        let mut y = self.value(x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sd[i]);
        }
        self.push("scale_channels", y, Op::ScaleChannels { x, s })
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_probs(self.value(logits), labels)?;
        let y = Tensor::from_vec(Shape::scalar(), vec![loss])?;
        self.push(
            "softmax_xent",
            y,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::from_vec(Shape::scalar(), vec![self.value(x).sum()])?;
        self.push("sum", y, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are written to
    /// the store (zeroed first, so unreachable parameters end at zero); leaf
    /// input gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State(
                "backward called twice without a new forward pass".into(),
            ));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.store.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        self.store.param_mut(pid).grad.add_assign(&g);
                    } else {
                        grads[i] = Some(g);
                    }
                }
                op => backprop(&self.nodes, i, op, &g, &mut grads)?,
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    op: &Op<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match op {
        Op::Leaf => unreachable!(),
        Op::Conv {
            x,
            w,
            b,
            stride,
            padding,
            groups,
        } => {
            let cg = conv2d_backward(val(*x), val(*w), g, b.is_some(), *stride, *padding, *groups)?;
            accumulate(grads, *x, cg.dx);
            accumulate(grads, *w, cg.dw);
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(grads, *b, db);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = g.shape();
            let (c, plane) = (s.c, s.plane());
            let m = (s.n * plane) as f64;
            let gd = g.data();
            let xh = xhat.data();
            let mut dbeta = vec![0.0f64; c];
            let mut dgamma = vec![0.0f64; c];
            for (idx, (&gv, &hv)) in gd.iter().zip(xh).enumerate() {
                let ch = (idx / plane) % c;
                dbeta[ch] += gv.as_f64();
                dgamma[ch] += (gv * hv).as_f64();
            }
            let gam = val(*gamma).data();
            let mut dx = Tensor::zeros(s);
            for (idx, d) in dx.data_mut().iter_mut().enumerate() {
                let ch = (idx / plane) % c;
                let scale = gam[ch] * inv_std[ch];
                *d = if *batch_stats {
                    scale * (gd[idx] - T::lit(dbeta[ch] / m) - xh[idx] * T::lit(dgamma[ch] / m))
                } else {
                    scale * gd[idx]
                };
            }
            accumulate(grads, *x, dx);
            let to_t = |v: Vec<f64>| {
                Tensor::from_vec(Shape::vector(c), v.into_iter().map(T::lit).collect())
            };
            accumulate(grads, *gamma, to_t(dgamma)?.reshape(val(*gamma).shape())?);
            accumulate(grads, *beta, to_t(dbeta)?.reshape(val(*beta).shape())?);
        }
        Op::Relu(x) => {
            let dx = g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() })?;
            accumulate(grads, *x, dx);
        }
        Op::Tanh(x) => {
            let dx = g.zip_map(out, |gv, y| gv * (T::one() - y * y))?;
            accumulate(grads, *x, dx);
        }
        Op::Sigmoid(x) => {
            let dx = g.zip_map(out, |gv, y| gv * y * (T::one() - y))?;
            accumulate(grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let da = g.zip_map(val(*b), |gv, bv| gv * bv)?;
            let db = g.zip_map(val(*a), |gv, av| gv * av)?;
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Concat(a, b) => {
            let ca = val(*a).shape().c;
            let cb = val(*b).shape().c;
            accumulate(grads, *a, g.channels(0, ca)?);
            accumulate(grads, *b, g.channels(ca, cb)?);
        }
        Op::Interleave(a, b) => {
            let s = val(*a).shape();
            let plane = s.plane();
            let mut da = Vec::with_capacity(s.numel());
            let mut db = Vec::with_capacity(s.numel());
            for pair in g.data().chunks(2 * plane) {
                da.extend_from_slice(&pair[..plane]);
                db.extend_from_slice(&pair[plane..]);
            }
            accumulate(grads, *a, Tensor::from_vec(s, da)?);
            accumulate(grads, *b, Tensor::from_vec(s, db)?);
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let plane = s.plane();
            let scale = T::lit(1.0 / plane as f64);
            let mut dx = Tensor::zeros(s);
            for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                chunk.fill(gv * scale);
            }
            accumulate(grads, *x, dx);
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            let dd = dx.data_mut();
            for (&at, &gv) in argmax.iter().zip(g.data()) {
                dd[at] += gv;
            }
            accumulate(grads, *x, dx);
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (val(*x).shape(), val(*w).shape());
            let (n, k, m) = (sx.n, sx.c, sw.n);
            let mut dx = Tensor::zeros(sx);
            // dx = g (n x m) * W (m x k)
            gemm_nn(n, m, k, g.data(), val(*w).data(), dx.data_mut());
            let mut dw = Tensor::zeros(sw);
            // dW = g^T (m x n) * x (n x k)
            gemm_tn(m, n, k, g.data(), val(*x).data(), dw.data_mut());
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
            if let Some(b) = b {
                let mut db = vec![T::zero(); m];
                for row in g.data().chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                let db = Tensor::from_vec(val(*b).shape(), db)?;
                accumulate(grads, *b, db);
            }
        }
        Op::ScaleChannels { x, s } => {
            let xs = val(*x);
            let plane = xs.shape().plane();
            let sd = val(*s).data();
            let mut dx = g.clone();
            for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v *= sd[i]);
            }
            let ds: Vec<T> = g
                .data()
                .chunks(plane)
                .zip(xs.data().chunks(plane))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                .collect();
            accumulate(grads, *x, dx);
            accumulate(grads, *s, Tensor::from_vec(val(*s).shape(), ds)?);
        }
        Op::SoftmaxXent {
            logits,
            probs,
            labels,
        } => {
            let upstream = g.data()[0];
            let mut d = softmax_grad(probs, labels);
            d.data_mut().iter_mut().for_each(|v| *v *= upstream);
            accumulate(grads, *logits, d);
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
        }
    }
    Ok(())
}

fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: extents asserted above, `c` uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m x n) = a (m x k) * b^T` where `b` is stored `n x k`.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_into(m, k, n, a, (k as isize, 1), b, (1, k as isize), c)
}

fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_into(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c)
}

/// `c (m x n) = a^T * b` where `a` is stored `k x m`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_into(m, k, n, a, (1, m as isize), b, (n as isize, 1), c)
}

/// Mean softmax cross-entropy and the class probabilities.
fn softmax_probs<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let classes = s.c * s.h * s.w;
    if labels.len() != s.n {
        return Err(Error::invalid(format!(
            "softmax_xent: {} labels for batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "softmax_xent: label {bad} out of range [0, {classes})"
        )));
    }
    let mut probs = logits.clone();
    let mut loss = 0.0f64;
    for (row, &label) in probs.data_mut().chunks_mut(classes).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += v.as_f64();
        }
        loss += z.ln() - row[label].as_f64().ln();
        let inv = T::lit(1.0 / z);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((T::lit(loss / s.n as f64), probs))
}

fn softmax_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let classes = probs.len() / labels.len().max(1);
    let inv_n = T::lit(1.0 / labels.len() as f64);
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(classes).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    d
}

/// Loss and `d loss / d logits` without recording anything.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (loss, probs) = softmax_probs(logits, labels)?;
    Ok((loss, softmax_grad(&probs, labels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn activations_at_known_points() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let x = t
            .input(Tensor::from_vec(Shape::vector(3), vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let th = t.tanh(x).unwrap();
        assert_eq!(t.value(th).data()[1], 0.0);
        let sg = t.sigmoid(x).unwrap();
        assert_eq!(t.value(sg).data()[1], 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let x = t.input(Tensor::full([2, 3, 2, 2], 0.3)).unwrap();
        let l = t.sum(x).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_state_errors() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        assert!(matches!(t.backward(Var(0)), Err(Error::State(_))));
        let x = t.input(Tensor::ones([1, 1, 1, 1])).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::State(_))));
        assert!(matches!(t.relu(x), Err(Error::State(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let bad = Tensor::from_vec(Shape::vector(2), vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.input(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        for classes in [2usize, 10, 100] {
            let logits = Tensor::<f64>::full([3, classes, 1, 1], 0.7);
            let (loss, _) = softmax_xent(&logits, &[0, 1, classes - 1]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-9, "{loss}");
        }
        let logits = Tensor::<f64>::zeros([1, 10, 1, 1]);
        assert!(softmax_xent(&logits, &[10]).is_err());
    }

    #[test]
    fn concat_shape_and_adjoint() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let a = t.input(Tensor::ones([1, 2, 4, 4])).unwrap();
        let b = t.input(Tensor::ones([1, 3, 4, 4])).unwrap();
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c), Shape::new(1, 5, 4, 4));
        let mut up = Tensor::<f64>::zeros([1, 5, 4, 4]);
        for (i, v) in up.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let w = t.input(up.clone()).unwrap();
        let p = t.mul(c, w).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &up.data()[..32]);
        assert_eq!(g.get(b).unwrap().data(), &up.data()[32..]);

        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let a = t.input(Tensor::ones([1, 2, 4, 4])).unwrap();
        let b = t.input(Tensor::ones([1, 3, 4, 3])).unwrap();
        assert!(t.concat_channels(a, b).is_err());
    }

    #[test]
    fn avgpool_of_constant() {
        let mut s = store();
        let mut t = Tape::new(&mut s, Mode::Train);
        let x = t.input(Tensor::full([2, 3, 5, 5], 4.25)).unwrap();
        let y = t.global_avgpool(x).unwrap();
        assert_eq!(t.shape(y), Shape::new(2, 3, 1, 1));
        assert!(t.value(y).data().iter().all(|&v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut s = store();
        let used = s
            .add_param("used", Tensor::full([1, 1, 1, 1], 2.0))
            .unwrap();
        let unused = s
            .add_param("unused", Tensor::full([1, 1, 1, 1], 2.0))
            .unwrap();
        s.param_mut(unused).grad.fill(7.0);
        let mut t = Tape::new(&mut s, Mode::Train);
        let p = t.param(used).unwrap();
        let q = t.mul(p, p).unwrap();
        let l = t.sum(q).unwrap();
        t.backward(l).unwrap();
        assert_eq!(s.param(used).grad.data()[0], 4.0);
        assert_eq!(s.param(unused).grad.data()[0], 0.0);
    }
}
