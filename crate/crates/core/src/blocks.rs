//! Residual building blocks, their regulated counterparts and the SE gate.
//!
//! Convolutions shared between a plain block and its regulated version carry
//! the same parameter names (`conv1`, `bn1`, ...), so a baseline network's
//! weights can be copied onto a regulated one by name. The regulated blocks
//! add a channel-fusion convolution (`fuse`, `bn_fuse`) that mixes the block
//! feature with the regulator's hidden state.

use rand::Rng;

use crate::convrnn::{init_state, CellKind, CellState, ConvCell};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, Linear};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape};

/// Output channels of a bottleneck block relative to its width.
pub const EXPANSION: usize = 4;

/// Feature maps exposed by a block for probing and export.
#[derive(Clone, Copy, Debug)]
pub struct BlockTap {
    /// Feature fed to the regulator (post first conv/BN/ReLU).
    pub input: Var,
    /// Regulator hidden state after this block; `None` for plain blocks.
    pub hidden: Option<Var>,
    /// Block output.
    pub output: Var,
}

/// 1x1 projection + BN used when the block changes resolution or width.
#[derive(Clone, Debug)]
pub struct Shortcut {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Shortcut {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Shortcut {
            conv: Conv2d::new(
                store,
                &format!("{name}.shortcut.conv"),
                in_c,
                out_c,
                ConvOpts::k(1).stride(stride),
                rng,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.shortcut.bn"), out_c)?,
        })
    }

    fn needed(in_c: usize, out_c: usize, stride: usize) -> bool {
        stride != 1 || in_c != out_c
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Option<Self>> {
        Shortcut::needed(in_c, out_c, stride)
            .then(|| Shortcut::new(store, name, in_c, out_c, stride, rng))
            .transpose()
    }
}

/// `relu(shortcut(x) + residual)`, failing if an identity shortcut cannot match.
fn merge<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    residual: Var,
    shortcut: Option<&Shortcut>,
) -> Result<Var> {
    let skip = match shortcut {
        Some(sc) => {
            let p = sc.conv.forward(tape, x)?;
            sc.bn.forward(tape, p)?
        }
        None => {
            if tape.shape(x) != tape.shape(residual) {
                return Err(Error::invalid(format!(
                    "identity shortcut cannot add input {} to residual {}; a projection shortcut is required",
                    tape.shape(x),
                    tape.shape(residual)
                )));
            }
            x
        }
    };
    let sum = tape.add(skip, residual)?;
    tape.relu(sum)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "block stride must be 1 or 2, got {stride}"
        )))
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
    pub reduction: usize,
}

impl SeGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "SE reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeGate {
            squeeze: Linear::new(
                store,
                &format!("{name}.squeeze"),
                channels,
                hidden,
                true,
                rng,
            )?,
            excite: Linear::new(
                store,
                &format!("{name}.excite"),
                hidden,
                channels,
                true,
                rng,
            )?,
            channels,
            reduction,
        })
    }

    /// Per-channel gate values in `(0, 1)`, shape `(n, c, 1, 1)`.
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "SE gate built for {} channels got {c}",
                self.channels
            )));
        }
        let pooled = tape.global_avgpool(x)?;
        let s = self.squeeze.forward(tape, pooled)?;
        let s = tape.relu(s)?;
        let e = self.excite.forward(tape, s)?;
        tape.sigmoid(e)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = self.gate(tape, x)?;
        tape.scale_channels(x, s)
    }
}

fn build_se<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
    se: Option<usize>,
    rng: &mut R,
) -> Result<Option<SeGate>> {
    se.map(|r| SeGate::new(store, &format!("{name}.se"), channels, r, rng))
        .transpose()
}

fn apply_se<T: Scalar>(tape: &mut Tape<'_, T>, se: Option<&SeGate>, x: Var) -> Result<Var> {
    match se {
        Some(g) => g.forward(tape, x),
        None => Ok(x),
    }
}

/// One recurrent regulator shared by all blocks of a stage: a cell followed by
/// `relu(bn(.))` on the hidden output. The post-activation hidden map is what
/// the blocks consume and what propagates to the next step; LSTM memory
/// propagates unnormalised.
#[derive(Clone, Debug)]
pub struct Regulator {
    pub cell: ConvCell,
    pub bn: BatchNorm2d,
}

impl Regulator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Regulator {
            cell: ConvCell::new(store, &format!("{name}.cell"), kind, width, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), width)?,
        })
    }

    pub fn width(&self) -> usize {
        self.cell.width
    }

    pub fn init_state<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<CellState> {
        init_state(tape, self.cell.kind, n, self.cell.width, h, w)
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        state: &CellState,
    ) -> Result<(Var, CellState)> {
        let (raw, next) = self.cell.step(tape, x, state)?;
        let normed = self.bn.forward(tape, raw)?;
        let h = tape.relu(normed)?;
        Ok((h, CellState { h, ..next }))
    }

    /// Zero every cell parameter.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for g in &self.cell.gates {
            for conv in [&g.pointwise, &g.spatial] {
                store.param_mut(conv.weight).value.fill(T::zero());
                if let Some(b) = conv.bias {
                    store.param_mut(b).value.fill(T::zero());
                }
            }
        }
    }
}

/// Fusion weights `[I | 0]`: pass the block feature through, ignore `H`.
fn set_passthrough_fusion<T: Scalar>(store: &mut ParamStore<T>, fuse: &Conv2d) {
    let w = &mut store.param_mut(fuse.weight).value;
    let (out_c, in_c) = (w.shape().n, w.shape().c);
    w.fill(T::zero());
    for o in 0..out_c.min(in_c) {
        w.data_mut()[o * in_c + o] = T::one();
    }
}

fn zero_bias<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv2d) {
    if let Some(b) = conv.bias {
        store.param_mut(b).value.fill(T::zero());
    }
}

/// Two 3x3 convolutions with an additive shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<Shortcut>,
    pub se: Option<SeGate>,
    pub stride: usize,
}

impl BasicBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        se: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        Ok(BasicBlock {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                in_c,
                out_c,
                ConvOpts::k(3).stride(stride),
                rng,
            )?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_c)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                out_c,
                out_c,
                ConvOpts::k(3),
                rng,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_c)?,
            shortcut: Shortcut::build(store, name, in_c, out_c, stride, rng)?,
            se: build_se(store, name, out_c, se, rng)?,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<BlockTap> {
        let a = self.conv1.forward(tape, x)?;
        let a = self.bn1.forward(tape, a)?;
        let x2 = tape.relu(a)?;
        let b = self.conv2.forward(tape, x2)?;
        let b = self.bn2.forward(tape, b)?;
        let r = apply_se(tape, self.se.as_ref(), b)?;
        let output = merge(tape, x, r, self.shortcut.as_ref())?;
        Ok(BlockTap {
            input: x2,
            hidden: None,
            output,
        })
    }
}

/// Regulated basic block:
/// `X2 = relu(bn(W12*X1 + b))`, `H = regulator(X2)`,
/// `X3 = relu(bn(W23*[X2, H]))`, `X4 = bn(W34*X3 + b)`, `out = relu(X1 + X4)`.
#[derive(Clone, Debug)]
pub struct RegBlock {
    /// W12, 3x3 with bias, carries the stride.
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    /// W23, 1x1 `2N -> N`, no bias.
    pub fuse: Conv2d,
    pub bn_fuse: BatchNorm2d,
    /// W34, 3x3 with bias.
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<Shortcut>,
    pub se: Option<SeGate>,
    pub stride: usize,
    pub width: usize,
}

impl RegBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        width: usize,
        stride: usize,
        se: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        Ok(RegBlock {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                in_c,
                width,
                ConvOpts::k(3).stride(stride).bias(true),
                rng,
            )?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width)?,
            fuse: Conv2d::new(
                store,
                &format!("{name}.fuse"),
                2 * width,
                width,
                ConvOpts::k(1),
                rng,
            )?,
            bn_fuse: BatchNorm2d::new(store, &format!("{name}.bn_fuse"), width)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                width,
                width,
                ConvOpts::k(3).bias(true),
                rng,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width)?,
            shortcut: Shortcut::build(store, name, in_c, width, stride, rng)?,
            se: build_se(store, name, width, se, rng)?,
            stride,
            width,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        regulator: &Regulator,
        state: &CellState,
    ) -> Result<(BlockTap, CellState)> {
        let a = self.conv1.forward(tape, x)?;
        let a = self.bn1.forward(tape, a)?;
        let x2 = tape.relu(a)?;
        let (h, next) = regulator.step(tape, x2, state)?;
        let cat = tape.concat_channels(x2, h)?;
        let f = self.fuse.forward(tape, cat)?;
        let f = self.bn_fuse.forward(tape, f)?;
        let x3 = tape.relu(f)?;
        let b = self.conv2.forward(tape, x3)?;
        let x4 = self.bn2.forward(tape, b)?;
        let r = apply_se(tape, self.se.as_ref(), x4)?;
        let output = merge(tape, x, r, self.shortcut.as_ref())?;
        Ok((
            BlockTap {
                input: x2,
                hidden: Some(h),
                output,
            },
            next,
        ))
    }

    /// Reduce to the plain block in eval mode: fusion `[I | 0]` with identity
    /// BN, conv biases zero. The regulator's output is then ignored.
    pub fn disable_regulator<T: Scalar>(&self, store: &mut ParamStore<T>) {
        set_passthrough_fusion(store, &self.fuse);
        self.bn_fuse.set_identity(store);
        zero_bias(store, &self.conv1);
        zero_bias(store, &self.conv2);
    }
}

/// 1x1 reduce, 3x3, 1x1 expand (x4) with an additive shortcut. The stride
/// sits on the first 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub shortcut: Option<Shortcut>,
    pub se: Option<SeGate>,
    pub stride: usize,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        width: usize,
        stride: usize,
        se: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        let out_c = width * EXPANSION;
        Ok(Bottleneck {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                in_c,
                width,
                ConvOpts::k(1).stride(stride),
                rng,
            )?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                width,
                width,
                ConvOpts::k(3),
                rng,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(
                store,
                &format!("{name}.conv3"),
                width,
                out_c,
                ConvOpts::k(1),
                rng,
            )?,
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out_c)?,
            shortcut: Shortcut::build(store, name, in_c, out_c, stride, rng)?,
            se: build_se(store, name, out_c, se, rng)?,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<BlockTap> {
        let a = self.conv1.forward(tape, x)?;
        let a = self.bn1.forward(tape, a)?;
        let x2 = tape.relu(a)?;
        let b = self.conv2.forward(tape, x2)?;
        let b = self.bn2.forward(tape, b)?;
        let x3 = tape.relu(b)?;
        let c = self.conv3.forward(tape, x3)?;
        let c = self.bn3.forward(tape, c)?;
        let r = apply_se(tape, self.se.as_ref(), c)?;
        let output = merge(tape, x, r, self.shortcut.as_ref())?;
        Ok(BlockTap {
            input: x2,
            hidden: None,
            output,
        })
    }
}

/// Regulated bottleneck block:
/// `X2 = relu(bn(W12*X1 + b))`, `H = regulator(X2)`, `X3 = relu(bn(W23*X2 + b))`,
/// `X4 = relu(bn(W34*[X3, H]))`, `X5 = bn(W45*X4 + b)`, `out = relu(X1 + X5)`.
#[derive(Clone, Debug)]
pub struct BottleneckRegBlock {
    /// W12, 1x1 with bias, carries the stride.
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    /// W23, 3x3 with bias.
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    /// W34, 1x1 `2N -> N`, no bias.
    pub fuse: Conv2d,
    pub bn_fuse: BatchNorm2d,
    /// W45, 1x1 `N -> 4N` with bias.
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub shortcut: Option<Shortcut>,
    pub se: Option<SeGate>,
    pub stride: usize,
    pub width: usize,
}

impl BottleneckRegBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        width: usize,
        stride: usize,
        se: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        let out_c = width * EXPANSION;
        Ok(BottleneckRegBlock {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                in_c,
                width,
                ConvOpts::k(1).stride(stride).bias(true),
                rng,
            )?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                width,
                width,
                ConvOpts::k(3).bias(true),
                rng,
            )?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width)?,
            fuse: Conv2d::new(
                store,
                &format!("{name}.fuse"),
                2 * width,
                width,
                ConvOpts::k(1),
                rng,
            )?,
            bn_fuse: BatchNorm2d::new(store, &format!("{name}.bn_fuse"), width)?,
            conv3: Conv2d::new(
                store,
                &format!("{name}.conv3"),
                width,
                out_c,
                ConvOpts::k(1).bias(true),
                rng,
            )?,
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out_c)?,
            shortcut: Shortcut::build(store, name, in_c, out_c, stride, rng)?,
            se: build_se(store, name, out_c, se, rng)?,
            stride,
            width,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        regulator: &Regulator,
        state: &CellState,
    ) -> Result<(BlockTap, CellState)> {
        let a = self.conv1.forward(tape, x)?;
        let a = self.bn1.forward(tape, a)?;
        let x2 = tape.relu(a)?;
        let (h, next) = regulator.step(tape, x2, state)?;
        let b = self.conv2.forward(tape, x2)?;
        let b = self.bn2.forward(tape, b)?;
        let x3 = tape.relu(b)?;
        let cat = tape.concat_channels(x3, h)?;
        let f = self.fuse.forward(tape, cat)?;
        let f = self.bn_fuse.forward(tape, f)?;
        let x4 = tape.relu(f)?;
        let c = self.conv3.forward(tape, x4)?;
        let x5 = self.bn3.forward(tape, c)?;
        let r = apply_se(tape, self.se.as_ref(), x5)?;
        let output = merge(tape, x, r, self.shortcut.as_ref())?;
        Ok((
            BlockTap {
                input: x2,
                hidden: Some(h),
                output,
            },
            next,
        ))
    }

    pub fn disable_regulator<T: Scalar>(&self, store: &mut ParamStore<T>) {
        set_passthrough_fusion(store, &self.fuse);
        self.bn_fuse.set_identity(store);
        zero_bias(store, &self.conv1);
        zero_bias(store, &self.conv2);
        zero_bias(store, &self.conv3);
    }
}

/// Working resolution of a block's first convolution output.
pub fn strided(shape: Shape, stride: usize) -> (usize, usize) {
    ((shape.h - 1) / stride + 1, (shape.w - 1) / stride + 1)
}

/// Zero state helper used when a stage begins.
pub fn fresh_state<T: Scalar>(
    tape: &mut Tape<'_, T>,
    regulator: &Regulator,
    input: Shape,
    stride: usize,
) -> Result<CellState> {
    let (h, w) = strided(input, stride);
    regulator.init_state(tape, input.n, h, w)
}
