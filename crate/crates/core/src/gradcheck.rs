//! Central finite-difference checks of reverse-mode gradients.
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, FLOOR)` where `a`
//! is the autodiff value and `n` the central difference. The floor keeps
//! round-off in near-zero gradients from dominating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    fresh_state, BasicBlock, Bottleneck, BottleneckRegBlock, RegBlock, Regulator, SeGate,
};
use crate::convrnn::{init_state, CellKind, ConvCell, FactorizedConv};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, Linear};
use crate::params::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Where the worst element sits (`input 0 [17]`, `param conv.weight [3]`).
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn eval_loss<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    f: &F,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store, mode);
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::invalid("gradient check loss must be scalar"));
    }
    Ok(v.data()[0])
}

/// Compare autodiff against central differences for every element of every
/// input and every parameter in `store`. `f` must be a deterministic function
/// of the inputs and parameter values that returns a scalar.
pub fn check<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let buffers: Vec<Tensor<f64>> = store.buffers().iter().map(|b| b.value.clone()).collect();
    let restore = |store: &mut ParamStore<f64>| {
        for (b, v) in store.buffers_mut().iter_mut().zip(&buffers) {
            b.value = v.clone();
        }
    };

    let input_grads: Vec<Tensor<f64>> = {
        let mut tape = Tape::new(store, mode);
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    };
    let param_grads: Vec<Tensor<f64>> = store.params().iter().map(|p| p.grad.clone()).collect();
    restore(store);

    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let mut note = |err: f64, loc: String| {
        checked += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, loc);
        }
    };

    let mut work = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for e in 0..work[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + STEP;
            let up = eval_loss(store, &work, mode, &f)?;
            restore(store);
            work[i].data_mut()[e] = orig - STEP;
            let down = eval_loss(store, &work, mode, &f)?;
            restore(store);
            work[i].data_mut()[e] = orig;
            note(
                rel_err(grad.data()[e], (up - down) / (2.0 * STEP)),
                format!("input {i} [{e}]"),
            );
        }
    }
    for (pi, grad) in param_grads.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = store.params()[pi].value.data()[e];
            store.params_mut()[pi].value.data_mut()[e] = orig + STEP;
            let up = eval_loss(store, inputs, mode, &f)?;
            restore(store);
            store.params_mut()[pi].value.data_mut()[e] = orig - STEP;
            let down = eval_loss(store, inputs, mode, &f)?;
            restore(store);
            store.params_mut()[pi].value.data_mut()[e] = orig;
            let pname = store.params()[pi].name.clone();
            note(
                rel_err(grad.data()[e], (up - down) / (2.0 * STEP)),
                format!("param {pname} [{e}]"),
            );
        }
    }
    Ok(GradCheckReport {
        name: name.to_owned(),
        max_rel_err: worst.0,
        checked,
        worst: worst.1,
    })
}

/// Scalar loss `sum(y * r)` with a fixed random projection `r`, so every
/// output element contributes a distinct weight to the gradient.
pub fn project(tape: &mut Tape<'_, f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.input(r.clone())?;
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, r)
}

/// Overwrite every entry with `offset + scale * U[0, 1)`.
fn resample(t: &mut Tensor<f64>, offset: f64, scale: f64, r: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = offset + scale * r.random::<f64>();
    }
}

/// Unary element-wise op on a `(2, 3, 4, 4)` input.
fn unary(
    name: &str,
    op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
    out: [usize; 4],
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = randn([2, 3, 4, 4], &mut r);
    let proj = randn(out, &mut r);
    let mut store = ParamStore::new();
    check(name, &mut store, &[x], Mode::Train, |t, v| {
        let y = op(t, v[0])?;
        project(t, y, &proj)
    })
}

/// Binary op on two `(2, 3, 4, 4)` inputs.
fn binary(
    name: &str,
    op: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>,
    out: [usize; 4],
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = randn([2, 3, 4, 4], &mut r);
    let b = randn([2, 3, 4, 4], &mut r);
    let proj = randn(out, &mut r);
    let mut store = ParamStore::new();
    check(name, &mut store, &[a, b], Mode::Train, |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, &proj)
    })
}

fn conv_case(
    name: &str,
    cin: usize,
    cout: usize,
    opts: ConvOpts,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", cin, cout, opts, &mut r)?;
    if let Some(b) = conv.bias {
        store.param_mut(b).value = Tensor::randn(Shape::vector(cout), &mut r);
    }
    let x = randn([2, cin, 5, 5], &mut r);
    let oh = (5 + 2 * opts.padding - opts.kernel) / opts.stride + 1;
    let proj = randn([2, cout, oh, oh], &mut r);
    check(name, &mut store, &[x], Mode::Train, |t, v| {
        let y = conv.forward(t, v[0])?;
        project(t, y, &proj)
    })
}

fn bn_case(name: &str, mode: Mode, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3)?;
    store.param_mut(bn.inner.gamma).value = Tensor::randn(Shape::vector(3), &mut r);
    store.param_mut(bn.inner.beta).value = Tensor::randn(Shape::vector(3), &mut r);
    store.buffer_mut(bn.inner.running_mean).value = Tensor::randn(Shape::vector(3), &mut r);
    store.buffer_mut(bn.inner.running_var).value = Tensor::zeros(Shape::vector(3));
    resample(
        &mut store.buffer_mut(bn.inner.running_var).value,
        0.5,
        1.0,
        &mut r,
    );
    let x = randn([2, 3, 4, 4], &mut r);
    let proj = randn([2, 3, 4, 4], &mut r);
    check(name, &mut store, &[x], mode, |t, v| {
        let y = bn.forward(t, v[0])?;
        project(t, y, &proj)
    })
}

/// Randomize BN affine parameters and running statistics so eval-mode
/// checks are not trivially at the identity.
fn jitter_bn(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        if p.name.contains("bn") && p.name.ends_with(".weight") {
            resample(&mut p.value, 1.0, 0.2, r);
        }
    }
    for b in store.buffers_mut() {
        if b.name.ends_with("running_mean") {
            resample(&mut b.value, -0.05, 0.1, r);
        } else {
            resample(&mut b.value, 0.5, 1.0, r);
        }
    }
}

fn cell_case(kind: CellKind, steps: usize, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cell = ConvCell::new(&mut store, "cell", kind, 3, &mut r)?;
    for p in store.params_mut() {
        if p.name.ends_with(".bias") {
            resample(&mut p.value, -0.25, 0.5, &mut r);
        }
    }
    let xs: Vec<Tensor<f64>> = (0..steps).map(|_| randn([2, 3, 4, 4], &mut r)).collect();
    let proj: Vec<Tensor<f64>> = (0..steps).map(|_| randn([2, 3, 4, 4], &mut r)).collect();
    let name = format!("cell {kind} ({steps}-step unroll)");
    check(&name, &mut store, &xs, Mode::Train, |t, v| {
        let mut s = init_state(t, kind, 2, 3, 4, 4)?;
        let mut total = None;
        for (x, p) in v.iter().zip(&proj) {
            let (h, next) = cell.step(t, *x, &s)?;
            s = next;
            let mut l = project(t, h, p)?;
            if let Some(c) = s.c {
                let lc = project(t, c, p)?;
                l = t.add(l, lc)?;
            }
            total = Some(match total {
                Some(acc) => t.add(acc, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::invalid("no steps"))
    })
}

/// One regulated block stepped twice with a shared regulator.
fn reg_block_case(
    bottleneck: bool,
    kind: CellKind,
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let (in_c, width, out_c) = if bottleneck { (4, 2, 8) } else { (2, 3, 3) };
    let reg = Regulator::new(&mut store, "reg", kind, width, &mut r)?;
    let first = if bottleneck {
        BlockImpl::BottleneckReg(BottleneckRegBlock::new(
            &mut store, "b1", in_c, width, 2, None, &mut r,
        )?)
    } else {
        BlockImpl::Reg(RegBlock::new(
            &mut store, "b1", in_c, width, 2, None, &mut r,
        )?)
    };
    let second = if bottleneck {
        BlockImpl::BottleneckReg(BottleneckRegBlock::new(
            &mut store, "b2", out_c, width, 1, None, &mut r,
        )?)
    } else {
        BlockImpl::Reg(RegBlock::new(
            &mut store, "b2", out_c, width, 1, None, &mut r,
        )?)
    };
    for p in store.params_mut() {
        if p.name.ends_with(".bias") {
            resample(&mut p.value, -0.1, 0.2, &mut r);
        }
    }
    if mode == Mode::Eval {
        jitter_bn(&mut store, &mut r);
    }
    let x = randn([2, in_c, 6, 6], &mut r);
    let proj = randn([2, out_c, 3, 3], &mut r);
    let name = format!(
        "{} block, {kind} regulator, 2 steps, {}",
        if bottleneck {
            "bottleneck regnet"
        } else {
            "regnet"
        },
        if mode == Mode::Train { "train" } else { "eval" }
    );
    check(&name, &mut store, &[x], mode, |t, v| {
        let s0 = fresh_state(t, &reg, t.shape(v[0]), 2)?;
        let (tap1, s1) = first.forward(t, v[0], &reg, &s0)?;
        let (tap2, _) = second.forward(t, tap1.output, &reg, &s1)?;
        project(t, tap2.output, &proj)
    })
}

enum BlockImpl {
    Reg(RegBlock),
    BottleneckReg(BottleneckRegBlock),
}

impl BlockImpl {
    fn forward(
        &self,
        t: &mut Tape<'_, f64>,
        x: Var,
        reg: &Regulator,
        s: &crate::convrnn::CellState,
    ) -> Result<(crate::blocks::BlockTap, crate::convrnn::CellState)> {
        match self {
            BlockImpl::Reg(b) => b.forward(t, x, reg, s),
            BlockImpl::BottleneckReg(b) => b.forward(t, x, reg, s),
        }
    }
}

/// Finite-difference checks over every differentiable operation, every block
/// type and every cell kind. Deterministic: fixed seeds throughout.
pub fn suite() -> Result<Vec<GradCheckReport>> {
    let mut out = vec![
        conv_case("conv2d 3x3 pad 1", 3, 4, ConvOpts::k(3).bias(true), 1)?,
        conv_case("conv2d 3x3 stride 2", 3, 2, ConvOpts::k(3).stride(2), 2)?,
        conv_case("conv2d 1x1 grouped", 4, 2, ConvOpts::k(1).groups(2), 3)?,
        conv_case(
            "conv2d 3x3 depthwise",
            3,
            3,
            ConvOpts::k(3).groups(3).bias(true),
            4,
        )?,
        conv_case("conv2d 5x5 no pad", 2, 2, ConvOpts::k(5).padding(0), 5)?,
        bn_case("batchnorm2d train", Mode::Train, 6)?,
        bn_case("batchnorm2d eval", Mode::Eval, 7)?,
        unary("relu", |t, x| t.relu(x), [2, 3, 4, 4], 8)?,
        unary("tanh", |t, x| t.tanh(x), [2, 3, 4, 4], 9)?,
        unary("sigmoid", |t, x| t.sigmoid(x), [2, 3, 4, 4], 10)?,
        unary(
            "global_avgpool",
            |t, x| t.global_avgpool(x),
            [2, 3, 1, 1],
            11,
        )?,
        unary(
            "max_pool 3x3/2 pad 1",
            |t, x| t.max_pool(x, 3, 2, 1),
            [2, 3, 2, 2],
            12,
        )?,
        binary("add", |t, a, b| t.add(a, b), [2, 3, 4, 4], 13)?,
        binary("sub", |t, a, b| t.sub(a, b), [2, 3, 4, 4], 14)?,
        binary("mul", |t, a, b| t.mul(a, b), [2, 3, 4, 4], 15)?,
        binary(
            "concat_channels",
            |t, a, b| t.concat_channels(a, b),
            [2, 6, 4, 4],
            16,
        )?,
        binary(
            "interleave_channels",
            |t, a, b| t.interleave_channels(a, b),
            [2, 6, 4, 4],
            27,
        )?,
    ];
    {
        let mut r = rng(17);
        let x = randn([3, 5, 1, 1], &mut r);
        let w = randn([4, 5, 1, 1], &mut r);
        let b = randn([4, 1, 1, 1], &mut r);
        let proj = randn([3, 4, 1, 1], &mut r);
        let mut store = ParamStore::new();
        out.push(check(
            "linear",
            &mut store,
            &[x, w, b],
            Mode::Train,
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, &proj)
            },
        )?);
    }
    {
        let mut r = rng(18);
        let x = randn([2, 3, 4, 4], &mut r);
        let s = randn([2, 3, 1, 1], &mut r);
        let proj = randn([2, 3, 4, 4], &mut r);
        let mut store = ParamStore::new();
        out.push(check(
            "scale_channels",
            &mut store,
            &[x, s],
            Mode::Train,
            |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                project(t, y, &proj)
            },
        )?);
    }
    {
        let mut r = rng(19);
        let logits = randn([4, 10, 1, 1], &mut r);
        let labels = [3usize, 0, 9, 3];
        let mut store = ParamStore::new();
        out.push(check(
            "softmax_xent",
            &mut store,
            &[logits],
            Mode::Train,
            |t, v| t.softmax_xent(v[0], &labels),
        )?);
    }
    {
        let mut r = rng(20);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, ConvOpts::k(3).bias(true), &mut r)?;
        let fc = Linear::new(&mut store, "fc", 3, 4, true, &mut r)?;
        let x = randn([2, 2, 5, 5], &mut r);
        out.push(check(
            "two-layer conv+relu+linear",
            &mut store,
            &[x],
            Mode::Train,
            |t, v| {
                let h = conv.forward(t, v[0])?;
                let h = t.relu(h)?;
                let p = t.global_avgpool(h)?;
                let y = fc.forward(t, p)?;
                t.softmax_xent(y, &[1, 3])
            },
        )?);
    }
    {
        let mut r = rng(21);
        let mut store = ParamStore::new();
        let fc = FactorizedConv::new(&mut store, "fact", 3, true, &mut r)?;
        let x = randn([2, 6, 4, 4], &mut r);
        let proj = randn([2, 3, 4, 4], &mut r);
        out.push(check(
            "factorized_conv",
            &mut store,
            &[x],
            Mode::Train,
            |t, v| {
                let y = fc.forward(t, v[0])?;
                project(t, y, &proj)
            },
        )?);
    }
    for (seed, se) in [(22, None), (23, Some(2))] {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let b = BasicBlock::new(&mut store, "blk", 2, 4, 2, se, &mut r)?;
        let x = randn([2, 2, 6, 6], &mut r);
        let proj = randn([2, 4, 3, 3], &mut r);
        let name = if se.is_some() {
            "basic block + SE, stride 2"
        } else {
            "basic block, stride 2"
        };
        out.push(check(name, &mut store, &[x], Mode::Train, |t, v| {
            let tap = b.forward(t, v[0])?;
            project(t, tap.output, &proj)
        })?);
    }
    {
        let mut r = rng(24);
        let mut store = ParamStore::new();
        let b = BasicBlock::new(&mut store, "blk", 3, 3, 1, None, &mut r)?;
        jitter_bn(&mut store, &mut r);
        let x = randn([2, 3, 4, 4], &mut r);
        let proj = randn([2, 3, 4, 4], &mut r);
        out.push(check(
            "basic block, identity shortcut, eval",
            &mut store,
            &[x],
            Mode::Eval,
            |t, v| {
                let tap = b.forward(t, v[0])?;
                project(t, tap.output, &proj)
            },
        )?);
    }
    {
        let mut r = rng(25);
        let mut store = ParamStore::new();
        let b = Bottleneck::new(&mut store, "blk", 4, 2, 2, None, &mut r)?;
        let x = randn([2, 4, 6, 6], &mut r);
        let proj = randn([2, 8, 3, 3], &mut r);
        out.push(check(
            "bottleneck block, stride 2",
            &mut store,
            &[x],
            Mode::Train,
            |t, v| {
                let tap = b.forward(t, v[0])?;
                project(t, tap.output, &proj)
            },
        )?);
    }
    {
        let mut r = rng(26);
        let mut store = ParamStore::new();
        let g = SeGate::new(&mut store, "se", 4, 2, &mut r)?;
        let x = randn([2, 4, 3, 3], &mut r);
        let proj = randn([2, 4, 3, 3], &mut r);
        out.push(check("se gate", &mut store, &[x], Mode::Train, |t, v| {
            let y = g.forward(t, v[0])?;
            project(t, y, &proj)
        })?);
    }
    for (i, kind) in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm]
        .into_iter()
        .enumerate()
    {
        out.push(cell_case(kind, 2, 30 + i as u64)?);
    }
    for (i, kind) in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm]
        .into_iter()
        .enumerate()
    {
        out.push(reg_block_case(false, kind, Mode::Train, 40 + i as u64)?);
    }
    out.push(reg_block_case(false, CellKind::Gru, Mode::Eval, 43)?);
    for (i, kind) in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm]
        .into_iter()
        .enumerate()
    {
        out.push(reg_block_case(true, kind, Mode::Train, 50 + i as u64)?);
    }
    Ok(out)
}

/// Single-cell unrolled check, exposed for property tests over `steps`.
pub fn cell_unroll(kind: CellKind, steps: usize, seed: u64) -> Result<GradCheckReport> {
    cell_case(kind, steps, seed)
}
