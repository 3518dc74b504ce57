//! Convolutional recurrent cells built on a factorized grouped convolution.
//!
//! Every affine map `2N -> N` inside a cell is a [`FactorizedConv`]: a grouped
//! 1x1 convolution fusing input channel `i` with hidden channel `i` into
//! channel `i`, followed by a depthwise 3x3 convolution. Per output pixel that costs `2N + 9N = 11N`
//! multiply-accumulates instead of the `18N^2` of a dense 3x3 `2N -> N` conv.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOpts};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Recurrent cell flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of factorized convolutions (gates) in one cell.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn has_memory(self) -> bool {
        self == CellKind::Lstm
    }

    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Vanilla => &["gate_h"],
            CellKind::Gru => &["gate_z", "gate_r", "gate_h"],
            CellKind::Lstm => &["gate_i", "gate_f", "gate_o", "gate_g"],
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "vanilla" | "convrnn" => Ok(CellKind::Vanilla),
            "gru" | "convgru" => Ok(CellKind::Gru),
            "lstm" | "convlstm" => Ok(CellKind::Lstm),
            other => Err(Error::invalid(format!(
                "unknown cell kind {other:?} (expected rnn, gru or lstm)"
            ))),
        }
    }
}

/// Two-step grouped replacement for a dense 3x3 `2N -> N` convolution.
#[derive(Clone, Debug)]
pub struct FactorizedConv {
    /// `(N, 2, 1, 1)`, N groups over channel-interleaved `[x, h]`.
    pub pointwise: Conv2d,
    /// `(N, 1, 3, 3)`, N groups, padding 1.
    pub spatial: Conv2d,
    pub width: usize,
}

impl FactorizedConv {
    /// Bias-free pointwise stage; `bias` controls the spatial stage's bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("factorized conv width must be positive"));
        }
        let pointwise = Conv2d::new(
            store,
            &format!("{name}.pointwise"),
            2 * width,
            width,
            ConvOpts::k(1).groups(width),
            rng,
        )?;
        let spatial = Conv2d::new(
            store,
            &format!("{name}.spatial"),
            width,
            width,
            ConvOpts::k(3).groups(width).bias(bias),
            rng,
        )?;
        Ok(FactorizedConv {
            pointwise,
            spatial,
            width,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != 2 * self.width {
            return Err(Error::invalid(format!(
                "factorized conv expects {} input channels (2N, N = {}), got {c}",
                2 * self.width,
                self.width
            )));
        }
        let fused = self.pointwise.forward(tape, x)?;
        self.spatial.forward(tape, fused)
    }

    /// Bias-free weight count: `2N + 9N`.
    pub fn weight_count(width: usize) -> usize {
        11 * width
    }

    /// Multiply-accumulates per output pixel: `2N + 9N`.
    pub fn macs_per_pixel(width: usize) -> usize {
        11 * width
    }

    /// Dense 3x3 `2N -> N` convolution MACs per output pixel.
    pub fn dense_macs_per_pixel(width: usize) -> usize {
        18 * width * width
    }
}

/// Recurrent state threaded through one stage's blocks.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    /// Memory map, LSTM only.
    pub c: Option<Var>,
    pub step: usize,
}

/// Zero state of shape `(n, width, h, w)`.
pub fn init_state<T: Scalar>(
    tape: &mut Tape<'_, T>,
    kind: CellKind,
    n: usize,
    width: usize,
    h: usize,
    w: usize,
) -> Result<CellState> {
    let shape = Shape::new(n, width, h, w);
    let hv = tape.input(Tensor::zeros(shape))?;
    let c = if kind.has_memory() {
        Some(tape.input(Tensor::zeros(shape))?)
    } else {
        None
    };
    Ok(CellState { h: hv, c, step: 0 })
}

/// One regulator cell: the gate convolutions for a kind and width.
#[derive(Clone, Debug)]
pub struct ConvCell {
    pub kind: CellKind,
    pub width: usize,
    pub gates: Vec<FactorizedConv>,
}

impl ConvCell {
    /// Gates carry biases; the LSTM forget-gate bias starts at 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = kind
            .gate_names()
            .iter()
            .map(|g| FactorizedConv::new(store, &format!("{name}.{g}"), width, true, rng))
            .collect::<Result<Vec<_>>>()?;
        if kind == CellKind::Lstm {
            let b = gates[1].spatial.bias.expect("gates carry bias");
            store.param_mut(b).value.fill(T::one());
        }
        Ok(ConvCell { kind, width, gates })
    }

    pub fn num_params(&self) -> usize {
        self.gates
            .iter()
            .map(|g| g.pointwise.num_params() + g.spatial.num_params())
            .sum()
    }

    /// Advance one step: returns the raw hidden output and the next state.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        state: &CellState,
    ) -> Result<(Var, CellState)> {
        let (xs, hs) = (tape.shape(x), tape.shape(state.h));
        if xs != hs {
            return Err(Error::invalid(format!(
                "cell input {xs} does not match hidden state {hs}"
            )));
        }
        if xs.c != self.width {
            return Err(Error::invalid(format!(
                "cell of width {} got {} input channels",
                self.width, xs.c
            )));
        }
        match self.kind {
            CellKind::Vanilla => self.step_vanilla(tape, x, state),
            CellKind::Gru => self.step_gru(tape, x, state),
            CellKind::Lstm => self.step_lstm(tape, x, state),
        }
    }

    /// `H' = tanh(F([x, H]) + b)`.
    fn step_vanilla<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        s: &CellState,
    ) -> Result<(Var, CellState)> {
        let xh = tape.interleave_channels(x, s.h)?;
        let pre = self.gates[0].forward(tape, xh)?;
        let h = tape.tanh(pre)?;
        Ok((
            h,
            CellState {
                h,
                c: None,
                step: s.step + 1,
            },
        ))
    }

    /// `z = s(Fz[x,H])`, `r = s(Fr[x,H])`, `h~ = tanh(Fh[x, r*H])`,
    /// `H' = (1 - z) * H + z * h~`.
    fn step_gru<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        s: &CellState,
    ) -> Result<(Var, CellState)> {
        let xh = tape.interleave_channels(x, s.h)?;
        let z_pre = self.gates[0].forward(tape, xh)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = self.gates[1].forward(tape, xh)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, s.h)?;
        let xrh = tape.interleave_channels(x, rh)?;
        let cand_pre = self.gates[2].forward(tape, xrh)?;
        let cand = tape.tanh(cand_pre)?;
        // H + z * (h~ - H)
        let delta = tape.sub(cand, s.h)?;
        let upd = tape.mul(z, delta)?;
        let h = tape.add(s.h, upd)?;
        Ok((
            h,
            CellState {
                h,
                c: None,
                step: s.step + 1,
            },
        ))
    }

    /// `C' = f * C + i * g`, `H' = o * tanh(C')`, no peepholes.
    fn step_lstm<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        s: &CellState,
    ) -> Result<(Var, CellState)> {
        let c_prev =
            s.c.ok_or_else(|| Error::invalid("LSTM step requires a memory state"))?;
        let xh = tape.interleave_channels(x, s.h)?;
        let mut pre = Vec::with_capacity(4);
        for g in &self.gates {
            pre.push(g.forward(tape, xh)?);
        }
        let i = tape.sigmoid(pre[0])?;
        let f = tape.sigmoid(pre[1])?;
        let o = tape.sigmoid(pre[2])?;
        let g = tape.tanh(pre[3])?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((
            h,
            CellState {
                h,
                c: Some(c),
                step: s.step + 1,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore<f64>) {
        for p in store.params_mut() {
            p.value.fill(0.0);
        }
    }

    #[test]
    fn factorized_weight_count_is_11n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1usize, 4, 16, 64] {
            let mut store = ParamStore::<f32>::new();
            FactorizedConv::new(&mut store, "f", n, false, &mut rng).unwrap();
            assert_eq!(store.num_scalars(), FactorizedConv::weight_count(n));
            assert_eq!(store.num_scalars(), 11 * n);
        }
    }

    #[test]
    fn factorized_rejects_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let f = FactorizedConv::new(&mut store, "f", 3, false, &mut rng).unwrap();
        let mut tape = Tape::new(&mut store, Mode::Train);
        let x = tape.input(Tensor::zeros([1, 5, 4, 4])).unwrap();
        assert!(matches!(
            f.forward(&mut tape, x),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_state_is_zero_and_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&mut store, Mode::Train);
        let a = init_state(&mut tape, CellKind::Lstm, 2, 3, 5, 7).unwrap();
        let b = init_state(&mut tape, CellKind::Lstm, 2, 3, 5, 7).unwrap();
        assert_eq!(tape.shape(a.h), Shape::new(2, 3, 5, 7));
        assert_eq!(a.step, 0);
        assert_eq!(tape.value(a.h), tape.value(b.h));
        assert_eq!(tape.value(a.c.unwrap()), tape.value(b.c.unwrap()));
        assert!(tape.value(a.h).data().iter().all(|&v| v == 0.0));
        let g = init_state(&mut tape, CellKind::Gru, 1, 3, 2, 2).unwrap();
        assert!(g.c.is_none());
    }

    #[test]
    fn zero_weights_give_zero_output_for_every_kind() {
        for kind in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::<f64>::new();
            let cell = ConvCell::new(&mut store, "c", kind, 4, &mut rng).unwrap();
            zero_all(&mut store);
            let mut tape = Tape::new(&mut store, Mode::Train);
            let s = init_state(&mut tape, kind, 2, 4, 5, 5).unwrap();
            let x = tape.input(Tensor::randn([2, 4, 5, 5], &mut rng)).unwrap();
            let (h, s2) = cell.step(&mut tape, x, &s).unwrap();
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0), "{kind}");
            assert_eq!(s2.step, 1);
        }
    }

    #[test]
    fn vanilla_output_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Vanilla, 3, &mut rng).unwrap();
        let mut tape = Tape::new(&mut store, Mode::Train);
        let s = init_state(&mut tape, CellKind::Vanilla, 1, 3, 4, 4).unwrap();
        let x = tape.input(Tensor::randn([1, 3, 4, 4], &mut rng)).unwrap();
        let (h, s) = cell.step(&mut tape, x, &s).unwrap();
        let (h2, _) = cell.step(&mut tape, x, &s).unwrap();
        assert!(tape.value(h).data().iter().all(|v| v.abs() <= 1.0));
        assert!(tape.value(h2).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn gru_closed_update_gate_carries_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Gru, 4, &mut rng).unwrap();
        let zb = cell.gates[0].spatial.bias.unwrap();
        store.param_mut(zb).value.fill(-1000.0);
        let mut tape = Tape::new(&mut store, Mode::Train);
        let h0 = tape.input(Tensor::randn([2, 4, 5, 5], &mut rng)).unwrap();
        let s = CellState {
            h: h0,
            c: None,
            step: 0,
        };
        let x = tape.input(Tensor::randn([2, 4, 5, 5], &mut rng)).unwrap();
        let (h, _) = cell.step(&mut tape, x, &s).unwrap();
        let diff = tape
            .value(h)
            .zip_map(tape.value(h0), |a, b| (a - b).abs())
            .unwrap()
            .max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn gate_channel_reads_only_its_own_input_and_hidden_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Vanilla, 4, &mut rng).unwrap();
        let xv = Tensor::<f64>::randn([1, 4, 5, 5], &mut rng);
        let hv = Tensor::<f64>::randn([1, 4, 5, 5], &mut rng);
        let run = |store: &mut ParamStore<f64>, x: &Tensor<f64>, h: &Tensor<f64>| {
            let mut tape = Tape::new(store, Mode::Train);
            let (xv, hv) = (
                tape.input(x.clone()).unwrap(),
                tape.input(h.clone()).unwrap(),
            );
            let s = CellState {
                h: hv,
                c: None,
                step: 0,
            };
            let (out, _) = cell.step(&mut tape, xv, &s).unwrap();
            tape.value(out).clone()
        };
        let base = run(&mut store, &xv, &hv);
        for j in 0..4 {
            for which in 0..2 {
                let (mut x2, mut h2) = (xv.clone(), hv.clone());
                let t = if which == 0 { &mut x2 } else { &mut h2 };
                for v in &mut t.data_mut()[j * 25..(j + 1) * 25] {
                    *v += 1.0;
                }
                let y = run(&mut store, &x2, &h2);
                for c in 0..4 {
                    let changed =
                        y.data()[c * 25..(c + 1) * 25] != base.data()[c * 25..(c + 1) * 25];
                    assert_eq!(
                        changed,
                        c == j,
                        "perturbing {} channel {j} moved output {c}",
                        ["x", "h"][which]
                    );
                }
            }
        }
    }

    #[test]
    fn gru_open_update_gate_reduces_to_feedforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Gru, 4, &mut rng).unwrap();
        let zb = cell.gates[0].spatial.bias.unwrap();
        store.param_mut(zb).value.fill(1000.0);
        let xv = Tensor::randn([1, 4, 6, 6], &mut rng);
        let mut tape = Tape::new(&mut store, Mode::Train);
        let s = init_state(&mut tape, CellKind::Gru, 1, 4, 6, 6).unwrap();
        let x = tape.input(xv.clone()).unwrap();
        let (h, _) = cell.step(&mut tape, x, &s).unwrap();
        // expected: tanh(Fh([x, 0]))
        let zeros = tape.input(Tensor::zeros([1, 4, 6, 6])).unwrap();
        let xz = tape.interleave_channels(x, zeros).unwrap();
        let pre = cell.gates[2].forward(&mut tape, xz).unwrap();
        let expect = tape.tanh(pre).unwrap();
        assert_eq!(tape.value(h), tape.value(expect));
    }

    #[test]
    fn lstm_saturated_gates_preserve_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Lstm, 3, &mut rng).unwrap();
        let ib = cell.gates[0].spatial.bias.unwrap();
        let fb = cell.gates[1].spatial.bias.unwrap();
        store.param_mut(ib).value.fill(-1000.0);
        store.param_mut(fb).value.fill(1000.0);
        let mut tape = Tape::new(&mut store, Mode::Train);
        let h0 = tape.input(Tensor::randn([2, 3, 4, 4], &mut rng)).unwrap();
        let c0 = tape.input(Tensor::randn([2, 3, 4, 4], &mut rng)).unwrap();
        let s = CellState {
            h: h0,
            c: Some(c0),
            step: 0,
        };
        let x = tape.input(Tensor::randn([2, 3, 4, 4], &mut rng)).unwrap();
        let (_, s2) = cell.step(&mut tape, x, &s).unwrap();
        assert_eq!(tape.value(s2.c.unwrap()), tape.value(c0));
    }

    #[test]
    fn lstm_forget_bias_initialised_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Lstm, 2, &mut rng).unwrap();
        let fb = cell.gates[1].spatial.bias.unwrap();
        assert!(store.param(fb).value.data().iter().all(|&v| v == 1.0));
        let ib = cell.gates[0].spatial.bias.unwrap();
        assert!(store.param(ib).value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvCell::new(&mut store, "c", CellKind::Vanilla, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&mut store, Mode::Train);
        let s = init_state(&mut tape, CellKind::Vanilla, 1, 2, 4, 4).unwrap();
        let x = tape.input(Tensor::zeros([1, 2, 3, 3])).unwrap();
        assert!(matches!(
            cell.step(&mut tape, x, &s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("GRU".parse::<CellKind>().unwrap(), CellKind::Gru);
        assert_eq!("convlstm".parse::<CellKind>().unwrap(), CellKind::Lstm);
        assert_eq!(
            CellKind::Vanilla.to_string().parse::<CellKind>().unwrap(),
            CellKind::Vanilla
        );
        assert!("tcn".parse::<CellKind>().is_err());
    }
}
