use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    fresh_state, BasicBlock, BlockTap, Bottleneck, BottleneckRegBlock, RegBlock, Regulator,
    EXPANSION,
};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, Linear};
use crate::params::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

use super::spec::ArchSpec;

#[derive(Clone, Debug)]
pub enum Block {
    Basic(BasicBlock),
    Reg(RegBlock),
    Bottleneck(Bottleneck),
    BottleneckReg(BottleneckRegBlock),
}

impl Block {
    pub fn is_regulated(&self) -> bool {
        matches!(self, Block::Reg(_) | Block::BottleneckReg(_))
    }

    pub fn stride(&self) -> usize {
        match self {
            Block::Basic(b) => b.stride,
            Block::Reg(b) => b.stride,
            Block::Bottleneck(b) => b.stride,
            Block::BottleneckReg(b) => b.stride,
        }
    }

    /// Main-path weighted layers (shortcut projections excluded).
    pub fn main_path_layers(&self) -> usize {
        match self {
            Block::Basic(_) | Block::Reg(_) => 2,
            Block::Bottleneck(_) | Block::BottleneckReg(_) => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<Block>,
    pub regulator: Option<Regulator>,
    pub width: usize,
    pub out_channels: usize,
}

/// Executable layer structure; parameters live in the owning store.
#[derive(Clone, Debug)]
pub struct Model {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    /// 3x3/2 max-pool after the stem (bottleneck nets).
    pub stem_pool: bool,
    pub stages: Vec<Stage>,
    pub head: Linear,
    pub input: Shape,
}

/// Forward products: logits plus every block's taps in order.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub taps: Vec<BlockTap>,
}

impl Model {
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Weighted conv/linear layers on the main path.
    pub fn main_path_layers(&self) -> usize {
        2 + self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .map(Block::main_path_layers)
            .sum::<usize>()
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let want = self.input;
        if s.c != want.c || s.h != want.h || s.w != want.w || s.n == 0 {
            return Err(Error::invalid(format!(
                "network expects input (n, {}, {}, {}), got {s}",
                want.c, want.h, want.w
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<ForwardOut> {
        self.check_input(tape.shape(x))?;
        let y = self.stem.forward(tape, x)?;
        let y = self.stem_bn.forward(tape, y)?;
        let mut y = tape.relu(y)?;
        if self.stem_pool {
            y = tape.max_pool(y, 3, 2, 1)?;
        }
        let mut taps = Vec::with_capacity(self.num_blocks());
        for stage in &self.stages {
            let mut state = None;
            for block in &stage.blocks {
                let tap = match block {
                    Block::Basic(b) => b.forward(tape, y)?,
                    Block::Bottleneck(b) => b.forward(tape, y)?,
                    Block::Reg(_) | Block::BottleneckReg(_) => {
                        let reg = stage.regulator.as_ref().ok_or_else(|| {
                            Error::State("regulated block without a regulator".into())
                        })?;
                        let s = match state.take() {
                            Some(s) => s,
                            None => fresh_state(tape, reg, tape.shape(y), block.stride())?,
                        };
                        let (tap, next) = match block {
                            Block::Reg(b) => b.forward(tape, y, reg, &s)?,
                            Block::BottleneckReg(b) => b.forward(tape, y, reg, &s)?,
                            _ => unreachable!(),
                        };
                        state = Some(next);
                        tap
                    }
                };
                y = tap.output;
                taps.push(tap);
            }
        }
        let logits = self.classify(tape, y)?;
        Ok(ForwardOut { logits, taps })
    }

    /// Average-pool a feature map and apply the final linear head.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<'_, T>, feature: Var) -> Result<Var> {
        let c = tape.shape(feature).c;
        if c != self.head.in_features {
            return Err(Error::invalid(format!(
                "head takes {} channels but the feature map has {c}",
                self.head.in_features
            )));
        }
        let pooled = tape.global_avgpool(feature)?;
        self.head.forward(tape, pooled)
    }
}

/// A built network: spec, parameters and layer structure.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub spec: ArchSpec,
    pub store: ParamStore<T>,
    pub model: Model,
}

impl<T: Scalar> Network<T> {
    /// Materialize `spec` with parameters drawn from `seed`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = Shape::new(1, spec.input.channels, spec.input.height, spec.input.width);
        let bottleneck = spec.depth.is_bottleneck();
        let (stem, stem_c) = if bottleneck {
            let c = spec.widths[0];
            (
                Conv2d::new(
                    &mut store,
                    "stem.conv",
                    input.c,
                    c,
                    ConvOpts::k(7).stride(2),
                    &mut rng,
                )?,
                c,
            )
        } else {
            let c = spec.widths[0];
            (
                Conv2d::new(
                    &mut store,
                    "stem.conv",
                    input.c,
                    c,
                    ConvOpts::k(3),
                    &mut rng,
                )?,
                c,
            )
        };
        let stem_bn = BatchNorm2d::new(&mut store, "stem.bn", stem_c)?;
        let se = spec.se();
        let mut in_c = stem_c;
        let mut stages = Vec::new();
        let strides = spec.stage_strides();
        for (si, &blocks) in spec.stage_blocks().iter().enumerate() {
            let width = spec.widths[si];
            let regulated = spec.stage_regulated(si);
            let sname = format!("stage{}", si + 1);
            let regulator = if regulated {
                let kind = spec
                    .cell
                    .ok_or_else(|| Error::invalid("regulated stage needs a cell kind"))?;
                Some(Regulator::new(
                    &mut store,
                    &format!("{sname}.regulator"),
                    kind,
                    width,
                    &mut rng,
                )?)
            } else {
                None
            };
            let out_c = if bottleneck { width * EXPANSION } else { width };
            let mut list = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let name = format!("{sname}.block{}", bi + 1);
                let stride = if bi == 0 { strides[si] } else { 1 };
                let s = &mut store;
                let r = &mut rng;
                list.push(match (bottleneck, regulated) {
                    (false, false) => {
                        Block::Basic(BasicBlock::new(s, &name, in_c, width, stride, se, r)?)
                    }
                    (false, true) => {
                        Block::Reg(RegBlock::new(s, &name, in_c, width, stride, se, r)?)
                    }
                    (true, false) => {
                        Block::Bottleneck(Bottleneck::new(s, &name, in_c, width, stride, se, r)?)
                    }
                    (true, true) => Block::BottleneckReg(BottleneckRegBlock::new(
                        s, &name, in_c, width, stride, se, r,
                    )?),
                });
                in_c = out_c;
            }
            stages.push(Stage {
                blocks: list,
                regulator,
                width,
                out_channels: out_c,
            });
        }
        let head = Linear::new(&mut store, "head", in_c, spec.classes, true, &mut rng)?;
        Ok(Network {
            spec: spec.clone(),
            store,
            model: Model {
                stem,
                stem_bn,
                stem_pool: bottleneck,
                stages,
                head,
                input,
            },
        })
    }

    /// Trainable scalar count of the materialized network.
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Run `f` over a fresh tape bound to this network's parameters.
    pub fn run<R>(
        &mut self,
        mode: Mode,
        f: impl FnOnce(&Model, &mut Tape<'_, T>) -> Result<R>,
    ) -> Result<R> {
        let mut tape = Tape::new(&mut self.store, mode);
        f(&self.model, &mut tape)
    }

    /// Logits for a batch of images.
    pub fn logits(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.run(mode, |model, tape| {
            let x = tape.input(images.clone())?;
            let out = model.forward(tape, x)?;
            Ok(tape.value(out.logits).clone())
        })
    }

    /// Zero every regulator's cell and make every regulated block pass its own
    /// feature through the fusion convolution. In eval mode the network then
    /// computes exactly its plain counterpart.
    pub fn disable_regulators(&mut self) {
        for stage in &self.model.stages {
            if let Some(r) = &stage.regulator {
                r.zero(&mut self.store);
            }
            for b in &stage.blocks {
                match b {
                    Block::Reg(b) => b.disable_regulator(&mut self.store),
                    Block::BottleneckReg(b) => b.disable_regulator(&mut self.store),
                    _ => {}
                }
            }
        }
    }

    /// Copy every parameter and buffer whose name and shape match one in
    /// `other`. Returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in self.store.params_mut() {
            if let Some(id) = other.find_param(&p.name) {
                let src = &other.param(id).value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        for b in self.store.buffers_mut() {
            if let Some(id) = other.find_buffer(&b.name) {
                let src = &other.buffer(id).value;
                if src.shape() == b.value.shape() {
                    b.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut store = ParamStore::new();
        for p in self.store.params() {
            store
                .add_param(p.name.clone(), p.value.cast())
                .expect("names already unique");
        }
        for b in self.store.buffers() {
            store
                .add_buffer(b.name.clone(), b.value.cast())
                .expect("names already unique");
        }
        Network {
            spec: self.spec.clone(),
            store,
            model: self.model.clone(),
        }
    }
}
