//! Flag sets and their resolution into library types.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use regnet::arch::{preset, ArchSpec, ConfigOverrides, Family};
use regnet::pipeline::{default_data_dir, Variant};
use regnet::trainer::{LrSchedule, TrainConfig};
use regnet::Error;

#[derive(Debug, Parser)]
#[command(
    name = "regnet",
    version,
    about = "ResNets regulated by convolutional RNNs: train, evaluate, count, probe"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics, checkpoint and config to an output directory.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalCmd),
    /// Per-layer parameter / MAC / FLOP report as CSV.
    Count(CountCmd),
    /// Per-layer cost difference `a - b` as CSV.
    Diff(DiffCmd),
    /// Finite-difference gradient suite; one CSV row per case.
    Gradcheck(GradcheckCmd),
    /// Dump I, H and O feature maps of chosen blocks.
    ExportFeatures(ExportCmd),
    /// Accuracy of the final head on chosen blocks' pooled outputs.
    Probe(ProbeCmd),
}

/// Architecture selection. `--arch` takes a preset (`regnet-gru-n3`) or a
/// bare family (`resnet`); `--config` a `key = value` file. Individual flags
/// override both.
#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    #[arg(long)]
    pub arch: Option<String>,
    /// Config file; architecture keys plus, for `train`, training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// rnn, gru, lstm or none.
    #[arg(long)]
    pub cell: Option<String>,
    /// Blocks per stage of the (6n + 2)-layer CIFAR network.
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated bottleneck blocks per stage, e.g. 3,4,6,3.
    #[arg(long)]
    pub stage_blocks: Option<String>,
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// channels,height,width
    #[arg(long)]
    pub input: Option<String>,
    /// Comma-separated 0/1 per stage.
    #[arg(long)]
    pub regulated_stages: Option<String>,
    #[arg(long)]
    pub se_reduction: Option<usize>,
}

/// Training keys a config file may carry next to the architecture keys.
pub const TRAIN_KEYS: [&str; 11] = [
    "lr",
    "decay_epochs",
    "decay_factor",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "seed",
    "eval_every",
    "augment",
    "checkpoint",
];

/// Split a config file into architecture and training `(key, value)` pairs.
pub fn read_config(path: &Path) -> Result<(Vec<(String, String)>, Vec<(String, String)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (mut arch, mut train) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                i + 1
            ))
        })?;
        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_owned());
        if TRAIN_KEYS.contains(&k.as_str()) {
            train.push((k, v));
        } else {
            arch.push((k, v));
        }
    }
    Ok((arch, train))
}

impl ArchArgs {
    fn flag_overrides(&self) -> Result<ConfigOverrides> {
        let mut o = ConfigOverrides::default();
        let pairs = [
            ("family", self.family.clone()),
            ("cell", self.cell.clone()),
            ("n", self.n.map(|v| v.to_string())),
            ("stage_blocks", self.stage_blocks.clone()),
            ("widths", self.widths.clone()),
            ("classes", self.classes.map(|v| v.to_string())),
            ("input", self.input.clone()),
            ("regulated_stages", self.regulated_stages.clone()),
            ("se_reduction", self.se_reduction.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                o.set(k, &v)
                    .with_context(|| format!("--{}", k.replace('_', "-")))?;
            }
        }
        Ok(o)
    }

    /// Preset or family from `--arch`, then the config file, then flags.
    pub fn resolve(&self) -> Result<ArchSpec> {
        let mut base = None;
        let mut o = ConfigOverrides::default();
        if let Some(a) = &self.arch {
            match (preset(a), a.parse::<Family>()) {
                (Ok(s), _) => base = Some(s),
                (Err(_), Ok(f)) => o.family = Some(f),
                (Err(e), Err(_)) => return Err(e.into()),
            }
        }
        if let Some(path) = &self.config {
            let (arch, _) = read_config(path)?;
            for (k, v) in &arch {
                o.set(k, v).with_context(|| path.display().to_string())?;
            }
        }
        let flags = self.flag_overrides()?;
        merge(&mut o, flags);
        match base {
            Some(b) => Ok(o.apply(&b)?),
            None if o.family.is_some() => Ok(o.build()?),
            None => Err(Error::InvalidArgument(
                "no architecture given: pass --arch (e.g. regnet-gru-n3), --config or --family"
                    .into(),
            )
            .into()),
        }
    }
}

fn merge(o: &mut ConfigOverrides, top: ConfigOverrides) {
    o.family = top.family.or(o.family);
    o.cell = top.cell.or(o.cell);
    if top.n.is_some() || top.stage_blocks.is_some() {
        o.n = top.n;
        o.stage_blocks = top.stage_blocks;
    }
    o.widths = top.widths.or(o.widths.take());
    o.classes = top.classes.or(o.classes);
    o.input = top.input.or(o.input);
    o.regulated_stages = top.regulated_stages.or(o.regulated_stages.take());
    o.se_reduction = top.se_reduction.or(o.se_reduction);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// lr 0.1, /10 at epoch 80, 150 epochs, batch 64.
    Cifar,
    /// Same schedule shape, 20 epochs (decay at 15), 5,000-image subset.
    Desk,
    /// lr 0.06, /10 at epochs 50 and 70, 90 epochs, batch 128.
    Imagenet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    C10,
    C100,
}

impl From<Dataset> for Variant {
    fn from(d: Dataset) -> Self {
        match d {
            Dataset::C10 => Variant::C10,
            Dataset::C100 => Variant::C100,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CIFAR binary directory [default: $REGNET_DATA_DIR, else
    /// data/cifar-10-batches-bin or data/cifar-100-binary]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Defaults to c100 for 100-class networks, c10 otherwise.
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    /// Replace CIFAR by N generated images (smoke runs without data).
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

impl DataArgs {
    pub fn variant(&self, classes: usize) -> Variant {
        self.dataset
            .map(Variant::from)
            .unwrap_or(if classes == 100 {
                Variant::C100
            } else {
                Variant::C10
            })
    }

    pub fn dir(&self, variant: Variant) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| default_data_dir(variant))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub protocol: Protocol,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the rate is multiplied by --decay-factor.
    #[arg(long)]
    pub decay_epochs: Option<String>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate and checkpoint every this many epochs; 0 disables.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// Training images to keep (seed-pinned subset); 0 keeps all. Desk protocol defaults to 5000.
    #[arg(long)]
    pub subset: Option<usize>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{key}: cannot parse {v:?}")).into())
}

fn parse_epochs(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x)).collect()
}

impl TrainArgs {
    /// Protocol defaults, then config-file keys, then flags. Also returns
    /// the checkpoint path a config file may name.
    pub fn resolve(&self, config: &[(String, String)]) -> Result<(TrainConfig, Option<PathBuf>)> {
        let mut c = match self.protocol {
            Protocol::Cifar => TrainConfig::cifar(),
            Protocol::Desk => TrainConfig::desk(),
            Protocol::Imagenet => TrainConfig::imagenet(),
        };
        let mut checkpoint = None;
        let mut apply = |k: &str, v: &str, c: &mut TrainConfig| -> Result<()> {
            match k {
                "lr" => c.schedule.initial = parse_num(k, v)?,
                "decay_epochs" => c.schedule.decay_epochs = parse_epochs(k, v)?,
                "decay_factor" => c.schedule.factor = parse_num(k, v)?,
                "momentum" => c.momentum = parse_num(k, v)?,
                "weight_decay" => c.weight_decay = parse_num(k, v)?,
                "epochs" => c.epochs = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "eval_every" => c.eval_every = parse_num(k, v)?,
                "augment" => c.augment = parse_num(k, v)?,
                "checkpoint" => checkpoint = Some(PathBuf::from(v)),
                other => {
                    return Err(Error::Format(format!("unknown training key {other:?}")).into())
                }
            }
            Ok(())
        };
        for (k, v) in config {
            apply(k, v, &mut c)?;
        }
        let flags = [
            ("lr", self.lr.map(|v| v.to_string())),
            ("decay_epochs", self.decay_epochs.clone()),
            ("decay_factor", self.decay_factor.map(|v| v.to_string())),
            ("momentum", self.momentum.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
            ("augment", self.augment.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                apply(k, &v, &mut c)?;
            }
        }
        c.validate()?;
        Ok((c, checkpoint))
    }

    pub fn subset(&self) -> usize {
        self.subset.unwrap_or(if self.protocol == Protocol::Desk {
            5000
        } else {
            0
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for metrics.csv, checkpoint.ck and arch.cfg.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Checkpoint path [default: <out>/checkpoint.ck].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint; architecture and optimizer state come from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// With `--split train`: score the same seed-pinned subset the run trained on.
    #[arg(long, default_value_t = 0)]
    pub subset: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct CountCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// One row per stage instead of per layer.
    #[arg(long)]
    pub by_stage: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffCmd {
    /// Preset name or config file.
    #[arg(long)]
    pub a: String,
    /// Preset name or config file.
    #[arg(long)]
    pub b: String,
    #[arg(long)]
    pub by_stage: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Network source shared by export-features and probe.
#[derive(Debug, Args)]
pub struct NetArgs {
    /// Trained checkpoint; without it a fresh network is built from the arch flags.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Initialization seed for a fresh network.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportCmd {
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated 1-based block indices.
    #[arg(long)]
    pub blocks: String,
    /// Number of test images to push through.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    /// Feature dump path; the manifest goes to <out>.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeCmd {
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated 1-based block indices [default: the last three, within the final stage]
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_blocks(v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num("--blocks", x)).collect()
}

/// A preset name, or a config file if the path exists.
pub fn spec_from(name: &str) -> Result<ArchSpec> {
    let path = Path::new(name);
    if path.is_file() {
        ArchArgs {
            config: Some(path.to_path_buf()),
            ..ArchArgs::default()
        }
        .resolve()
    } else {
        Ok(preset(name)?)
    }
}

/// One-line summary of a training config for the log.
pub fn describe(c: &TrainConfig) -> String {
    let LrSchedule {
        initial,
        decay_epochs,
        factor,
    } = &c.schedule;
    format!(
        "lr {initial} x{factor} at {decay_epochs:?}, momentum {}, wd {}, {} epochs, batch {}, seed {}, augment {}",
        c.momentum, c.weight_decay, c.epochs, c.batch_size, c.seed, c.augment
    )
}
