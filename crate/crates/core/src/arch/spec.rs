use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::convrnn::CellKind;
use crate::error::{Error, Result};

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    ResNet,
    RegNet,
    SeResNet,
    SeRegNet,
}

impl Family {
    pub fn is_regulated(self) -> bool {
        matches!(self, Family::RegNet | Family::SeRegNet)
    }

    pub fn has_se(self) -> bool {
        matches!(self, Family::SeResNet | Family::SeRegNet)
    }

    /// Family without its regulator (the natural baseline).
    pub fn baseline(self) -> Family {
        match self {
            Family::RegNet => Family::ResNet,
            Family::SeRegNet => Family::SeResNet,
            f => f,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ResNet => "resnet",
            Family::RegNet => "regnet",
            Family::SeResNet => "se-resnet",
            Family::SeRegNet => "se-regnet",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "resnet" => Ok(Family::ResNet),
            "regnet" => Ok(Family::RegNet),
            "se-resnet" | "seresnet" => Ok(Family::SeResNet),
            "se-regnet" | "seregnet" => Ok(Family::SeRegNet),
            other => Err(Error::invalid(format!(
                "unknown family {other:?} (expected resnet, regnet, se-resnet or se-regnet)"
            ))),
        }
    }
}

/// Depth descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Depth {
    /// CIFAR layout: three stages of `n` basic blocks, `6n + 2` layers.
    Cifar { n: usize },
    /// Bottleneck layout with explicit per-stage block counts.
    Bottleneck { stage_blocks: Vec<usize> },
}

impl Depth {
    pub fn stage_blocks(&self) -> Vec<usize> {
        match self {
            Depth::Cifar { n } => vec![*n; 3],
            Depth::Bottleneck { stage_blocks } => stage_blocks.clone(),
        }
    }

    pub fn is_bottleneck(&self) -> bool {
        matches!(self, Depth::Bottleneck { .. })
    }

    /// Weighted layers on the main path: stem + convs per block + head.
    pub fn layers(&self) -> usize {
        match self {
            Depth::Cifar { n } => 6 * n + 2,
            Depth::Bottleneck { stage_blocks } => 3 * stage_blocks.iter().sum::<usize>() + 2,
        }
    }
}

pub const CIFAR_WIDTHS: [usize; 3] = [16, 32, 64];
pub const BOTTLENECK_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const DEFAULT_SE_REDUCTION: usize = 8;

/// Channels, height, width of one input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputGeometry {
    pub const CIFAR: InputGeometry = InputGeometry {
        channels: 3,
        height: 32,
        width: 32,
    };
    pub const IMAGENET: InputGeometry = InputGeometry {
        channels: 3,
        height: 224,
        width: 224,
    };
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub cell: Option<CellKind>,
    pub depth: Depth,
    /// Stage widths (bottleneck width `N` for bottleneck stages).
    pub widths: Vec<usize>,
    pub classes: usize,
    pub input: InputGeometry,
    /// Which stages carry a regulator.
    pub regulated_stages: Vec<bool>,
    pub se_reduction: usize,
}

impl ArchSpec {
    /// `(6n + 2)`-layer CIFAR network; regulated families regulate every stage.
    pub fn cifar(family: Family, cell: Option<CellKind>, n: usize, classes: usize) -> Self {
        ArchSpec {
            family,
            cell: if family.is_regulated() { cell } else { None },
            depth: Depth::Cifar { n },
            widths: CIFAR_WIDTHS.to_vec(),
            classes,
            input: InputGeometry::CIFAR,
            regulated_stages: vec![family.is_regulated(); 3],
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }

    /// 50-layer bottleneck network, stages (3, 4, 6, 3).
    pub fn bottleneck50(family: Family, cell: Option<CellKind>, classes: usize) -> Self {
        ArchSpec {
            family,
            cell: if family.is_regulated() { cell } else { None },
            depth: Depth::Bottleneck {
                stage_blocks: RESNET50_BLOCKS.to_vec(),
            },
            widths: BOTTLENECK_WIDTHS.to_vec(),
            classes,
            input: InputGeometry::IMAGENET,
            regulated_stages: vec![family.is_regulated(); 4],
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }

    /// Same spec with only the listed (0-based) stages regulated.
    pub fn with_regulated(mut self, stages: &[usize]) -> Self {
        for (i, r) in self.regulated_stages.iter_mut().enumerate() {
            *r = stages.contains(&i);
        }
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn stage_blocks(&self) -> Vec<usize> {
        self.depth.stage_blocks()
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_blocks().iter().sum()
    }

    /// Whether stage `i` carries a regulator.
    pub fn stage_regulated(&self, i: usize) -> bool {
        self.family.is_regulated() && self.regulated_stages.get(i).copied().unwrap_or(false)
    }

    pub fn se(&self) -> Option<usize> {
        self.family.has_se().then_some(self.se_reduction)
    }

    /// Stride of the first block of each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        (0..self.num_stages())
            .map(|i| if i == 0 { 1 } else { 2 })
            .collect()
    }

    /// Human-readable name, e.g. `RegNet-20(GRU)`.
    pub fn display_name(&self) -> String {
        let fam = match self.family {
            Family::ResNet => "ResNet",
            Family::RegNet => "RegNet",
            Family::SeResNet => "SE-ResNet",
            Family::SeRegNet => "SE-RegNet",
        };
        let mut s = format!("{fam}-{}", self.depth.layers());
        if self.family.is_regulated() {
            let regulated: Vec<usize> = (0..self.num_stages())
                .filter(|&i| self.stage_regulated(i))
                .map(|i| i + 1)
                .collect();
            if regulated.len() != self.num_stages() {
                let list: Vec<String> = regulated.iter().map(|i| i.to_string()).collect();
                s.push_str(&format!("_({})", list.join(",")));
            }
            if let Some(c) = self.cell {
                s.push_str(&format!("({})", c.to_string().to_uppercase()));
            }
        }
        s
    }

    /// Check every structural invariant, listing all violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let stages = self.stage_blocks();
        if self.widths.len() != stages.len() {
            problems.push(format!(
                "{} widths given for {} stages",
                self.widths.len(),
                stages.len()
            ));
        }
        if self.regulated_stages.len() != stages.len() {
            problems.push(format!(
                "regulated_stages has {} entries for {} stages",
                self.regulated_stages.len(),
                stages.len()
            ));
        }
        if stages.iter().any(|&b| b == 0) {
            problems.push("every stage needs at least one block".into());
        }
        if self.widths.iter().any(|&w| w == 0) {
            problems.push("stage widths must be positive".into());
        }
        if self.classes == 0 {
            problems.push("classes must be positive".into());
        }
        match &self.depth {
            Depth::Cifar { .. } => {
                if self.widths != CIFAR_WIDTHS {
                    problems.push(format!(
                        "CIFAR widths must be {CIFAR_WIDTHS:?}, got {:?}",
                        self.widths
                    ));
                }
                if self.input != InputGeometry::CIFAR {
                    problems.push("CIFAR networks take 3x32x32 inputs".into());
                }
            }
            Depth::Bottleneck { .. } => {
                let min = 1 << (stages.len() + 1);
                if self.input.height < min || self.input.width < min {
                    problems.push(format!("bottleneck input must be at least {min}x{min}"));
                }
            }
        }
        if self.input.channels == 0 {
            problems.push("input channels must be positive".into());
        }
        if self.family.is_regulated() {
            if self.cell.is_none() {
                problems.push(format!("family {} requires a cell kind", self.family));
            }
        } else {
            if self.cell.is_some() {
                problems.push(format!("family {} takes no cell kind", self.family));
            }
            if self.regulated_stages.iter().any(|&r| r) {
                problems.push(format!("family {} cannot regulate stages", self.family));
            }
        }
        if self.family.has_se() {
            let expansion = if self.depth.is_bottleneck() { 4 } else { 1 };
            if self.se_reduction == 0 {
                problems.push("SE reduction ratio must be positive".into());
            } else if let Some(w) = self
                .widths
                .iter()
                .find(|&&w| (w * expansion) % self.se_reduction != 0)
            {
                problems.push(format!(
                    "SE reduction ratio {} does not divide {} channels",
                    self.se_reduction,
                    w * expansion
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "inconsistent architecture spec: {}",
                problems.join("; ")
            )))
        }
    }

    /// Plain-text `key = value` form.
    pub fn to_config(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str(&format!("family = {}\n", self.family));
        out.push_str(&format!(
            "cell = {}\n",
            self.cell
                .map_or_else(|| "none".to_string(), |c| c.to_string())
        ));
        match &self.depth {
            Depth::Cifar { n } => out.push_str(&format!("n = {n}\n")),
            Depth::Bottleneck { stage_blocks } => {
                out.push_str(&format!("stage_blocks = {}\n", list(stage_blocks)))
            }
        }
        out.push_str(&format!("widths = {}\n", list(&self.widths)));
        out.push_str(&format!("classes = {}\n", self.classes));
        out.push_str(&format!(
            "input = {},{},{}\n",
            self.input.channels, self.input.height, self.input.width
        ));
        let mask: Vec<&str> = self
            .regulated_stages
            .iter()
            .map(|&r| if r { "1" } else { "0" })
            .collect();
        out.push_str(&format!("regulated_stages = {}\n", mask.join(",")));
        out.push_str(&format!("se_reduction = {}\n", self.se_reduction));
        out
    }

    /// Parse the `key = value` form. `#` starts a comment. Omitted keys take
    /// the family/depth defaults.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            entries.push((k.trim().to_ascii_lowercase(), v.trim().to_owned()));
        }
        let mut overrides = ConfigOverrides::default();
        for (k, v) in &entries {
            overrides.set(k, v)?;
        }
        overrides.build()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name())
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_usize(key, x)).collect()
}

fn parse_mask(key: &str, v: &str) -> Result<Vec<bool>> {
    v.split(',')
        .map(|x| match x.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => Ok(true),
            "0" | "false" | "no" => Ok(false),
            other => Err(Error::Format(format!("{key}: expected 0/1, got {other:?}"))),
        })
        .collect()
}

/// Partially specified spec: config-file keys and CLI flags both land here.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub family: Option<Family>,
    pub cell: Option<Option<CellKind>>,
    pub n: Option<usize>,
    pub stage_blocks: Option<Vec<usize>>,
    pub widths: Option<Vec<usize>>,
    pub classes: Option<usize>,
    pub input: Option<InputGeometry>,
    pub regulated_stages: Option<Vec<bool>>,
    pub se_reduction: Option<usize>,
}

impl ConfigOverrides {
    pub const KEYS: [&'static str; 9] = [
        "family",
        "cell",
        "n",
        "stage_blocks",
        "widths",
        "classes",
        "input",
        "regulated_stages",
        "se_reduction",
    ];

    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "family" => self.family = Some(v.parse().map_err(fmt_err)?),
            "cell" => {
                self.cell = Some(match v.to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    other => Some(other.parse().map_err(fmt_err)?),
                })
            }
            "n" => self.n = Some(parse_usize(key, v)?),
            "stage_blocks" => self.stage_blocks = Some(parse_list(key, v)?),
            "widths" => self.widths = Some(parse_list(key, v)?),
            "classes" => self.classes = Some(parse_usize(key, v)?),
            "input" => {
                let dims = parse_list(key, v)?;
                if dims.len() != 3 {
                    return Err(Error::Format(format!("input: expected c,h,w, got {v:?}")));
                }
                self.input = Some(InputGeometry {
                    channels: dims[0],
                    height: dims[1],
                    width: dims[2],
                });
            }
            "regulated_stages" => self.regulated_stages = Some(parse_mask(key, v)?),
            "se_reduction" => self.se_reduction = Some(parse_usize(key, v)?),
            other => {
                return Err(Error::Format(format!(
                    "unknown config key {other:?} (known: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Layer these overrides on top of a base spec.
    pub fn apply(&self, base: &ArchSpec) -> Result<ArchSpec> {
        let mut o = self.clone();
        o.family = o.family.or(Some(base.family));
        o.cell = o.cell.or(Some(base.cell));
        if o.n.is_none() && o.stage_blocks.is_none() {
            match &base.depth {
                Depth::Cifar { n } => o.n = Some(*n),
                Depth::Bottleneck { stage_blocks } => o.stage_blocks = Some(stage_blocks.clone()),
            }
            o.widths = o.widths.or(Some(base.widths.clone()));
            o.input = o.input.or(Some(base.input));
        }
        o.classes = o.classes.or(Some(base.classes));
        if o.family == Some(base.family) {
            o.regulated_stages = o.regulated_stages.or(Some(base.regulated_stages.clone()));
        }
        o.se_reduction = o.se_reduction.or(Some(base.se_reduction));
        o.build()
    }

    pub fn build(&self) -> Result<ArchSpec> {
        let family = self
            .family
            .ok_or_else(|| Error::Format("missing key `family`".into()))?;
        let cell = self.cell.unwrap_or(None);
        let classes = self.classes.unwrap_or(10);
        let mut spec = match (self.n, &self.stage_blocks) {
            (Some(_), Some(_)) => {
                return Err(Error::Format(
                    "give either `n` or `stage_blocks`, not both".into(),
                ))
            }
            (Some(n), None) => ArchSpec::cifar(family, cell, n, classes),
            (None, Some(blocks)) => {
                let mut s = ArchSpec::bottleneck50(family, cell, classes);
                s.depth = Depth::Bottleneck {
                    stage_blocks: blocks.clone(),
                };
                s.regulated_stages = vec![family.is_regulated(); blocks.len()];
                s
            }
            (None, None) => return Err(Error::Format("missing key `n` or `stage_blocks`".into())),
        };
        spec.cell = cell;
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
        }
        if let Some(i) = self.input {
            spec.input = i;
        }
        if let Some(r) = &self.regulated_stages {
            spec.regulated_stages = r.clone();
        }
        if let Some(r) = self.se_reduction {
            spec.se_reduction = r;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn fmt_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Format(m),
        e => e,
    }
}

/// Resolve a short preset name such as `resnet-n3`, `regnet-gru-n3`,
/// `se-regnet-lstm-20`, `resnet50`, `regnet50-gru` or `regnet-gru-n3-stages1`
/// (only stage 1 regulated).
pub fn preset(name: &str) -> Result<ArchSpec> {
    let lower = name.to_ascii_lowercase();
    let bad = || {
        Error::invalid(format!(
            "unknown architecture preset {name:?} (examples: resnet-n3, regnet-gru-n3, se-regnet-lstm-20, resnet50, regnet50-gru)"
        ))
    };
    let (family, rest) = ["se-regnet", "se-resnet", "regnet", "resnet"]
        .iter()
        .find_map(|f| lower.strip_prefix(f).map(|r| (*f, r)))
        .ok_or_else(bad)?;
    let family: Family = family.parse()?;
    let mut cell = None;
    let mut depth: Option<Depth> = None;
    let mut stages: Option<Vec<usize>> = None;
    let mut classes = 10;
    for tok in rest.split('-').filter(|t| !t.is_empty()) {
        if let Ok(c) = tok.parse::<CellKind>() {
            cell = Some(c);
        } else if let Some(n) = tok.strip_prefix('n').and_then(|v| v.parse::<usize>().ok()) {
            depth = Some(Depth::Cifar { n });
        } else if let Some(d) = tok.strip_prefix("stages") {
            stages = Some(
                d.chars()
                    .map(|c| {
                        c.to_digit(10)
                            .map(|v| v as usize)
                            .filter(|&v| v >= 1)
                            .map(|v| v - 1)
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?,
            );
        } else if let Some(c) = tok.strip_prefix('c').and_then(|v| v.parse::<usize>().ok()) {
            classes = c;
        } else if let Ok(layers) = tok.parse::<usize>() {
            depth = Some(if layers == 50 {
                Depth::Bottleneck {
                    stage_blocks: RESNET50_BLOCKS.to_vec(),
                }
            } else if layers >= 8 && (layers - 2) % 6 == 0 {
                Depth::Cifar {
                    n: (layers - 2) / 6,
                }
            } else {
                return Err(bad());
            });
        } else {
            return Err(bad());
        }
    }
    let mut spec = match depth.ok_or_else(bad)? {
        Depth::Cifar { n } => ArchSpec::cifar(family, cell, n, classes),
        Depth::Bottleneck { .. } => ArchSpec::bottleneck50(
            family,
            cell,
            if classes == 10 && !lower.contains("-c10") {
                1000
            } else {
                classes
            },
        ),
    };
    if let Some(s) = stages {
        spec = spec.with_regulated(&s);
    }
    spec.validate()?;
    Ok(spec)
}
