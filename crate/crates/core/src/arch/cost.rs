//! Parameter / MAC accounting derived from an [`ArchSpec`] alone.
//!
//! Row names equal the parameter-name prefixes the builder uses, so a report
//! can be checked row by row against a materialized network.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::blocks::EXPANSION;
use crate::convrnn::CellKind;
use crate::error::{Error, Result};

use super::spec::{ArchSpec, InputGeometry};

/// One accounted layer. Signed so that differences are reports too.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: i64,
    pub macs: i64,
}

impl CostRow {
    pub fn flops(&self) -> i64 {
        2 * self.macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    /// Set on reports produced by [`diff_reports`].
    pub baseline: Option<String>,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> i64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> i64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Two FLOPs per multiply-accumulate.
    pub fn total_flops(&self) -> i64 {
        2 * self.total_macs()
    }

    /// Totals per leading name component (`stem`, `stage1`, ..., `head`).
    pub fn by_stage(&self) -> Vec<CostRow> {
        let mut out: Vec<CostRow> = Vec::new();
        for r in &self.rows {
            let key = r.layer.split('.').next().unwrap_or("").to_owned();
            match out.iter_mut().find(|o| o.layer == key) {
                Some(o) => {
                    o.params += r.params;
                    o.macs += r.macs;
                }
                None => out.push(CostRow {
                    layer: key,
                    params: r.params,
                    macs: r.macs,
                }),
            }
        }
        out
    }

    /// CSV with columns `layer,params,macs,flops`, closed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.params, r.macs, r.flops());
        }
        let _ = writeln!(
            s,
            "total,{},{},{}",
            self.total_params(),
            self.total_macs(),
            self.total_flops()
        );
        s
    }

    /// Parse [`CostReport::to_csv`] output; the total row must agree with the rows.
    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "layer,params,macs,flops" => {}
            other => {
                return Err(Error::Format(format!(
                    "unexpected cost CSV header {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        let mut total = None;
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!(
                    "cost CSV line {}: expected 4 fields",
                    i + 2
                )));
            }
            let num = |s: &str| {
                s.trim().parse::<i64>().map_err(|_| {
                    Error::Format(format!("cost CSV line {}: bad number {s:?}", i + 2))
                })
            };
            let row = CostRow {
                layer: f[0].to_owned(),
                params: num(f[1])?,
                macs: num(f[2])?,
            };
            if num(f[3])? != row.flops() {
                return Err(Error::Format(format!(
                    "cost CSV line {}: flops != 2 * macs",
                    i + 2
                )));
            }
            if row.layer == "total" {
                total = Some(row);
            } else {
                rows.push(row);
            }
        }
        let report = CostReport {
            name: name.to_owned(),
            baseline: None,
            rows,
        };
        if let Some(t) = total {
            if t.params != report.total_params() || t.macs != report.total_macs() {
                return Err(Error::Format(
                    "cost CSV total row disagrees with its rows".into(),
                ));
            }
        }
        Ok(report)
    }
}

/// Row-aligned `a - b`. Rows only in `a` appear as additions, rows only in
/// `b` as removals (negated), in `a`'s order followed by `b`'s leftovers.
pub fn diff_reports(a: &CostReport, b: &CostReport) -> CostReport {
    let index: HashMap<&str, &CostRow> = b.rows.iter().map(|r| (r.layer.as_str(), r)).collect();
    let mut rows = Vec::with_capacity(a.rows.len());
    for r in &a.rows {
        let (p, m) = index
            .get(r.layer.as_str())
            .map_or((0, 0), |o| (o.params, o.macs));
        rows.push(CostRow {
            layer: r.layer.clone(),
            params: r.params - p,
            macs: r.macs - m,
        });
    }
    let in_a: std::collections::HashSet<&str> = a.rows.iter().map(|r| r.layer.as_str()).collect();
    for r in b.rows.iter().filter(|r| !in_a.contains(r.layer.as_str())) {
        rows.push(CostRow {
            layer: r.layer.clone(),
            params: -r.params,
            macs: -r.macs,
        });
    }
    CostReport {
        name: a.name.clone(),
        baseline: Some(b.name.clone()),
        rows,
    }
}

/// How regulator gate convolutions are realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateConv {
    /// Grouped 1x1 then grouped 3x3 (the default builder).
    Factorized,
    /// One dense 3x3 `2N -> N` convolution per gate (accounting only).
    Dense,
}

struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    fn push(&mut self, layer: String, params: usize, macs: usize) {
        self.rows.push(CostRow {
            layer,
            params: params as i64,
            macs: macs as i64,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        hw: (usize, usize),
    ) -> (usize, usize) {
        let pad = k / 2;
        let oh = (hw.0 + 2 * pad - k) / stride + 1;
        let ow = (hw.1 + 2 * pad - k) / stride + 1;
        let per_out = (in_c / groups) * k * k;
        self.push(
            name,
            out_c * per_out + if bias { out_c } else { 0 },
            out_c * per_out * oh * ow,
        );
        (oh, ow)
    }

    fn bn(&mut self, name: String, c: usize) {
        self.push(name, 2 * c, 0);
    }

    fn linear(&mut self, name: String, i: usize, o: usize) {
        self.push(name, i * o + o, i * o);
    }

    fn shortcut(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        hw: (usize, usize),
    ) {
        if stride != 1 || in_c != out_c {
            self.conv(
                format!("{name}.shortcut.conv"),
                in_c,
                out_c,
                1,
                stride,
                1,
                false,
                hw,
            );
            self.bn(format!("{name}.shortcut.bn"), out_c);
        }
    }

    fn se(&mut self, name: &str, c: usize, r: Option<usize>) {
        if let Some(r) = r {
            self.linear(format!("{name}.se.squeeze"), c, c / r);
            self.linear(format!("{name}.se.excite"), c / r, c);
        }
    }

    /// Regulator rows; gate MACs summed over the `steps` blocks of the stage.
    fn regulator(
        &mut self,
        name: &str,
        kind: CellKind,
        n: usize,
        hw: (usize, usize),
        steps: usize,
        gc: GateConv,
    ) {
        let pixels = hw.0 * hw.1 * steps;
        for g in kind.gate_names() {
            let gname = format!("{name}.cell.{g}");
            match gc {
                GateConv::Factorized => {
                    self.push(format!("{gname}.pointwise"), 2 * n, 2 * n * pixels);
                    self.push(format!("{gname}.spatial"), 9 * n + n, 9 * n * pixels);
                }
                GateConv::Dense => {
                    self.push(
                        format!("{gname}.dense"),
                        18 * n * n + n,
                        18 * n * n * pixels,
                    );
                }
            }
        }
        self.bn(format!("{name}.bn"), n);
    }
}

fn walk(spec: &ArchSpec, gc: GateConv) -> Result<CostReport> {
    let blocks = spec.stage_blocks();
    if spec.widths.len() != blocks.len() {
        return Err(Error::invalid(format!(
            "{} widths given for {} stages",
            spec.widths.len(),
            blocks.len()
        )));
    }
    let bottleneck = spec.depth.is_bottleneck();
    let se = spec.se();
    let mut w = Walker { rows: Vec::new() };
    let mut hw = (spec.input.height, spec.input.width);
    let c0 = spec.widths[0];
    if bottleneck {
        hw = w.conv(
            "stem.conv".into(),
            spec.input.channels,
            c0,
            7,
            2,
            1,
            false,
            hw,
        );
        w.bn("stem.bn".into(), c0);
        hw = ((hw.0 + 2 - 3) / 2 + 1, (hw.1 + 2 - 3) / 2 + 1);
    } else {
        hw = w.conv(
            "stem.conv".into(),
            spec.input.channels,
            c0,
            3,
            1,
            1,
            false,
            hw,
        );
        w.bn("stem.bn".into(), c0);
    }
    let mut in_c = c0;
    for (si, &count) in blocks.iter().enumerate() {
        let n = spec.widths[si];
        let regulated = spec.stage_regulated(si);
        let sname = format!("stage{}", si + 1);
        let first_stride = spec.stage_strides()[si];
        if regulated {
            let kind = spec
                .cell
                .ok_or_else(|| Error::invalid("regulated stage needs a cell kind"))?;
            let state_hw = ((hw.0 - 1) / first_stride + 1, (hw.1 - 1) / first_stride + 1);
            w.regulator(&format!("{sname}.regulator"), kind, n, state_hw, count, gc);
        }
        for bi in 0..count {
            let name = format!("{sname}.block{}", bi + 1);
            let stride = if bi == 0 { first_stride } else { 1 };
            let x_hw = hw;
            if bottleneck {
                let out_c = n * EXPANSION;
                hw = w.conv(
                    format!("{name}.conv1"),
                    in_c,
                    n,
                    1,
                    stride,
                    1,
                    regulated,
                    hw,
                );
                w.bn(format!("{name}.bn1"), n);
                w.conv(format!("{name}.conv2"), n, n, 3, 1, 1, regulated, hw);
                w.bn(format!("{name}.bn2"), n);
                if regulated {
                    w.conv(format!("{name}.fuse"), 2 * n, n, 1, 1, 1, false, hw);
                    w.bn(format!("{name}.bn_fuse"), n);
                }
                w.conv(format!("{name}.conv3"), n, out_c, 1, 1, 1, regulated, hw);
                w.bn(format!("{name}.bn3"), out_c);
                w.shortcut(&name, in_c, out_c, stride, x_hw);
                w.se(&name, out_c, se);
                in_c = out_c;
            } else {
                hw = w.conv(
                    format!("{name}.conv1"),
                    in_c,
                    n,
                    3,
                    stride,
                    1,
                    regulated,
                    hw,
                );
                w.bn(format!("{name}.bn1"), n);
                if regulated {
                    w.conv(format!("{name}.fuse"), 2 * n, n, 1, 1, 1, false, hw);
                    w.bn(format!("{name}.bn_fuse"), n);
                }
                w.conv(format!("{name}.conv2"), n, n, 3, 1, 1, regulated, hw);
                w.bn(format!("{name}.bn2"), n);
                w.shortcut(&name, in_c, n, stride, x_hw);
                w.se(&name, n, se);
                in_c = n;
            }
        }
    }
    w.linear("head".into(), in_c, spec.classes);
    Ok(CostReport {
        name: spec.display_name(),
        baseline: None,
        rows: w.rows,
    })
}

/// Full per-layer report (parameters and MACs) for `spec`.
pub fn count(spec: &ArchSpec) -> Result<CostReport> {
    walk(spec, GateConv::Factorized)
}

/// Parameter accounting; identical rows to [`count`].
pub fn count_params(spec: &ArchSpec) -> Result<CostReport> {
    count(spec)
}

/// MAC/FLOP accounting at an explicit input geometry.
pub fn count_flops(spec: &ArchSpec, input: InputGeometry) -> Result<CostReport> {
    let mut s = spec.clone();
    s.input = input;
    walk(&s, GateConv::Factorized)
}

/// Accounting with a chosen gate-convolution realisation.
pub fn count_with_gates(spec: &ArchSpec, gates: GateConv) -> Result<CostReport> {
    walk(spec, gates)
}
