use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::pipeline::{BatchPlan, Dataset, Normalization};
use crate::tape::Mode;
use crate::tensor::{Scalar, Shape, Tensor};

use super::count_correct;

/// Accuracy of the final head applied to one block's pooled output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    /// 1-based block index.
    pub block: usize,
    pub correct: usize,
    pub total: usize,
}

impl ProbeResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

fn check_blocks<T: Scalar>(net: &Network<T>, blocks: &[usize]) -> Result<()> {
    let n = net.model.num_blocks();
    if let Some(&b) = blocks.iter().find(|&&b| b == 0 || b > n) {
        return Err(Error::invalid(format!("block {b} out of range 1..={n}")));
    }
    Ok(())
}

/// Output channels of each block, in order.
fn block_channels<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    net.model
        .stages
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.out_channels, s.blocks.len()))
        .collect()
}

/// Classify `global_avgpool(O^t)` through the trained head for each listed
/// block (1-based), BN in eval mode.
pub fn probe_blocks<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    norm: Normalization,
    blocks: &[usize],
    batch_size: usize,
) -> Result<Vec<ProbeResult>> {
    check_blocks(net, blocks)?;
    let channels = block_channels(net);
    let head = net.model.head.in_features;
    if let Some(&b) = blocks.iter().find(|&&b| channels[b - 1] != head) {
        return Err(Error::invalid(format!(
            "block {b} emits {} channels but the head takes {head}",
            channels[b - 1]
        )));
    }
    let mut out: Vec<ProbeResult> = blocks
        .iter()
        .map(|&block| ProbeResult {
            block,
            correct: 0,
            total: 0,
        })
        .collect();
    let plan = BatchPlan::eval(batch_size, norm);
    for batch in plan.batches::<T>(data, 0) {
        let counts = net.run(Mode::Eval, |model, tape| {
            let x = tape.input(batch.images.clone())?;
            let fwd = model.forward(tape, x)?;
            blocks
                .iter()
                .map(|&b| {
                    let logits = model.classify(tape, fwd.taps[b - 1].output)?;
                    Ok(count_correct(tape.value(logits), &batch.labels))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (r, c) in out.iter_mut().zip(counts) {
            r.correct += c;
            r.total += batch.labels.len();
        }
    }
    Ok(out)
}

/// CSV `block,accuracy,correct,total`.
pub fn probe_csv(rows: &[ProbeResult]) -> String {
    let mut s = String::from("block,accuracy,correct,total\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.block,
            r.accuracy(),
            r.correct,
            r.total
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub shape: Shape,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FeatureManifest {
    data: String,
    entries: Vec<FeatureEntry>,
}

/// Sidecar manifest path for a feature dump.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `I^t`, `H^t` (regulated blocks only) and `O^t` for each listed
/// block as little-endian `f32`, with a JSON manifest beside the data file.
pub fn export_features<T: Scalar>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    blocks: &[usize],
    path: &Path,
) -> Result<Vec<FeatureEntry>> {
    check_blocks(net, blocks)?;
    let tensors = net.run(Mode::Eval, |model, tape| {
        let x = tape.input(images.clone())?;
        let fwd = model.forward(tape, x)?;
        let mut v = Vec::new();
        for &b in blocks {
            let tap = fwd.taps[b - 1];
            v.push((
                format!("block{b}.input"),
                tape.value(tap.input).cast::<f32>(),
            ));
            if let Some(h) = tap.hidden {
                v.push((format!("block{b}.hidden"), tape.value(h).cast::<f32>()));
            }
            v.push((
                format!("block{b}.output"),
                tape.value(tap.output).cast::<f32>(),
            ));
        }
        Ok(v)
    })?;
    let mut data = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        let offset = data.len() as u64;
        for &x in t.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(FeatureEntry {
            name,
            shape: t.shape(),
            dtype: "f32".into(),
            offset,
            bytes: data.len() as u64 - offset,
        });
    }
    fs::write(path, &data).map_err(|e| Error::io(path, e))?;
    let manifest = FeatureManifest {
        data: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries: entries.clone(),
    };
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    Ok(entries)
}

/// Reload a dump written by [`export_features`].
pub fn read_features(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: FeatureManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let end = (e.offset + e.bytes) as usize;
            if e.dtype != "f32" || end > data.len() || e.bytes as usize != e.shape.numel() * 4 {
                return Err(Error::Format(format!("feature {} is mis-sized", e.name)));
            }
            let v = data[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok((e.name.clone(), Tensor::from_vec(e.shape, v)?))
        })
        .collect()
}
