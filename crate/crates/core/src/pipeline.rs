//! CIFAR binary ingestion, pad-crop-flip augmentation, normalization and
//! seeded batch iteration.
//!
//! A record is one label byte (two for CIFAR-100: coarse, fine) followed by
//! 3072 pixel bytes, the R, G and B planes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    C10,
    C100,
}

impl Variant {
    pub fn classes(self) -> usize {
        match self {
            Variant::C10 => 10,
            Variant::C100 => 100,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            Variant::C10 => 1,
            Variant::C100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn train_files(self) -> Vec<&'static str> {
        match self {
            Variant::C10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Variant::C100 => vec!["train.bin"],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            Variant::C10 => "test_batch.bin",
            Variant::C100 => "test.bin",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c10" | "cifar10" | "cifar-10" => Ok(Variant::C10),
            "c100" | "cifar100" | "cifar-100" => Ok(Variant::C100),
            other => Err(Error::invalid(format!(
                "unknown dataset {other:?} (expected c10 or c100)"
            ))),
        }
    }
}

/// One image, kept as raw bytes; [`Example::image`] scales to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub pixels: Vec<u8>,
    pub label: usize,
    /// CIFAR-100 coarse label, kept so records re-serialize losslessly.
    pub coarse: Option<u8>,
}

impl Example {
    pub fn image<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .map(|&p| T::lit(p as f64 / 255.0))
            .collect();
        Tensor::from_vec(Shape::new(1, CHANNELS, SIDE, SIDE), data).expect("fixed size")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Seed-pinned random subset of `n` examples (all if `n >= len`).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        Dataset {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            classes: self.classes,
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }
}

/// Decode a whole file's bytes. `path` is only used in error messages.
pub fn parse_records(bytes: &[u8], variant: Variant, path: &Path) -> Result<Vec<Example>> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            offset: (bytes.len() / rec * rec) as u64,
            reason: format!(
                "truncated record: file length {} is not a multiple of {rec}",
                bytes.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / rec);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (label, coarse) = match variant {
            Variant::C10 => (r[0] as usize, None),
            Variant::C100 => (r[1] as usize, Some(r[0])),
        };
        if label >= variant.classes() {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                offset: (i * rec) as u64,
                reason: format!(
                    "label {label} out of range for {} classes",
                    variant.classes()
                ),
            });
        }
        out.push(Example {
            pixels: r[variant.label_bytes()..].to_vec(),
            label,
            coarse,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_records`].
pub fn serialize_records(examples: &[Example], variant: Variant) -> Vec<u8> {
    let mut out = Vec::with_capacity(examples.len() * variant.record_len());
    for e in examples {
        match variant {
            Variant::C10 => out.push(e.label as u8),
            Variant::C100 => {
                out.push(e.coarse.unwrap_or(0));
                out.push(e.label as u8);
            }
        }
        out.extend_from_slice(&e.pixels);
    }
    out
}

pub fn read_records(path: &Path, variant: Variant) -> Result<Vec<Example>> {
    let bytes = fs::read(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    })?;
    parse_records(&bytes, variant, path)
}

/// Load the train and test splits from a directory of standard binary files.
pub fn load_cifar(dir: &Path, variant: Variant) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            offset: 0,
            reason: "data directory not found".into(),
        });
    }
    let mut train = Vec::new();
    for f in variant.train_files() {
        train.extend(read_records(&dir.join(f), variant)?);
    }
    let test = read_records(&dir.join(variant.test_file()), variant)?;
    let classes = variant.classes();
    Ok((
        Dataset {
            examples: train,
            classes,
        },
        Dataset {
            examples: test,
            classes,
        },
    ))
}

/// Write a directory in the standard layout (train split spread over the
/// variant's train files).
pub fn write_cifar_dir(
    dir: &Path,
    variant: Variant,
    train: &[Example],
    test: &[Example],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = variant.train_files();
    let per = train.len().div_ceil(files.len()).max(1);
    for (i, f) in files.iter().enumerate() {
        let lo = (i * per).min(train.len());
        let hi = ((i + 1) * per).min(train.len());
        let p = dir.join(f);
        fs::write(&p, serialize_records(&train[lo..hi], variant)).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(variant.test_file());
    fs::write(&p, serialize_records(test, variant)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Learnable synthetic images: each class has a fixed colour and stripe
/// orientation, plus per-image noise. Only for tests and smoke runs.
pub fn synthetic(classes: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proto = ChaCha8Rng::seed_from_u64(0x5eed);
    let colours: Vec<[f64; 3]> = (0..classes)
        .map(|_| [proto.random(), proto.random(), proto.random()])
        .collect();
    let examples = (0..n)
        .map(|i| {
            let label = i % classes;
            let c = colours[label];
            let vertical = label % 2 == 0;
            let period = 2 + label % 5;
            let mut pixels = Vec::with_capacity(IMAGE_BYTES);
            for ch in 0..CHANNELS {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let pos = if vertical { x } else { y };
                        let stripe = if (pos / period) % 2 == 0 { 0.25 } else { -0.25 };
                        let noise: f64 = rng.random_range(-0.15..0.15);
                        let v = (c[ch] + stripe + noise).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
            }
            Example {
                pixels,
                label,
                coarse: None,
            }
        })
        .collect();
    Dataset { examples, classes }
}

/// Random choices for one augmented image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugDraw {
    /// Crop offset into the padded 40x40 image, each in `[0, 2 * PAD]`.
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugDraw {
    pub const IDENTITY: AugDraw = AugDraw {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, crop: bool, flip: bool) -> Self {
        let (dy, dx) = if crop {
            (rng.random_range(0..=2 * PAD), rng.random_range(0..=2 * PAD))
        } else {
            (PAD, PAD)
        };
        AugDraw {
            dy,
            dx,
            flip: flip && rng.random_bool(0.5),
        }
    }
}

/// Zero-pad by 4, crop 32x32 at the draw's offset, optionally mirror.
pub fn augment(ex: &Example, d: AugDraw) -> Example {
    let mut pixels = vec![0u8; IMAGE_BYTES];
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let sy = (y + d.dy) as isize - PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let ox = if d.flip { SIDE - 1 - x } else { x };
                let sx = (ox + d.dx) as isize - PAD as isize;
                if (0..SIDE as isize).contains(&sx) {
                    pixels[(c * SIDE + y) * SIDE + x] =
                        ex.pixels[(c * SIDE + sy as usize) * SIDE + sx as usize];
                }
            }
        }
    }
    Example {
        pixels,
        label: ex.label,
        coarse: ex.coarse,
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
    };

    pub fn measure(data: &Dataset) -> Self {
        let mut sum = [0f64; CHANNELS];
        let mut sq = [0f64; CHANNELS];
        let plane = SIDE * SIDE;
        for e in &data.examples {
            for c in 0..CHANNELS {
                for &p in &e.pixels[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * plane).max(1) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-8);
        }
        Normalization { mean, std }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mean,std\n");
        for c in 0..CHANNELS {
            s.push_str(&format!("{c},{:?},{:?}\n", self.mean[c], self.std[c]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("channel,mean,std") {
            return Err(Error::Format("normalization cache: bad header".into()));
        }
        let mut n = Normalization::IDENTITY;
        let mut seen = [false; CHANNELS];
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("normalization cache: bad row {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            let c: usize = f[0].parse().map_err(|_| bad())?;
            if c >= CHANNELS {
                return Err(bad());
            }
            n.mean[c] = f[1].parse().map_err(|_| bad())?;
            n.std[c] = f[2].parse().map_err(|_| bad())?;
            if !(n.std[c] > 0.0) {
                return Err(bad());
            }
            seen[c] = true;
        }
        if seen.iter().all(|&s| s) {
            Ok(n)
        } else {
            Err(Error::Format(
                "normalization cache: missing channel rows".into(),
            ))
        }
    }

    /// Read the cache at `path`, or measure `data` and write it there.
    pub fn load_or_measure(path: &Path, data: &Dataset) -> Result<Self> {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_csv(&text);
        }
        let n = Self::measure(data);
        fs::write(path, n.to_csv()).map_err(|e| Error::io(path, e))?;
        Ok(n)
    }
}

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "REGNET_DATA_DIR";

impl Variant {
    /// Directory name the official archive unpacks to, under `data/`.
    pub fn default_dir(self) -> &'static str {
        match self {
            Variant::C10 => "data/cifar-10-batches-bin",
            Variant::C100 => "data/cifar-100-binary",
        }
    }
}

/// `$REGNET_DATA_DIR`, else [`Variant::default_dir`].
pub fn default_data_dir(variant: Variant) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(variant.default_dir()), PathBuf::from)
}

/// Default location of the normalization cache for a data directory.
pub fn norm_cache_path(dir: &Path) -> PathBuf {
    dir.join("normalization.csv")
}

/// Everything that determines the batch stream of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub pad_crop: bool,
    pub flip: bool,
    pub norm: Normalization,
}

/// One assembled batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl BatchPlan {
    /// Shuffled, augmented training stream.
    pub fn train(seed: u64, batch_size: usize, norm: Normalization) -> Self {
        BatchPlan {
            seed,
            batch_size,
            shuffle: true,
            pad_crop: true,
            flip: true,
            norm,
        }
    }

    /// In-order, unaugmented stream for evaluation.
    pub fn eval(batch_size: usize, norm: Normalization) -> Self {
        BatchPlan {
            seed: 0,
            batch_size,
            shuffle: false,
            pad_crop: false,
            flip: false,
            norm,
        }
    }

    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    /// Example order and augmentation draws for `epoch`.
    pub fn schedule(&self, n: usize, epoch: usize) -> (Vec<usize>, Vec<AugDraw>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        if self.shuffle {
            order.shuffle(&mut rng);
        }
        let draws = (0..n)
            .map(|_| AugDraw::sample(&mut rng, self.pad_crop, self.flip))
            .collect();
        (order, draws)
    }

    /// Normalized `(1, 3, 32, 32)` image data appended to `out`.
    fn push_image<T: Scalar>(&self, ex: &Example, out: &mut Vec<T>) {
        let plane = SIDE * SIDE;
        for c in 0..CHANNELS {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            out.extend(
                ex.pixels[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| T::lit((p as f64 / 255.0 - m) / s)),
            );
        }
    }

    /// Assemble batch `b` of `epoch` directly, without walking earlier batches.
    pub fn batch<T: Scalar>(&self, data: &Dataset, epoch: usize, b: usize) -> Result<Batch<T>> {
        let (order, draws) = self.schedule(data.len(), epoch);
        self.assemble(data, &order, &draws, b)
    }

    fn assemble<T: Scalar>(
        &self,
        data: &Dataset,
        order: &[usize],
        draws: &[AugDraw],
        b: usize,
    ) -> Result<Batch<T>> {
        let bs = self.batch_size.max(1);
        let lo = b * bs;
        if lo >= order.len() {
            return Err(Error::invalid(format!("batch {b} out of range")));
        }
        let hi = (lo + bs).min(order.len());
        let mut buf = Vec::with_capacity((hi - lo) * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(hi - lo);
        for pos in lo..hi {
            let ex = &data.examples[order[pos]];
            let d = draws[pos];
            if d == AugDraw::IDENTITY {
                self.push_image(ex, &mut buf);
            } else {
                self.push_image(&augment(ex, d), &mut buf);
            }
            labels.push(ex.label);
        }
        Ok(Batch {
            images: Tensor::from_vec(Shape::new(hi - lo, CHANNELS, SIDE, SIDE), buf)?,
            labels,
            indices: order[lo..hi].to_vec(),
        })
    }

    /// All batches of `epoch` in order, the last one possibly partial.
    pub fn batches<'a, T: Scalar>(&'a self, data: &'a Dataset, epoch: usize) -> Batches<'a, T> {
        let (order, draws) = self.schedule(data.len(), epoch);
        Batches {
            plan: self,
            data,
            order,
            draws,
            next: 0,
            _t: std::marker::PhantomData,
        }
    }
}

pub struct Batches<'a, T> {
    plan: &'a BatchPlan,
    data: &'a Dataset,
    order: Vec<usize>,
    draws: Vec<AugDraw>,
    next: usize,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T> Batches<'a, T> {
    /// Skip ahead so the next batch yielded is number `b`.
    pub fn skip_to(mut self, b: usize) -> Self {
        self.next = b;
        self
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.next * self.plan.batch_size.max(1) >= self.order.len() {
            return None;
        }
        let b = self
            .plan
            .assemble(self.data, &self.order, &self.draws, self.next)
            .expect("in range");
        self.next += 1;
        Some(b)
    }
}
