//! Labelled image datasets: CIFAR binary batches and the synthetic shape task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labelled image, pixels stored channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// On-disk record layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `label, 3072 pixels`.
    Cifar10,
    /// `coarse label, fine label, 3072 pixels`; the fine label is used.
    Cifar100,
    /// `label, 768 pixels` (16x16 RGB).
    Synthetic,
}

impl DataFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cifar10" => Some(Self::Cifar10),
            "cifar100" => Some(Self::Cifar100),
            "synthetic" => Some(Self::Synthetic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Synthetic => "synthetic",
        }
    }

    /// `(label bytes, channels, height, width, classes)`.
    pub fn layout(self) -> (usize, usize, usize, usize, usize) {
        match self {
            Self::Cifar10 => (1, 3, 32, 32, 10),
            Self::Cifar100 => (2, 3, 32, 32, 100),
            Self::Synthetic => (1, 3, 16, 16, SYNTHETIC_CLASSES),
        }
    }

    pub fn record_len(self) -> usize {
        let (l, c, h, w, _) = self.layout();
        l + c * h * w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    /// Images `[b, c, h, w]` scaled to `[0, 1]`, with labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        self.batch_augmented(indices, &mut |_, _: &mut [f64]| {})
    }

    /// Like [`Dataset::batch`], passing each image through `augment` first.
    pub fn batch_augmented<T: Scalar>(
        &self,
        indices: &[usize],
        augment: &mut dyn FnMut(usize, &mut [f64]),
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut img = vec![0f64; per];
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| contract(format!("sample {i} out of range")))?;
            for (d, &p) in img.iter_mut().zip(&r.pixels) {
                *d = p as f64 / 255.0;
            }
            augment(i, &mut img);
            data.extend(img.iter().map(|&v| T::from_f64_lossy(v)));
            labels.push(r.label as usize);
        }
        Ok((Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?, labels))
    }

    pub fn to_bytes(&self, format: DataFormat) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * format.record_len());
        for r in &self.records {
            if format == DataFormat::Cifar100 {
                out.push(0);
            }
            out.push(r.label);
            out.extend_from_slice(&r.pixels);
        }
        out
    }
}

/// Parses concatenated fixed-size records. Returns the dataset and a warning
/// when the input is empty.
pub fn parse_records(bytes: &[u8], format: DataFormat) -> Result<(Dataset, Option<String>)> {
    let (label_bytes, c, h, w, classes) = format.layout();
    let len = format.record_len();
    if !bytes.len().is_multiple_of(len) {
        let offset = (bytes.len() / len * len) as u64;
        return Err(Error::Format {
            offset,
            message: format!("truncated {} record: {} trailing bytes, expected {len}", format.name(), bytes.len() % len),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / len);
    for (i, chunk) in bytes.chunks_exact(len).enumerate() {
        let label = chunk[label_bytes - 1];
        if label as usize >= classes {
            return Err(Error::Format {
                offset: (i * len + label_bytes - 1) as u64,
                message: format!("label {label} out of range for {classes} classes"),
            });
        }
        records.push(DatasetRecord { label, pixels: chunk[label_bytes..].to_vec() });
    }
    let warning = records.is_empty().then(|| format!("{} input contains no records", format.name()));
    Ok((Dataset { channels: c, height: h, width: w, num_classes: classes, records }, warning))
}

/// Loads a CIFAR binary batch. The layout is taken from `format`
/// (`Cifar10` or `Cifar100`).
pub fn load_cifar_binary(path: &Path, format: DataFormat) -> Result<(Dataset, Option<String>)> {
    let bytes = std::fs::read(path)?;
    parse_records(&bytes, format)
}

pub fn load_records(path: &Path, format: DataFormat) -> Result<(Dataset, Option<String>)> {
    let bytes = std::fs::read(path)?;
    parse_records(&bytes, format)
}

/// Merges datasets of identical geometry.
pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut first = it.next().ok_or_else(|| contract("nothing to concatenate"))?;
    for d in it {
        if (d.channels, d.height, d.width, d.num_classes) != (first.channels, first.height, first.width, first.num_classes) {
            return Err(contract("datasets differ in geometry"));
        }
        first.records.extend(d.records);
    }
    Ok(first)
}

/// File names of the training and held-out parts of a dataset directory.
pub fn split_files(format: DataFormat) -> (Vec<String>, String) {
    match format {
        DataFormat::Cifar10 => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin".into()),
        DataFormat::Cifar100 => (vec!["train.bin".into()], "test.bin".into()),
        DataFormat::Synthetic => (vec!["train.bin".into()], "test.bin".into()),
    }
}

/// Loads `(train, test)` from a dataset directory. Missing training batches
/// are skipped as long as at least one exists; warnings are returned.
pub fn load_split(dir: &Path, format: DataFormat) -> Result<(Dataset, Dataset, Vec<String>)> {
    let (train_names, test_name) = split_files(format);
    let mut warnings = Vec::new();
    let mut parts = Vec::new();
    for name in &train_names {
        let path = dir.join(name);
        if path.exists() {
            let (d, w) = load_records(&path, format)?;
            warnings.extend(w.map(|w| format!("{}: {w}", path.display())));
            parts.push(d);
        }
    }
    if parts.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no training file ({}) in {}", train_names.join(", "), dir.display()),
        )));
    }
    let train = concat(parts)?;
    let test_path = dir.join(&test_name);
    let (test, w) = load_records(&test_path, format)?;
    warnings.extend(w.map(|w| format!("{}: {w}", test_path.display())));
    Ok((train, test, warnings))
}

pub const SYNTHETIC_CLASSES: usize = 4;
pub const SYNTHETIC_SIZE: usize = 16;

/// Names of the synthetic classes, by label.
pub const SYNTHETIC_LABELS: [&str; SYNTHETIC_CLASSES] = ["filled_square", "hollow_square", "cross", "diagonal_stripe"];

fn shape_mask(class: usize, rng: &mut ChaCha8Rng) -> [[bool; SYNTHETIC_SIZE]; SYNTHETIC_SIZE] {
    let n = SYNTHETIC_SIZE as i32;
    let dx = rng.gen_range(-1..=1);
    let dy = rng.gen_range(-1..=1);
    let side = rng.gen_range(7..=9);
    let lo = (n - side) / 2;
    let mut m = [[false; SYNTHETIC_SIZE]; SYNTHETIC_SIZE];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x - dx, y - dy);
            let inside = (lo..lo + side).contains(&u) && (lo..lo + side).contains(&v);
            let on = match class {
                0 => inside,
                1 => inside && (u == lo || u == lo + side - 1 || v == lo || v == lo + side - 1),
                2 => {
                    let c = n / 2;
                    let span = (2..n - 2).contains(&u) && (2..n - 2).contains(&v);
                    span && ((c - 1..=c).contains(&u) || (c - 1..=c).contains(&v))
                }
                _ => (u - v).abs() <= 1,
            };
            m[y as usize][x as usize] = on;
        }
    }
    m
}

/// Four-class 16x16 RGB shape task: filled square, hollow square, cross and
/// diagonal stripe, each jittered by up to one pixel, drawn in a random
/// bright colour over a dark background, plus uniform noise of amplitude 0.1.
/// Records are class-interleaved.
pub fn gen_synthetic(seed: u64, n_per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_per_class * SYNTHETIC_CLASSES);
    for _ in 0..n_per_class {
        for class in 0..SYNTHETIC_CLASSES {
            let mask = shape_mask(class, &mut rng);
            let colour: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
            let background = rng.gen_range(0.0..0.2);
            let mut pixels = Vec::with_capacity(3 * SYNTHETIC_SIZE * SYNTHETIC_SIZE);
            for &c in &colour {
                for row in &mask {
                    for &on in row {
                        let base = if on { c } else { background };
                        let v = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
            }
            records.push(DatasetRecord { label: class as u8, pixels });
        }
    }
    Dataset { channels: 3, height: SYNTHETIC_SIZE, width: SYNTHETIC_SIZE, num_classes: SYNTHETIC_CLASSES, records }
}

/// Training and held-out sets; the held-out set uses an independent stream.
pub fn gen_synthetic_split(seed: u64, n_per_class: usize, test_per_class: usize) -> (Dataset, Dataset) {
    (gen_synthetic(seed, n_per_class), gen_synthetic(seed ^ 0x5eed_7e57_0000_0001, test_per_class))
}
