//! IDX (MNIST) reading and writing, train/validation splits, batching and
//! small synthetic datasets.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{config_err, Error, Result};
use crate::loss::one_hot;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const IDX_UBYTE: u8 = 0x08;
const LABEL_MAGIC: u32 = 0x0000_0801;
const LINEAR_SEP_MARGIN: f64 = 0.3;

/// Inputs `[N, …]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.batch_size() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if labels.is_empty() {
            return config_err("a dataset needs at least one sample");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return config_err(format!("label {bad} outside 0..{num_classes}"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Reinterprets every sample with a new shape of equal size, e.g.
    /// `[784]` for MLPs or `[1, 28, 28]` for conv nets.
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.inputs = self.inputs.reshape(full)?;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Inputs, labels and one-hot targets for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>, Tensor) {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let targets = one_hot(&labels, self.num_classes);
        (self.inputs.select_rows(indices), labels, targets)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated IDX file: {what}"),
    ))
}

/// Parses an unsigned-byte IDX buffer into its extents and payload.
fn parse_idx<'a>(bytes: &'a [u8], path: &Path) -> Result<(u32, Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(truncated("missing magic number"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || bytes[3] == 0 {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x} is not an unsigned-byte IDX header",
            path.display()
        )));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated("incomplete dimension list"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(truncated(&format!(
            "expected {count} data bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the IDX payload",
            path.display(),
            payload.len() - count
        )));
    }
    Ok((magic, dims, payload))
}

/// Reads an IDX image file (`[N, H, W]`, or any unsigned-byte array with at
/// least two dimensions), scaling bytes to `[0, 1]` by `/255`. Gzip-compressed
/// files are detected and decompressed.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let (magic, dims, payload) = parse_idx(&bytes, path)?;
    if dims.len() < 2 {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x} describes labels, not images",
            path.display()
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(dims, data)
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let (magic, _, payload) = parse_idx(&bytes, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x} for labels",
            path.display()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes values in `[0, 1]` as an unsigned-byte IDX array (`round(255 v)`).
pub fn save_idx_images(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    if images.shape().len() < 2 {
        return Err(Error::Shape("IDX images need at least two dimensions".into()));
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return config_err(format!("pixel value {v} outside [0, 1]"));
    }
    let payload: Vec<u8> = images.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    write_bytes(path.as_ref(), &encode_idx(images.shape(), &payload))
}

pub fn save_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l > 255) {
        return config_err(format!("label {l} does not fit in a byte"));
    }
    let payload: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    write_bytes(path.as_ref(), &encode_idx(&[labels.len()], &payload))
}

/// Loads an images/labels pair into a dataset with `num_classes` classes.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    Dataset::new(load_idx_images(images)?, load_idx_labels(labels)?, num_classes)
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Io(io::Error::new(
        io::ErrorKind::NotFound,
        format!("none of {stems:?} (optionally .gz) found in {}", dir.display()),
    )))
}

/// MNIST training and test sets from the standard file names in `dir`, with
/// samples flattened to `[784]`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let part = |kind: &str| -> Result<Dataset> {
        let images = find_file(
            dir,
            &[
                &format!("{kind}-images-idx3-ubyte"),
                &format!("{kind}-images.idx3-ubyte"),
            ],
        )?;
        let labels = find_file(
            dir,
            &[
                &format!("{kind}-labels-idx1-ubyte"),
                &format!("{kind}-labels.idx1-ubyte"),
            ],
        )?;
        let ds = load_idx_dataset(images, labels, 10)?;
        let flat: usize = ds.sample_shape().iter().product();
        ds.with_sample_shape(&[flat])
    };
    Ok((part("train")?, part("t10k")?))
}

/// Deterministic shuffled split into `(train, validation)` with
/// `round(N · val_fraction)` validation samples.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return config_err(format!("validation fraction must lie in (0, 1), got {val_fraction}"));
    }
    let n = ds.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n_val >= n {
        return config_err(format!("cannot split {n} samples into train and validation"));
    }
    let perm = RngStream::new(seed).permutation(n);
    let (val, train) = perm.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val)))
}

/// Sample indices grouped into batches. With `rng` the order is shuffled;
/// `drop_last` drops a final partial batch.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut RngStream>, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let order = match rng {
        Some(r) => r.permutation(n),
        None => (0..n).collect(),
    };
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Xor,
    TwoGaussians,
    LinearSep,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xor" => Ok(ToyKind::Xor),
            "two_gaussians" => Ok(ToyKind::TwoGaussians),
            "linear_sep" => Ok(ToyKind::LinearSep),
            other => config_err(format!("unknown toy dataset '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Xor => "xor",
            ToyKind::TwoGaussians => "two_gaussians",
            ToyKind::LinearSep => "linear_sep",
        }
    }
}

/// Two-dimensional, two-class synthetic data.
///
/// * `xor`: the four corners of the unit square labelled by parity, cycled;
///   samples after the first four get Gaussian jitter (σ = 0.1).
/// * `two_gaussians`: unit-variance blobs centred at ±(1, 1).
/// * `linear_sep`: uniform points in `[-1, 1]²` labelled by a random line
///   through the origin, with a band of half-width 0.3 around it left empty.
pub fn make_toy(kind: ToyKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return config_err(format!("toy datasets need at least 4 samples, got {n}"));
    }
    let mut rng = RngStream::new(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    match kind {
        ToyKind::Xor => {
            for i in 0..n {
                let (a, b) = ((i >> 1) & 1, i & 1);
                let jitter = if i < 4 { 0.0 } else { 0.1 };
                xs.push(a as f64 + jitter * rng.normal());
                xs.push(b as f64 + jitter * rng.normal());
                labels.push(a ^ b);
            }
        }
        ToyKind::TwoGaussians => {
            for i in 0..n {
                let c = i % 2;
                let centre = if c == 0 { -1.0 } else { 1.0 };
                xs.push(centre + rng.normal());
                xs.push(centre + rng.normal());
                labels.push(c);
            }
        }
        ToyKind::LinearSep => {
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (wx, wy) = (angle.cos(), angle.sin());
            while labels.len() < n {
                let (x, y) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
                let s = wx * x + wy * y;
                if s.abs() < LINEAR_SEP_MARGIN {
                    continue;
                }
                xs.push(x);
                xs.push(y);
                labels.push(usize::from(s > 0.0));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], xs)?, labels, 2)
}
