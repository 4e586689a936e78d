use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Share of samples the generators tag as validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels {
        labels: Vec<usize>,
        classes: usize,
    },
    /// `[n, k]` regression targets.
    Values(Tensor<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, features]`.
    pub inputs: Tensor<f64>,
    pub targets: Targets,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Everything tagged as training data.
    pub fn new(inputs: Tensor<f64>, targets: Targets) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Dimension {
                op: "dataset inputs (expected [n, features])",
                left: inputs.shape().to_vec(),
                right: vec![],
            });
        }
        let n = inputs.rows();
        let target_len = match &targets {
            Targets::Labels { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Contract(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
                labels.len()
            }
            Targets::Values(v) => v.rows(),
        };
        if target_len != n {
            return Err(Error::Dimension {
                op: "dataset inputs vs targets",
                left: vec![n],
                right: vec![target_len],
            });
        }
        Ok(Dataset {
            inputs,
            targets,
            splits: vec![Split::Train; n],
        })
    }

    /// Re-tags a seeded random `val_fraction` of the samples as validation.
    pub fn with_split(mut self, seed: u64, val_fraction: f64) -> Self {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        Rng::stream(seed, 0x5_911).shuffle(&mut idx);
        let n_val = (val_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
        self.splits = vec![Split::Train; n];
        for &i in &idx[..n_val] {
            self.splits[i] = Split::Val;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Labels { classes, .. } => Some(classes),
            Targets::Values(_) => None,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rows `idx`, in that order, keeping their split tags.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: match &self.targets {
                Targets::Labels { labels, classes } => Targets::Labels {
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                    classes: *classes,
                },
                Targets::Values(v) => Targets::Values(v.select_rows(idx)),
            },
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(&self.indices(split))
    }

    pub fn inputs_as<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(self.inputs.shape().to_vec(), self.inputs.data()).expect("same shape")
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape1d {
    /// `sin(pi x)`.
    Sine,
    /// `2 max(x, 0) - 0.5`, a single kink at 0.
    Piecewise,
    /// `1.5 x + 0.2`.
    Linear,
}

impl Shape1d {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Shape1d::Sine => (PI * x).sin(),
            Shape1d::Piecewise => 2.0 * x.max(0.0) - 0.5,
            Shape1d::Linear => 1.5 * x + 0.2,
        }
    }
}

/// `y = f(x) + N(0, noise_std^2)` with `x` uniform on `[-1, 1]`.
pub fn gen_regression_1d(seed: u64, n: usize, noise_std: f64, shape: Shape1d) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Contract(format!(
            "noise_std must be finite and >= 0, got {noise_std}"
        )));
    }
    let mut rng = Rng::seed(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(-1.0, 1.0);
        xs.push(x);
        ys.push(shape.eval(x) + noise_std * rng.normal());
    }
    let ds = Dataset::new(
        Tensor::new(vec![n, 1], xs)?,
        Targets::Values(Tensor::new(vec![n, 1], ys)?),
    )?;
    Ok(ds.with_split(seed, VAL_FRACTION))
}

fn check_classes(n: usize, classes: usize, spread: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::InsufficientData {
            needed: classes,
            got: n,
        });
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Contract(format!("spread must be finite and >= 0, got {spread}")));
    }
    Ok(())
}

/// Isotropic Gaussian blobs in 2-D with centres evenly spaced on a circle
/// of radius 2; sample `i` belongs to class `i % classes`.
pub fn gen_blobs(seed: u64, n: usize, classes: usize, spread: f64) -> Result<Dataset> {
    check_classes(n, classes, spread)?;
    let mut rng = Rng::seed(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        let angle = 2.0 * PI * c as f64 / classes as f64;
        xs.push(2.0 * angle.cos() + spread * rng.normal());
        xs.push(2.0 * angle.sin() + spread * rng.normal());
    }
    let ds = Dataset::new(Tensor::new(vec![n, 2], xs)?, Targets::Labels { labels, classes })?;
    Ok(ds.with_split(seed, VAL_FRACTION))
}

/// Interleaved spiral arms, one per class, with Gaussian jitter `spread`.
pub fn gen_two_spirals(seed: u64, n: usize, classes: usize, spread: f64) -> Result<Dataset> {
    check_classes(n, classes, spread)?;
    let mut rng = Rng::seed(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        let t = rng.uniform();
        let angle = 3.0 * PI * t + 2.0 * PI * c as f64 / classes as f64;
        let r = 0.2 + t;
        xs.push(r * angle.cos() + spread * rng.normal());
        xs.push(r * angle.sin() + spread * rng.normal());
    }
    let ds = Dataset::new(Tensor::new(vec![n, 2], xs)?, Targets::Labels { labels, classes })?;
    Ok(ds.with_split(seed, VAL_FRACTION))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX buffer: big-endian magic (`0x00000803` for
/// images, `0x00000801` for labels), one big-endian u32 per dimension, then
/// the raw bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated IDX magic"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("unsupported IDX magic {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(bytes.len() as u64, "truncated IDX dimensions"));
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
    let len = len.ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let available = bytes.len() - header;
    if available < len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated IDX payload: expected {len} bytes, found {available}"),
        ));
    }
    if available > len {
        return Err(Error::format((header + len) as u64, "trailing bytes after IDX payload"));
    }
    Ok(IdxFile {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = file.magic.to_be_bytes().to_vec();
    for d in &file.dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(&file.data);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

pub fn write_idx(path: &Path, file: &IdxFile) -> Result<()> {
    crate::io::write_atomic(path, &encode_idx(file))
}

/// Images scaled to `[0, 1]` and flattened row-major, paired with labels.
/// Classes = largest label + 1.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    if img.magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("{} is not an IDX image file", images.display()),
        ));
    }
    let lab = read_idx(labels)?;
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("{} is not an IDX label file", labels.display()),
        ));
    }
    let n = img.dims[0] as usize;
    if lab.dims[0] as usize != n {
        return Err(Error::Dimension {
            op: "IDX images vs labels",
            left: vec![n],
            right: vec![lab.dims[0] as usize],
        });
    }
    let features = img.data.len().checked_div(n).unwrap_or(0);
    let pixels = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, features], pixels)?,
        Targets::Labels { labels, classes },
    )
}
