//! Labelled datasets: IDX ingestion, the two-moons generator and feature
//! standardization.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::Signal;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Signal,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Signal,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature samples but {} labels",
                features.batch(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::LabelRange {
                label,
                index,
                class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &Signal {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features and labels of the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> (Signal, Vec<usize>) {
        let features = match &self.features {
            Signal::Flat(a) => Signal::Flat(a.select(Axis(1), indices)),
            Signal::Spatial(a) => Signal::Spatial(a.select(Axis(0), indices)),
        };
        (features, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn map_features(self, f: impl FnOnce(Signal) -> Result<Signal>) -> Result<Self> {
        let features = f(self.features)?;
        Self::new(features, self.labels, self.class_count, self.split, self.provenance)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::IdxTruncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX container with the expected magic number and returns its
/// dimensions and unsigned-byte payload.
fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32_be(bytes, 0)?;
    if found != magic {
        return Err(Error::IdxMagic { found, expected: magic });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_u32_be(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::IdxDimOverflow)?;
    let needed = header.checked_add(count).ok_or(Error::IdxDimOverflow)?;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..needed]))
}

/// Image file (magic 2051, dims `N × rows × cols`) to a features × N matrix
/// with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let (dims, payload) = parse_idx(bytes, IDX_IMAGES_MAGIC)?;
    let n = dims[0];
    let f = dims[1] * dims[2];
    let rows = Array2::from_shape_fn((n, f), |(i, j)| payload[i * f + j] as f64 / 255.0);
    Ok(rows.reversed_axes().as_standard_layout().into_owned())
}

/// Label file (magic 2049, one dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse_idx(bytes, IDX_LABELS_MAGIC)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    class_count: usize,
    split: Split,
) -> Result<Dataset> {
    let images_path = images.as_ref();
    let x = parse_idx_images(&fs::read(images_path)?)?;
    let y = parse_idx_labels(&fs::read(labels.as_ref())?)?;
    Dataset::new(
        Signal::Flat(x),
        y,
        class_count,
        split,
        format!("idx:{}", images_path.display()),
    )
}

/// Two interleaving half circles with `n_per_class` points each, class 0
/// first. Noise is isotropic Gaussian with standard deviation `noise`.
pub fn gen_two_moons(n_per_class: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidParameter("two moons needs n >= 1".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidParameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("validated noise");
    let n = 2 * n_per_class;
    let mut x = Array2::<f64>::zeros((2, n));
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let class = j / n_per_class;
        let t: f64 = rng.random_range(0.0..=std::f64::consts::PI);
        let (px, py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (ex, ey) = if noise > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        x[[0, j]] = px + ex;
        x[[1, j]] = py + ey;
        labels.push(class);
    }
    Dataset::new(
        Signal::Flat(x),
        labels,
        2,
        split,
        format!("two_moons(n={n_per_class}, noise={noise}, seed={seed})"),
    )
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation per feature row. Constant
    /// features get a unit scale.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::Shape("cannot standardize an empty set".into()));
        }
        let mean = x.mean_axis(Axis(1)).expect("nonempty");
        let std = x.std_axis(Axis(1), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.nrows()
            )));
        }
        Ok((x - &self.mean.view().insert_axis(Axis(1))) / self.std.view().insert_axis(Axis(1)))
    }

    pub fn apply_signal(&self, s: Signal) -> Result<Signal> {
        match s {
            Signal::Flat(a) => Ok(Signal::Flat(self.apply(&a)?)),
            Signal::Spatial(_) => Err(Error::Shape("standardization applies to flat features".into())),
        }
    }
}
