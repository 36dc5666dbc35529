//! IDX ingestion, resizing, known/unknown pair construction and the two
//! NoiseGAN corruptions.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("IDX parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no {name} (or {name}.gz) under {dir}")]
    MissingFile { dir: PathBuf, name: String },
    #[error("invalid data configuration: {0}")]
    Config(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(DataError::Parse { offset, msg: msg.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

/// Raw IDX image file contents (magic 0x00000803).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        for d in [self.count, self.rows, self.cols] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images(IdxImages),
    Labels(Vec<u8>),
}

pub fn labels_to_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => parse_err(offset, "truncated header"),
    }
}

/// Parses a complete IDX byte stream of the expected kind.
pub fn parse_idx(bytes: &[u8], kind: IdxKind) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let (want, ndims) = match kind {
        IdxKind::Images => (IMAGES_MAGIC, 3),
        IdxKind::Labels => (LABELS_MAGIC, 1),
    };
    if magic != want {
        return parse_err(0, format!("magic {magic:#010x}, expected {want:#010x}"));
    }
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let Some(payload) = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) else {
        return parse_err(4, format!("dimension product overflows: {dims:?}"));
    };
    let available = bytes.len() - header;
    if available < payload {
        return parse_err(bytes.len(), format!("truncated payload: expected {payload} bytes, found {available}"));
    }
    if available > payload {
        return parse_err(header + payload, format!("{} trailing bytes after payload", available - payload));
    }
    let body = bytes[header..].to_vec();
    Ok(match kind {
        IdxKind::Images => IdxData::Images(IdxImages { count: dims[0], rows: dims[1], cols: dims[2], pixels: body }),
        IdxKind::Labels => IdxData::Labels(body),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    match parse_idx(bytes, IdxKind::Images)? {
        IdxData::Images(i) => Ok(i),
        IdxData::Labels(_) => unreachable!(),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match parse_idx(bytes, IdxKind::Labels)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => unreachable!(),
    }
}

/// Reads a file, gunzipping it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
}

const FASHION_NAMES: [&str; 10] =
    ["T-shirt", "Trouser", "Pullover", "Dress", "Coat", "Sandal", "Shirt", "Sneaker", "Bag", "Boot"];

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
        }
    }

    pub fn class_name(self, class: u8) -> String {
        match self {
            DatasetKind::Mnist => class.to_string(),
            DatasetKind::FashionMnist => FASHION_NAMES.get(class as usize).map_or_else(|| class.to_string(), |s| s.to_string()),
        }
    }

    /// Accepts a class index or (for Fashion-MNIST) a class name, case-insensitively.
    pub fn parse_class(self, s: &str) -> Option<u8> {
        if let Ok(v) = s.parse::<u8>() {
            return (v < 10).then_some(v);
        }
        match self {
            DatasetKind::Mnist => None,
            DatasetKind::FashionMnist => FASHION_NAMES.iter().position(|n| n.eq_ignore_ascii_case(s)).map(|i| i as u8),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion_mnist" | "fmnist" => Ok(DatasetKind::FashionMnist),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

/// The four standard IDX files of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub train_images: IdxImages,
    pub train_labels: Vec<u8>,
    pub test_images: IdxImages,
    pub test_labels: Vec<u8>,
}

fn find_file(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(DataError::MissingFile { dir: dir.to_path_buf(), name: name.to_string() })
}

impl Dataset {
    /// Loads `<root>/<dataset>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
    pub fn load(root: &Path, kind: DatasetKind) -> Result<Self> {
        let dir = root.join(kind.dir_name());
        let images = |n| find_file(&dir, n).and_then(|p| parse_idx_images(&read_maybe_gz(&p)?));
        let labels = |n| find_file(&dir, n).and_then(|p| parse_idx_labels(&read_maybe_gz(&p)?));
        let ds = Dataset {
            kind,
            train_images: images("train-images-idx3-ubyte")?,
            train_labels: labels("train-labels-idx1-ubyte")?,
            test_images: images("t10k-images-idx3-ubyte")?,
            test_labels: labels("t10k-labels-idx1-ubyte")?,
        };
        if ds.train_images.count != ds.train_labels.len() || ds.test_images.count != ds.test_labels.len() {
            return Err(DataError::Config("image and label counts differ".into()));
        }
        Ok(ds)
    }

    pub fn split(&self, test: bool) -> (&IdxImages, &[u8]) {
        if test {
            (&self.test_images, &self.test_labels)
        } else {
            (&self.train_images, &self.train_labels)
        }
    }
}

/// Maps byte 0 to -1.0 and byte 255 to +1.0.
pub fn normalize_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Bilinear resize of a `h x w` image to `target x target` using
/// half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &[f32], h: usize, w: usize, target: usize) -> Result<Vec<f32>> {
    if target < 1 {
        return Err(DataError::Config("resize target must be >= 1".into()));
    }
    if h < 2 || w < 2 || image.len() != h * w {
        return Err(DataError::Config(format!("resize source must be at least 2x2 with {h}x{w} values")));
    }
    let axis = |n: usize| -> Vec<(usize, usize, f32)> {
        let scale = n as f64 / target as f64;
        (0..target)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = (src.floor() as usize).min(n - 2);
                (lo, lo + 1, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let mut out = Vec::with_capacity(target * target);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image[y0 * w + x0] * (1.0 - fx) + image[y0 * w + x1] * fx;
            let bottom = image[y1 * w + x0] * (1.0 - fx) + image[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// `N x 1 x S x S` images with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
            return Err(DataError::Config(format!("image batch must be N x 1 x S x S, got {s:?}")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::Config("image values outside [-1, 1]".into()));
        }
        Ok(ImageBatch { images })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch { images: self.images.select_rows(idx) }
    }

    /// Normalizes and resizes the listed images of an IDX file.
    pub fn from_idx(src: &IdxImages, idx: &[usize], side: usize) -> Result<Self> {
        if idx.is_empty() {
            return Err(DataError::Config("empty image selection".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * side * side);
        for &i in idx {
            let img: Vec<f32> = src.image(i).iter().map(|&b| normalize_byte(b)).collect();
            if side == src.rows && side == src.cols {
                data.extend(img);
            } else {
                let resized = resize_bilinear(&img, src.rows, src.cols, side)?;
                data.extend(resized.into_iter().map(|v| v.clamp(-1.0, 1.0)));
            }
        }
        let t = Tensor::new(vec![idx.len(), 1, side, side], data).expect("shape matches data");
        Ok(ImageBatch { images: t })
    }
}

/// One known/unknown experiment: train on the known class only, test on both.
#[derive(Debug, Clone)]
pub struct PairExperiment {
    pub dataset: DatasetKind,
    pub known: u8,
    pub unknown: u8,
    pub train: ImageBatch,
    /// Indices into the official training split.
    pub train_indices: Vec<usize>,
    pub test: ImageBatch,
    /// 0 = known class, 1 = unknown class.
    pub test_labels: Vec<u8>,
    /// Indices into the official test split.
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOptions {
    pub side: usize,
    pub seed: u64,
    pub train_cap: Option<usize>,
    /// Seeded per-class subsample of the test split.
    pub test_cap_per_class: Option<usize>,
}

fn class_indices(labels: &[u8], class: u8) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
}

/// Seeded subsample of `cap` elements, returned in ascending order.
fn capped(mut idx: Vec<usize>, cap: Option<usize>, seed: u64, label: &str) -> Vec<usize> {
    if let Some(cap) = cap {
        if cap < idx.len() {
            let mut rng = rng::stream(seed, label, 0);
            let mut pick: Vec<usize> = index::sample(&mut rng, idx.len(), cap).into_iter().map(|i| idx[i]).collect();
            pick.sort_unstable();
            idx = pick;
        }
    }
    idx
}

pub fn build_pair_experiment(ds: &Dataset, known: u8, unknown: u8, opts: &PairOptions) -> Result<PairExperiment> {
    if known == unknown {
        return Err(DataError::Config(format!("known and unknown class are both {known}")));
    }
    let train_all = class_indices(&ds.train_labels, known);
    if train_all.is_empty() {
        return Err(DataError::Config(format!("class {known} has no training images")));
    }
    let train_indices = capped(train_all, opts.train_cap, opts.seed, "train_cap");
    let mut test_indices = Vec::new();
    for class in [known, unknown] {
        let idx = class_indices(&ds.test_labels, class);
        if idx.is_empty() {
            return Err(DataError::Config(format!("class {class} has no test images")));
        }
        test_indices.extend(capped(idx, opts.test_cap_per_class, opts.seed, &format!("test_cap_{class}")));
    }
    test_indices.sort_unstable();
    let test_labels = test_indices.iter().map(|&i| u8::from(ds.test_labels[i] == unknown)).collect();
    Ok(PairExperiment {
        dataset: ds.kind,
        known,
        unknown,
        train: ImageBatch::from_idx(&ds.train_images, &train_indices, opts.side)?,
        train_indices,
        test: ImageBatch::from_idx(&ds.test_images, &test_indices, opts.side)?,
        test_labels,
        test_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Additive N(0, sigma²) in normalized pixel units.
    Gaussian { sigma: f64 },
    /// Each pixel flips to -1 or +1 with probability `p`.
    SaltPepper { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(DataError::Config(format!("gaussian sigma {sigma} must be >= 0")))
            }
            NoiseKind::SaltPepper { p } if !(0.0..=1.0).contains(&p) => {
                Err(DataError::Config(format!("salt-and-pepper probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseSpec { seed, ..self }
    }

    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        match self.kind {
            NoiseKind::Gaussian { .. } => add_gaussian_noise(batch, self),
            NoiseKind::SaltPepper { .. } => add_salt_pepper(batch, self),
        }
    }
}

pub fn add_gaussian_noise(batch: &ImageBatch, spec: &NoiseSpec) -> Result<ImageBatch> {
    spec.validate()?;
    let NoiseKind::Gaussian { sigma } = spec.kind else {
        return Err(DataError::Config("expected a gaussian noise spec".into()));
    };
    let mut rng = rng::stream(spec.seed, "gaussian_noise", 0);
    let images = batch.images.map(|v| {
        let n: f64 = StandardNormal.sample(&mut rng);
        (v + (n * sigma) as f32).clamp(-1.0, 1.0)
    });
    Ok(ImageBatch { images })
}

pub fn add_salt_pepper(batch: &ImageBatch, spec: &NoiseSpec) -> Result<ImageBatch> {
    spec.validate()?;
    let NoiseKind::SaltPepper { p } = spec.kind else {
        return Err(DataError::Config("expected a salt-and-pepper noise spec".into()));
    };
    let mut rng = rng::stream(spec.seed, "salt_pepper", 0);
    let images = batch.images.map(|v| {
        if rng.random::<f64>() < p {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            v
        }
    });
    Ok(ImageBatch { images })
}
