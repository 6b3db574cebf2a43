//! Dataset ingestion, normalization, splitting, and deterministic sampling.

pub mod cifar;
pub mod idx;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use ndarray::{Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

/// Images are padded / shipped at this spatial size.
pub const IMAGE_SIDE: usize = 32;

/// Where a dataset's records came from. The experiment pipeline uses this to
/// assert that private images never reach the federated model or the
/// attacker in a defended run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// The defender's real images.
    Private,
    /// Images sampled from a generator.
    Generated,
    /// Convex mixtures of private and generated images.
    Mixed,
}

/// A rank-4 batch of images (N x C x H x W) with pixels in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    pixels: Array4<F>,
}

impl<F: Scalar> ImageBatch<F> {
    /// Wraps a pixel tensor, checking the [-1, 1] range and channel count.
    pub fn new(pixels: Array4<F>) -> Result<Self> {
        let c = pixels.shape()[1];
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "1 or 3 channels".into(),
                got: format!("{c} channels"),
            });
        }
        let (lo, hi) = (s::<F>(-1.0), s::<F>(1.0));
        if pixels.iter().any(|&p| p < lo || p > hi || !p.is_finite()) {
            return Err(Error::ShapeMismatch {
                expected: "pixels in [-1, 1]".into(),
                got: "out-of-range pixel".into(),
            });
        }
        Ok(Self { pixels })
    }

    /// Wraps a tensor the caller already guarantees to be in range
    /// (e.g. the output of a tanh activation or a convex combination).
    pub fn from_bounded(pixels: Array4<F>) -> Self {
        debug_assert!(pixels
            .iter()
            .all(|&p| p >= s::<F>(-1.0) && p <= s::<F>(1.0)));
        Self { pixels }
    }

    pub fn pixels(&self) -> &Array4<F> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array4<F> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, F> {
        self.pixels.index_axis(Axis(0), i)
    }

    /// Selects a sub-batch by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
        }
    }
}

/// Paired images and integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset<F> {
    pub images: ImageBatch<F>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl<F: Scalar> LabeledDataset<F> {
    pub fn new(
        images: ImageBatch<F>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", images.len()),
                got: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Selects a subset by index, preserving order and metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// Indices of every sample with the given label.
    pub fn class_indices(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// The affine byte-to-pixel map: 0 -> -1, 255 -> +1.
pub fn normalize_byte<F: Scalar>(byte: u8) -> F {
    s::<F>(byte as f64 / 127.5 - 1.0)
}

/// Inverse of [`normalize_byte`]; exact on round-trips.
pub fn denormalize_pixel<F: Scalar>(p: F) -> u8 {
    let v = (p.to_f64_lossy() + 1.0) * 127.5;
    v.round().clamp(0.0, 255.0) as u8
}

/// Supported dataset identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            "cifar100" | "cifar-100" => Ok(DatasetName::Cifar100),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Directory holding one subdirectory per dataset.
    pub root: PathBuf,
    /// Keep only the first `limit` records (after deterministic file order).
    pub limit: Option<usize>,
    /// CIFAR-100 label granularity.
    pub cifar100_labels: cifar::Cifar100Labels,
}

impl LoadOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            limit: None,
            cifar100_labels: cifar::Cifar100Labels::Fine,
        }
    }

    pub fn with_limit(mut self, limit: Option<usize>) -> Self {
        self.limit = limit;
        self
    }
}

/// Loads and normalizes a dataset split. MNIST digits are zero-padded (with
/// the -1 background value) from 28x28 to 32x32 so every dataset shares the
/// same geometry.
pub fn load_dataset<F: Scalar>(
    name: DatasetName,
    split: Split,
    opts: &LoadOptions,
) -> Result<LabeledDataset<F>> {
    match name {
        DatasetName::Mnist => load_mnist(split, opts),
        DatasetName::Cifar10 => load_cifar(name, split, opts),
        DatasetName::Cifar100 => load_cifar(name, split, opts),
    }
}

fn apply_limit(limit: Option<usize>, n: usize) -> usize {
    limit.map_or(n, |l| l.min(n))
}

fn load_mnist<F: Scalar>(split: Split, opts: &LoadOptions) -> Result<LabeledDataset<F>> {
    let dir = opts.root.join("mnist");
    let (img_file, lab_file) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let imgs = idx::read_images(&dir.join(img_file))?;
    let labels = idx::read_labels(&dir.join(lab_file))?;
    if imgs.count != labels.len() {
        return Err(Error::MalformedSource {
            path: dir.join(lab_file),
            reason: format!("{} labels for {} images", labels.len(), imgs.count),
        });
    }
    let n = apply_limit(opts.limit, imgs.count);
    let (rows, cols) = (imgs.rows, imgs.cols);
    if rows > IMAGE_SIDE || cols > IMAGE_SIDE {
        return Err(Error::MalformedSource {
            path: dir.join(img_file),
            reason: format!("{rows}x{cols} exceeds the {IMAGE_SIDE}x{IMAGE_SIDE} frame"),
        });
    }
    // Center the digit in the 32x32 frame, background at -1.
    let (off_r, off_c) = ((IMAGE_SIDE - rows) / 2, (IMAGE_SIDE - cols) / 2);
    let mut pixels = Array4::<F>::from_elem((n, 1, IMAGE_SIDE, IMAGE_SIDE), s(-1.0));
    for i in 0..n {
        let base = i * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                pixels[[i, 0, off_r + r, off_c + c]] =
                    normalize_byte(imgs.pixels[base + r * cols + c]);
            }
        }
    }
    LabeledDataset::new(
        ImageBatch::from_bounded(pixels),
        labels[..n].iter().map(|&l| l as usize).collect(),
        10,
        Provenance::Private,
    )
}

fn load_cifar<F: Scalar>(
    name: DatasetName,
    split: Split,
    opts: &LoadOptions,
) -> Result<LabeledDataset<F>> {
    let (records, num_classes) = match name {
        DatasetName::Cifar10 => {
            let dir = opts.root.join("cifar10");
            let paths: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            (cifar::read_cifar10(&paths)?, 10)
        }
        DatasetName::Cifar100 => {
            let dir = opts.root.join("cifar100");
            let path = dir.join(match split {
                Split::Train => "train.bin",
                Split::Test => "test.bin",
            });
            let k = match opts.cifar100_labels {
                cifar::Cifar100Labels::Fine => 100,
                cifar::Cifar100Labels::Coarse => 20,
            };
            (cifar::read_cifar100(&path, opts.cifar100_labels)?, k)
        }
        DatasetName::Mnist => unreachable!("mnist handled separately"),
    };
    let n = apply_limit(opts.limit, records.labels.len());
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut pixels = Array4::<F>::zeros((n, 3, IMAGE_SIDE, IMAGE_SIDE));
    for i in 0..n {
        let base = i * 3 * plane;
        for ch in 0..3 {
            for p in 0..plane {
                pixels[[i, ch, p / IMAGE_SIDE, p % IMAGE_SIDE]] =
                    normalize_byte(records.pixels[base + ch * plane + p]);
            }
        }
    }
    LabeledDataset::new(
        ImageBatch::from_bounded(pixels),
        records.labels[..n].iter().map(|&l| l as usize).collect(),
        num_classes,
        Provenance::Private,
    )
}

/// Splits a dataset into `num_clients` disjoint IID shards whose sizes
/// differ by at most one, deterministically under `seed`.
pub fn partition_clients<F: Scalar>(
    ds: &LabeledDataset<F>,
    num_clients: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset<F>>> {
    if num_clients < 2 {
        return Err(Error::InvalidConfig(
            "partitioning needs at least 2 clients".into(),
        ));
    }
    if num_clients > ds.len() {
        return Err(Error::TooManyClients {
            dataset_len: ds.len(),
            num_clients,
        });
    }
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    let mut rng = crate::rng_from_seed(seed);
    indices.shuffle(&mut rng);
    let base = ds.len() / num_clients;
    let extra = ds.len() % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        shards.push(ds.select(&indices[start..start + size]));
        start += size;
    }
    Ok(shards)
}

/// Draws one example of `label` uniformly at random.
pub fn sample_class<'a, F: Scalar, R: Rng>(
    ds: &'a LabeledDataset<F>,
    label: usize,
    rng: &mut R,
) -> Result<(usize, ArrayView3<'a, F>)> {
    let candidates = ds.class_indices(label);
    if candidates.is_empty() {
        return Err(Error::EmptyClass { class: label });
    }
    let idx = candidates[rng.random_range(0..candidates.len())];
    Ok((idx, ds.images.image(idx)))
}

/// Resolves the dataset root: explicit setting, else the `FEDVEIL_DATA_DIR`
/// environment variable, else `./data`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var("FEDVEIL_DATA_DIR") {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("data")
}
