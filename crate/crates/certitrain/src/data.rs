//! Dataset ingestion and deterministic batching.
//!
//! MNIST arrives in IDX containers; pixels are scaled by 1/255 and nothing
//! else. No mean/std standardization: the certification intervals live on the
//! raw [0,1] pixel box, and standardizing inputs would silently rescale every
//! epsilon.

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;

use crate::error::{CertError, Result};
use crate::rng::{derive_rng, sample_standard_normal, stream};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled examples. `images` has shape [N, ...item]; the per-example shape
/// is whatever the network consuming it expects (e.g. [1, 28, 28] or [2]).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape.is_empty() {
            return Err(CertError::Data("images tensor needs a leading example axis".into()));
        }
        if images.shape[0] != labels.len() {
            return Err(CertError::ShapeMismatch {
                context: "dataset images vs labels",
                expected: vec![labels.len()],
                got: vec![images.shape[0]],
            });
        }
        if num_classes < 2 {
            return Err(CertError::Data(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        for &y in &labels {
            if y >= num_classes {
                return Err(CertError::LabelOutOfRange { label: y, num_classes });
            }
        }
        for &v in &images.data {
            if !(0.0..=1.0).contains(&v) {
                return Err(CertError::Data(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of a single example (the leading axis stripped).
    pub fn item_shape(&self) -> Vec<usize> {
        self.images.shape[1..].to_vec()
    }

    fn item_len(&self) -> usize {
        self.images.shape[1..].iter().product()
    }

    /// Copy of example `i` as a standalone tensor plus its label.
    pub fn example(&self, i: usize) -> (Tensor, usize) {
        let n = self.item_len();
        let data = self.images.data[i * n..(i + 1) * n].to_vec();
        (Tensor::new(self.item_shape(), data).unwrap(), self.labels[i])
    }

    /// First `n` examples, in stored order.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(CertError::Data(format!(
                "subset of {n} examples requested from a dataset of {}",
                self.len()
            )));
        }
        let item = self.item_len();
        let mut shape = self.images.shape.clone();
        shape[0] = n;
        let images = Tensor::new(shape, self.images.data[..n * item].to_vec()).unwrap();
        Dataset::new(images, self.labels[..n].to_vec(), self.num_classes)
    }
}

/// One shuffled slice of a dataset; `images` has shape [B, ...item].
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> (Tensor, usize) {
        let shape: Vec<usize> = self.images.shape[1..].to_vec();
        let n: usize = shape.iter().product();
        let data = self.images.data[i * n..(i + 1) * n].to_vec();
        (Tensor::new(shape, data).unwrap(), self.labels[i])
    }
}

/// Deterministic shuffled batches for one epoch. The permutation is a pure
/// function of (seed, epoch); the final short batch is included.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if dataset.is_empty() {
        return Err(CertError::EmptyBatch("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(CertError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let n = dataset.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, &[stream::SHUFFLE, epoch]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    Ok(BatchIter { dataset, perm, pos: 0, batch_size })
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    perm: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.perm.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.perm.len());
        let idx = &self.perm[self.pos..end];
        self.pos = end;
        let item = self.dataset.item_len();
        let mut data = Vec::with_capacity(idx.len() * item);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.dataset.images.data[i * item..(i + 1) * item]);
            labels.push(self.dataset.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.dataset.images.shape[1..]);
        Some(Batch { images: Tensor::new(shape, data).unwrap(), labels })
    }
}

fn read_be_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|_| CertError::Data(format!("truncated IDX header while reading {what}")))
}

/// IDX image container: magic 0x00000803, three big-endian u32 dims
/// (count, rows, cols), then one unsigned byte per pixel. Pixels land in
/// [0,1] as byte/255; the result has shape [count, 1, rows, cols].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let magic = read_be_u32(&mut r, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CertError::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(&mut r, "image count")? as usize;
    let rows = read_be_u32(&mut r, "rows")? as usize;
    let cols = read_be_u32(&mut r, "cols")? as usize;
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| CertError::Data("IDX image dimensions overflow".into()))?;
    if r.len() != total {
        return Err(CertError::Data(format!(
            "IDX image payload has {} bytes, header promises {total}",
            r.len()
        )));
    }
    let data: Vec<f64> = r.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// IDX label container: magic 0x00000801, one big-endian u32 count, then one
/// unsigned byte per label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = bytes;
    let magic = read_be_u32(&mut r, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CertError::Data(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(&mut r, "label count")? as usize;
    if r.len() != n {
        return Err(CertError::Data(format!(
            "IDX label payload has {} bytes, header promises {n}",
            r.len()
        )));
    }
    Ok(r.iter().map(|&b| b as usize).collect())
}

/// Inverse of `parse_idx_images` for [N, 1, H, W] tensors with pixel values
/// on the 1/255 grid.
pub fn write_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    if images.shape.len() != 4 || images.shape[1] != 1 {
        return Err(CertError::ShapeMismatch {
            context: "write_idx_images",
            expected: vec![0, 1, 0, 0],
            got: images.shape.clone(),
        });
    }
    let (n, h, w) = (images.shape[0], images.shape[2], images.shape[3]);
    let mut out = Vec::with_capacity(16 + images.data.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [n, h, w] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for &v in &images.data {
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        if y > u8::MAX as usize {
            return Err(CertError::Data(format!("label {y} does not fit an IDX byte")));
        }
        out.push(y as u8);
    }
    Ok(out)
}

/// Loads an image/label IDX pair from disk.
pub fn load_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    num_classes: usize,
) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    Dataset::new(images, labels, num_classes)
}

/// MNIST training split from a directory holding the canonical file names.
/// `subset` keeps only the first examples in file order.
pub fn mnist_train(dir: &Path, subset: Option<usize>) -> Result<Dataset> {
    let ds = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        10,
    )?;
    match subset {
        Some(n) => ds.take(n),
        None => Ok(ds),
    }
}

pub fn mnist_test(dir: &Path) -> Result<Dataset> {
    load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        10,
    )
}

/// Local MNIST copy for tests and examples: the CERTITRAIN_MNIST_DIR
/// environment variable if set, otherwise data/mnist at the workspace root.
/// Returns None when neither holds the training pair.
pub fn locate_mnist() -> Option<PathBuf> {
    let mut candidates = Vec::new();
    if let Ok(dir) = std::env::var("CERTITRAIN_MNIST_DIR") {
        candidates.push(PathBuf::from(dir));
    }
    candidates.push(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/mnist")
            .to_path_buf(),
    );
    candidates.into_iter().find(|dir| {
        dir.join("train-images-idx3-ubyte").is_file()
            && dir.join("train-labels-idx1-ubyte").is_file()
    })
}

/// Two Gaussian clusters on the first axis at 0.5 +/- separation/2 (sigma
/// 0.05, other axes centered at 0.5), clamped to the unit box. Class 0 is the
/// low cluster. Examples are stored class 0 first; batching reshuffles.
pub fn synthetic_blobs(n_per_class: usize, d: usize, separation: f64, seed: u64) -> Dataset {
    assert!(n_per_class >= 1 && d >= 1, "blob dataset needs n >= 1 and d >= 1");
    let mut rng = derive_rng(seed, &[stream::DATA]);
    let sigma = 0.05;
    let mut data = Vec::with_capacity(2 * n_per_class * d);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2usize {
        let center0 = if class == 0 {
            0.5 - separation / 2.0
        } else {
            0.5 + separation / 2.0
        };
        for _ in 0..n_per_class {
            for axis in 0..d {
                let center = if axis == 0 { center0 } else { 0.5 };
                let v = center + sigma * sample_standard_normal(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![2 * n_per_class, d], data).unwrap();
    Dataset::new(images, labels, 2).expect("blob construction satisfies dataset invariants")
}
