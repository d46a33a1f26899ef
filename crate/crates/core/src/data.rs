//! MNIST-family (IDX) and CIFAR-10 (binary) loaders and seeded batching.
//!
//! Images are kept as raw bytes in N×H×W×C order and only converted to
//! floats in `[0, 1]` (`v / 255`) when a batch is assembled.
//!
//! Shuffling uses ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`)
//! and a Fisher–Yates pass from the last index down, drawing
//! `j = next_u64() % (i + 1)` for each `i`. Both the generator stream and the
//! draw rule are fixed, so batch order is reproducible from the seed alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CLASSES: usize = 10;

type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Vec<u8>,
    labels: Vec<u8>,
    h: usize,
    w: usize,
    c: usize,
    classes: usize,
}

impl Dataset {
    /// Validates and wraps raw N×H×W×C bytes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        split: Split,
        images: Vec<u8>,
        labels: Vec<u8>,
        (h, w, c): (usize, usize, usize),
        classes: usize,
    ) -> DataResult<Self> {
        let per = h * w * c;
        if per == 0 || !images.len().is_multiple_of(per) {
            return Err(DataError::CountMismatch { images: images.len() / per.max(1), labels: labels.len() });
        }
        if images.len() / per != labels.len() {
            return Err(DataError::CountMismatch { images: images.len() / per, labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DataError::LabelOutOfRange { path: PathBuf::new(), index, label, classes });
        }
        Ok(Self { name: name.into(), split, images, labels, h, w, c, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Raw H×W×C bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.h * self.w * self.c;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.h * self.w * self.c;
        Self {
            name: self.name.clone(),
            split: self.split,
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }
}

fn read(path: &Path) -> DataResult<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], len: usize) -> DataResult<()> {
    if bytes.len() < len {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: len as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

fn split_of(path: &Path) -> Split {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.starts_with("t10k") || name.contains("test") {
        Split::Test
    } else {
        Split::Train
    }
}

/// Reads an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Sizes must match the headers exactly.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> DataResult<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = read(ipath)?;
    header(ipath, &ib, 16)?;
    let magic = be_u32(&ib, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: ipath.to_path_buf(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, rows, cols) = (be_u32(&ib, 4) as usize, be_u32(&ib, 8) as usize, be_u32(&ib, 12) as usize);
    if rows == 0 || cols == 0 {
        return Err(DataError::Shape { path: ipath.to_path_buf(), detail: format!("{rows}×{cols}") });
    }
    let expected = 16 + n * rows * cols;
    if ib.len() != expected {
        return Err(DataError::Truncated {
            path: ipath.to_path_buf(),
            expected: expected as u64,
            actual: ib.len() as u64,
        });
    }

    let lb = read(lpath)?;
    header(lpath, &lb, 8)?;
    let magic = be_u32(&lb, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: lpath.to_path_buf(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let ln = be_u32(&lb, 4) as usize;
    if lb.len() != 8 + ln {
        return Err(DataError::Truncated {
            path: lpath.to_path_buf(),
            expected: 8 + ln as u64,
            actual: lb.len() as u64,
        });
    }
    if ln != n {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }
    let label_bytes = lb[8..].to_vec();
    if let Some((index, &label)) = label_bytes.iter().enumerate().find(|(_, &l)| l as usize >= CLASSES) {
        return Err(DataError::LabelOutOfRange { path: lpath.to_path_buf(), index, label, classes: CLASSES });
    }
    let name = ipath.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("idx").to_string();
    Dataset::from_parts(name, split_of(ipath), ib[16..].to_vec(), label_bytes, (rows, cols, 1), CLASSES)
}

/// Reads CIFAR-10 batch files: 3073-byte records of one label byte followed
/// by the R, G and B planes (32×32 each). Records are concatenated in file
/// order and converted to H×W×C.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> DataResult<Dataset> {
    if paths.is_empty() {
        return Err(DataError::Empty);
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut split = Split::Train;
    for path in paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.is_empty() {
            return Err(DataError::Truncated { path: path.to_path_buf(), expected: CIFAR_RECORD as u64, actual: 0 });
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordLength {
                path: path.to_path_buf(),
                len: bytes.len() as u64,
                record: CIFAR_RECORD,
            });
        }
        split = split_of(path);
        images.reserve(bytes.len());
        for (index, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
            let label = rec[0];
            if label as usize >= CLASSES {
                return Err(DataError::LabelOutOfRange { path: path.to_path_buf(), index, label, classes: CLASSES });
            }
            labels.push(label);
            let px = &rec[1..];
            for p in 0..plane {
                images.extend_from_slice(&[px[p], px[plane + p], px[2 * plane + p]]);
            }
        }
    }
    Dataset::from_parts("cifar10", split, images, labels, (CIFAR_SIDE, CIFAR_SIDE, 3), CLASSES)
}

/// How to cut a dataset into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn shuffled(batch_size: usize, seed: u64) -> Self {
        Self { batch_size, shuffle_seed: Some(seed), drop_last: false }
    }

    pub fn sequential(batch_size: usize) -> Self {
        Self { batch_size, shuffle_seed: None, drop_last: false }
    }
}

/// A permutation of `0..n` drawn from `seed`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// One batch of normalized images.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// B×H×W×C, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
}

/// Iterator over the batches of a plan.
pub struct Batches<'a, T> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    plan: BatchPlan,
    _marker: std::marker::PhantomData<T>,
}

/// Batches `dataset` according to `plan`.
pub fn make_batches<T: Scalar>(dataset: &Dataset, plan: BatchPlan) -> DataResult<Batches<'_, T>> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    assert!(plan.batch_size >= 1, "batch size must be positive");
    let order = match plan.shuffle_seed {
        Some(seed) => shuffled_indices(dataset.len(), seed),
        None => (0..dataset.len()).collect(),
    };
    Ok(Batches { dataset, order, pos: 0, plan, _marker: std::marker::PhantomData })
}

/// `v / 255` as the element type.
pub fn normalize_pixel<T: Scalar>(v: u8) -> T {
    T::lit(v as f64 / 255.0)
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.plan.drop_last && remaining < self.plan.batch_size) {
            return None;
        }
        let take = remaining.min(self.plan.batch_size);
        let indices = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        let (h, w, c) = self.dataset.image_shape();
        let lut: Vec<T> = (0..=255u8).map(normalize_pixel).collect();
        let mut data = Vec::with_capacity(take * h * w * c);
        for &i in &indices {
            data.extend(self.dataset.image(i).iter().map(|&v| lut[v as usize]));
        }
        let labels = indices.iter().map(|&i| self.dataset.label(i)).collect();
        let images = Tensor::from_vec(&[take, h, w, c], data).expect("batch shape");
        Some(Batch { images, labels, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = (0..n * 4).map(|i| (i % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::from_parts("tiny", Split::Train, images, labels, (2, 2, 1), 10).unwrap()
    }

    #[test]
    fn batch_sizes_without_drop_last() {
        let ds = tiny(100);
        let sizes: Vec<usize> =
            make_batches::<f32>(&ds, BatchPlan::shuffled(64, 1)).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![64, 36]);
        let plan = BatchPlan { drop_last: true, ..BatchPlan::shuffled(64, 1) };
        let sizes: Vec<usize> = make_batches::<f32>(&ds, plan).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![64]);
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(shuffled_indices(1000, 5), shuffled_indices(1000, 5));
        assert_ne!(shuffled_indices(1000, 5), shuffled_indices(1000, 6));
    }

    #[test]
    fn pixel_normalization_endpoints() {
        assert_eq!(normalize_pixel::<f32>(255), 1.0);
        assert_eq!(normalize_pixel::<f32>(0), 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::from_parts("e", Split::Test, vec![], vec![], (2, 2, 1), 10).unwrap();
        assert!(matches!(make_batches::<f32>(&ds, BatchPlan::sequential(4)), Err(DataError::Empty)));
    }

    #[test]
    fn from_parts_checks_labels_and_counts() {
        assert!(Dataset::from_parts("x", Split::Train, vec![0; 8], vec![1], (2, 2, 1), 10).is_err());
        assert!(Dataset::from_parts("x", Split::Train, vec![0; 4], vec![10], (2, 2, 1), 10).is_err());
    }
}
