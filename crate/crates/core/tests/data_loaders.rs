use std::path::{Path, PathBuf};

use proptest::prelude::*;
use qim::data::{load_cifar10, load_idx, make_batches, BatchPlan, Dataset, Split};
use qim::DataError;
use tempfile::TempDir;

fn idx_images(n: u32, h: u32, w: u32, magic: u32) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [magic, n, h, w] {
        out.extend(v.to_be_bytes());
    }
    out.extend((0..n * h * w).map(|i| (i % 251) as u8));
    out
}

fn idx_labels(n: u32, magic: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(magic.to_be_bytes());
    out.extend(n.to_be_bytes());
    out.extend((0..n).map(|i| (i % 10) as u8));
    out
}

fn cifar_records(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        out.push(l);
        // planar R, G, B: plane p holds value 10·p + r at every pixel
        for p in 0..3u8 {
            out.extend(std::iter::repeat_n(10 * p + r as u8, 1024));
        }
    }
    out
}

fn write(dir: &TempDir, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn pair(dir: &TempDir, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    (write(dir, "img", images), write(dir, "lbl", labels))
}

#[test]
fn well_formed_idx_loads() {
    let dir = TempDir::new().unwrap();
    let (i, l) = pair(&dir, &idx_images(5, 28, 28, 0x803), &idx_labels(5, 0x801));
    let data = load_idx(&i, &l).unwrap();
    assert_eq!(data.len(), 5);
    assert_eq!(data.image_shape(), (28, 28, 1));
    assert_eq!(data.label(3), 3);
    assert_eq!(data.image(1)[0], (784 % 251) as u8);
}

#[test]
fn idx_rejects_malformed_files() {
    let dir = TempDir::new().unwrap();
    let good_i = idx_images(4, 28, 28, 0x803);
    let good_l = idx_labels(4, 0x801);

    // label magic in the image slot
    let (i, l) = pair(&dir, &idx_images(4, 28, 28, 0x801), &good_l);
    assert!(matches!(load_idx(&i, &l), Err(DataError::BadMagic { found: 0x801, .. })));
    let (i, l) = pair(&dir, &good_i, &idx_labels(4, 0x803));
    assert!(matches!(load_idx(&i, &l), Err(DataError::BadMagic { .. })));

    // one byte short, one byte long
    let (i, l) = pair(&dir, &good_i[..good_i.len() - 1], &good_l);
    assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));
    let mut long = good_i.clone();
    long.push(0);
    let (i, l) = pair(&dir, &long, &good_l);
    assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));
    let (i, l) = pair(&dir, &good_i, &good_l[..good_l.len() - 1]);
    assert!(matches!(load_idx(&i, &l), Err(DataError::Truncated { .. })));
    let (i, l) = pair(&dir, &good_i[..10], &good_l);
    assert!(load_idx(&i, &l).is_err());

    let (i, l) = pair(&dir, &good_i, &idx_labels(3, 0x801));
    assert!(matches!(load_idx(&i, &l), Err(DataError::CountMismatch { images: 4, labels: 3 })));

    let mut bad_label = good_l.clone();
    *bad_label.last_mut().unwrap() = 10;
    let (i, l) = pair(&dir, &good_i, &bad_label);
    assert!(matches!(load_idx(&i, &l), Err(DataError::LabelOutOfRange { label: 10, .. })));

    let missing = dir.path().join("nope");
    assert!(matches!(load_idx(&missing, &l), Err(DataError::Io { .. })));
}

#[test]
fn cifar_records_become_hwc() {
    let dir = TempDir::new().unwrap();
    let a = write(&dir, "a.bin", &cifar_records(&[3, 9]));
    let b = write(&dir, "b.bin", &cifar_records(&[0]));
    let data = load_cifar10(&[a, b]).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.image_shape(), (32, 32, 3));
    assert_eq!(data.labels(), &[3, 9, 0]);
    // second record: every pixel is (1, 11, 21)
    assert_eq!(&data.image(1)[..6], &[1, 11, 21, 1, 11, 21]);
}

#[test]
fn cifar_rejects_malformed_files() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "bad_label.bin", &cifar_records(&[1, 10]));
    assert!(matches!(load_cifar10(&[&p]), Err(DataError::LabelOutOfRange { index: 1, label: 10, .. })));
    let mut short = cifar_records(&[1, 2]);
    short.pop();
    let p = write(&dir, "short.bin", &short);
    assert!(matches!(load_cifar10(&[&p]), Err(DataError::RecordLength { .. })));
    let p = write(&dir, "empty.bin", &[]);
    assert!(load_cifar10(&[&p]).is_err());
    assert!(load_cifar10::<&Path>(&[]).is_err());
}

fn synthetic(n: usize) -> Dataset {
    Dataset::from_parts(
        "synthetic",
        Split::Train,
        (0..n * 4).map(|i| i as u8).collect(),
        (0..n).map(|i| (i % 10) as u8).collect(),
        (2, 2, 1),
        10,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn batches_cover_every_index_once(n in 1usize..300, bs in 1usize..70, seed in any::<u64>(), shuffle in any::<bool>()) {
        let data = synthetic(n);
        let plan = if shuffle { BatchPlan::shuffled(bs, seed) } else { BatchPlan::sequential(bs) };
        let mut seen: Vec<usize> = Vec::new();
        for batch in make_batches::<f64>(&data, plan).unwrap() {
            prop_assert!(batch.indices.len() <= bs);
            prop_assert_eq!(batch.images.shape(), &[batch.indices.len(), 2, 2, 1][..]);
            for (&i, &l) in batch.indices.iter().zip(&batch.labels) {
                prop_assert_eq!(l, i % 10);
            }
            seen.extend(&batch.indices);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_keeps_only_full_batches(n in 1usize..300, bs in 1usize..70, seed in any::<u64>()) {
        let data = synthetic(n);
        let plan = BatchPlan { drop_last: true, ..BatchPlan::shuffled(bs, seed) };
        let batches: Vec<_> = make_batches::<f32>(&data, plan).unwrap().collect();
        prop_assert_eq!(batches.len(), n / bs);
        prop_assert!(batches.iter().all(|b| b.indices.len() == bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), (n / bs) * bs);
    }
}
