mod common;

use std::fs;

use mcevae::data::{augment, load_idx, read_cache, read_manifest, split, write_cache, SplitSpec};
use mcevae::graphcore::Tensor;
use mcevae::lie::{GroupKind, TransformSupport};
use mcevae::stn::transform_images;
use mcevae::Error;
use proptest::prelude::*;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn headers_agree_with_a_hex_dump() {
    let images = fs::read(common::images_path()).unwrap();
    let labels = fs::read(common::labels_path()).unwrap();
    // magic 0x803, 2000 items (0x7d0), 28 x 28 (0x1c)
    assert_eq!(hex(&images[..16]), "00000803000007d00000001c0000001c");
    assert_eq!(hex(&labels[..8]), "00000801000007d0");

    let raw = common::mnist();
    assert_eq!(raw.len(), 2000);
    assert_eq!(raw.image_size, 28);
    assert_eq!(raw.images.len(), 2000 * 784);
    assert!(raw.images.iter().zip(&images[16..]).all(|(&v, &b)| v == b as f64 / 255.0));
    assert!(raw.images.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn every_digit_class_is_present() {
    let raw = common::mnist();
    let bytes = fs::read(common::labels_path()).unwrap();
    let mut counts = [0usize; 10];
    for &b in &bytes[8..] {
        counts[b as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    let mut loaded = [0usize; 10];
    for &l in &raw.labels {
        loaded[l as usize] += 1;
    }
    assert_eq!(counts, loaded);
}

fn corrupt(bytes: &[u8], edit: impl FnOnce(&mut Vec<u8>)) -> tempfile::NamedTempFile {
    let mut b = bytes.to_vec();
    edit(&mut b);
    let f = tempfile::NamedTempFile::new().unwrap();
    fs::write(f.path(), b).unwrap();
    f
}

#[test]
fn malformed_files_are_rejected_with_a_reason() {
    let images = fs::read(common::images_path()).unwrap();
    let labels = fs::read(common::labels_path()).unwrap();
    let (ip, lp) = (common::images_path(), common::labels_path());

    let bad = corrupt(&images, |b| b[3] = 0x01);
    let err = load_idx(bad.path(), &lp).unwrap_err().to_string();
    assert!(err.contains("2051"), "{err}");

    let bad = corrupt(&labels, |b| b[3] = 0x03);
    let err = load_idx(&ip, bad.path()).unwrap_err().to_string();
    assert!(err.contains("2049"), "{err}");

    let short = corrupt(&images, |b| b.truncate(b.len() - 5));
    assert!(matches!(load_idx(short.path(), &lp), Err(Error::Format { .. })));

    let fewer = corrupt(&labels, |b| {
        b.truncate(b.len() - 1);
        b[4..8].copy_from_slice(&1999u32.to_be_bytes());
    });
    assert!(matches!(load_idx(&ip, fewer.path()), Err(Error::Mismatch { .. })));

    let missing = ip.with_file_name("no-such-file");
    let err = load_idx(&missing, &lp).unwrap_err().to_string();
    assert!(err.contains("no-such-file"), "{err}");
}

#[test]
fn augmentation_preserves_intensity_and_ground_truth() {
    let mut raw = common::mnist();
    raw.truncate(100);
    for kind in [GroupKind::So2, GroupKind::Se2] {
        let support = TransformSupport::default();
        let data = augment(&raw, kind, support, 23).unwrap();
        let again = augment(&raw, kind, support, 23).unwrap();
        assert_eq!(data.images, again.images);
        assert_eq!(data.taus, again.taus);
        assert!(data.taus.iter().all(|t| support.contains(t)));

        let gt = data.ground_truth.as_ref().unwrap();
        let (mean_x, mean_gt) = (
            data.images.iter().sum::<f64>() / data.images.len() as f64,
            gt.iter().sum::<f64>() / gt.len() as f64,
        );
        assert!((mean_x - mean_gt).abs() < 0.1 * mean_gt, "{kind}: {mean_x} vs {mean_gt}");

        let originals = Tensor::new(vec![100, 1, 28, 28], gt.clone()).unwrap();
        let redone = transform_images(&originals, &data.taus, kind).unwrap();
        for (a, b) in redone.data().iter().zip(&data.images) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cache_manifest_records_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cache = common::mnist_cache(dir.path(), 700, GroupKind::Se2, 5);
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!((m.count, m.train_count, m.val_count), (700, 600, 100));
    assert_eq!(m.subset, Some(700));
    assert_eq!(m.kind, GroupKind::Se2);
    assert!(m.has_ground_truth);
    assert_eq!(cache.train.len() + cache.val.len(), 700);

    // Regenerating with the same seed reproduces the identifier.
    let other = tempfile::tempdir().unwrap();
    common::mnist_cache(other.path(), 700, GroupKind::Se2, 5);
    assert_eq!(read_manifest(other.path()).unwrap().cache_id, m.cache_id);
    common::mnist_cache(other.path(), 700, GroupKind::Se2, 6);
    assert_ne!(read_manifest(other.path()).unwrap().cache_id, m.cache_id);
}

#[test]
fn dropped_ground_truth_stays_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = common::mnist();
    raw.truncate(14);
    let mut data = augment(&raw, GroupKind::So2, TransformSupport::default(), 1).unwrap();
    data.ground_truth = None;
    write_cache(dir.path(), &data, SplitSpec::six_to_one(1), None).unwrap();
    let cache = read_cache(dir.path()).unwrap();
    assert!(!cache.manifest.has_ground_truth);
    assert!(cache.data.ground_truth_at::<f64>(&[0, 1]).is_none());
}

#[test]
fn six_to_one_split_sizes() {
    for (n, train) in [(70000, 60000), (2000, 1715), (7, 6), (1, 1)] {
        let (t, v) = split(n, &SplitSpec::six_to_one(0));
        assert_eq!((t.len(), v.len()), (train, n - train));
    }
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 1usize..3000, seed in any::<u64>()) {
        let spec = SplitSpec::six_to_one(seed);
        let (train, val) = split(n, &spec);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(train.len(), (6 * n).div_ceil(7));
        prop_assert_eq!(split(n, &spec), (train, val));
    }
}
