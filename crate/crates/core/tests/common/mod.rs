#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mcevae::data::{augment, load_idx, read_cache, write_cache, DatasetCache, RawDataset, SplitSpec};
use mcevae::lie::{GroupKind, TransformSupport};
use mcevae::model::ModelConfig;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn images_path() -> PathBuf {
    data_dir().join("mnist2k-images-idx3-ubyte")
}

pub fn labels_path() -> PathBuf {
    data_dir().join("mnist2k-labels-idx1-ubyte")
}

/// The bundled 2000 MNIST training digits.
pub fn mnist() -> RawDataset {
    load_idx(&images_path(), &labels_path()).expect("bundled MNIST subset")
}

/// Augments the first `n` bundled digits and round-trips them through a cache in `dir`.
pub fn mnist_cache(dir: &Path, n: usize, kind: GroupKind, seed: u64) -> DatasetCache {
    let mut raw = mnist();
    raw.truncate(n);
    let data = augment(&raw, kind, TransformSupport::default(), seed).unwrap();
    write_cache(dir, &data, SplitSpec::six_to_one(seed), Some(n)).unwrap();
    read_cache(dir).unwrap()
}

/// A model small enough for 8x8 finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        encoder_channels: vec![2, 3, 3, 4],
        cluster_hidden: 6,
        latent_hidden: 5,
        transform_hidden: 4,
        decoder_hidden: 7,
        ..ModelConfig::default()
    }
}

/// A reduced-width 28x28 model for fast training tests.
pub fn small_config(kind: GroupKind) -> ModelConfig {
    ModelConfig {
        kind,
        encoder_channels: vec![4, 8, 8, 16],
        cluster_hidden: 32,
        latent_hidden: 32,
        transform_hidden: 8,
        decoder_hidden: 32,
        ..ModelConfig::default()
    }
}
