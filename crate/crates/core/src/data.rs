//! MNIST ingestion, deterministic group-transformed augmentation, 6:1
//! splitting, and the on-disk dataset cache.
//!
//! A cache is a directory holding `manifest.toml`, `x.f64`, `tau.f64`,
//! `labels.u8` and, unless dropped, `x_gt.f64`. Float blobs are little-endian
//! `f64`, row-major `(N, 1, H, W)` for images and `(N, kind.dim())` for coefficients.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::graphcore::Tensor;
use crate::lie::{sample_transform, AlgebraCoefficients, GroupKind, TransformSupport};
use crate::rng::{stream_rng, Purpose};
use crate::scalar::Scalar;
use crate::stn::transform_images;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;
pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Images scaled into `[0, 1]`, with their digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub image_size: usize,
    /// Row-major `(N, 1, H, W)`.
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Keeps the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.pixels());
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>, Error> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(bad(format!(
            "bad IDX magic number {found} (expected {magic}, 0x{magic:08x})"
        )));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for dimensions {dims:?}, found {}",
            bytes.len()
        )));
    }
    Ok(dims)
}

/// Reads an IDX image file (magic 2051) and label file (magic 2049).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset, Error> {
    let img = read_file(images_path)?;
    let dims = idx_header(&img, images_path, IMAGES_MAGIC, 3)?;
    let lab = read_file(labels_path)?;
    let ldims = idx_header(&lab, labels_path, LABELS_MAGIC, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if h != w {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            detail: format!("images must be square, found {h}x{w}"),
        });
    }
    if n == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            detail: "no images".into(),
        });
    }
    if ldims[0] != n {
        return Err(Error::Mismatch {
            field: "item count".into(),
            detail: format!(
                "{} has {n} images but {} has {} labels",
                images_path.display(),
                labels_path.display(),
                ldims[0]
            ),
        });
    }
    let labels = lab[8..].to_vec();
    if let Some(&l) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            detail: format!("label {l} outside 0..=9"),
        });
    }
    Ok(RawDataset {
        image_size: h,
        images: img[16..].iter().map(|&b| b as f64 / 255.0).collect(),
        labels,
    })
}

/// Transformed images with their untransformed originals and true coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub kind: GroupKind,
    pub support: TransformSupport,
    pub seed: u64,
    pub image_size: usize,
    /// Transformed images `x`, row-major `(N, 1, H, W)`.
    pub images: Vec<f64>,
    /// Originals `x_gt`, absent when the cache was prepared without them.
    pub ground_truth: Option<Vec<f64>>,
    pub taus: Vec<AlgebraCoefficients<f64>>,
    pub labels: Vec<u8>,
}

/// Images per warp call during augmentation.
const AUGMENT_CHUNK: usize = 256;

/// Warps every image by its own `tau* ~ U(support)`; image `i` draws from
/// stream `i` of the augmentation generator.
pub fn augment(
    raw: &RawDataset,
    kind: GroupKind,
    support: TransformSupport,
    seed: u64,
) -> Result<AugmentedDataset, Error> {
    support.validate().map_err(Error::Config)?;
    let taus: Vec<AlgebraCoefficients<f64>> = (0..raw.len())
        .map(|i| sample_transform(&support, kind, &mut stream_rng(seed, Purpose::Augment, i as u64)))
        .collect();
    let px = raw.pixels();
    let mut images = Vec::with_capacity(raw.images.len());
    for (start, chunk) in (0..raw.len()).step_by(AUGMENT_CHUNK).zip(raw.images.chunks(AUGMENT_CHUNK * px)) {
        let n = chunk.len() / px;
        let x = Tensor::new(vec![n, 1, raw.image_size, raw.image_size], chunk.to_vec())?;
        images.extend(transform_images(&x, &taus[start..start + n], kind)?.into_data());
    }
    Ok(AugmentedDataset {
        kind,
        support,
        seed,
        image_size: raw.image_size,
        images,
        ground_truth: Some(raw.images.clone()),
        taus,
        labels: raw.labels.clone(),
    })
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    fn gather<S: Scalar>(&self, source: &[f64], indices: &[usize]) -> Tensor<S> {
        let px = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend(source[i * px..(i + 1) * px].iter().map(|&v| S::lit(v)));
        }
        Tensor::new(vec![indices.len(), 1, self.image_size, self.image_size], data)
            .expect("gathered data matches shape")
    }

    /// Transformed images at `indices`, `(len, 1, H, W)`.
    pub fn images_at<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        self.gather(&self.images, indices)
    }

    /// Originals at `indices`, or `None` if the cache has none.
    pub fn ground_truth_at<S: Scalar>(&self, indices: &[usize]) -> Option<Tensor<S>> {
        self.ground_truth.as_ref().map(|gt| self.gather(gt, indices))
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Train/validation proportions and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_parts: usize,
    pub val_parts: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn six_to_one(seed: u64) -> Self {
        SplitSpec {
            train_parts: 6,
            val_parts: 1,
            seed,
        }
    }

    /// `ceil(n * train_parts / (train_parts + val_parts))`.
    pub fn train_size(&self, n: usize) -> usize {
        (n * self.train_parts).div_ceil(self.train_parts + self.val_parts)
    }
}

/// Shuffled, disjoint, exhaustive `(train, val)` index sets.
pub fn split(n: usize, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(spec.seed, Purpose::Split, 0));
    let val = idx.split_off(spec.train_size(n));
    (idx, val)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format_version: u32,
    /// Content hash of the blobs, identifying the cache in run manifests.
    pub cache_id: String,
    pub kind: GroupKind,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    /// Leading-items limit applied to the source files, if any.
    pub subset: Option<usize>,
    pub has_ground_truth: bool,
    pub train_count: usize,
    pub val_count: usize,
    pub support: TransformSupport,
    pub split: SplitSpec,
}

fn to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_le_bytes(bytes: &[u8], path: &Path, expected: usize) -> Result<Vec<f64>, Error> {
    if bytes.len() != expected * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// A dataset together with its split, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCache {
    pub manifest: CacheManifest,
    pub data: AugmentedDataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn blob_paths(dir: &Path) -> [PathBuf; 4] {
    ["x.f64", "x_gt.f64", "tau.f64", "labels.u8"].map(|f| dir.join(f))
}

/// Writes `data` into directory `dir` (created if missing) and returns the manifest.
pub fn write_cache(
    dir: &Path,
    data: &AugmentedDataset,
    split_spec: SplitSpec,
    subset: Option<usize>,
) -> Result<CacheManifest, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [x_path, gt_path, tau_path, label_path] = blob_paths(dir);
    let tau_rows: Vec<f64> = data.taus.iter().flat_map(|t| t.to_vec(data.kind)).collect();
    let blobs = [
        (x_path, Some(to_le_bytes(&data.images))),
        (gt_path, data.ground_truth.as_deref().map(to_le_bytes)),
        (tau_path, Some(to_le_bytes(&tau_rows))),
        (label_path, Some(data.labels.clone())),
    ];
    let mut hasher = Sha256::new();
    for (path, bytes) in &blobs {
        match bytes {
            Some(b) => {
                hasher.update(b);
                fs::write(path, b).map_err(|e| Error::io(path, e))?;
            }
            None if path.exists() => fs::remove_file(path).map_err(|e| Error::io(path, e))?,
            None => {}
        }
    }
    let digest = hasher.finalize();
    let cache_id: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    let train_count = split_spec.train_size(data.len());
    let manifest = CacheManifest {
        format_version: CACHE_FORMAT_VERSION,
        cache_id,
        kind: data.kind,
        seed: data.seed,
        count: data.len(),
        image_size: data.image_size,
        subset,
        has_ground_truth: data.ground_truth.is_some(),
        train_count,
        val_count: data.len() - train_count,
        support: data.support,
        split: split_spec,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CacheManifest, Error> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::Format {
            path,
            detail: format!(
                "cache format version {}, expected {}",
                manifest.format_version, CACHE_FORMAT_VERSION
            ),
        });
    }
    Ok(manifest)
}

/// Loads a cache directory and recomputes its split.
pub fn read_cache(dir: &Path) -> Result<DatasetCache, Error> {
    let manifest = read_manifest(dir)?;
    let [x_path, gt_path, tau_path, label_path] = blob_paths(dir);
    let n = manifest.count;
    let px = manifest.image_size * manifest.image_size;
    let images = from_le_bytes(&read_file(&x_path)?, &x_path, n * px)?;
    let ground_truth = if manifest.has_ground_truth {
        Some(from_le_bytes(&read_file(&gt_path)?, &gt_path, n * px)?)
    } else {
        None
    };
    let dim = manifest.kind.dim();
    let tau_rows = from_le_bytes(&read_file(&tau_path)?, &tau_path, n * dim)?;
    let taus = tau_rows
        .chunks(dim)
        .map(|row| AlgebraCoefficients::from_slice(row, manifest.kind))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Format {
            path: tau_path.clone(),
            detail: e.to_string(),
        })?;
    let labels = read_file(&label_path)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: label_path,
            detail: format!("expected {n} labels, found {}", labels.len()),
        });
    }
    let (train, val) = split(n, &manifest.split);
    let data = AugmentedDataset {
        kind: manifest.kind,
        support: manifest.support,
        seed: manifest.seed,
        image_size: manifest.image_size,
        images,
        ground_truth,
        taus,
        labels,
    };
    Ok(DatasetCache {
        manifest,
        data,
        train,
        val,
    })
}
