//! Parameter checkpoints: a text manifest plus a blob of little-endian `f64`s.
//!
//! ```text
//! mcevae-checkpoint 1
//! encoder.conv0.weight	32,1,3,3	0
//! encoder.conv0.bias	32	2304
//! ```
//!
//! Each line after the version header is `name<TAB>shape<TAB>byte offset`; a
//! 0-d tensor has shape `-`. Values appear in the blob in manifest order.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::graphcore::params::ParameterStore;
use crate::graphcore::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_HEADER: &str = "mcevae-checkpoint 1";

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(vec![]);
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

pub fn write_checkpoint<S: Scalar>(
    store: &ParameterStore<S>,
    manifest: &Path,
    blob: &Path,
) -> Result<(), Error> {
    let mut text = String::from(CHECKPOINT_HEADER);
    text.push('\n');
    let mut bytes = Vec::new();
    for id in store.ids() {
        let value = store.value(id);
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            store.name(id),
            format_shape(value.shape()),
            bytes.len()
        ));
        for v in value.to_f64_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    Ok(())
}

/// Reads every named tensor in manifest order.
pub fn read_checkpoint<S: Scalar>(
    manifest: &Path,
    blob: &Path,
) -> Result<Vec<(String, Tensor<S>)>, Error> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let bad = |detail: String| Error::Format {
        path: manifest.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CHECKPOINT_HEADER => {}
        other => {
            return Err(bad(format!(
                "expected header '{}', found {:?}",
                CHECKPOINT_HEADER, other
            )))
        }
    }
    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("line {}: expected 3 tab-separated fields", lineno + 2)));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad(format!("line {}: bad shape", lineno + 2)))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("line {}: bad offset", lineno + 2)))?;
        if offset != expected_offset {
            return Err(bad(format!(
                "{name}: offset {offset}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > bytes.len() {
            return Err(Error::Format {
                path: blob.to_path_buf(),
                detail: format!("truncated at {name}: need {end} bytes, have {}", bytes.len()),
            });
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::Format {
            path: blob.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected_offset),
        });
    }
    Ok(out)
}

/// Overwrites every tensor of `store` from a checkpoint; names and shapes must match exactly.
pub fn load_checkpoint<S: Scalar>(
    store: &mut ParameterStore<S>,
    manifest: &Path,
    blob: &Path,
) -> Result<(), Error> {
    let entries = read_checkpoint::<S>(manifest, blob)?;
    if entries.len() != store.len() {
        return Err(Error::Mismatch {
            field: "parameter count".into(),
            detail: format!("checkpoint has {}, model has {}", entries.len(), store.len()),
        });
    }
    for (name, tensor) in entries {
        let id = store.find(&name).ok_or_else(|| Error::Mismatch {
            field: name.clone(),
            detail: "not a parameter of this model".into(),
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Mismatch {
                field: name,
                detail: format!(
                    "checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                ),
            });
        }
        store.set_value(id, tensor)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        store
            .add("a.weight", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap(), true)
            .unwrap();
        store.add("a.bias", Tensor::scalar(0.125), true).unwrap();
        store
            .add("bn.running_var", Tensor::full(&[4], 1.0), false)
            .unwrap();
        store
    }

    #[test]
    fn manifest_lists_names_shapes_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("p.txt"), dir.path().join("p.bin"));
        write_checkpoint(&sample_store(), &m, &b).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert_eq!(
            text,
            "mcevae-checkpoint 1\na.weight\t2,3\t0\na.bias\t-\t48\nbn.running_var\t4\t56\n"
        );
        assert_eq!(std::fs::read(&b).unwrap().len(), 88);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("p.txt"), dir.path().join("p.bin"));
        let original = sample_store();
        write_checkpoint(&original, &m, &b).unwrap();
        let mut restored = sample_store();
        for id in restored.ids().collect::<Vec<_>>() {
            let zeros = Tensor::zeros(restored.value(id).shape());
            restored.set_value(id, zeros).unwrap();
        }
        load_checkpoint(&mut restored, &m, &b).unwrap();
        for id in original.ids() {
            assert_eq!(original.value(id), restored.value(id));
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("p.txt"), dir.path().join("p.bin"));
        write_checkpoint(&sample_store(), &m, &b).unwrap();
        let mut other = ParameterStore::<f64>::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        other.add("a.bias", Tensor::scalar(0.0), true).unwrap();
        other.add("bn.running_var", Tensor::zeros(&[4]), false).unwrap();
        let err = load_checkpoint(&mut other, &m, &b).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("p.txt"), dir.path().join("p.bin"));
        write_checkpoint(&sample_store(), &m, &b).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_checkpoint::<f64>(&m, &b).is_err());
    }
}
