//! On-disk form of tensors and ground truth: a small JSON sidecar next to a
//! flat little-endian binary buffer, so counts survive round trips exactly
//! and diffs of the sidecar stay readable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DataError, DemandTensor, GroundTruth};

#[derive(Serialize, Deserialize)]
struct TensorManifest {
    num_pairs: usize,
    num_windows: usize,
    resolution_minutes: u32,
    start_time: DateTime<Utc>,
    pair_index: Vec<(String, String)>,
    /// Basename of the i64 little-endian row-major count buffer, resolved
    /// relative to the manifest's directory.
    data_file: String,
}

#[derive(Serialize, Deserialize)]
struct TruthManifest {
    num_pairs: usize,
    num_windows: usize,
    /// Basename of the f64 little-endian buffer holding the mu, phi and rho
    /// blocks in that order, each num_pairs × num_windows row-major.
    data_file: String,
}

fn sibling(json_path: &Path, basename: &str) -> std::path::PathBuf {
    json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(basename)
}

fn bin_basename(json_path: &Path) -> String {
    json_path
        .with_extension("bin")
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.bin".to_string())
}

/// Write `json_path` plus a `.bin` buffer of the counts beside it.
pub fn save_tensor(tensor: &DemandTensor, json_path: &Path) -> Result<(), DataError> {
    let data_file = bin_basename(json_path);
    let manifest = TensorManifest {
        num_pairs: tensor.num_pairs(),
        num_windows: tensor.num_windows(),
        resolution_minutes: tensor.resolution_minutes(),
        start_time: tensor.start_time(),
        pair_index: tensor.pair_index().to_vec(),
        data_file: data_file.clone(),
    };
    let mut json = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut json, &manifest).map_err(|e| DataError::BadShape {
        context: format!("cannot encode manifest: {e}"),
    })?;
    json.write_all(b"\n")?;
    json.flush()?;

    let mut bin = BufWriter::new(File::create(sibling(json_path, &data_file))?);
    for &c in tensor.counts() {
        bin.write_all(&c.to_le_bytes())?;
    }
    bin.flush()?;
    Ok(())
}

/// Load a tensor saved by [`save_tensor`], validating buffer length.
pub fn load_tensor(json_path: &Path) -> Result<DemandTensor, DataError> {
    let manifest: TensorManifest = serde_json::from_reader(BufReader::new(File::open(json_path)?))
        .map_err(|e| DataError::BadShape {
            context: format!("{}: {e}", json_path.display()),
        })?;
    let expected = manifest.num_pairs * manifest.num_windows;
    let counts = read_i64_buffer(&sibling(json_path, &manifest.data_file), expected)?;
    DemandTensor::new(
        manifest.pair_index,
        counts,
        manifest.num_windows,
        manifest.resolution_minutes,
        manifest.start_time,
    )
}

/// Write ground truth as `json_path` plus a `.bin` of mu|phi|rho blocks.
pub fn save_truth(truth: &GroundTruth, json_path: &Path) -> Result<(), DataError> {
    let data_file = bin_basename(json_path);
    let manifest = TruthManifest {
        num_pairs: truth.num_pairs,
        num_windows: truth.num_windows,
        data_file: data_file.clone(),
    };
    let mut json = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut json, &manifest).map_err(|e| DataError::BadShape {
        context: format!("cannot encode manifest: {e}"),
    })?;
    json.write_all(b"\n")?;
    json.flush()?;

    let mut bin = BufWriter::new(File::create(sibling(json_path, &data_file))?);
    for block in [&truth.mu, &truth.phi, &truth.rho] {
        for x in block.iter() {
            bin.write_all(&x.to_le_bytes())?;
        }
    }
    bin.flush()?;
    Ok(())
}

/// Load ground truth saved by [`save_truth`].
pub fn load_truth(json_path: &Path) -> Result<GroundTruth, DataError> {
    let manifest: TruthManifest = serde_json::from_reader(BufReader::new(File::open(json_path)?))
        .map_err(|e| DataError::BadShape {
            context: format!("{}: {e}", json_path.display()),
        })?;
    let n = manifest.num_pairs * manifest.num_windows;
    let all = read_f64_buffer(&sibling(json_path, &manifest.data_file), 3 * n)?;
    Ok(GroundTruth {
        num_pairs: manifest.num_pairs,
        num_windows: manifest.num_windows,
        mu: all[..n].to_vec(),
        phi: all[n..2 * n].to_vec(),
        rho: all[2 * n..].to_vec(),
    })
}

fn read_exact_buffer(path: &Path, expected_bytes: usize) -> Result<Vec<u8>, DataError> {
    let mut bytes = Vec::with_capacity(expected_bytes);
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected_bytes {
        return Err(DataError::BadShape {
            context: format!(
                "{}: {} bytes on disk, manifest implies {expected_bytes}",
                path.display(),
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn read_i64_buffer(path: &Path, expected: usize) -> Result<Vec<i64>, DataError> {
    let bytes = read_exact_buffer(path, expected * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_f64_buffer(path: &Path, expected: usize) -> Result<Vec<f64>, DataError> {
    let bytes = read_exact_buffer(path, expected * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{synth_generate, SyntheticSpec};
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact() {
        let (tensor, truth) = synth_generate(&SyntheticSpec::uniform(2, 3, 25, 1.5, 1.0, 1.5, 42))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tensor_path = dir.path().join("demand.json");
        save_tensor(&tensor, &tensor_path).unwrap();
        assert_eq!(load_tensor(&tensor_path).unwrap(), tensor);

        let truth_path = dir.path().join("truth.json");
        save_truth(&truth, &truth_path).unwrap();
        assert_eq!(load_truth(&truth_path).unwrap(), truth);
    }

    #[test]
    fn truncated_buffer_is_reported() {
        let (tensor, _) =
            synth_generate(&SyntheticSpec::uniform(1, 2, 12, 1.0, 1.0, 1.5, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demand.json");
        save_tensor(&tensor, &path).unwrap();
        let bin = dir.path().join("demand.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(DataError::BadShape { .. })
        ));
    }
}
