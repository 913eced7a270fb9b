//! On-disk formats.
//!
//! A dataset directory holds `manifest.json`, an array of
//! `{id, length, feature_dim, count, cycles}` records, and one `<id>.f32` file
//! per sequence with `length × feature_dim` little-endian `f32` values in row
//! order. Generated suites put one such directory per split under
//! `train/`, `val/` and `test/`.
//!
//! A checkpoint is one line of JSON (model config plus a directory mapping
//! each tensor name to its shape and byte offset), a newline, and then the
//! tensors as little-endian `f32` blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::sequence::{CycleSpan, FeatureSequence};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub length: usize,
    pub feature_dim: usize,
    pub count: usize,
    pub cycles: Vec<CycleSpan>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_f32(values: &[f64], out: &mut Vec<u8>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Rounds every feature to `f32` precision, matching what a write and
/// read-back produce.
pub fn quantize(seq: &FeatureSequence) -> FeatureSequence {
    let mut out = seq.clone();
    for v in out.features.data_mut() {
        *v = *v as f32 as f64;
    }
    out
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("sequence id {id:?} is not a safe file name")))
    }
}

pub fn write_dataset(dir: &Path, sequences: &[FeatureSequence]) -> Result<()> {
    let mut manifest = Vec::with_capacity(sequences.len());
    for seq in sequences {
        check_id(&seq.id)?;
        seq.validate()?;
        let mut bytes = Vec::with_capacity(seq.features.len() * 4);
        encode_f32(seq.features.data(), &mut bytes);
        write(&dir.join(format!("{}.f32", seq.id)), &bytes)?;
        manifest.push(ManifestRecord {
            id: seq.id.clone(),
            length: seq.len(),
            feature_dim: seq.feature_dim(),
            count: seq.count,
            cycles: seq.cycles.clone(),
        });
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(&dir.join(MANIFEST), &json)
}

/// Loads a dataset directory, validating every record and feature file.
pub fn read_dataset(dir: &Path) -> Result<Vec<FeatureSequence>> {
    let manifest: Vec<ManifestRecord> = serde_json::from_slice(&read(&dir.join(MANIFEST))?)
        .map_err(|e| Error::Invalid(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut out = Vec::with_capacity(manifest.len());
    let mut dims = None;
    for rec in manifest {
        check_id(&rec.id)?;
        if rec.length == 0 || rec.feature_dim == 0 {
            return Err(Error::Invalid(format!("{}: empty feature matrix", rec.id)));
        }
        if *dims.get_or_insert(rec.feature_dim) != rec.feature_dim {
            return Err(Error::Invalid(format!(
                "{}: feature_dim {} differs from the rest of the dataset",
                rec.id, rec.feature_dim
            )));
        }
        let path = dir.join(format!("{}.f32", rec.id));
        let bytes = read(&path)?;
        let expected = rec.length * rec.feature_dim * 4;
        if bytes.len() != expected {
            return Err(Error::Invalid(format!(
                "{}: {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let features = Tensor::new(vec![rec.length, rec.feature_dim], decode_f32(&bytes))?;
        let seq = FeatureSequence::new(rec.id.clone(), features, rec.cycles)
            .map_err(|e| Error::Invalid(format!("{}: {e}", rec.id)))?;
        if seq.count != rec.count {
            return Err(Error::Invalid(format!(
                "{}: count {} disagrees with {} cycles",
                rec.id,
                rec.count,
                seq.cycles.len()
            )));
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn write_splits(root: &Path, splits: [&[FeatureSequence]; 3]) -> Result<()> {
    for (name, seqs) in SPLITS.iter().zip(splits) {
        write_dataset(&root.join(name), seqs)?;
    }
    Ok(())
}

/// Reads `root/<split>`. A directory that itself holds a manifest is
/// accepted for any split name.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<FeatureSequence>> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}; expected train, val or test")));
    }
    if root.join(MANIFEST).is_file() {
        return read_dataset(root);
    }
    read_dataset(&root.join(split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let mut tensors = BTreeMap::new();
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    for (name, t) in &params.tensors {
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                offset: blob.len(),
            },
        );
        encode_f32(t.data(), &mut blob);
    }
    let header = CheckpointHeader {
        config: cfg.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Invalid("checkpoint header is not terminated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Invalid(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let blob = &bytes[nl + 1..];
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0;
    for (name, entry) in header.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset || entry.offset + n * 4 > blob.len() {
            return Err(Error::Invalid(format!("checkpoint tensor {name} has a bad offset")));
        }
        let data = decode_f32(&blob[entry.offset..entry.offset + n * 4]);
        tensors.insert(name, Tensor::new(entry.shape, data)?);
        expected_offset += n * 4;
    }
    if expected_offset != blob.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} trailing bytes",
            blob.len() - expected_offset
        )));
    }
    let params = ModelParams { tensors };
    params.check(&header.config)?;
    Ok((header.config, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    write(path, &encode_checkpoint(cfg, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode_checkpoint(&read(path)?)
}

/// Parses a JSON config; an empty or whitespace-only text yields the defaults.
pub fn parse_config<T: DeserializeOwned + Default>(text: &str) -> Result<T> {
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned + Default>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    parse_config(&text)
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    write(path, &json)
}

/// Writes one compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    write(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sequence, GenConfig};

    #[test]
    fn dataset_round_trip_is_quantized_copy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let seqs: Vec<_> = (0..4).map(|i| gen_sequence(&cfg, i).unwrap()).collect();
        write_dataset(dir.path(), &seqs).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let expected: Vec<_> = seqs.iter().map(quantize).collect();
        assert_eq!(back, expected);
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_sequence(&GenConfig::default(), 0).unwrap();
        write_dataset(dir.path(), std::slice::from_ref(&seq)).unwrap();
        let f = dir.path().join(format!("{}.f32", seq.id));
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Invalid(_))));
    }

    #[test]
    fn manifest_with_bad_cycles_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_sequence(&GenConfig::default(), 0).unwrap();
        write_dataset(dir.path(), std::slice::from_ref(&seq)).unwrap();
        let rec = ManifestRecord {
            id: seq.id.clone(),
            length: seq.len(),
            feature_dim: seq.feature_dim(),
            count: 1,
            cycles: vec![CycleSpan::new(5, seq.len())],
        };
        fs::write(dir.path().join(MANIFEST), serde_json::to_vec(&[rec]).unwrap()).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn unsafe_ids_are_rejected() {
        assert!(check_id("../x").is_err());
        assert!(check_id("").is_err());
        check_id("seq00001").unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = crate::gradsuite::reduced_model_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let first = encode_checkpoint(&cfg, &params).unwrap();
        let (cfg2, params2) = decode_checkpoint(&first).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode_checkpoint(&cfg2, &params2).unwrap(), first);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let cfg = crate::gradsuite::reduced_model_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(decode_checkpoint(&extra).is_err());
        assert!(decode_checkpoint(b"{}").is_err());
    }

    #[test]
    fn empty_config_gives_defaults() {
        let g: GenConfig = parse_config("  \n").unwrap();
        assert_eq!(g, GenConfig::default());
        assert!(parse_config::<GenConfig>("{\"nonsense\": 1}").is_err());
    }
}
