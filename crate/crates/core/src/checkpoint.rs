//! Self-describing checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "NSCP" (4 bytes)
//! format version u32
//! header length u32, then that many bytes of JSON (CheckpointHeader)
//! tensor count u32
//! per tensor: name length u32, name bytes,
//!             rank u32, dims u64 × rank,
//!             payload length u64 (bytes)
//! raw tensor payloads, f32 little-endian, in directory order
//! ```
//!
//! A checkpoint is loadable with no out-of-band knowledge and round-trips
//! bit-exactly. Values are always stored as 32-bit floats regardless of the
//! in-memory scalar type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScraperModel};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;
use crate::tokenizer::TokenizerConfig;

pub const MAGIC: &[u8; 4] = b"NSCP";
pub const FORMAT_VERSION: u32 = 1;

/// Metrics snapshot stored alongside the weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub epoch: Option<usize>,
    pub train_loss: Option<f64>,
    pub val_f1_primary: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub training_seed: u64,
    #[serde(default)]
    pub metrics: MetricsSnapshot,
}

/// Serialize a model (header metadata + every named weight tensor).
pub fn save_checkpoint<F: Scalar>(
    model: &ScraperModel<F>,
    path: &Path,
    training_seed: u64,
    metrics: MetricsSnapshot,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        training_seed,
        metrics,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        let data: Vec<f32> = p.value.data().iter().map(|&v| v.as_f32()).collect();
        entries.push((name, p.value.dims().to_vec(), data));
    });

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, dims, data) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&((data.len() * 4) as u64).to_le_bytes())?;
    }
    for (_, _, data) in &entries {
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct DirEntry {
    name: String,
    dims: Vec<usize>,
    payload_bytes: u64,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptCheckpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Read only the header of a checkpoint.
pub fn load_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "bad magic bytes {magic:02x?}"
        )));
    }
    let version = read_u32(r, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(r, "header length")? as usize;
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::CorruptCheckpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact(r, &mut header_bytes, "header json")?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptCheckpoint(format!("header json: {e}")))?;
    Ok(header)
}

/// Load a checkpoint into a freshly built model of scalar type `F`.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ScraperModel<F>, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;

    let n_tensors = read_u32(&mut r, "tensor count")? as usize;
    let mut directory = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        if name_len > 4096 {
            return Err(Error::CorruptCheckpoint(format!(
                "implausible tensor name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r, "tensor dim")? as usize);
        }
        let payload_bytes = read_u64(&mut r, "payload length")?;
        let expect = dims.iter().product::<usize>() as u64 * 4;
        if payload_bytes != expect {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: payload {payload_bytes} bytes, dims imply {expect}"
            )));
        }
        directory.push(DirEntry {
            name,
            dims,
            payload_bytes,
        });
    }

    let mut tensors: std::collections::HashMap<String, Tensor<F>> =
        std::collections::HashMap::new();
    for entry in &directory {
        let mut raw = vec![0u8; entry.payload_bytes as usize];
        read_exact(&mut r, &mut raw, &format!("tensor {}", entry.name))?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::cast_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.dims, data));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes after payload".into()));
    }

    let mut model: ScraperModel<F> =
        ScraperModel::init(header.model.clone(), header.tokenizer.clone(), 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, p| {
        match tensors.remove(&name) {
            Some(t) if t.dims() == p.value.dims() => p.value = t,
            Some(t) => missing.push(format!(
                "{name}: shape {:?} in file, {:?} expected",
                t.dims(),
                p.value.dims()
            )),
            None => missing.push(format!("{name}: absent from file")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::CorruptCheckpoint(missing.join("; ")));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(Error::CorruptCheckpoint(format!(
            "unknown tensors in file: {}",
            extra.join(", ")
        )));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> ScraperModel<f32> {
        let tok = TokenizerConfig {
            vocab_size: 128,
            t_max: 8,
        };
        ScraperModel::init(ModelConfig::tiny(), tok, seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nscp");
        let model = tiny_model(42);
        save_checkpoint(&model, &path, 42, MetricsSnapshot::default()).unwrap();
        let (loaded, header) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(header.training_seed, 42);
        assert_eq!(header.model, model.config);

        let mut originals: Vec<(String, Vec<f32>)> = Vec::new();
        model.visit_params(&mut |name, p| originals.push((name, p.value.data().to_vec())));
        let mut idx = 0;
        loaded.visit_params(&mut |name, p| {
            assert_eq!(name, originals[idx].0);
            assert_eq!(p.value.data(), originals[idx].1.as_slice(), "{name}");
            idx += 1;
        });
        assert!(idx > 0);

        // byte-identical re-save
        let path2 = dir.path().join("m2.nscp");
        save_checkpoint(&loaded, &path2, 42, MetricsSnapshot::default()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nscp");
        save_checkpoint(&tiny_model(1), &path, 1, MetricsSnapshot::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let tpath = dir.path().join(format!("t{cut}.nscp"));
            std::fs::write(&tpath, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint::<f32>(&tpath), Err(Error::CorruptCheckpoint(_))),
                "cut at {cut} must be corrupt"
            );
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nscp");
        let mut f = File::create(&path).unwrap();
        f.write_all(MAGIC).unwrap();
        f.write_all(&99u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::VersionMismatch {
                found: 99,
                expected: FORMAT_VERSION
            })
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nscp");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn f64_model_loads_from_f32_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nscp");
        let model = tiny_model(7);
        save_checkpoint(&model, &path, 7, MetricsSnapshot::default()).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(&path).unwrap();
        let mut want: Vec<f32> = Vec::new();
        model.visit_params(&mut |_, p| want.extend_from_slice(p.value.data()));
        let mut got: Vec<f64> = Vec::new();
        loaded.visit_params(&mut |_, p| got.extend_from_slice(p.value.data()));
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(*g, *w as f64);
        }
    }
}
