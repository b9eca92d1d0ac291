//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8  b"CLABCKPT"
//! version  u32
//! config   u64 length + TOML text of the model configuration
//! tensors  u32 count, then per tensor:
//!          u16 name length + name bytes
//!          u8 rank + u64 dims
//!          f64 values (row-major)
//! adam     u8 flag; if 1: u64 step count, then per tensor in the same
//!          order: f64 first moments, f64 second moments
//! ```
//!
//! Tensors are stored and restored in the model's canonical registry order;
//! a checkpoint whose names, shapes, or counts disagree with the registry
//! rebuilt from its own configuration is rejected.

use crate::error::Error;
use crate::nn::adam::AdamState;
use crate::nn::model::ModelState;
use crate::nn::Tensor;
use crate::Result;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLABCKPT";
const VERSION: u32 = 1;
/// Upper bound on a single tensor's element count, against corrupt headers.
const MAX_TENSOR_ELEMS: u64 = 1 << 30;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_exact(r, 1)?[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let b = read_exact(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = read_exact(r, n * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes the model, and optionally the optimizer state, to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelState,
    adam: Option<&AdamState>,
) -> Result<()> {
    let named = model.named_params();
    if let Some(state) = adam {
        if state.m.len() != named.len() {
            return Err(bad(format!(
                "optimizer tracks {} tensors, model has {}",
                state.m.len(),
                named.len()
            )));
        }
    }
    let config = toml::to_string(&model.config)
        .map_err(|e| bad(format!("config serialization failed: {e}")))?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in &named {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape.len() as u8])?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, &tensor.data)?;
    }
    match adam {
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step.to_le_bytes())?;
            for (m, v) in state.m.iter().zip(&state.v) {
                write_f64s(&mut w, &m.data)?;
                write_f64s(&mut w, &v.data)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a model and, if present, optimizer state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, Option<AdamState>)> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let magic = read_exact(&mut r, 8)?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u64(&mut r)?;
    if config_len > 1 << 20 {
        return Err(bad(format!("implausible config length {config_len}")));
    }
    let config_text = String::from_utf8(read_exact(&mut r, config_len as usize)?)
        .map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let config = toml::from_str(&config_text)
        .map_err(|e| bad(format!("config parse failed: {e}")))?;
    let mut model = ModelState::new(config)?;

    let count = read_u32(&mut r)? as usize;
    let mut stored: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len)?)
            .map_err(|e| bad(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u8(&mut r)? as usize;
        if rank > 8 {
            return Err(bad(format!("tensor {name} has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| bad(format!("tensor {name} has implausible extent")))?;
            shape.push(d as usize);
        }
        let data = read_f64s(&mut r, numel as usize)?;
        stored.push((name, Tensor::from_vec(&shape, data)?));
    }

    {
        let registry = model.named_params();
        if stored.len() != registry.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, model defines {}",
                stored.len(),
                registry.len()
            )));
        }
        for ((name, tensor), (want_name, want)) in stored.iter().zip(&registry) {
            if name != want_name {
                return Err(bad(format!(
                    "tensor order mismatch: found {name}, expected {want_name}"
                )));
            }
            if tensor.shape != want.shape {
                return Err(bad(format!(
                    "tensor {name} shaped {:?}, model defines {:?}",
                    tensor.shape, want.shape
                )));
            }
        }
    }
    for ((_, tensor), (_, slot)) in stored.iter().zip(model.named_params_mut()) {
        slot.data.copy_from_slice(&tensor.data);
    }

    let adam = match read_u8(&mut r)? {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(stored.len());
            let mut v = Vec::with_capacity(stored.len());
            for (name, tensor) in &stored {
                let n = tensor.numel();
                m.push(Tensor::from_vec(&tensor.shape, read_f64s(&mut r, n)?)?);
                v.push(Tensor::from_vec(&tensor.shape, read_f64s(&mut r, n)?)?);
                let _ = name;
            }
            let registry = model.named_params();
            let params: Vec<&Tensor> = registry.iter().map(|(_, t)| *t).collect();
            Some(AdamState::from_parts(step, m, v, &params)?)
        }
        other => return Err(bad(format!("invalid optimizer flag {other}"))),
    };
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok((model, adam)),
        _ => Err(bad("trailing bytes after checkpoint payload")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScanConfig;
    use crate::nn::model::{make_training_set, train_loop, ModelConfig};

    fn trained_pair() -> (ModelState, AdamState) {
        let config = ModelConfig {
            encoder_widths: [2, 3, 4],
            proj_channels: 4,
            scale: 2,
            ray_batch: 8,
            seed: 13,
            ..ModelConfig::default()
        };
        let cfg = ScanConfig {
            views: 2,
            step_deg: 90.0,
            start_deg: 10.0,
            source_to_object: 60.0,
            object_to_detector: 40.0,
            det_shape: [8, 8],
            det_spacing: [4.0, 4.0],
        };
        let samples = make_training_set(&cfg, [8, 8, 8], [4.0; 3], 1, 77).unwrap();
        let mut model = ModelState::new(config).unwrap();
        let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let mut adam = AdamState::new(&params);
        drop(params);
        train_loop(&mut model, &mut adam, &samples, 2).unwrap();
        (model, adam)
    }

    fn assert_bitwise_equal(a: &ModelState, b: &ModelState) {
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(&b.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {na} drifted");
            }
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact_with_optimizer_state() {
        let (model, adam) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&adam)).unwrap();
        let (loaded, loaded_adam) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_bitwise_equal(&loaded, &model);
        let loaded_adam = loaded_adam.unwrap();
        assert_eq!(loaded_adam.step, adam.step);
        for (a, b) in adam.m.iter().zip(&loaded_adam.m) {
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        for (a, b) in adam.v.iter().zip(&loaded_adam.v) {
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn round_trip_without_optimizer_state() {
        let (model, _) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let (loaded, adam) = load_checkpoint(&path).unwrap();
        assert!(adam.is_none());
        assert_bitwise_equal(&loaded, &model);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let (model, _) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        bytes[0] ^= 0xFF;
        bytes[8] = 99; // version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let (model, adam) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&adam)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn renamed_tensors_are_rejected() {
        let (model, _) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"encoder.stem_w";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[at] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
