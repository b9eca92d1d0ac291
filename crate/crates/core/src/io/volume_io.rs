//! Raw volume files.
//!
//! A volume is stored as raw 32-bit IEEE-754 little-endian scalars, x-fastest
//! then y then z, channel-major, next to a TOML sidecar `<file>.toml` holding
//! shape, spacing, and channel count. Reading validates the byte length
//! against the sidecar before accepting the data.

use crate::error::Error;
use crate::volume::Volume;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct VolumeSidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".toml");
    name.into()
}

/// Writes `volume` as f32 raw data plus its sidecar. Values outside f32
/// range saturate; precision narrows to 24 mantissa bits.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.data().len() * 4);
    for &x in volume.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = VolumeSidecar {
        shape: volume.shape(),
        spacing: volume.spacing(),
        channels: volume.channels(),
    };
    fs::write(
        sidecar_path(path),
        toml::to_string_pretty(&sidecar).expect("sidecar serialization cannot fail"),
    )?;
    Ok(())
}

/// Reads a volume written by [`write_volume`].
pub fn read_volume(path: &Path) -> Result<Volume> {
    let sidecar_file = sidecar_path(path);
    let sidecar: VolumeSidecar = toml::from_str(
        &fs::read_to_string(&sidecar_file).map_err(|e| {
            Error::Manifest(format!("sidecar {}: {e}", sidecar_file.display()))
        })?,
    )
    .map_err(|e| Error::Manifest(format!("sidecar {}: {e}", sidecar_file.display())))?;
    let bytes = fs::read(path)?;
    let expected =
        (sidecar.shape[0] * sidecar.shape[1] * sidecar.shape[2] * sidecar.channels) as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::FileSize {
            path: path.display().to_string(),
            expected,
            got: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::from_vec(sidecar.shape, sidecar.spacing, sidecar.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn f32_valued_volume() -> Volume {
        let mut v = Volume::zeros([3, 4, 2], [0.5, 0.5, 1.0], 2).unwrap();
        for (idx, x) in v.data_mut().iter_mut().enumerate() {
            *x = ((idx as f64 * 0.371).sin() * 0.02) as f32 as f64;
        }
        v
    }

    #[test]
    fn write_then_read_is_identity_for_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let v = f32_valued_volume();
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tiny_volume_has_the_documented_byte_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.raw");
        let v = Volume::zeros([2, 2, 2], [1.0; 3], 1).unwrap();
        write_volume(&path, &v).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);
    }

    #[test]
    fn truncated_file_is_rejected_with_sizes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let v = f32_valued_volume();
        write_volume(&path, &v).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_volume(&path) {
            Err(Error::FileSize { expected, got, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(got, bytes.len() as u64 - 4);
            }
            other => panic!("expected FileSize error, got {other:?}"),
        }
    }

    #[test]
    fn missing_sidecar_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        fs::write(&path, [0u8; 32]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn file_order_is_x_fastest_then_y_then_z() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let mut v = Volume::zeros([2, 2, 1], [1.0; 3], 1).unwrap();
        v.set(0, 1, 0, 0, 1.0);
        v.set(0, 0, 1, 0, 2.0);
        write_volume(&path, &v).unwrap();
        let bytes = fs::read(&path).unwrap();
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0, 0.0]);
    }
}
