//! Projection stack directories.
//!
//! A stack lives in a directory: one `proj_NNNN.raw` file per view (raw f32
//! little-endian, x-fastest) plus a `stack.toml` sidecar listing detector
//! shape and spacing and, per view, the file name and full pose. Reading
//! validates per-file sizes and restores poses verbatim.

use crate::error::Error;
use crate::geometry::ViewPose;
use crate::projector::ProjectionStack;
use crate::volume::ImageGrid;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct StackSidecar {
    shape: [usize; 2],
    spacing: [f64; 2],
    #[serde(rename = "view")]
    views: Vec<StackView>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StackView {
    file: String,
    pose: ViewPose,
}

/// Writes every view image and the stack sidecar into `dir` (created if
/// missing).
pub fn write_projections(dir: &Path, stack: &ProjectionStack) -> Result<()> {
    if stack.is_empty() {
        return Err(Error::InvalidConfig(
            "refusing to write an empty projection stack".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let mut views = Vec::with_capacity(stack.len());
    for (idx, (pose, img)) in stack.views().iter().enumerate() {
        let file = format!("proj_{idx:04}.raw");
        let mut bytes = Vec::with_capacity(img.data().len() * 4);
        for &x in img.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        views.push(StackView {
            file,
            pose: pose.clone(),
        });
    }
    let (_, first) = stack.view(0);
    let sidecar = StackSidecar {
        shape: first.shape(),
        spacing: first.spacing(),
        views,
    };
    fs::write(
        dir.join("stack.toml"),
        toml::to_string_pretty(&sidecar).expect("sidecar serialization cannot fail"),
    )?;
    Ok(())
}

/// Reads a stack directory written by [`write_projections`].
pub fn read_projections(dir: &Path) -> Result<ProjectionStack> {
    let sidecar_file = dir.join("stack.toml");
    let sidecar: StackSidecar = toml::from_str(
        &fs::read_to_string(&sidecar_file)
            .map_err(|e| Error::Manifest(format!("sidecar {}: {e}", sidecar_file.display())))?,
    )
    .map_err(|e| Error::Manifest(format!("sidecar {}: {e}", sidecar_file.display())))?;
    let expected = (sidecar.shape[0] * sidecar.shape[1]) as u64 * 4;
    let mut views = Vec::with_capacity(sidecar.views.len());
    for view in &sidecar.views {
        let path = dir.join(&view.file);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Manifest(format!("view file {}: {e}", path.display())))?;
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
        views.push((
            view.pose.clone(),
            ImageGrid::from_vec(sidecar.shape, sidecar.spacing, 1, data)?,
        ));
    }
    ProjectionStack::new(views)
}
