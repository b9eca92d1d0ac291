//! Attenuation volumes and detector rasters with physical coordinates.
//!
//! A [`Volume`] is a `W x H x D` grid of voxels (optionally multi-channel)
//! centred on the isocenter: voxel `(i, j, k)` has its center at
//! `((i + 0.5 - W/2) * sx, (j + 0.5 - H/2) * sy, (k + 0.5 - D/2) * sz)`, so
//! the physical extent spans `[-W*sx/2, W*sx/2]` etc. Storage is
//! channel-major, then x-fastest.
//!
//! An [`ImageGrid`] is the 2D analogue addressed in pixel units; continuous
//! pixel coordinates come straight from the detector pixel transform, with
//! integers on pixel centers.
//!
//! Interpolation is multilinear over the lattice of centers, with
//! zero-padding: corners outside the lattice contribute zero, so samples fade
//! linearly to zero over the half-voxel rim between the outermost centers and
//! the physical boundary and vanish beyond it.

use crate::error::Error;
use crate::geometry::Aabb;
use crate::math::Vec3;
use crate::Result;

/// 3D scalar (or multi-channel) field on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    /// Zero-filled volume. Dimensions and spacings must be positive.
    pub fn zeros(shape: [usize; 3], spacing: [f64; 3], channels: usize) -> Result<Self> {
        Self::validate_meta(shape, spacing, channels)?;
        Ok(Volume {
            shape,
            spacing,
            channels,
            data: vec![0.0; shape[0] * shape[1] * shape[2] * channels],
        })
    }

    /// Wraps existing data laid out channel-major, x-fastest.
    pub fn from_vec(
        shape: [usize; 3],
        spacing: [f64; 3],
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::validate_meta(shape, spacing, channels)?;
        let expected = shape[0] * shape[1] * shape[2] * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} does not match {:?} x {} channels = {}",
                data.len(),
                shape,
                channels,
                expected
            )));
        }
        Ok(Volume {
            shape,
            spacing,
            channels,
            data,
        })
    }

    fn validate_meta(shape: [usize; 3], spacing: [f64; 3], channels: usize) -> Result<()> {
        if shape.iter().any(|&s| s == 0) || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "volume dimensions must be positive: shape {:?}, channels {}",
                shape, channels
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "voxel spacing must be positive, got {:?}",
                spacing
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(c < self.channels && i < self.shape[0] && j < self.shape[1] && k < self.shape[2]);
        ((c * self.shape[2] + k) * self.shape[1] + j) * self.shape[0] + i
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(c, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(c, i, j, k);
        self.data[idx] = value;
    }

    /// World position of the center of voxel `(i, j, k)`.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            (i as f64 + 0.5 - self.shape[0] as f64 / 2.0) * self.spacing[0],
            (j as f64 + 0.5 - self.shape[1] as f64 / 2.0) * self.spacing[1],
            (k as f64 + 0.5 - self.shape[2] as f64 / 2.0) * self.spacing[2],
        ]
    }

    /// Physical bounding box: the full voxel extent, half a spacing beyond the
    /// outermost centers on every side.
    pub fn aabb(&self) -> Aabb {
        let half = [
            self.shape[0] as f64 * self.spacing[0] / 2.0,
            self.shape[1] as f64 * self.spacing[1] / 2.0,
            self.shape[2] as f64 * self.spacing[2] / 2.0,
        ];
        Aabb {
            min: [-half[0], -half[1], -half[2]],
            max: [half[0], half[1], half[2]],
        }
    }

    /// Continuous voxel index of a world position (integers on centers).
    #[inline]
    pub fn continuous_index(&self, p: Vec3) -> [f64; 3] {
        [
            p[0] / self.spacing[0] + self.shape[0] as f64 / 2.0 - 0.5,
            p[1] / self.spacing[1] + self.shape[1] as f64 / 2.0 - 0.5,
            p[2] / self.spacing[2] + self.shape[2] as f64 / 2.0 - 0.5,
        ]
    }

    /// Trilinear sample of one channel at a world position, zero-padded
    /// outside the lattice of voxel centers.
    pub fn sample_trilinear(&self, p: Vec3, c: usize) -> f64 {
        let [ci, cj, ck] = self.continuous_index(p);
        let (i0, fi) = split_floor(ci);
        let (j0, fj) = split_floor(cj);
        let (k0, fk) = split_floor(ck);
        let [w, h, d] = self.shape;
        let mut acc = 0.0;
        for dk in 0..2 {
            let k = k0 + dk;
            if k < 0 || k >= d as i64 {
                continue;
            }
            let wk = if dk == 0 { 1.0 - fk } else { fk };
            for dj in 0..2 {
                let j = j0 + dj;
                if j < 0 || j >= h as i64 {
                    continue;
                }
                let wj = if dj == 0 { 1.0 - fj } else { fj };
                for di in 0..2 {
                    let i = i0 + di;
                    if i < 0 || i >= w as i64 {
                        continue;
                    }
                    let wi = if di == 0 { 1.0 - fi } else { fi };
                    acc += wi * wj * wk * self.get(c, i as usize, j as usize, k as usize);
                }
            }
        }
        acc
    }

    /// Trilinear gather weights at a world position: up to 8 (flat voxel
    /// index, weight) pairs for channel 0, shared by all channels.
    ///
    /// This is the linear-footprint form of [`Self::sample_trilinear`], used
    /// where the adjoint (scatter) or the sparse linearization is needed.
    pub fn trilinear_footprint(&self, p: Vec3, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let [ci, cj, ck] = self.continuous_index(p);
        let (i0, fi) = split_floor(ci);
        let (j0, fj) = split_floor(cj);
        let (k0, fk) = split_floor(ck);
        let [w, h, d] = self.shape;
        for dk in 0..2 {
            let k = k0 + dk;
            if k < 0 || k >= d as i64 {
                continue;
            }
            let wk = if dk == 0 { 1.0 - fk } else { fk };
            for dj in 0..2 {
                let j = j0 + dj;
                if j < 0 || j >= h as i64 {
                    continue;
                }
                let wj = if dj == 0 { 1.0 - fj } else { fj };
                for di in 0..2 {
                    let i = i0 + di;
                    if i < 0 || i >= w as i64 {
                        continue;
                    }
                    let wi = if di == 0 { 1.0 - fi } else { fi };
                    let idx = (k as usize * h + j as usize) * w + i as usize;
                    out.push((idx, wi * wj * wk));
                }
            }
        }
    }
}

#[inline]
fn split_floor(x: f64) -> (i64, f64) {
    let f = x.floor();
    (f as i64, x - f)
}

/// 2D raster (detector image or feature map) addressed in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    shape: [usize; 2],
    spacing: [f64; 2],
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(shape: [usize; 2], spacing: [f64; 2], channels: usize) -> Result<Self> {
        Self::validate_meta(shape, spacing, channels)?;
        Ok(ImageGrid {
            shape,
            spacing,
            channels,
            data: vec![0.0; shape[0] * shape[1] * channels],
        })
    }

    pub fn from_vec(
        shape: [usize; 2],
        spacing: [f64; 2],
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::validate_meta(shape, spacing, channels)?;
        let expected = shape[0] * shape[1] * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} does not match {:?} x {} channels = {}",
                data.len(),
                shape,
                channels,
                expected
            )));
        }
        Ok(ImageGrid {
            shape,
            spacing,
            channels,
            data,
        })
    }

    fn validate_meta(shape: [usize; 2], spacing: [f64; 2], channels: usize) -> Result<()> {
        if shape.iter().any(|&s| s == 0) || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive: shape {:?}, channels {}",
                shape, channels
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "pixel spacing must be positive, got {:?}",
                spacing
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, m: usize, n: usize) -> usize {
        debug_assert!(c < self.channels && m < self.shape[0] && n < self.shape[1]);
        (c * self.shape[1] + n) * self.shape[0] + m
    }

    #[inline]
    pub fn get(&self, c: usize, m: usize, n: usize) -> f64 {
        self.data[self.index(c, m, n)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, m: usize, n: usize, value: f64) {
        let idx = self.index(c, m, n);
        self.data[idx] = value;
    }

    /// Bilinear sample of one channel at continuous pixel coordinates
    /// (integers on centers), zero-padded outside the raster.
    pub fn sample_bilinear(&self, q: [f64; 2], c: usize) -> f64 {
        let (m0, fm) = split_floor(q[0]);
        let (n0, fn_) = split_floor(q[1]);
        let [w, h] = self.shape;
        let mut acc = 0.0;
        for dn in 0..2 {
            let n = n0 + dn;
            if n < 0 || n >= h as i64 {
                continue;
            }
            let wn = if dn == 0 { 1.0 - fn_ } else { fn_ };
            for dm in 0..2 {
                let m = m0 + dm;
                if m < 0 || m >= w as i64 {
                    continue;
                }
                let wm = if dm == 0 { 1.0 - fm } else { fm };
                acc += wm * wn * self.get(c, m as usize, n as usize);
            }
        }
        acc
    }

    /// Bilinear gather weights at continuous pixel coordinates: up to 4
    /// (flat pixel index, weight) pairs, shared by all channels.
    pub fn bilinear_footprint(&self, q: [f64; 2], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let (m0, fm) = split_floor(q[0]);
        let (n0, fn_) = split_floor(q[1]);
        let [w, h] = self.shape;
        for dn in 0..2 {
            let n = n0 + dn;
            if n < 0 || n >= h as i64 {
                continue;
            }
            let wn = if dn == 0 { 1.0 - fn_ } else { fn_ };
            for dm in 0..2 {
                let m = m0 + dm;
                if m < 0 || m >= w as i64 {
                    continue;
                }
                let wm = if dm == 0 { 1.0 - fm } else { fm };
                out.push((n as usize * w + m as usize, wm * wn));
            }
        }
    }
}
