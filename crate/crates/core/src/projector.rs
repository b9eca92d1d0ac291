//! Digitally reconstructed radiographs and photon-count simulation.
//!
//! The attenuation line integral along a detector ray is evaluated by
//! clipping the ray against the volume's bounding box and applying the
//! midpoint rule: full sub-intervals of the requested step length plus one
//! final partial interval weighted by its true length, each sampled
//! trilinearly at its midpoint. The default step is half the smallest voxel
//! spacing.
//!
//! Photon counts follow a two-level source model: a flat field of `i0`
//! expected quanta is attenuated to `(i0 - i1) * exp(-P) + i1`, where `i1` is
//! the dark level that no attenuation removes. Sampling adds Poisson noise on
//! the attenuated quanta; the inverse map recovers `P` by flat/dark
//! normalization and a clamped logarithm.

use crate::error::Error;
use crate::geometry::{ray_aabb_intersect, ray_through_pixel, Ray, ViewPose};
use crate::math::norm;
use crate::rng::{poisson, PixelRng};
use crate::volume::{ImageGrid, Volume};
use crate::Result;
use rayon::prelude::*;

/// Default clamp for the log argument in [`flat_dark_correct`].
pub const LOG_CLAMP_EPS: f64 = 1e-6;

/// Ordered set of views: one pose and one detector image per view, all
/// images sharing shape and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    views: Vec<(ViewPose, ImageGrid)>,
}

impl ProjectionStack {
    pub fn new(views: Vec<(ViewPose, ImageGrid)>) -> Result<Self> {
        if let Some((first_pose, first)) = views.first() {
            if first_pose.det_shape != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "view 0: pose raster {:?} vs image {:?}",
                    first_pose.det_shape,
                    first.shape()
                )));
            }
            // Spacings derived from pose vector norms wobble in the last ulp
            // across view angles, so compare them with a relative tolerance.
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
            for (idx, (pose, img)) in views.iter().enumerate().skip(1) {
                if img.shape() != first.shape()
                    || img.channels() != first.channels()
                    || !close(img.spacing()[0], first.spacing()[0])
                    || !close(img.spacing()[1], first.spacing()[1])
                {
                    return Err(Error::ShapeMismatch(format!(
                        "view {idx} image {:?} x{} spacing {:?} differs from view 0 {:?} x{} spacing {:?}",
                        img.shape(),
                        img.channels(),
                        img.spacing(),
                        first.shape(),
                        first.channels(),
                        first.spacing()
                    )));
                }
                if pose.det_shape != img.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "view {idx}: pose raster {:?} vs image {:?}",
                        pose.det_shape,
                        img.shape()
                    )));
                }
            }
        }
        Ok(ProjectionStack { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn views(&self) -> &[(ViewPose, ImageGrid)] {
        &self.views
    }

    pub fn view(&self, idx: usize) -> &(ViewPose, ImageGrid) {
        &self.views[idx]
    }

    pub fn into_views(self) -> Vec<(ViewPose, ImageGrid)> {
        self.views
    }
}

/// Detector counts raster together with its flat and dark levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonRaster {
    pub image: ImageGrid,
    pub i0: f64,
    pub i1: f64,
}

/// Default integration step for a volume: half the smallest voxel spacing.
pub fn default_step(vol: &Volume) -> f64 {
    let s = vol.spacing();
    0.5 * s[0].min(s[1]).min(s[2])
}

/// Attenuation line integral of channel 0 along a ray, in units of the
/// direction norm times `t` (i.e. millimetres of path).
///
/// Rays that miss the volume contribute exactly zero. `step` must be
/// positive and is measured in millimetres of path, not in `t`.
pub fn drr_ray_integral(vol: &Volume, ray: &Ray, step: f64) -> f64 {
    assert!(step > 0.0, "integration step must be positive");
    let (t0, t1) = match ray_aabb_intersect(ray, &vol.aabb()) {
        Some(hit) => hit,
        None => return 0.0,
    };
    let dir_norm = norm(ray.dir);
    let length = (t1 - t0) * dir_norm;
    if !(length > 0.0) {
        return 0.0;
    }
    let full = (length / step).floor() as usize;
    let tail = length - full as f64 * step;
    let mut acc = 0.0;
    for j in 0..full {
        let t = t0 + (j as f64 + 0.5) * step / dir_norm;
        acc += vol.sample_trilinear(ray.at(t), 0) * step;
    }
    if tail > 0.0 {
        let t = t0 + (full as f64 * step + 0.5 * tail) / dir_norm;
        acc += vol.sample_trilinear(ray.at(t), 0) * tail;
    }
    acc
}

/// Renders the full DRR of a view: one line integral per detector pixel.
pub fn render_projection(vol: &Volume, pose: &ViewPose, step: f64) -> Result<ImageGrid> {
    let [w, h] = pose.det_shape;
    let [pu, pv] = [norm(pose.u), norm(pose.v)];
    let mut img = ImageGrid::zeros([w, h], [pu, pv], 1)?;
    img.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(n, row)| {
            for (m, px) in row.iter_mut().enumerate() {
                let ray = ray_through_pixel(pose, m as u32, n as u32);
                *px = drr_ray_integral(vol, &ray, step);
            }
        });
    Ok(img)
}

/// Renders a whole circular-orbit stack from per-view poses.
pub fn render_stack(vol: &Volume, poses: &[ViewPose], step: f64) -> Result<ProjectionStack> {
    let views = poses
        .iter()
        .map(|pose| Ok((pose.clone(), render_projection(vol, pose, step)?)))
        .collect::<Result<Vec<_>>>()?;
    ProjectionStack::new(views)
}

/// Expected photon count for a line integral `p`.
#[inline]
pub fn expected_counts(p: f64, i0: f64, i1: f64) -> f64 {
    (i0 - i1) * (-p).exp() + i1
}

/// Simulates detector counts for one projection.
///
/// With `seed: None` the raster holds the exact expected counts; with a seed,
/// each pixel draws from a Poisson law on the attenuated quanta (the dark
/// level is a deterministic offset) using its own counter-based stream, so
/// results do not depend on pixel traversal order.
pub fn simulate_photon_counts(
    proj: &ImageGrid,
    i0: f64,
    i1: f64,
    seed: Option<u64>,
) -> Result<PhotonRaster> {
    if !(i0 > i1 && i1 >= 0.0) {
        return Err(Error::InvalidPhotonLevels { i0, i1 });
    }
    if proj.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "projection must be single-channel, got {}",
            proj.channels()
        )));
    }
    let mut image = ImageGrid::zeros(proj.shape(), proj.spacing(), 1)?;
    match seed {
        None => {
            for (dst, &p) in image.data_mut().iter_mut().zip(proj.data()) {
                *dst = expected_counts(p, i0, i1);
            }
        }
        Some(seed) => {
            let src = proj.data();
            image
                .data_mut()
                .par_chunks_mut(proj.shape()[0])
                .enumerate()
                .for_each(|(n, row)| {
                    let w = proj.shape()[0];
                    for (m, dst) in row.iter_mut().enumerate() {
                        let idx = n * w + m;
                        let mut rng = PixelRng::new(seed, idx as u64);
                        let lambda = (i0 - i1) * (-src[idx]).exp();
                        *dst = poisson(&mut rng, lambda) + i1;
                    }
                });
        }
    }
    Ok(PhotonRaster { image, i0, i1 })
}

/// Recovers line integrals from counts: `-ln((I - i1) / (i0 - i1))` with the
/// normalized argument clamped from below at `eps` (default
/// [`LOG_CLAMP_EPS`]) so starved pixels stay finite.
pub fn flat_dark_correct(raster: &PhotonRaster, eps: f64) -> Result<ImageGrid> {
    let (i0, i1) = (raster.i0, raster.i1);
    if !(i0 > i1 && i1 >= 0.0) {
        return Err(Error::InvalidPhotonLevels { i0, i1 });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "log clamp must be positive, got {eps}"
        )));
    }
    let mut out = ImageGrid::zeros(raster.image.shape(), raster.image.spacing(), 1)?;
    let scale = 1.0 / (i0 - i1);
    for (dst, &counts) in out.data_mut().iter_mut().zip(raster.image.data()) {
        let arg = ((counts - i1) * scale).max(eps);
        *dst = -arg.ln();
    }
    Ok(out)
}
