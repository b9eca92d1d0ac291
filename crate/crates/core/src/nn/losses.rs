//! Training losses for the learned reconstructor.
//!
//! Three mean-absolute terms: a voxelwise reconstruction loss, a
//! forward-difference gradient loss that sharpens edges, and a projection
//! loss that re-renders a random batch of detector rays through the
//! predicted volume and compares them against the measured line integrals.
//! Each term returns its own cotangent volume; [`total_loss`] combines them
//! with the configured weights.

use crate::classical::sart::ray_samples;
use crate::error::Error;
use crate::geometry::{ray_through_pixel, Ray};
use crate::projector::{drr_ray_integral, ProjectionStack};
use crate::volume::Volume;
use crate::Result;
use rand::Rng;

/// Relative weights of the secondary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the gradient term.
    pub grad: f64,
    /// Weight of the projection term.
    pub proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            grad: 1.0,
            proj: 0.01,
        }
    }
}

/// Individual loss terms (unweighted) plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub recon: f64,
    pub grad: f64,
    pub proj: f64,
    pub total: f64,
}

/// A batch of detector rays with their measured line integrals.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<f64>,
}

/// Draws `count` rays uniformly over all pixels of all views; the targets
/// are the corresponding stack values.
pub fn sample_ray_batch(
    stack: &ProjectionStack,
    count: usize,
    rng: &mut impl Rng,
) -> Result<RayBatch> {
    let views = stack.views();
    if views.is_empty() || count == 0 {
        return Err(Error::InvalidConfig(
            "ray batch needs a non-empty stack and a positive count".into(),
        ));
    }
    let mut rays = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        let (pose, img) = &views[rng.gen_range(0..views.len())];
        let [w, h] = pose.det_shape;
        let m = rng.gen_range(0..w);
        let n = rng.gen_range(0..h);
        rays.push(ray_through_pixel(pose, m as u32, n as u32));
        targets.push(img.get(0, m, n));
    }
    Ok(RayBatch { rays, targets })
}

/// L1 subgradient: zero at zero, unlike `f64::signum` which maps `+0.0`
/// to `1.0`. Keeps "loss zero implies gradient zero" exact.
#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.shape() != gt.shape() || pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs must be single-channel volumes of equal shape, got {:?}x{} and {:?}x{}",
            pred.shape(),
            pred.channels(),
            gt.shape(),
            gt.channels()
        )));
    }
    Ok(())
}

/// Mean absolute voxel difference and its cotangent.
pub fn reconstruction_loss(pred: &Volume, gt: &Volume) -> Result<(f64, Volume)> {
    check_pair(pred, gt)?;
    let n = pred.data().len() as f64;
    let mut g = Volume::zeros(pred.shape(), pred.spacing(), 1)?;
    let mut sum = 0.0;
    for ((gv, &p), &t) in g.data_mut().iter_mut().zip(pred.data()).zip(gt.data()) {
        let d = p - t;
        sum += d.abs();
        *gv = sign(d) / n;
    }
    Ok((sum / n, g))
}

/// Mean absolute difference of forward differences, averaged over the three
/// axes, and its cotangent. Axes shorter than two voxels contribute zero.
pub fn gradient_loss(pred: &Volume, gt: &Volume) -> Result<(f64, Volume)> {
    check_pair(pred, gt)?;
    let [nx, ny, nz] = pred.shape();
    let idx = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let p = pred.data();
    let t = gt.data();
    let mut g = Volume::zeros(pred.shape(), pred.spacing(), 1)?;
    let gd = g.data_mut();
    let mut total = 0.0;
    let axes: [(usize, usize, usize); 3] = [(1, 0, 0), (0, 1, 0), (0, 0, 1)];
    for (di, dj, dk) in axes {
        let (ex, ey, ez) = (nx - di, ny - dj, nz - dk);
        if ex == 0 || ey == 0 || ez == 0 {
            continue;
        }
        let count = (ex * ey * ez) as f64;
        let scale = 1.0 / (3.0 * count);
        let mut sum = 0.0;
        for k in 0..ez {
            for j in 0..ey {
                for i in 0..ex {
                    let a = idx(i, j, k);
                    let b = idx(i + di, j + dj, k + dk);
                    let d = (p[b] - p[a]) - (t[b] - t[a]);
                    sum += d.abs();
                    let s = sign(d) * scale;
                    gd[b] += s;
                    gd[a] -= s;
                }
            }
        }
        total += sum / (3.0 * count);
    }
    Ok((total, g))
}

/// Mean absolute error of re-rendered line integrals over a ray batch, and
/// its cotangent (the DRR adjoint scatters each ray's sign back along the
/// exact sample positions of the forward rule).
pub fn projection_loss(pred: &Volume, batch: &RayBatch, step: f64) -> Result<(f64, Volume)> {
    if batch.rays.len() != batch.targets.len() || batch.rays.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "ray batch with {} rays and {} targets",
            batch.rays.len(),
            batch.targets.len()
        )));
    }
    if pred.channels() != 1 {
        return Err(Error::ShapeMismatch(
            "projection loss needs a single-channel volume".into(),
        ));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "integration step {step} must be positive"
        )));
    }
    let b = batch.rays.len() as f64;
    let mut g = Volume::zeros(pred.shape(), pred.spacing(), 1)?;
    let gd = g.data_mut();
    let mut sum = 0.0;
    let mut samples = Vec::new();
    let mut footprint = Vec::new();
    for (ray, &target) in batch.rays.iter().zip(&batch.targets) {
        let d = drr_ray_integral(pred, ray, step) - target;
        sum += d.abs();
        let s = sign(d) / b;
        if s == 0.0 {
            continue;
        }
        ray_samples(pred, ray, step, &mut samples);
        for &(p, len) in &samples {
            pred.trilinear_footprint(p, &mut footprint);
            for &(idx, w) in &footprint {
                gd[idx] += s * w * len;
            }
        }
    }
    Ok((sum / b, g))
}

/// Weighted sum of the three loss terms and its combined cotangent.
pub fn total_loss(
    pred: &Volume,
    gt: &Volume,
    batch: &RayBatch,
    step: f64,
    weights: &LossWeights,
) -> Result<(LossValues, Volume)> {
    let (recon, g_recon) = reconstruction_loss(pred, gt)?;
    let (grad, g_grad) = gradient_loss(pred, gt)?;
    let (proj, g_proj) = projection_loss(pred, batch, step)?;
    let mut g = g_recon;
    for ((gv, &gg), &gp) in g
        .data_mut()
        .iter_mut()
        .zip(g_grad.data())
        .zip(g_proj.data())
    {
        *gv += weights.grad * gg + weights.proj * gp;
    }
    let total = recon + weights.grad * grad + weights.proj * proj;
    Ok((
        LossValues {
            recon,
            grad,
            proj,
            total,
        },
        g,
    ))
}
