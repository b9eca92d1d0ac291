//! Simultaneous algebraic reconstruction (SART).
//!
//! Each sweep visits the views in order; for one view every detector ray is
//! forward projected with the same sampling rule as the DRR renderer, the
//! per-ray residual is normalized by the ray's intersection length, and the
//! normalized residuals are spread back through the transposed trilinear
//! footprints. The ray forward model is therefore the exact adjoint pair of
//! the scatter step, which keeps consistent data fixed.

use crate::error::Error;
use crate::geometry::{ray_aabb_intersect, ray_through_pixel, Ray};
use crate::math::{norm, Vec3};
use crate::projector::{drr_ray_integral, ProjectionStack};
use crate::volume::Volume;
use crate::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Order in which the views are visited inside one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewOrder {
    /// Stack order, every sweep.
    Sequential,
    /// A fresh seeded permutation per sweep.
    Shuffled { seed: u64 },
}

/// SART configuration.
#[derive(Debug, Clone)]
pub struct SartOptions {
    /// Number of full sweeps over the stack.
    pub iterations: usize,
    /// Relaxation factor applied to every voxel update; must be positive.
    pub relaxation: f64,
    pub view_order: ViewOrder,
    /// Clamp the volume at zero after each view update.
    pub nonnegativity: bool,
    /// Ray sampling step in millimetres; `None` picks the smallest voxel
    /// spacing.
    pub step: Option<f64>,
}

impl Default for SartOptions {
    fn default() -> Self {
        SartOptions {
            iterations: 10,
            relaxation: 0.5,
            view_order: ViewOrder::Sequential,
            nonnegativity: true,
            step: None,
        }
    }
}

/// Reconstruction together with its convergence record.
#[derive(Debug, Clone)]
pub struct SartResult {
    pub volume: Volume,
    /// Root-mean-square projection residual before the first sweep and after
    /// each sweep; `iterations + 1` entries.
    pub residual_trace: Vec<f64>,
}

/// Residual growth beyond this factor aborts with [`Error::SartDiverged`].
const DIVERGENCE_RATIO: f64 = 10.0;
/// Rays and voxels with less support than this are left untouched.
const SUPPORT_EPS: f64 = 1e-12;

/// Sample positions and lengths of the DRR integration rule, exposed so the
/// scatter step walks exactly the points the forward model samples.
pub(crate) fn ray_samples(vol: &Volume, ray: &Ray, step: f64, out: &mut Vec<(Vec3, f64)>) {
    out.clear();
    let (t0, t1) = match ray_aabb_intersect(ray, &vol.aabb()) {
        Some(hit) => hit,
        None => return,
    };
    let dir_norm = norm(ray.dir);
    let length = (t1 - t0) * dir_norm;
    if !(length > 0.0) {
        return;
    }
    let full = (length / step).floor() as usize;
    let tail = length - full as f64 * step;
    for j in 0..full {
        let t = t0 + (j as f64 + 0.5) * step / dir_norm;
        out.push((ray.at(t), step));
    }
    if tail > 0.0 {
        let t = t0 + (full as f64 * step + 0.5 * tail) / dir_norm;
        out.push((ray.at(t), tail));
    }
}

/// Root-mean-square residual of the whole stack against a volume.
fn global_rms(stack: &ProjectionStack, vol: &Volume, step: f64) -> f64 {
    let per_view: Vec<(f64, usize)> = stack
        .views()
        .par_iter()
        .map(|(pose, img)| {
            let [w, h] = pose.det_shape;
            let mut sq = 0.0;
            for n in 0..h {
                for m in 0..w {
                    let ray = ray_through_pixel(pose, m as u32, n as u32);
                    let res = img.get(0, m, n) - drr_ray_integral(vol, &ray, step);
                    sq += res * res;
                }
            }
            (sq, w * h)
        })
        .collect();
    let (sq, count) = per_view
        .iter()
        .fold((0.0, 0usize), |(a, c), (sq, n)| (a + sq, c + n));
    if count == 0 {
        0.0
    } else {
        (sq / count as f64).sqrt()
    }
}

/// Runs SART from a zero volume and returns the result with its residual
/// trace. Residual growth past ten times the starting value aborts.
pub fn sart_reconstruct(
    stack: &ProjectionStack,
    shape: [usize; 3],
    spacing: [f64; 3],
    opts: &SartOptions,
) -> Result<SartResult> {
    if stack.is_empty() {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    if !(opts.relaxation > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "relaxation must be positive, got {}",
            opts.relaxation
        )));
    }
    if let Some(step) = opts.step {
        if !(step > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling step must be positive, got {step}"
            )));
        }
    }
    let mut vol = Volume::zeros(shape, spacing, 1)?;
    let step = opts
        .step
        .unwrap_or_else(|| spacing[0].min(spacing[1]).min(spacing[2]));

    let mut rng = match opts.view_order {
        ViewOrder::Sequential => None,
        ViewOrder::Shuffled { seed } => Some(ChaCha12Rng::seed_from_u64(seed)),
    };
    let nvox = shape[0] * shape[1] * shape[2];
    let mut num = vec![0.0; nvox];
    let mut den = vec![0.0; nvox];
    let mut residual_trace = Vec::with_capacity(opts.iterations + 1);
    residual_trace.push(global_rms(stack, &vol, step));

    for iteration in 1..=opts.iterations {
        let mut order: Vec<usize> = (0..stack.len()).collect();
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        for &view_idx in &order {
            let (pose, target) = stack.view(view_idx);
            let [w, h] = pose.det_shape;
            // Forward pass: per-ray residuals against the current volume.
            let residuals: Vec<f64> = (0..w * h)
                .into_par_iter()
                .map(|idx| {
                    let (m, n) = (idx % w, idx / w);
                    let ray = ray_through_pixel(pose, m as u32, n as u32);
                    target.get(0, m, n) - drr_ray_integral(&vol, &ray, step)
                })
                .collect();
            // Scatter pass: normalized residuals through the transposed
            // footprints, sequentially for reproducibility.
            num.iter_mut().for_each(|x| *x = 0.0);
            den.iter_mut().for_each(|x| *x = 0.0);
            let mut samples = Vec::new();
            let mut footprint = Vec::new();
            let mut scratch: Vec<(usize, f64)> = Vec::new();
            for idx in 0..w * h {
                let (m, n) = (idx % w, idx / w);
                let ray = ray_through_pixel(pose, m as u32, n as u32);
                ray_samples(&vol, &ray, step, &mut samples);
                if samples.is_empty() {
                    continue;
                }
                scratch.clear();
                let mut row_sum = 0.0;
                for &(p, len) in &samples {
                    vol.trilinear_footprint(p, &mut footprint);
                    for &(v, wgt) in &footprint {
                        let a = wgt * len;
                        row_sum += a;
                        scratch.push((v, a));
                    }
                }
                if row_sum < SUPPORT_EPS {
                    continue;
                }
                let c = residuals[idx] / row_sum;
                for &(v, a) in &scratch {
                    num[v] += a * c;
                    den[v] += a;
                }
            }
            let data = vol.data_mut();
            for v in 0..nvox {
                if den[v] > SUPPORT_EPS {
                    data[v] += opts.relaxation * num[v] / den[v];
                    if opts.nonnegativity && data[v] < 0.0 {
                        data[v] = 0.0;
                    }
                }
            }
        }
        let rms = global_rms(stack, &vol, step);
        residual_trace.push(rms);
        let initial = residual_trace[0];
        if initial > 0.0 && rms > DIVERGENCE_RATIO * initial {
            return Err(Error::SartDiverged {
                iteration,
                ratio: rms / initial,
            });
        }
    }
    Ok(SartResult {
        volume: vol,
        residual_trace,
    })
}
