//! End-to-end gradient verification.
//!
//! The model's losses are mean-absolute terms, so the total is piecewise
//! linear in the prediction and finite differences sit on a kink wherever a
//! residual crosses zero. The harness sidesteps that by checking against a
//! ground truth built as `pred - margin` for the untrained model's own
//! prediction `pred` and a strictly positive, spatially tilted margin
//! field: every voxel residual, every forward-difference residual, and
//! (checked explicitly) every ray residual then sits far from zero, and the
//! loss is locally linear around the operating point at finite-difference
//! scale.

use crate::error::Error;
use crate::geometry::{view_pose, ScanConfig, ViewPose};
use crate::io::phantom::{make_phantom, PhantomKind};
use crate::nn::losses::{sample_ray_batch, RayBatch};
use crate::nn::model::{grad_registry, ModelConfig, ModelState};
use crate::projector::{default_step, drr_ray_integral, render_stack, ProjectionStack};
use crate::volume::Volume;
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Margin field: base plus a tilt per axis so no two residuals cancel.
fn margin(i: usize, j: usize, k: usize) -> f64 {
    0.08 + 0.011 * i as f64 + 0.007 * j as f64 + 0.005 * k as f64
}

/// Smallest admissible ray residual at the operating point. A probe step
/// of 1e-3 moves a ray integral by at most ~1e-3 (path length times the
/// per-voxel sensitivity), an order of magnitude below this bound.
const MIN_RAY_RESIDUAL: f64 = 1e-2;

/// Outcome of probing one module's parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub module: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// A frozen operating point: model, target volume, ray batch.
pub struct GradCheck {
    model: ModelState,
    stack: ProjectionStack,
    gt: Volume,
    batch: RayBatch,
    step: f64,
}

/// Relative error with an absolute floor. The floor sits two to three
/// orders above the finite-difference noise (loss roundoff over the probe
/// step, about 1e-11 at h = 1e-3) and three to six below the gradients that
/// drive training, so noise on negligible parameters cannot fail the check
/// while every influential parameter is held to the relative bound.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

impl GradCheck {
    /// Builds the operating point from a phantom scan and verifies the
    /// margin preconditions.
    pub fn new(
        config: ModelConfig,
        scan: &ScanConfig,
        shape: [usize; 3],
        spacing: [f64; 3],
        phantom_seed: u64,
        batch_size: usize,
    ) -> Result<GradCheck> {
        let model = ModelState::new(config)?;
        let phantom = make_phantom(
            &PhantomKind::Ellipsoids {
                seed: phantom_seed,
                count: 5,
            },
            shape,
            spacing,
        )?;
        let poses: Vec<ViewPose> = (1..=scan.views)
            .map(|i| view_pose(scan, i))
            .collect::<Result<Vec<_>>>()?;
        let step = default_step(&phantom);
        let stack = render_stack(&phantom, &poses, step)?;

        let pred0 = model.infer(&stack, shape, spacing)?;
        let mut gt = pred0.clone();
        let [nx, ny, nz] = shape;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = gt.get(0, i, j, k) - margin(i, j, k);
                    gt.set(0, i, j, k, v);
                }
            }
        }

        let mut seed_state = phantom_seed ^ 0xB5E5_D3C4_A596_87F1;
        let mut rng = ChaCha12Rng::seed_from_u64(crate::rng::splitmix64(&mut seed_state));
        let batch = sample_ray_batch(&stack, batch_size, &mut rng)?;
        for (ray, &target) in batch.rays.iter().zip(&batch.targets) {
            let residual = (drr_ray_integral(&pred0, ray, step) - target).abs();
            if residual < MIN_RAY_RESIDUAL {
                return Err(Error::InvalidConfig(format!(
                    "ray residual {residual:.2e} too close to the kink; \
                     pick a different phantom seed"
                )));
            }
        }
        Ok(GradCheck {
            model,
            stack,
            gt,
            batch,
            step,
        })
    }

    fn loss(&self) -> Result<f64> {
        let (pred, _) = self.model.forward(&self.stack, self.gt.shape(), self.gt.spacing())?;
        let (values, _) = crate::nn::losses::total_loss(
            &pred,
            &self.gt,
            &self.batch,
            self.step,
            &self.model.config.loss,
        )?;
        Ok(values.total)
    }

    /// Central-difference check of `probes` parameters spread evenly over
    /// all tensors whose registry name starts with `prefix`.
    pub fn check_module(&mut self, prefix: &str, probes: usize, h: f64) -> Result<GradCheckReport> {
        let (_, analytic) =
            self.model
                .loss_and_grads(&self.stack, &self.gt, &self.batch, self.step)?;
        let names: Vec<String> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let grads = grad_registry(&analytic);
        let module: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(t, _)| (t, grads[t].numel()))
            .collect();
        if module.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no parameters under prefix {prefix}"
            )));
        }
        let total: usize = module.iter().map(|(_, n)| n).sum();
        let probes = probes.min(total);

        let mut max_err: f64 = 0.0;
        let mut sum_err = 0.0;
        for p in 0..probes {
            // Even spread over the module's flattened parameter vector.
            let mut offset = p * total / probes + (p * 31) % (total / probes).max(1);
            offset %= total;
            let (tensor_idx, inner) = {
                let mut acc = 0;
                let mut found = (module[0].0, 0);
                for &(t, n) in &module {
                    if offset < acc + n {
                        found = (t, offset - acc);
                        break;
                    }
                    acc += n;
                }
                found
            };
            let analytic_val = grads[tensor_idx].data[inner];
            let fd = {
                let probe = |state: &mut GradCheck, delta: f64| -> Result<f64> {
                    {
                        let mut params = state.model.named_params_mut();
                        params[tensor_idx].1.data[inner] += delta;
                    }
                    let v = state.loss();
                    {
                        let mut params = state.model.named_params_mut();
                        params[tensor_idx].1.data[inner] -= delta;
                    }
                    v
                };
                let up = probe(self, h)?;
                let down = probe(self, -h)?;
                (up - down) / (2.0 * h)
            };
            let err = rel_err(analytic_val, fd);
            max_err = max_err.max(err);
            sum_err += err;
        }
        Ok(GradCheckReport {
            module: prefix.trim_end_matches('.').to_string(),
            checked: probes,
            max_rel_err: max_err,
            mean_rel_err: sum_err / probes as f64,
        })
    }
}
