//! The full learned reconstructor: per-view encoder, adaptive fusion,
//! volume decoder, and the training loop that fits them end to end.

use crate::error::Error;
use crate::fusion::{
    build_feature_volume, feature_volume_backward, FeatureVolume, FusionGrads, FusionParams,
};
use crate::geometry::{view_pose, ScanConfig, ViewPose};
use crate::io::phantom::{make_phantom, PhantomKind};
use crate::nn::adam::{scheduled_lr, AdamState};
use crate::nn::decoder::{decoder_backward, decoder_forward, DecoderCache, DecoderGrads, DecoderParams};
use crate::nn::encoder::{encoder_backward, encoder_forward, EncoderCache, EncoderGrads, EncoderParams};
use crate::nn::losses::{sample_ray_batch, total_loss, LossValues, LossWeights, RayBatch};
use crate::nn::Tensor;
use crate::projector::{default_step, render_stack, ProjectionStack};
use crate::rng::splitmix64;
use crate::volume::{ImageGrid, Volume};
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Architecture and training hyperparameters. Serialized into checkpoints
/// so a restored model rebuilds the exact same network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the three encoder stages; their sum is the fused width.
    pub encoder_widths: [usize; 3],
    /// Decoder working width after the channel projection.
    pub proj_channels: usize,
    /// Coarse-to-fine upsampling factor; a power of two.
    pub scale: usize,
    /// Loss term weights.
    pub loss: LossWeights,
    /// Base learning rate before the schedule.
    pub base_lr: f64,
    /// Rays per projection-loss batch.
    pub ray_batch: usize,
    /// Seed for initialization and ray sampling.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: [8, 16, 32],
            proj_channels: 24,
            scale: 4,
            loss: LossWeights::default(),
            base_lr: 3e-3,
            ray_batch: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Fused per-view feature width.
    pub fn feature_channels(&self) -> usize {
        self.encoder_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "base learning rate {} must be positive",
                self.base_lr
            )));
        }
        if self.ray_batch == 0 {
            return Err(Error::InvalidConfig("ray batch must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl ModelState {
    /// Seeded initialization; the draw order is fixed so equal configs give
    /// bitwise-equal parameters.
    pub fn new(config: ModelConfig) -> Result<ModelState> {
        config.validate()?;
        let c = config.feature_channels();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::init(config.encoder_widths, &mut rng);
        let fusion = FusionParams::init(c, &mut rng);
        let decoder = DecoderParams::init(c, config.proj_channels, config.scale, &mut rng)?;
        Ok(ModelState {
            config,
            encoder,
            fusion,
            decoder,
        })
    }

    /// Named parameter registry in canonical order. Checkpoints and the
    /// optimizer state are aligned to this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let e = &self.encoder;
        let f = &self.fusion;
        let d = &self.decoder;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.stem_w".into(), &e.stem_w),
            ("encoder.stem_b".into(), &e.stem_b),
            ("encoder.refine0_w".into(), &e.refine0_w),
            ("encoder.refine0_b".into(), &e.refine0_b),
            ("encoder.down1_w".into(), &e.down1_w),
            ("encoder.down1_b".into(), &e.down1_b),
            ("encoder.refine1_w".into(), &e.refine1_w),
            ("encoder.refine1_b".into(), &e.refine1_b),
            ("encoder.down2_w".into(), &e.down2_w),
            ("encoder.down2_b".into(), &e.down2_b),
            ("encoder.refine2_w".into(), &e.refine2_w),
            ("encoder.refine2_b".into(), &e.refine2_b),
            ("fusion.phi1_w".into(), &f.phi1_w),
            ("fusion.phi1_b".into(), &f.phi1_b),
            ("fusion.phi2_w".into(), &f.phi2_w),
            ("fusion.phi2_b".into(), &f.phi2_b),
            ("decoder.proj_w".into(), &d.proj_w),
            ("decoder.proj_b".into(), &d.proj_b),
            ("decoder.res1_w".into(), &d.res1_w),
            ("decoder.res1_b".into(), &d.res1_b),
            ("decoder.res2_w".into(), &d.res2_w),
            ("decoder.res2_b".into(), &d.res2_b),
        ];
        for (i, (w, b)) in d.up_w.iter().zip(&d.up_b).enumerate() {
            out.push((format!("decoder.up{i}_w"), w));
            out.push((format!("decoder.up{i}_b"), b));
        }
        out.push(("decoder.head_w".into(), &d.head_w));
        out.push(("decoder.head_b".into(), &d.head_b));
        out
    }

    /// Mutable registry in the same canonical order as [`named_params`].
    ///
    /// [`named_params`]: ModelState::named_params
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let e = &mut self.encoder;
        let f = &mut self.fusion;
        let d = &mut self.decoder;
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("encoder.stem_w".into(), &mut e.stem_w),
            ("encoder.stem_b".into(), &mut e.stem_b),
            ("encoder.refine0_w".into(), &mut e.refine0_w),
            ("encoder.refine0_b".into(), &mut e.refine0_b),
            ("encoder.down1_w".into(), &mut e.down1_w),
            ("encoder.down1_b".into(), &mut e.down1_b),
            ("encoder.refine1_w".into(), &mut e.refine1_w),
            ("encoder.refine1_b".into(), &mut e.refine1_b),
            ("encoder.down2_w".into(), &mut e.down2_w),
            ("encoder.down2_b".into(), &mut e.down2_b),
            ("encoder.refine2_w".into(), &mut e.refine2_w),
            ("encoder.refine2_b".into(), &mut e.refine2_b),
            ("fusion.phi1_w".into(), &mut f.phi1_w),
            ("fusion.phi1_b".into(), &mut f.phi1_b),
            ("fusion.phi2_w".into(), &mut f.phi2_w),
            ("fusion.phi2_b".into(), &mut f.phi2_b),
            ("decoder.proj_w".into(), &mut d.proj_w),
            ("decoder.proj_b".into(), &mut d.proj_b),
            ("decoder.res1_w".into(), &mut d.res1_w),
            ("decoder.res1_b".into(), &mut d.res1_b),
            ("decoder.res2_w".into(), &mut d.res2_w),
            ("decoder.res2_b".into(), &mut d.res2_b),
        ];
        for (i, (w, b)) in d.up_w.iter_mut().zip(&mut d.up_b).enumerate() {
            out.push((format!("decoder.up{i}_w"), w));
            out.push((format!("decoder.up{i}_b"), b));
        }
        out.push(("decoder.head_w".into(), &mut d.head_w));
        out.push(("decoder.head_b".into(), &mut d.head_b));
        out
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Runs encoder, fusion, and decoder; the cache carries every
    /// intermediate the backward pass needs.
    pub fn forward(
        &self,
        stack: &ProjectionStack,
        shape: [usize; 3],
        spacing: [f64; 3],
    ) -> Result<(Volume, ForwardCache)> {
        let encoded: Vec<(Vec<ImageGrid>, EncoderCache)> = stack
            .views()
            .par_iter()
            .map(|(_, img)| encoder_forward(&self.encoder, img))
            .collect::<Result<Vec<_>>>()?;
        let mut views = Vec::with_capacity(encoded.len());
        let mut enc_caches = Vec::with_capacity(encoded.len());
        for ((pose, _), (pyramid, cache)) in stack.views().iter().zip(encoded) {
            views.push((pose.clone(), pyramid));
            enc_caches.push(cache);
        }
        let fv = build_feature_volume(&self.fusion, &views, shape, spacing, self.config.scale)?;
        let (pred, dec_cache) = decoder_forward(&self.decoder, &fv.features)?;
        Ok((
            pred,
            ForwardCache {
                enc_caches,
                views,
                fv,
                dec_cache,
            },
        ))
    }

    /// Reconstructs a volume from a projection stack.
    pub fn infer(
        &self,
        stack: &ProjectionStack,
        shape: [usize; 3],
        spacing: [f64; 3],
    ) -> Result<Volume> {
        self.forward(stack, shape, spacing).map(|(v, _)| v)
    }

    /// Full forward pass plus loss and the backward pass into every
    /// parameter, against an explicit ray batch. No parameters change.
    pub fn loss_and_grads(
        &self,
        stack: &ProjectionStack,
        gt: &Volume,
        batch: &RayBatch,
        step: f64,
    ) -> Result<(LossValues, ModelGrads)> {
        let (pred, cache) = self.forward(stack, gt.shape(), gt.spacing())?;
        let (values, g_pred) = total_loss(&pred, gt, batch, step, &self.config.loss)?;

        let mut dec_grads = DecoderGrads::zeros(&self.decoder);
        let g_features = decoder_backward(&self.decoder, &cache.dec_cache, &g_pred, &mut dec_grads)?;

        let mut fus_grads = FusionGrads::zeros(&self.fusion);
        let mut g_views: Vec<Vec<ImageGrid>> = cache
            .views
            .iter()
            .map(|(_, pyramid)| {
                pyramid
                    .iter()
                    .map(|l| ImageGrid::zeros(l.shape(), l.spacing(), l.channels()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        feature_volume_backward(
            &self.fusion,
            &cache.fv,
            &g_features,
            &cache.views,
            &mut fus_grads,
            &mut g_views,
        )?;

        let per_view: Vec<EncoderGrads> = cache
            .enc_caches
            .par_iter()
            .zip(&g_views)
            .map(|(enc_cache, g_pyramid)| {
                let mut g = EncoderGrads::zeros(&self.encoder);
                encoder_backward(&self.encoder, enc_cache, g_pyramid, &mut g)?;
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut enc_grads = EncoderGrads::zeros(&self.encoder);
        for g in &per_view {
            enc_grads.add_assign(g);
        }
        Ok((
            values,
            ModelGrads {
                encoder: enc_grads,
                fusion: fus_grads,
                decoder: dec_grads,
            },
        ))
    }

    /// One optimization step on a single training pair. `step_index` seeds
    /// the projection-loss ray batch so runs are reproducible.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        sample: &TrainSample,
        lr: f64,
        step_index: u64,
    ) -> Result<LossValues> {
        let mut seed_state = self.config.seed ^ step_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(&mut seed_state));
        let batch = sample_ray_batch(&sample.stack, self.config.ray_batch, &mut rng)?;
        let step = default_step(&sample.volume);
        let (values, grads) = self.loss_and_grads(&sample.stack, &sample.volume, &batch, step)?;

        let grads = grad_registry(&grads);
        let mut params = self.named_params_mut();
        let mut params: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        adam.update(lr, &mut params, &grads);
        Ok(values)
    }
}

/// Per-module gradient accumulators for the whole model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub fusion: FusionGrads,
    pub decoder: DecoderGrads,
}

/// Gradient tensors in the same canonical order as the parameter registry.
pub fn grad_registry(grads: &ModelGrads) -> Vec<&Tensor> {
    let (e, f, d) = (&grads.encoder, &grads.fusion, &grads.decoder);
    let mut out: Vec<&Tensor> = vec![
        &e.stem_w,
        &e.stem_b,
        &e.refine0_w,
        &e.refine0_b,
        &e.down1_w,
        &e.down1_b,
        &e.refine1_w,
        &e.refine1_b,
        &e.down2_w,
        &e.down2_b,
        &e.refine2_w,
        &e.refine2_b,
        &f.phi1_w,
        &f.phi1_b,
        &f.phi2_w,
        &f.phi2_b,
        &d.proj_w,
        &d.proj_b,
        &d.res1_w,
        &d.res1_b,
        &d.res2_w,
        &d.res2_b,
    ];
    for (w, b) in d.up_w.iter().zip(&d.up_b) {
        out.push(w);
        out.push(b);
    }
    out.push(&d.head_w);
    out.push(&d.head_b);
    out
}

/// Everything [`ModelState::forward`] computed, kept for the backward pass.
pub struct ForwardCache {
    enc_caches: Vec<EncoderCache>,
    views: Vec<(ViewPose, Vec<ImageGrid>)>,
    fv: FeatureVolume,
    dec_cache: DecoderCache,
}

/// One training pair: a measured (or simulated) stack and its ground-truth
/// volume.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub stack: ProjectionStack,
    pub volume: Volume,
}

/// Renders a set of random-ellipsoid phantoms into training pairs under a
/// common scan configuration. Sample `i` uses phantom seed `base_seed + i`.
pub fn make_training_set(
    cfg: &ScanConfig,
    shape: [usize; 3],
    spacing: [f64; 3],
    count: usize,
    base_seed: u64,
) -> Result<Vec<TrainSample>> {
    cfg.validate()?;
    let poses: Vec<ViewPose> = (1..=cfg.views)
        .map(|i| view_pose(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    (0..count)
        .map(|i| {
            let volume = make_phantom(
                &PhantomKind::Ellipsoids {
                    seed: base_seed + i as u64,
                    count: 6,
                },
                shape,
                spacing,
            )?;
            let stack = render_stack(&volume, &poses, default_step(&volume))?;
            Ok(TrainSample { stack, volume })
        })
        .collect()
}

/// Cycles through the samples for `steps` optimization steps, one sample
/// per step, with the epoch-based learning-rate schedule. Returns the loss
/// trace.
pub fn train_loop(
    model: &mut ModelState,
    adam: &mut AdamState,
    samples: &[TrainSample],
    steps: usize,
) -> Result<Vec<LossValues>> {
    train_loop_with(model, adam, samples, steps, |_, _| {})
}

/// [`train_loop`] with a per-step observer (step index, losses).
pub fn train_loop_with(
    model: &mut ModelState,
    adam: &mut AdamState,
    samples: &[TrainSample],
    steps: usize,
    mut on_step: impl FnMut(usize, &LossValues),
) -> Result<Vec<LossValues>> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one sample".into()));
    }
    let mut trace = Vec::with_capacity(steps);
    for t in 0..steps {
        let sample = &samples[t % samples.len()];
        let lr = scheduled_lr(model.config.base_lr, t / samples.len());
        let values = model.train_step(adam, sample, lr, t as u64)?;
        on_step(t, &values);
        trace.push(values);
    }
    Ok(trace)
}
