//! Multi-view feature aggregation at query points.
//!
//! Each world point is projected into every view and samples that view's
//! feature pyramid bilinearly (coarser levels address the same physical
//! point through the half-resolution coordinate map). The per-view vectors
//! are pooled by an order-invariant two-stage network: per-view features are
//! concatenated with their cross-view mean and population variance, a first
//! dense layer emits transformed features plus an attention logit, the
//! logits softmax into pooling weights, and a second dense layer finishes
//! the fused vector. Backward passes are written out by hand against the
//! forward caches.

use crate::error::Error;
use crate::geometry::{detector_point_to_pixel, project_point_to_detector, ViewPose};
use crate::math::Vec3;
use crate::nn::ops::{
    gelu, gelu_grad, linear_backward, linear_forward, softmax, softmax_backward,
};
use crate::nn::Tensor;
use crate::volume::{ImageGrid, Volume};
use crate::Result;
use rand::Rng;

/// Parameters of the two dense stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Per-view feature width `C` (sum of pyramid channels).
    pub channels: usize,
    /// `[C + 1, 3C]`: maps `[f_i, mean, var]` to `C` features and one logit.
    pub phi1_w: Tensor,
    pub phi1_b: Tensor,
    /// `[C, C]`: finishes the pooled vector.
    pub phi2_w: Tensor,
    pub phi2_b: Tensor,
}

impl FusionParams {
    /// Uniform `+-sqrt(6/fan_in)` He-style weights, zero biases.
    pub fn init(channels: usize, rng: &mut impl Rng) -> FusionParams {
        let c = channels;
        let bound1 = (6.0 / (3 * c) as f64).sqrt();
        let bound2 = (6.0 / c as f64).sqrt();
        let phi1_w = Tensor::from_vec(
            &[c + 1, 3 * c],
            (0..(c + 1) * 3 * c)
                .map(|_| rng.gen_range(-bound1..bound1))
                .collect(),
        )
        .unwrap();
        let phi2_w = Tensor::from_vec(
            &[c, c],
            (0..c * c).map(|_| rng.gen_range(-bound2..bound2)).collect(),
        )
        .unwrap();
        FusionParams {
            channels: c,
            phi1_w,
            phi1_b: Tensor::zeros(&[c + 1]),
            phi2_w,
            phi2_b: Tensor::zeros(&[c]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::InvalidConfig("fusion needs at least one channel".into()));
        }
        let want = [
            (&self.phi1_w, vec![c + 1, 3 * c]),
            (&self.phi1_b, vec![c + 1]),
            (&self.phi2_w, vec![c, c]),
            (&self.phi2_b, vec![c]),
        ];
        for (tensor, shape) in want {
            if tensor.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "fusion tensor shaped {:?}, expected {shape:?}",
                    tensor.shape
                )));
            }
        }
        Ok(())
    }
}

/// Gradient accumulators mirroring [`FusionParams`].
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub phi1_w: Tensor,
    pub phi1_b: Tensor,
    pub phi2_w: Tensor,
    pub phi2_b: Tensor,
}

impl FusionGrads {
    pub fn zeros(params: &FusionParams) -> FusionGrads {
        FusionGrads {
            phi1_w: params.phi1_w.zeros_like(),
            phi1_b: params.phi1_b.zeros_like(),
            phi2_w: params.phi2_w.zeros_like(),
            phi2_b: params.phi2_b.zeros_like(),
        }
    }
}

/// Cross-view mean and population variance per channel of an `n x c` block.
pub fn fuse_mean_var(features: &[f64], n_views: usize, channels: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(features.len(), n_views * channels);
    assert!(n_views > 0, "mean/var need at least one view");
    let inv = 1.0 / n_views as f64;
    let mut mean = vec![0.0; channels];
    for i in 0..n_views {
        for c in 0..channels {
            mean[c] += features[i * channels + c];
        }
    }
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let mut var = vec![0.0; channels];
    for i in 0..n_views {
        for c in 0..channels {
            let d = features[i * channels + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv;
    }
    (mean, var)
}

/// Intermediate state of one fused point, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    n_views: usize,
    features: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Pre-activations of the first stage, `n x (c + 1)`.
    pre1: Vec<f64>,
    /// Softmax pooling weights, one per view.
    pub weights: Vec<f64>,
    pooled: Vec<f64>,
    /// Pre-activations of the second stage.
    pre2: Vec<f64>,
}

/// Fuses `n_views` per-view feature vectors (`n x c`, row per view) into one
/// `c`-vector. Returns the fused features and the cache for backward.
pub fn fuse_adaptive(
    params: &FusionParams,
    features: &[f64],
    n_views: usize,
) -> (Vec<f64>, FuseCache) {
    let c = params.channels;
    assert_eq!(features.len(), n_views * c, "feature block shape");
    assert!(n_views > 0, "fusion needs at least one view");
    let (mean, var) = fuse_mean_var(features, n_views, c);
    let mut pre1 = vec![0.0; n_views * (c + 1)];
    let mut logits = vec![0.0; n_views];
    let mut z = vec![0.0; 3 * c];
    for i in 0..n_views {
        z[..c].copy_from_slice(&features[i * c..(i + 1) * c]);
        z[c..2 * c].copy_from_slice(&mean);
        z[2 * c..].copy_from_slice(&var);
        let pre = &mut pre1[i * (c + 1)..(i + 1) * (c + 1)];
        linear_forward(&params.phi1_w.data, &params.phi1_b.data, &z, pre);
        logits[i] = pre[c];
    }
    let weights = softmax(&logits);
    let mut pooled = vec![0.0; c];
    for i in 0..n_views {
        let w = weights[i];
        let pre = &pre1[i * (c + 1)..(i + 1) * (c + 1)];
        for ch in 0..c {
            pooled[ch] += w * gelu(pre[ch]);
        }
    }
    let mut pre2 = vec![0.0; c];
    linear_forward(&params.phi2_w.data, &params.phi2_b.data, &pooled, &mut pre2);
    let out = pre2.iter().map(|&x| gelu(x)).collect();
    let cache = FuseCache {
        n_views,
        features: features.to_vec(),
        mean,
        var,
        pre1,
        weights,
        pooled,
        pre2,
    };
    (out, cache)
}

/// Backward pass of [`fuse_adaptive`]. Accumulates the feature cotangent
/// into `g_features` (`n x c`, row per view) and parameter cotangents into
/// `grads`.
pub fn fuse_adaptive_backward(
    params: &FusionParams,
    cache: &FuseCache,
    g_out: &[f64],
    g_features: &mut [f64],
    grads: &mut FusionGrads,
) {
    let c = params.channels;
    let n = cache.n_views;
    assert_eq!(g_out.len(), c);
    assert_eq!(g_features.len(), n * c);

    // Second stage: GELU then dense.
    let g_pre2: Vec<f64> = (0..c).map(|ch| g_out[ch] * gelu_grad(cache.pre2[ch])).collect();
    let mut g_pooled = vec![0.0; c];
    linear_backward(
        &params.phi2_w.data,
        &cache.pooled,
        &g_pre2,
        &mut g_pooled,
        &mut grads.phi2_w.data,
        &mut grads.phi2_b.data,
    );

    // Pooling: pooled = sum_i w_i gelu(pre1_i[..c]).
    let mut g_logit_inputs = vec![0.0; n];
    for i in 0..n {
        let pre = &cache.pre1[i * (c + 1)..(i + 1) * (c + 1)];
        let mut dot = 0.0;
        for ch in 0..c {
            dot += g_pooled[ch] * gelu(pre[ch]);
        }
        g_logit_inputs[i] = dot;
    }
    let mut g_logits = vec![0.0; n];
    softmax_backward(&cache.weights, &g_logit_inputs, &mut g_logits);

    // First stage per view, then mean/var closure over the raw features.
    let mut g_mean = vec![0.0; c];
    let mut g_var = vec![0.0; c];
    let mut z = vec![0.0; 3 * c];
    let mut g_pre = vec![0.0; c + 1];
    let mut g_z = vec![0.0; 3 * c];
    for i in 0..n {
        let pre = &cache.pre1[i * (c + 1)..(i + 1) * (c + 1)];
        for ch in 0..c {
            g_pre[ch] = cache.weights[i] * g_pooled[ch] * gelu_grad(pre[ch]);
        }
        g_pre[c] = g_logits[i];
        z[..c].copy_from_slice(&cache.features[i * c..(i + 1) * c]);
        z[c..2 * c].copy_from_slice(&cache.mean);
        z[2 * c..].copy_from_slice(&cache.var);
        g_z.iter_mut().for_each(|x| *x = 0.0);
        linear_backward(
            &params.phi1_w.data,
            &z,
            &g_pre,
            &mut g_z,
            &mut grads.phi1_w.data,
            &mut grads.phi1_b.data,
        );
        for ch in 0..c {
            g_features[i * c + ch] += g_z[ch];
            g_mean[ch] += g_z[c + ch];
            g_var[ch] += g_z[2 * c + ch];
        }
    }

    // mean_c = (1/n) sum_j f_jc; var_c = (1/n) sum_j (f_jc - mean_c)^2.
    // d var_c / d f_ic = (2/n)(f_ic - mean_c): the mean-path term cancels
    // because the centered features sum to zero.
    let inv = 1.0 / n as f64;
    for i in 0..n {
        for ch in 0..c {
            let centered = cache.features[i * c + ch] - cache.mean[ch];
            g_features[i * c + ch] +=
                g_mean[ch] * inv + g_var[ch] * 2.0 * inv * centered;
        }
    }
}

/// Maps a level-0 continuous pixel coordinate to pyramid level `level`.
#[inline]
pub fn level_coord(q: f64, level: usize) -> f64 {
    (q + 0.5) / (1 << level) as f64 - 0.5
}

/// Samples one view's feature pyramid at the projection of a world point,
/// concatenating all level channels into `out`. Points the view cannot see
/// (projection failure or off-detector landing) contribute zeros.
pub fn gather_view_features(
    levels: &[ImageGrid],
    pose: &ViewPose,
    x: Vec3,
    out: &mut [f64],
) -> Result<()> {
    let total: usize = levels.iter().map(|l| l.channels()).sum();
    if out.len() != total {
        return Err(Error::ShapeMismatch(format!(
            "gather buffer holds {}, pyramid has {total} channels",
            out.len()
        )));
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    let Ok((point, _t)) = project_point_to_detector(pose, x) else {
        return Ok(());
    };
    let Ok(q) = detector_point_to_pixel(pose, point) else {
        return Ok(());
    };
    let mut offset = 0;
    for (level, img) in levels.iter().enumerate() {
        let ql = [level_coord(q[0], level), level_coord(q[1], level)];
        for ch in 0..img.channels() {
            out[offset + ch] = img.sample_bilinear(ql, ch);
        }
        offset += img.channels();
    }
    Ok(())
}

/// Scatters a fused-feature cotangent back onto one view's pyramid through
/// the same bilinear taps the gather read from.
pub fn gather_view_features_backward(
    level_grads: &mut [ImageGrid],
    pose: &ViewPose,
    x: Vec3,
    g_out: &[f64],
) -> Result<()> {
    let total: usize = level_grads.iter().map(|l| l.channels()).sum();
    if g_out.len() != total {
        return Err(Error::ShapeMismatch(format!(
            "gather cotangent holds {}, pyramid has {total} channels",
            g_out.len()
        )));
    }
    let Ok((point, _t)) = project_point_to_detector(pose, x) else {
        return Ok(());
    };
    let Ok(q) = detector_point_to_pixel(pose, point) else {
        return Ok(());
    };
    let mut footprint = Vec::with_capacity(4);
    let mut offset = 0;
    for (level, img) in level_grads.iter_mut().enumerate() {
        let ql = [level_coord(q[0], level), level_coord(q[1], level)];
        img.bilinear_footprint(ql, &mut footprint);
        let channels = img.channels();
        let plane = img.shape()[0] * img.shape()[1];
        let data = img.data_mut();
        for ch in 0..channels {
            let g = g_out[offset + ch];
            if g != 0.0 {
                for &(idx, w) in &footprint {
                    data[ch * plane + idx] += g * w;
                }
            }
        }
        offset += channels;
    }
    Ok(())
}

/// Fused features on the stride-`scale` coarse lattice, plus the per-point
/// caches the backward pass needs.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    /// `channels`-deep coarse grid; its sample points are the fine voxel
    /// centers at indices `0, scale, 2*scale, ...` per axis.
    pub features: Volume,
    pub scale: usize,
    caches: Vec<FuseCache>,
    points: Vec<Vec3>,
}

fn check_pyramids(
    params: &FusionParams,
    views: &[(ViewPose, Vec<ImageGrid>)],
) -> Result<()> {
    if views.is_empty() {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    let first: Vec<[usize; 2]> = views[0].1.iter().map(|l| l.shape()).collect();
    for (i, (_, pyramid)) in views.iter().enumerate() {
        let total: usize = pyramid.iter().map(|l| l.channels()).sum();
        if total != params.channels {
            return Err(Error::ShapeMismatch(format!(
                "view {i} pyramid carries {total} channels, fusion expects {}",
                params.channels
            )));
        }
        let shapes: Vec<[usize; 2]> = pyramid.iter().map(|l| l.shape()).collect();
        if shapes != first {
            return Err(Error::ShapeMismatch(format!(
                "view {i} pyramid shapes {shapes:?} differ from view 0 {first:?}"
            )));
        }
    }
    Ok(())
}

/// Gathers and fuses features for every coarse lattice point of a volume of
/// the given fine shape. `shape` must be divisible by `scale`.
pub fn build_feature_volume(
    params: &FusionParams,
    views: &[(ViewPose, Vec<ImageGrid>)],
    shape: [usize; 3],
    spacing: [f64; 3],
    scale: usize,
) -> Result<FeatureVolume> {
    params.validate()?;
    check_pyramids(params, views)?;
    if scale == 0 || shape.iter().any(|&n| n == 0 || n % scale != 0) {
        return Err(Error::InvalidConfig(format!(
            "fine shape {shape:?} is not divisible by feature stride {scale}"
        )));
    }
    let c = params.channels;
    let n_views = views.len();
    let coarse = [shape[0] / scale, shape[1] / scale, shape[2] / scale];
    let coarse_spacing = [
        spacing[0] * scale as f64,
        spacing[1] * scale as f64,
        spacing[2] * scale as f64,
    ];
    let fine = Volume::zeros(shape, spacing, 1)?;
    let mut features = Volume::zeros(coarse, coarse_spacing, c)?;
    let mut caches = Vec::with_capacity(coarse[0] * coarse[1] * coarse[2]);
    let mut points = Vec::with_capacity(caches.capacity());
    let mut block = vec![0.0; n_views * c];
    for ck in 0..coarse[2] {
        for cj in 0..coarse[1] {
            for ci in 0..coarse[0] {
                let x = fine.voxel_center(ci * scale, cj * scale, ck * scale);
                for (i, (pose, pyramid)) in views.iter().enumerate() {
                    gather_view_features(pyramid, pose, x, &mut block[i * c..(i + 1) * c])?;
                }
                let (fused, cache) = fuse_adaptive(params, &block, n_views);
                for (ch, value) in fused.into_iter().enumerate() {
                    features.set(ch, ci, cj, ck, value);
                }
                caches.push(cache);
                points.push(x);
            }
        }
    }
    Ok(FeatureVolume {
        features,
        scale,
        caches,
        points,
    })
}

/// Backward pass of [`build_feature_volume`]: routes a cotangent on the
/// coarse feature grid into the fusion parameters and the per-view feature
/// pyramids.
pub fn feature_volume_backward(
    params: &FusionParams,
    fv: &FeatureVolume,
    g_features: &Volume,
    views: &[(ViewPose, Vec<ImageGrid>)],
    grads: &mut FusionGrads,
    g_views: &mut [Vec<ImageGrid>],
) -> Result<()> {
    let c = params.channels;
    let coarse = fv.features.shape();
    if g_features.shape() != coarse || g_features.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "feature cotangent {:?} x{} vs feature volume {coarse:?} x{c}",
            g_features.shape(),
            g_features.channels()
        )));
    }
    if g_views.len() != views.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pyramid cotangents for {} views",
            g_views.len(),
            views.len()
        )));
    }
    let n_views = views.len();
    let mut g_out = vec![0.0; c];
    let mut g_block = vec![0.0; n_views * c];
    let mut flat = 0;
    for ck in 0..coarse[2] {
        for cj in 0..coarse[1] {
            for ci in 0..coarse[0] {
                for ch in 0..c {
                    g_out[ch] = g_features.get(ch, ci, cj, ck);
                }
                g_block.iter_mut().for_each(|x| *x = 0.0);
                fuse_adaptive_backward(params, &fv.caches[flat], &g_out, &mut g_block, grads);
                let x = fv.points[flat];
                for (i, ((pose, _), g_pyramid)) in
                    views.iter().zip(g_views.iter_mut()).enumerate()
                {
                    gather_view_features_backward(
                        g_pyramid,
                        pose,
                        x,
                        &g_block[i * c..(i + 1) * c],
                    )?;
                }
                flat += 1;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{view_pose, ScanConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg(det: usize, pitch: f64) -> ScanConfig {
        ScanConfig {
            views: 6,
            step_deg: 60.0,
            start_deg: 0.0,
            source_to_object: 300.0,
            object_to_detector: 200.0,
            det_shape: [det, det],
            det_spacing: [pitch, pitch],
        }
    }

    fn pseudo(seed: u64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let h = (seed ^ i as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .rotate_left(23)
                    .wrapping_mul(0x94D0_49BB_1331_11EB);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn mean_var_match_hand_values_and_ignore_view_order() {
        let features = vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0];
        let (mean, var) = fuse_mean_var(&features, 3, 2);
        assert_relative_eq!(mean[0], 3.0);
        assert_relative_eq!(mean[1], 20.0);
        assert_relative_eq!(var[0], 8.0 / 3.0);
        assert_relative_eq!(var[1], 200.0 / 3.0);
        let permuted = vec![5.0, 30.0, 1.0, 10.0, 3.0, 20.0];
        let (pm, pv) = fuse_mean_var(&permuted, 3, 2);
        for (a, b) in mean.iter().zip(&pm) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in var.iter().zip(&pv) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fused_output_is_invariant_under_view_permutation() {
        let c = 4;
        let n = 5;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = FusionParams::init(c, &mut rng);
        let features = pseudo(8, n * c);
        let (out, cache) = fuse_adaptive(&params, &features, n);
        assert_relative_eq!(cache.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // Reverse the view order.
        let mut reversed = vec![0.0; n * c];
        for i in 0..n {
            reversed[i * c..(i + 1) * c]
                .copy_from_slice(&features[(n - 1 - i) * c..(n - i) * c]);
        }
        let (out_rev, _) = fuse_adaptive(&params, &reversed, n);
        for (a, b) in out.iter().zip(&out_rev) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn adaptive_backward_matches_finite_differences() {
        let c = 3;
        let n = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = FusionParams::init(c, &mut rng);
        let features = pseudo(21, n * c);
        let r = pseudo(22, c);
        let loss = |params: &FusionParams, features: &[f64]| -> f64 {
            let (out, _) = fuse_adaptive(params, features, n);
            out.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = fuse_adaptive(&params, &features, n);
        let mut g_features = vec![0.0; n * c];
        let mut grads = FusionGrads::zeros(&params);
        fuse_adaptive_backward(&params, &cache, &r, &mut g_features, &mut grads);
        let h = 1e-6;
        for i in 0..n * c {
            let mut fp = features.clone();
            fp[i] += h;
            let mut fm = features.clone();
            fm[i] -= h;
            let fd = (loss(&params, &fp) - loss(&params, &fm)) / (2.0 * h);
            assert_relative_eq!(g_features[i], fd, epsilon = 1e-7);
        }
        let check_tensor = |pick: fn(&mut FusionParams) -> &mut Tensor,
                            got: &Tensor| {
            let len = got.numel();
            for i in (0..len).step_by((len / 7).max(1)) {
                let mut pp = params.clone();
                pick(&mut pp).data[i] += h;
                let mut pm = params.clone();
                pick(&mut pm).data[i] -= h;
                let fd = (loss(&pp, &features) - loss(&pm, &features)) / (2.0 * h);
                assert_relative_eq!(got.data[i], fd, epsilon = 1e-7);
            }
        };
        check_tensor(|p| &mut p.phi1_w, &grads.phi1_w);
        check_tensor(|p| &mut p.phi1_b, &grads.phi1_b);
        check_tensor(|p| &mut p.phi2_w, &grads.phi2_w);
        check_tensor(|p| &mut p.phi2_b, &grads.phi2_b);
    }

    #[test]
    fn gather_reads_exact_values_at_pixel_centers() {
        let pose = view_pose(&cfg(8, 2.0), 1).unwrap();
        // Two levels: 2 channels at 8x8, 1 channel at 4x4.
        let mut l0 = ImageGrid::zeros([8, 8], [2.0, 2.0], 2).unwrap();
        let mut l1 = ImageGrid::zeros([4, 4], [4.0, 4.0], 1).unwrap();
        for (i, v) in l0.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        for (i, v) in l1.data_mut().iter_mut().enumerate() {
            *v = 1000.0 + i as f64;
        }
        let levels = vec![l0.clone(), l1];
        // The isocenter projects to the detector center (3.5, 3.5) at level
        // 0 and (1.5, 1.5) at level 1; both are interior blends.
        let mut out = vec![0.0; 3];
        gather_view_features(&levels, &pose, [0.0; 3], &mut out).unwrap();
        let want0 = l0.sample_bilinear([3.5, 3.5], 0);
        let want1 = l0.sample_bilinear([3.5, 3.5], 1);
        assert_relative_eq!(out[0], want0, epsilon = 1e-9);
        assert_relative_eq!(out[1], want1, epsilon = 1e-9);
        assert_relative_eq!(out[2], levels[1].sample_bilinear([1.5, 1.5], 0), epsilon = 1e-9);
        // A point far off the cone lands outside the raster: all zeros.
        let mut far = vec![1.0; 3];
        gather_view_features(&levels, &pose, [0.0, 500.0, 0.0], &mut far).unwrap();
        assert!(far.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gather_backward_is_the_exact_adjoint() {
        let pose = view_pose(&cfg(8, 2.0), 2).unwrap();
        let mut l0 = ImageGrid::zeros([8, 8], [2.0, 2.0], 2).unwrap();
        let mut l1 = ImageGrid::zeros([4, 4], [4.0, 4.0], 1).unwrap();
        let v0 = pseudo(41, l0.data().len());
        let v1 = pseudo(42, l1.data().len());
        l0.data_mut().copy_from_slice(&v0);
        l1.data_mut().copy_from_slice(&v1);
        let levels = vec![l0, l1];
        let x = [3.0, -2.0, 1.5];
        let mut out = vec![0.0; 3];
        gather_view_features(&levels, &pose, x, &mut out).unwrap();
        let r = [0.3, -1.1, 0.7];
        let mut grads = vec![
            ImageGrid::zeros([8, 8], [2.0, 2.0], 2).unwrap(),
            ImageGrid::zeros([4, 4], [4.0, 4.0], 1).unwrap(),
        ];
        gather_view_features_backward(&mut grads, &pose, x, &r).unwrap();
        let lhs: f64 = out.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = grads[0]
            .data()
            .iter()
            .zip(&v0)
            .chain(grads[1].data().iter().zip(&v1))
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn feature_volume_has_the_coarse_lattice_shape() {
        let c = 3;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = FusionParams::init(c, &mut rng);
        let scan = cfg(8, 2.0);
        let views: Vec<(ViewPose, Vec<ImageGrid>)> = (1..=4)
            .map(|i| {
                let pose = view_pose(&scan, i).unwrap();
                let mut l0 = ImageGrid::zeros([8, 8], [2.0, 2.0], 2).unwrap();
                let mut l1 = ImageGrid::zeros([4, 4], [4.0, 4.0], 1).unwrap();
                let a = pseudo(50 + i as u64, l0.data().len());
                let b = pseudo(60 + i as u64, l1.data().len());
                l0.data_mut().copy_from_slice(&a);
                l1.data_mut().copy_from_slice(&b);
                (pose, vec![l0, l1])
            })
            .collect();
        let fv = build_feature_volume(&params, &views, [8; 3], [2.0; 3], 4).unwrap();
        assert_eq!(fv.features.shape(), [2, 2, 2]);
        assert_eq!(fv.features.channels(), 3);
        assert_eq!(fv.features.spacing(), [8.0, 8.0, 8.0]);
        let again = build_feature_volume(&params, &views, [8; 3], [2.0; 3], 4).unwrap();
        assert_eq!(fv.features.data(), again.features.data());
        // Indivisible stride and wrong channel sums are rejected.
        assert!(build_feature_volume(&params, &views, [9; 3], [2.0; 3], 4).is_err());
        let mut bad = views.clone();
        bad[1].1.pop();
        assert!(build_feature_volume(&params, &bad, [8; 3], [2.0; 3], 4).is_err());
    }

    #[test]
    fn feature_volume_backward_matches_finite_differences() {
        let c = 3;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let params = FusionParams::init(c, &mut rng);
        let scan = cfg(6, 3.0);
        let base: Vec<(ViewPose, Vec<ImageGrid>)> = (1..=3)
            .map(|i| {
                let pose = view_pose(&scan, i).unwrap();
                let mut l0 = ImageGrid::zeros([6, 6], [3.0, 3.0], 2).unwrap();
                let mut l1 = ImageGrid::zeros([3, 3], [6.0, 6.0], 1).unwrap();
                let a = pseudo(70 + i as u64, l0.data().len());
                let b = pseudo(80 + i as u64, l1.data().len());
                l0.data_mut().copy_from_slice(&a);
                l1.data_mut().copy_from_slice(&b);
                (pose, vec![l0, l1])
            })
            .collect();
        let shape = [4; 3];
        let spacing = [3.0; 3];
        let scale = 2;
        let fv = build_feature_volume(&params, &base, shape, spacing, scale).unwrap();
        let r = pseudo(90, fv.features.data().len());
        let loss = |views: &[(ViewPose, Vec<ImageGrid>)], params: &FusionParams| -> f64 {
            let fv = build_feature_volume(params, views, shape, spacing, scale).unwrap();
            fv.features.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let g_feat = Volume::from_vec(
            fv.features.shape(),
            fv.features.spacing(),
            c,
            r.clone(),
        )
        .unwrap();
        let mut grads = FusionGrads::zeros(&params);
        let mut g_views: Vec<Vec<ImageGrid>> = base
            .iter()
            .map(|(_, py)| {
                py.iter()
                    .map(|l| ImageGrid::zeros(l.shape(), l.spacing(), l.channels()).unwrap())
                    .collect()
            })
            .collect();
        feature_volume_backward(&params, &fv, &g_feat, &base, &mut grads, &mut g_views)
            .unwrap();
        let h = 1e-6;
        // Feature-map cotangents, spot checked on view 1 level 0.
        for idx in (0..base[1].1[0].data().len()).step_by(13) {
            let mut vp = base.clone();
            vp[1].1[0].data_mut()[idx] += h;
            let mut vm = base.clone();
            vm[1].1[0].data_mut()[idx] -= h;
            let fd = (loss(&vp, &params) - loss(&vm, &params)) / (2.0 * h);
            assert_relative_eq!(g_views[1][0].data()[idx], fd, epsilon = 1e-6);
        }
        // Parameter cotangents, spot checked on the first-stage weights.
        for idx in (0..grads.phi1_w.numel()).step_by(17) {
            let mut pp = params.clone();
            pp.phi1_w.data[idx] += h;
            let mut pm = params.clone();
            pm.phi1_w.data[idx] -= h;
            let fd = (loss(&base, &pp) - loss(&base, &pm)) / (2.0 * h);
            assert_relative_eq!(grads.phi1_w.data[idx], fd, epsilon = 1e-6);
        }
    }
}
