//! Feature-volume decoder.
//!
//! Fused per-voxel features are projected down to a working width with a
//! 1x1x1 convolution, refined by two single-conv residual blocks, then
//! upsampled back to the fine grid by `log2(scale)` stages of nearest
//! doubling plus a 3x3x3 convolution that halves the channel count. A 1x1x1
//! head with a scaled quadratic-knee rectifier keeps the reconstructed
//! attenuation non-negative.
//!
//! The head shape is load-bearing in two ways. First, attenuation values
//! live around 0.01/mm, so the level is factored into a fixed output scale
//! rather than baked into the pre-activation: a softplus pinned directly to
//! 0.01 sits deep in its saturated tail where gradients are ~1% strength.
//! Second, the rectifier reaches exactly zero. Most voxels of a scan are
//! empty, and under a mean-absolute loss their sign gradients never relax
//! while the prediction is strictly positive; with an adaptive-moment
//! optimizer renormalizing those shrinking-but-consistent gradients back to
//! full-size steps, a strictly-positive head (softplus) gets dragged into
//! its dead tail and the whole network collapses to a frozen all-zero
//! output. A head that can rest at exact zero lets satisfied empty voxels
//! drop out of the gradient instead.

use crate::error::Error;
use crate::nn::ops::{
    conv3d_backward, conv3d_forward, gelu, gelu_grad, hinge_smooth, hinge_smooth_grad,
    hinge_smooth_inverse, upsample2_backward, upsample2_forward,
};
use crate::nn::Tensor;
use crate::volume::Volume;
use crate::Result;
use rand::Rng;

/// Initial output level of an untrained decoder.
///
/// Deliberately below typical tissue attenuation (~0.005-0.03/mm): starting
/// above it would have nearly every voxel pushing the output down in unison,
/// and that early unanimous pressure overshoots the rectifier into its dead
/// zone before any spatial discrimination can form. Starting low splits the
/// pressure from the first step: occupied voxels pull up while empty ones
/// settle to zero and drop out.
pub const HEAD_BIAS_LEVEL: f64 = 0.004;

/// Fixed factor between the rectified pre-activation and emitted
/// attenuation, so the head operates near 1.0 over the useful range.
pub const HEAD_OUTPUT_SCALE: f64 = 0.01;

/// Width of the head rectifier's quadratic knee. The blend keeps the head
/// C1-smooth (central finite differences stay accurate through the joints)
/// while still reaching exactly zero.
pub const HEAD_KNEE: f64 = 1.0;

/// Convolution weights of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Fused feature channels entering the decoder.
    pub in_channels: usize,
    /// Working width after the 1x1x1 projection.
    pub proj_channels: usize,
    /// Upsampling factor back to the fine grid; a power of two.
    pub scale: usize,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub res1_w: Tensor,
    pub res1_b: Tensor,
    pub res2_w: Tensor,
    pub res2_b: Tensor,
    pub up_w: Vec<Tensor>,
    pub up_b: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

// He-style variance 2/fan_in, matching the encoder's scale-preserving init.
fn conv_init(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = cin * k * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_vec(
        &[cout, cin, k, k, k],
        (0..cout * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .unwrap()
}

fn check_dims(in_channels: usize, proj_channels: usize, scale: usize) -> Result<()> {
    if in_channels == 0 || proj_channels == 0 {
        return Err(Error::InvalidConfig("decoder widths must be positive".into()));
    }
    if scale == 0 || !scale.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "decoder scale {scale} must be a power of two"
        )));
    }
    if proj_channels % scale != 0 {
        return Err(Error::InvalidConfig(format!(
            "projection width {proj_channels} must divide by the scale {scale} \
             so each upsampling stage can halve it"
        )));
    }
    Ok(())
}

impl DecoderParams {
    /// Uniform `+-sqrt(6/fan_in)` weights, zero biases except the head level.
    pub fn init(
        in_channels: usize,
        proj_channels: usize,
        scale: usize,
        rng: &mut impl Rng,
    ) -> Result<DecoderParams> {
        check_dims(in_channels, proj_channels, scale)?;
        let levels = scale.trailing_zeros() as usize;
        let mut up_w = Vec::new();
        let mut up_b = Vec::new();
        let mut c = proj_channels;
        for _ in 0..levels {
            up_w.push(conv_init(rng, c / 2, c, 3));
            up_b.push(Tensor::zeros(&[c / 2]));
            c /= 2;
        }
        Ok(DecoderParams {
            in_channels,
            proj_channels,
            scale,
            proj_w: conv_init(rng, proj_channels, in_channels, 1),
            proj_b: Tensor::zeros(&[proj_channels]),
            res1_w: conv_init(rng, proj_channels, proj_channels, 3),
            res1_b: Tensor::zeros(&[proj_channels]),
            res2_w: conv_init(rng, proj_channels, proj_channels, 3),
            res2_b: Tensor::zeros(&[proj_channels]),
            up_w,
            up_b,
            head_w: conv_init(rng, 1, c, 1),
            head_b: Tensor::from_vec(
                &[1],
                vec![hinge_smooth_inverse(
                    HEAD_BIAS_LEVEL / HEAD_OUTPUT_SCALE,
                    HEAD_KNEE,
                )],
            )
            .unwrap(),
        })
    }

    /// Number of doubling stages.
    pub fn levels(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.in_channels, self.proj_channels, self.scale)?;
        let p = self.proj_channels;
        if self.proj_w.shape != [p, self.in_channels, 1, 1, 1]
            || self.proj_b.shape != [p]
            || self.res1_w.shape != [p, p, 3, 3, 3]
            || self.res2_w.shape != [p, p, 3, 3, 3]
            || self.res1_b.shape != [p]
            || self.res2_b.shape != [p]
        {
            return Err(Error::ShapeMismatch("decoder trunk tensors".into()));
        }
        if self.up_w.len() != self.levels() || self.up_b.len() != self.levels() {
            return Err(Error::ShapeMismatch(format!(
                "decoder has {} upsampling stages, expected {}",
                self.up_w.len(),
                self.levels()
            )));
        }
        let mut c = p;
        for (w, b) in self.up_w.iter().zip(&self.up_b) {
            if w.shape != [c / 2, c, 3, 3, 3] || b.shape != [c / 2] {
                return Err(Error::ShapeMismatch("decoder upsampling tensors".into()));
            }
            c /= 2;
        }
        if self.head_w.shape != [1, c, 1, 1, 1] || self.head_b.shape != [1] {
            return Err(Error::ShapeMismatch("decoder head tensors".into()));
        }
        Ok(())
    }
}

/// Gradient accumulators mirroring [`DecoderParams`].
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub res1_w: Tensor,
    pub res1_b: Tensor,
    pub res2_w: Tensor,
    pub res2_b: Tensor,
    pub up_w: Vec<Tensor>,
    pub up_b: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl DecoderGrads {
    pub fn zeros(params: &DecoderParams) -> DecoderGrads {
        DecoderGrads {
            proj_w: params.proj_w.zeros_like(),
            proj_b: params.proj_b.zeros_like(),
            res1_w: params.res1_w.zeros_like(),
            res1_b: params.res1_b.zeros_like(),
            res2_w: params.res2_w.zeros_like(),
            res2_b: params.res2_b.zeros_like(),
            up_w: params.up_w.iter().map(Tensor::zeros_like).collect(),
            up_b: params.up_b.iter().map(Tensor::zeros_like).collect(),
            head_w: params.head_w.zeros_like(),
            head_b: params.head_b.zeros_like(),
        }
    }
}

/// One residual block: `out = gelu(x + conv3(x))`.
struct Stage {
    pre: Vec<f64>,
    out: Vec<f64>,
}

fn residual_forward(x: &[f64], dims: (usize, usize, usize, usize), w: &Tensor, b: &Tensor) -> Stage {
    let mut pre = vec![0.0; x.len()];
    conv3d_forward(x, dims, &w.data, &b.data, (dims.0, 3), 1, 1, &mut pre);
    for (p, &xv) in pre.iter_mut().zip(x) {
        *p += xv;
    }
    let out = pre.iter().map(|&p| gelu(p)).collect();
    Stage { pre, out }
}

fn residual_backward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    w: &Tensor,
    stage: &Stage,
    g_out: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Vec<f64> {
    let g_pre: Vec<f64> = g_out
        .iter()
        .zip(&stage.pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    let mut g_in = g_pre.clone(); // identity branch
    conv3d_backward(
        x,
        dims,
        &w.data,
        (dims.0, 3),
        1,
        1,
        &g_pre,
        &mut g_in,
        &mut gw.data,
        &mut gb.data,
    );
    g_in
}

struct UpStage {
    in_dims: (usize, usize, usize, usize),
    upsampled: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

/// Everything the backward pass needs.
pub struct DecoderCache {
    dims_in: (usize, usize, usize, usize),
    input: Vec<f64>,
    input_spacing: [f64; 3],
    proj_pre: Vec<f64>,
    proj_out: Vec<f64>,
    res1: Stage,
    res2: Stage,
    ups: Vec<UpStage>,
    head_pre: Vec<f64>,
}

/// Decodes a fused feature volume to a single-channel attenuation volume on
/// the fine grid (`scale` times the input extent per axis).
pub fn decoder_forward(
    params: &DecoderParams,
    features: &Volume,
) -> Result<(Volume, DecoderCache)> {
    params.validate()?;
    if features.channels() != params.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "feature volume has {} channels, decoder expects {}",
            features.channels(),
            params.in_channels
        )));
    }
    let [nx, ny, nz] = features.shape();
    let spacing = features.spacing();
    let dims_in = (params.in_channels, nz, ny, nx);
    let input = features.data().to_vec();
    let voxels = nx * ny * nz;
    let p = params.proj_channels;

    let mut proj_pre = vec![0.0; p * voxels];
    conv3d_forward(
        &input,
        dims_in,
        &params.proj_w.data,
        &params.proj_b.data,
        (p, 1),
        1,
        0,
        &mut proj_pre,
    );
    let proj_out: Vec<f64> = proj_pre.iter().map(|&x| gelu(x)).collect();
    let dims_p = (p, nz, ny, nx);
    let res1 = residual_forward(&proj_out, dims_p, &params.res1_w, &params.res1_b);
    let res2 = residual_forward(&res1.out, dims_p, &params.res2_w, &params.res2_b);

    let mut cur = res2.out.clone();
    let mut dims = dims_p;
    let mut ups = Vec::with_capacity(params.levels());
    for (w, b) in params.up_w.iter().zip(&params.up_b) {
        let (c, d, h, wd) = dims;
        let up_dims = (c, 2 * d, 2 * h, 2 * wd);
        let mut upsampled = vec![0.0; c * 8 * d * h * wd];
        upsample2_forward(&cur, dims, &mut upsampled);
        let mut pre = vec![0.0; (c / 2) * 8 * d * h * wd];
        conv3d_forward(
            &upsampled,
            up_dims,
            &w.data,
            &b.data,
            (c / 2, 3),
            1,
            1,
            &mut pre,
        );
        let out: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        cur = out.clone();
        dims = (c / 2, 2 * d, 2 * h, 2 * wd);
        ups.push(UpStage {
            in_dims: (c, d, h, wd),
            upsampled,
            pre,
            out,
        });
    }

    let (c_last, fd, fh, fw) = dims;
    let fine_voxels = fd * fh * fw;
    let mut head_pre = vec![0.0; fine_voxels];
    conv3d_forward(
        &cur,
        dims,
        &params.head_w.data,
        &params.head_b.data,
        (1, 1),
        1,
        0,
        &mut head_pre,
    );
    let out_data: Vec<f64> = head_pre
        .iter()
        .map(|&z| HEAD_OUTPUT_SCALE * hinge_smooth(z, HEAD_KNEE))
        .collect();
    let s = params.scale as f64;
    // A power-of-two scale makes the multiply/divide round trip exact.
    let fine_spacing = [spacing[0] / s, spacing[1] / s, spacing[2] / s];
    let volume = Volume::from_vec([fw, fh, fd], fine_spacing, 1, out_data)?;
    let _ = c_last;
    Ok((
        volume,
        DecoderCache {
            dims_in,
            input,
            input_spacing: spacing,
            proj_pre,
            proj_out,
            res1,
            res2,
            ups,
            head_pre,
        },
    ))
}

/// Backward pass of [`decoder_forward`]: fine-volume cotangent to parameter
/// cotangents plus the cotangent on the fused feature volume.
pub fn decoder_backward(
    params: &DecoderParams,
    cache: &DecoderCache,
    g_out: &Volume,
    grads: &mut DecoderGrads,
) -> Result<Volume> {
    if g_out.data().len() != cache.head_pre.len() || g_out.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "output cotangent has {} values, decoder produced {}",
            g_out.data().len(),
            cache.head_pre.len()
        )));
    }
    let (cin, nz, ny, nx) = cache.dims_in;
    let p = params.proj_channels;
    let dims_p = (p, nz, ny, nx);

    let g_head_pre: Vec<f64> = g_out
        .data()
        .iter()
        .zip(&cache.head_pre)
        .map(|(&g, &z)| g * HEAD_OUTPUT_SCALE * hinge_smooth_grad(z, HEAD_KNEE))
        .collect();

    let mut dims = dims_p;
    for up in &cache.ups {
        let (c, d, h, wd) = up.in_dims;
        dims = (c / 2, 2 * d, 2 * h, 2 * wd);
    }
    let last_out: &[f64] = cache.ups.last().map_or(&cache.res2.out, |u| &u.out);
    let mut g_cur = vec![0.0; last_out.len()];
    conv3d_backward(
        last_out,
        dims,
        &params.head_w.data,
        (1, 1),
        1,
        0,
        &g_head_pre,
        &mut g_cur,
        &mut grads.head_w.data,
        &mut grads.head_b.data,
    );

    for (i, up) in cache.ups.iter().enumerate().rev() {
        let (c, d, h, wd) = up.in_dims;
        let up_dims = (c, 2 * d, 2 * h, 2 * wd);
        let g_pre: Vec<f64> = g_cur
            .iter()
            .zip(&up.pre)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        let mut g_upsampled = vec![0.0; up.upsampled.len()];
        conv3d_backward(
            &up.upsampled,
            up_dims,
            &params.up_w[i].data,
            (c / 2, 3),
            1,
            1,
            &g_pre,
            &mut g_upsampled,
            &mut grads.up_w[i].data,
            &mut grads.up_b[i].data,
        );
        let prev: &[f64] = if i == 0 {
            &cache.res2.out
        } else {
            &cache.ups[i - 1].out
        };
        g_cur = vec![0.0; prev.len()];
        upsample2_backward(&g_upsampled, up.in_dims, &mut g_cur);
    }

    let g_res1_out = residual_backward(
        &cache.res1.out,
        dims_p,
        &params.res2_w,
        &cache.res2,
        &g_cur,
        &mut grads.res2_w,
        &mut grads.res2_b,
    );
    let g_proj_out = residual_backward(
        &cache.proj_out,
        dims_p,
        &params.res1_w,
        &cache.res1,
        &g_res1_out,
        &mut grads.res1_w,
        &mut grads.res1_b,
    );
    let g_proj_pre: Vec<f64> = g_proj_out
        .iter()
        .zip(&cache.proj_pre)
        .map(|(&g, &z)| g * gelu_grad(z))
        .collect();
    let mut g_input = vec![0.0; cache.input.len()];
    conv3d_backward(
        &cache.input,
        cache.dims_in,
        &params.proj_w.data,
        (p, 1),
        1,
        0,
        &g_proj_pre,
        &mut g_input,
        &mut grads.proj_w.data,
        &mut grads.proj_b.data,
    );
    Volume::from_vec([nx, ny, nz], cache.input_spacing, cin, g_input)
}
