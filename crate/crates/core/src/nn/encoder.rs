//! Per-view projection encoder.
//!
//! A single-channel detector image runs through a 3x3 stem and two stride-2
//! downsampling stages, each followed by a one-conv residual refinement
//! `y = gelu(x + conv3(x))`. The three stage outputs form the feature
//! pyramid at full, half, and quarter resolution; their channel sum is the
//! per-view feature width the fusion stage consumes.

use crate::error::Error;
use crate::nn::ops::{conv2d_backward, conv2d_forward, conv_out_len, gelu, gelu_grad};
use crate::nn::Tensor;
use crate::volume::ImageGrid;
use crate::Result;
use rand::Rng;

/// Convolution weights of the three-stage encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Channels of the full, half, and quarter resolution stages.
    pub widths: [usize; 3],
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub refine0_w: Tensor,
    pub refine0_b: Tensor,
    pub down1_w: Tensor,
    pub down1_b: Tensor,
    pub refine1_w: Tensor,
    pub refine1_b: Tensor,
    pub down2_w: Tensor,
    pub down2_b: Tensor,
    pub refine2_w: Tensor,
    pub refine2_b: Tensor,
}

// Uniform He-style init: variance 2/fan_in keeps activation scale roughly
// constant through gelu stages, so per-pixel signal survives to the gather
// instead of decaying by ~0.3x per layer.
fn conv_init(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    Tensor::from_vec(
        &[cout, cin, k, k],
        (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .unwrap()
}

impl EncoderParams {
    /// Uniform `+-sqrt(6/fan_in)` weights, zero biases.
    pub fn init(widths: [usize; 3], rng: &mut impl Rng) -> EncoderParams {
        let [w0, w1, w2] = widths;
        EncoderParams {
            widths,
            stem_w: conv_init(rng, w0, 1, 3),
            stem_b: Tensor::zeros(&[w0]),
            refine0_w: conv_init(rng, w0, w0, 3),
            refine0_b: Tensor::zeros(&[w0]),
            down1_w: conv_init(rng, w1, w0, 3),
            down1_b: Tensor::zeros(&[w1]),
            refine1_w: conv_init(rng, w1, w1, 3),
            refine1_b: Tensor::zeros(&[w1]),
            down2_w: conv_init(rng, w2, w1, 3),
            down2_b: Tensor::zeros(&[w2]),
            refine2_w: conv_init(rng, w2, w2, 3),
            refine2_b: Tensor::zeros(&[w2]),
        }
    }

    /// Total pyramid channels.
    pub fn feature_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let [w0, w1, w2] = self.widths;
        if w0 == 0 || w1 == 0 || w2 == 0 {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        let want: [(&Tensor, Vec<usize>); 12] = [
            (&self.stem_w, vec![w0, 1, 3, 3]),
            (&self.stem_b, vec![w0]),
            (&self.refine0_w, vec![w0, w0, 3, 3]),
            (&self.refine0_b, vec![w0]),
            (&self.down1_w, vec![w1, w0, 3, 3]),
            (&self.down1_b, vec![w1]),
            (&self.refine1_w, vec![w1, w1, 3, 3]),
            (&self.refine1_b, vec![w1]),
            (&self.down2_w, vec![w2, w1, 3, 3]),
            (&self.down2_b, vec![w2]),
            (&self.refine2_w, vec![w2, w2, 3, 3]),
            (&self.refine2_b, vec![w2]),
        ];
        for (tensor, shape) in want {
            if tensor.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "encoder tensor shaped {:?}, expected {shape:?}",
                    tensor.shape
                )));
            }
        }
        Ok(())
    }
}

/// Gradient accumulators mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub refine0_w: Tensor,
    pub refine0_b: Tensor,
    pub down1_w: Tensor,
    pub down1_b: Tensor,
    pub refine1_w: Tensor,
    pub refine1_b: Tensor,
    pub down2_w: Tensor,
    pub down2_b: Tensor,
    pub refine2_w: Tensor,
    pub refine2_b: Tensor,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> EncoderGrads {
        EncoderGrads {
            stem_w: params.stem_w.zeros_like(),
            stem_b: params.stem_b.zeros_like(),
            refine0_w: params.refine0_w.zeros_like(),
            refine0_b: params.refine0_b.zeros_like(),
            down1_w: params.down1_w.zeros_like(),
            down1_b: params.down1_b.zeros_like(),
            refine1_w: params.refine1_w.zeros_like(),
            refine1_b: params.refine1_b.zeros_like(),
            down2_w: params.down2_w.zeros_like(),
            down2_b: params.down2_b.zeros_like(),
            refine2_w: params.refine2_w.zeros_like(),
            refine2_b: params.refine2_b.zeros_like(),
        }
    }

    /// Elementwise accumulate, used to merge per-view gradients.
    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (dst, src) in [
            (&mut self.stem_w, &other.stem_w),
            (&mut self.stem_b, &other.stem_b),
            (&mut self.refine0_w, &other.refine0_w),
            (&mut self.refine0_b, &other.refine0_b),
            (&mut self.down1_w, &other.down1_w),
            (&mut self.down1_b, &other.down1_b),
            (&mut self.refine1_w, &other.refine1_w),
            (&mut self.refine1_b, &other.refine1_b),
            (&mut self.down2_w, &other.down2_w),
            (&mut self.down2_b, &other.down2_b),
            (&mut self.refine2_w, &other.refine2_w),
            (&mut self.refine2_b, &other.refine2_b),
        ] {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += s;
            }
        }
    }
}

/// One refinement stage: `out = gelu(x + conv3(x))`, cached pre-activation.
struct Stage {
    /// `x + conv3(x)` before the activation.
    pre: Vec<f64>,
    /// Stage output.
    out: Vec<f64>,
}

fn refine_forward(
    x: &[f64],
    dims: (usize, usize, usize),
    w: &Tensor,
    b: &Tensor,
) -> Stage {
    let (c, h, wd) = dims;
    let mut pre = vec![0.0; c * h * wd];
    conv2d_forward(x, dims, &w.data, &b.data, (c, 3), 1, 1, &mut pre);
    for (p, &xv) in pre.iter_mut().zip(x) {
        *p += xv;
    }
    let out = pre.iter().map(|&p| gelu(p)).collect();
    Stage { pre, out }
}

/// Everything the backward pass needs, per view.
pub struct EncoderCache {
    input: Vec<f64>,
    dims0: (usize, usize, usize),
    dims1: (usize, usize, usize),
    dims2: (usize, usize, usize),
    stem_pre: Vec<f64>,
    stem_out: Vec<f64>,
    stage0: Stage,
    down1_pre: Vec<f64>,
    down1_out: Vec<f64>,
    stage1: Stage,
    down2_pre: Vec<f64>,
    down2_out: Vec<f64>,
    stage2: Stage,
}

/// Runs the encoder on a single-channel detector image. The image extents
/// must be divisible by four so the stride-2 stages halve them exactly.
pub fn encoder_forward(
    params: &EncoderParams,
    image: &ImageGrid,
) -> Result<(Vec<ImageGrid>, EncoderCache)> {
    params.validate()?;
    let [w, h] = image.shape();
    if image.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "encoder input must be single-channel, got {}",
            image.channels()
        )));
    }
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "detector raster {w}x{h} must be divisible by 4 for the pyramid"
        )));
    }
    let [w0, w1, w2] = params.widths;
    let [pu, pv] = image.spacing();
    let input = image.data().to_vec();

    let dims_in = (1, h, w);
    let mut stem_pre = vec![0.0; w0 * h * w];
    conv2d_forward(
        &input,
        dims_in,
        &params.stem_w.data,
        &params.stem_b.data,
        (w0, 3),
        1,
        1,
        &mut stem_pre,
    );
    let stem_out: Vec<f64> = stem_pre.iter().map(|&p| gelu(p)).collect();
    let dims0 = (w0, h, w);
    let stage0 = refine_forward(&stem_out, dims0, &params.refine0_w, &params.refine0_b);

    let (h1, wd1) = (conv_out_len(h, 3, 2, 1), conv_out_len(w, 3, 2, 1));
    let mut down1_pre = vec![0.0; w1 * h1 * wd1];
    conv2d_forward(
        &stage0.out,
        dims0,
        &params.down1_w.data,
        &params.down1_b.data,
        (w1, 3),
        2,
        1,
        &mut down1_pre,
    );
    let down1_out: Vec<f64> = down1_pre.iter().map(|&p| gelu(p)).collect();
    let dims1 = (w1, h1, wd1);
    let stage1 = refine_forward(&down1_out, dims1, &params.refine1_w, &params.refine1_b);

    let (h2, wd2) = (conv_out_len(h1, 3, 2, 1), conv_out_len(wd1, 3, 2, 1));
    let mut down2_pre = vec![0.0; w2 * h2 * wd2];
    conv2d_forward(
        &stage1.out,
        dims1,
        &params.down2_w.data,
        &params.down2_b.data,
        (w2, 3),
        2,
        1,
        &mut down2_pre,
    );
    let down2_out: Vec<f64> = down2_pre.iter().map(|&p| gelu(p)).collect();
    let dims2 = (w2, h2, wd2);
    let stage2 = refine_forward(&down2_out, dims2, &params.refine2_w, &params.refine2_b);

    let pyramid = vec![
        ImageGrid::from_vec([w, h], [pu, pv], w0, stage0.out.clone())?,
        ImageGrid::from_vec([wd1, h1], [pu * 2.0, pv * 2.0], w1, stage1.out.clone())?,
        ImageGrid::from_vec([wd2, h2], [pu * 4.0, pv * 4.0], w2, stage2.out.clone())?,
    ];
    let cache = EncoderCache {
        input,
        dims0,
        dims1,
        dims2,
        stem_pre,
        stem_out,
        stage0,
        down1_pre,
        down1_out,
        stage1,
        down2_pre,
        down2_out,
        stage2,
    };
    Ok((pyramid, cache))
}

fn refine_backward(
    input: &[f64],
    dims: (usize, usize, usize),
    w: &Tensor,
    stage: &Stage,
    g_out: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Vec<f64> {
    let (c, _, _) = dims;
    let g_pre: Vec<f64> = g_out
        .iter()
        .zip(&stage.pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    let mut g_in = g_pre.clone(); // identity branch of the residual
    conv2d_backward(
        input,
        dims,
        &w.data,
        (c, 3),
        1,
        1,
        &g_pre,
        &mut g_in,
        &mut gw.data,
        &mut gb.data,
    );
    g_in
}

/// Backward pass of [`encoder_forward`]: pyramid cotangents (one per level)
/// to parameter cotangents.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    g_pyramid: &[ImageGrid],
    grads: &mut EncoderGrads,
) -> Result<()> {
    if g_pyramid.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "encoder pyramid has 3 levels, cotangent has {}",
            g_pyramid.len()
        )));
    }
    let [w0, w1, w2] = params.widths;
    let (_, h, w) = cache.dims0;
    let (_, h1, wd1) = cache.dims1;
    let (_, h2, wd2) = cache.dims2;

    // Quarter resolution stage.
    let g_f2 = g_pyramid[2].data();
    let g_down2_out = refine_backward(
        &cache.down2_out,
        cache.dims2,
        &params.refine2_w,
        &cache.stage2,
        g_f2,
        &mut grads.refine2_w,
        &mut grads.refine2_b,
    );
    let g_down2_pre: Vec<f64> = g_down2_out
        .iter()
        .zip(&cache.down2_pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    let mut g_f1 = g_pyramid[1].data().to_vec();
    conv2d_backward(
        &cache.stage1.out,
        cache.dims1,
        &params.down2_w.data,
        (w2, 3),
        2,
        1,
        &g_down2_pre,
        &mut g_f1,
        &mut grads.down2_w.data,
        &mut grads.down2_b.data,
    );

    // Half resolution stage.
    let g_down1_out = refine_backward(
        &cache.down1_out,
        cache.dims1,
        &params.refine1_w,
        &cache.stage1,
        &g_f1,
        &mut grads.refine1_w,
        &mut grads.refine1_b,
    );
    let g_down1_pre: Vec<f64> = g_down1_out
        .iter()
        .zip(&cache.down1_pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    let mut g_f0 = g_pyramid[0].data().to_vec();
    conv2d_backward(
        &cache.stage0.out,
        cache.dims0,
        &params.down1_w.data,
        (w1, 3),
        2,
        1,
        &g_down1_pre,
        &mut g_f0,
        &mut grads.down1_w.data,
        &mut grads.down1_b.data,
    );

    // Full resolution stage and stem.
    let g_stem_out = refine_backward(
        &cache.stem_out,
        cache.dims0,
        &params.refine0_w,
        &cache.stage0,
        &g_f0,
        &mut grads.refine0_w,
        &mut grads.refine0_b,
    );
    let g_stem_pre: Vec<f64> = g_stem_out
        .iter()
        .zip(&cache.stem_pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    let mut g_input = vec![0.0; cache.input.len()];
    conv2d_backward(
        &cache.input,
        (1, h, w),
        &params.stem_w.data,
        (w0, 3),
        1,
        1,
        &g_stem_pre,
        &mut g_input,
        &mut grads.stem_w.data,
        &mut grads.stem_b.data,
    );
    debug_assert_eq!(g_f1.len(), w1 * h1 * wd1);
    debug_assert_eq!(g_f0.len(), w0 * h * w);
    let _ = (h2, wd2);
    Ok(())
}
