//! Neural network primitives with explicit backward passes.
//!
//! Every operator is a plain function pair: `*_forward` producing outputs
//! from flat slices, `*_backward` mapping output cotangents to input and
//! parameter cotangents. Shapes travel alongside the data; convolution
//! layouts are `[C_out, C_in, k...]` for kernels and channel-major for maps.

/// Tanh-form GELU, the variant whose derivative has a closed form that the
/// gradient checks can pin down tightly.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softplus `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, used to bias output heads toward a positive level.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive argument");
    y.exp_m1().ln()
}

/// Rectifier with a quadratic knee of width `tau`: exactly 0 for `x <= 0`,
/// `x^2 / (2 tau)` on the knee, `x - tau/2` beyond it.
///
/// Unlike softplus this can emit exactly zero, so an output head using it
/// has a reachable rest state for empty regions, while staying C1-smooth
/// for finite-difference gradient verification.
#[inline]
pub fn hinge_smooth(x: f64, tau: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < tau {
        x * x / (2.0 * tau)
    } else {
        x - tau / 2.0
    }
}

/// Derivative of [`hinge_smooth`]: 0, `x / tau`, then 1.
#[inline]
pub fn hinge_smooth_grad(x: f64, tau: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < tau {
        x / tau
    } else {
        1.0
    }
}

/// Inverse of [`hinge_smooth`] on its positive branch, used to bias output
/// heads toward a target level.
#[inline]
pub fn hinge_smooth_inverse(y: f64, tau: f64) -> f64 {
    assert!(y > 0.0, "hinge inverse needs a positive argument");
    if y >= tau / 2.0 {
        y + tau / 2.0
    } else {
        (2.0 * tau * y).sqrt()
    }
}

/// Elementwise GELU.
pub fn gelu_forward(x: &[f64], y: &mut [f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = gelu(x);
    }
}

/// Cotangent through elementwise GELU, accumulated into `gx`.
pub fn gelu_backward(x: &[f64], gy: &[f64], gx: &mut [f64]) {
    for ((gx, &x), &gy) in gx.iter_mut().zip(x).zip(gy) {
        *gx += gy * gelu_grad(x);
    }
}

/// Stable softmax of a small vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = y.iter().sum();
    for v in y.iter_mut() {
        *v /= sum;
    }
    y
}

/// Cotangent through softmax given its output `y`.
pub fn softmax_backward(y: &[f64], gy: &[f64], gx: &mut [f64]) {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for ((gx, &y), &gy) in gx.iter_mut().zip(y).zip(gy) {
        *gx += y * (gy - dot);
    }
}

/// Dense layer `y = W x + b`, `W` row-major `[out, in]`.
pub fn linear_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let (out_dim, in_dim) = (b.len(), x.len());
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(y.len(), out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        y[o] = acc;
    }
}

/// Cotangents through the dense layer, accumulated into `gx`, `gw`, `gb`.
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (out_dim, in_dim) = (gy.len(), x.len());
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for o in 0..out_dim {
        let g = gy[o];
        gb[o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            gx[i] += g * row[i];
            grow[i] += g * x[i];
        }
    }
}

/// Output spatial size of a padded strided convolution.
#[inline]
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// 2D convolution. `x` is `[cin, h, w]`, `w` is `[cout, cin, k, k]`,
/// `y` is `[cout, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    (cin, h, wd): (usize, usize, usize),
    w: &[f64],
    b: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    y: &mut [f64],
) {
    let (oh, ow) = (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad));
    debug_assert_eq!(x.len(), cin * h * wd);
    debug_assert_eq!(w.len(), cout * cin * k * k);
    debug_assert_eq!(y.len(), cout * oh * ow);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..cin {
                    let xc = &x[ci * h * wd..(ci + 1) * h * wd];
                    let wc = &w[((co * cin + ci) * k) * k..((co * cin + ci) * k + k) * k];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xc[iy as usize * wd + ix as usize] * wc[ky * k + kx];
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// Cotangents through [`conv2d_forward`], accumulated into `gx`, `gw`, `gb`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    (cin, h, wd): (usize, usize, usize),
    w: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    gy: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (oh, ow) = (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad));
    debug_assert_eq!(gy.len(), cout * oh * ow);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                gb[co] += g;
                for ci in 0..cin {
                    let base = ci * h * wd;
                    let wbase = ((co * cin + ci) * k) * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = base + iy as usize * wd + ix as usize;
                            let wi = wbase + ky * k + kx;
                            gx[xi] += g * w[wi];
                            gw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// 3D convolution. `x` is `[cin, d, h, w]`, `w` is `[cout, cin, k, k, k]`,
/// `y` is `[cout, od, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    x: &[f64],
    (cin, d, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    b: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    y: &mut [f64],
) {
    let od = conv_out_len(d, k, stride, pad);
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    debug_assert_eq!(x.len(), cin * d * h * wd);
    debug_assert_eq!(w.len(), cout * cin * k * k * k);
    debug_assert_eq!(y.len(), cout * od * oh * ow);
    for co in 0..cout {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        let xc = &x[ci * d * h * wd..(ci + 1) * d * h * wd];
                        let wc = &w[(co * cin + ci) * k * k * k..(co * cin + ci + 1) * k * k * k];
                        for kz in 0..k {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xc[(iz as usize * h + iy as usize) * wd + ix as usize]
                                        * wc[(kz * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    y[((co * od + oz) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

/// Cotangents through [`conv3d_forward`], accumulated into `gx`, `gw`, `gb`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f64],
    (cin, d, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    gy: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let od = conv_out_len(d, k, stride, pad);
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    debug_assert_eq!(gy.len(), cout * od * oh * ow);
    for co in 0..cout {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy[((co * od + oz) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    gb[co] += g;
                    for ci in 0..cin {
                        let base = ci * d * h * wd;
                        let wbase = (co * cin + ci) * k * k * k;
                        for kz in 0..k {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi =
                                        base + (iz as usize * h + iy as usize) * wd + ix as usize;
                                    let wi = wbase + (kz * k + ky) * k + kx;
                                    gx[xi] += g * w[wi];
                                    gw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour x2 upsampling of `[c, d, h, w]` maps.
pub fn upsample2_forward(x: &[f64], (c, d, h, w): (usize, usize, usize, usize), y: &mut [f64]) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(y.len(), c * od * oh * ow);
    for ci in 0..c {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    y[((ci * od + z) * oh + yy) * ow + xx] =
                        x[((ci * d + z / 2) * h + yy / 2) * w + xx / 2];
                }
            }
        }
    }
}

/// Cotangent through [`upsample2_forward`]: sums each 2x2x2 block.
pub fn upsample2_backward(
    gy: &[f64],
    (c, d, h, w): (usize, usize, usize, usize),
    gx: &mut [f64],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(gy.len(), c * od * oh * ow);
    debug_assert_eq!(gx.len(), c * d * h * w);
    for ci in 0..c {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    gx[((ci * d + z / 2) * h + yy / 2) * w + xx / 2] +=
                        gy[((ci * od + z) * oh + yy) * ow + xx];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pseudo(seed: u64, n: usize) -> Vec<f64> {
        // Small deterministic values in [-1, 1).
        (0..n)
            .map(|i| {
                let h = (seed ^ i as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .rotate_left(17)
                    .wrapping_mul(0xBF58_476D_1CE4_E5B9);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gelu_matches_its_finite_difference() {
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert_relative_eq!(gelu(8.0), 8.0, epsilon = 1e-9);
        assert!(gelu(-8.0).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_stable_and_invertible() {
        assert_relative_eq!(softplus(0.0), (2.0f64).ln());
        assert_relative_eq!(softplus(60.0), 60.0, epsilon = 1e-12);
        assert!(softplus(-60.0) > 0.0 && softplus(-60.0) < 1e-20);
        for &y in &[0.01, 0.5, 3.0] {
            assert_relative_eq!(softplus(softplus_inverse(y)), y, epsilon = 1e-12);
        }
        for &x in &[-5.0, -0.1, 0.0, 2.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert_relative_eq!(softplus_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn hinge_is_zero_left_linear_right_and_c1() {
        let tau = 1.0;
        assert_eq!(hinge_smooth(-3.0, tau), 0.0);
        assert_eq!(hinge_smooth(0.0, tau), 0.0);
        assert_relative_eq!(hinge_smooth(0.5, tau), 0.125);
        assert_relative_eq!(hinge_smooth(4.0, tau), 3.5);
        // C1 at both joints: grads meet.
        assert_relative_eq!(hinge_smooth_grad(1e-12, tau), 0.0, epsilon = 1e-9);
        assert_relative_eq!(hinge_smooth_grad(tau - 1e-12, tau), 1.0, epsilon = 1e-9);
        for &x in &[-2.0, -0.3, 0.2, 0.8, 1.5, 6.0] {
            let h = 1e-6;
            let fd = (hinge_smooth(x + h, tau) - hinge_smooth(x - h, tau)) / (2.0 * h);
            assert_relative_eq!(hinge_smooth_grad(x, tau), fd, epsilon = 1e-5);
        }
        for &y in &[0.01, 0.3, 0.5, 2.0] {
            assert_relative_eq!(hinge_smooth(hinge_smooth_inverse(y, tau), tau), y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes_and_backpropagates() {
        let x = [0.3, -1.0, 2.0, 0.0];
        let y = softmax(&x);
        assert_relative_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let gy = [0.17, -0.4, 0.9, 0.05];
        let mut gx = vec![0.0; 4];
        softmax_backward(&y, &gy, &mut gx);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let f = |v: &[f64]| -> f64 {
                softmax(v).iter().zip(&gy).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (ins, outs) = (5, 3);
        let w = pseudo(1, ins * outs);
        let b = pseudo(2, outs);
        let x = pseudo(3, ins);
        let r = pseudo(4, outs);
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            let mut y = vec![0.0; outs];
            linear_forward(w, b, x, &mut y);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut gx = vec![0.0; ins];
        let mut gw = vec![0.0; ins * outs];
        let mut gb = vec![0.0; outs];
        linear_backward(&w, &x, &r, &mut gx, &mut gw, &mut gb);
        let h = 1e-6;
        for i in 0..ins {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-7);
        }
        for i in 0..ins * outs {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
            assert_relative_eq!(gw[i], fd, epsilon = 1e-7);
        }
        for i in 0..outs {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&w, &bp, &x) - loss(&w, &bm, &x)) / (2.0 * h);
            assert_relative_eq!(gb[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_the_input() {
        let (h, w) = (4, 5);
        let x = pseudo(9, h * w);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center tap of the 3x3
        let mut y = vec![0.0; h * w];
        conv2d_forward(&x, (1, h, w), &kernel, &[0.0], (1, 3), 1, 1, &mut y);
        for (a, b) in y.iter().zip(&x) {
            assert_relative_eq!(a, b);
        }
    }

    #[test]
    fn conv2d_stride_two_halves_even_extents() {
        assert_eq!(conv_out_len(48, 3, 2, 1), 24);
        assert_eq!(conv_out_len(24, 3, 2, 1), 12);
        assert_eq!(conv_out_len(12, 3, 1, 1), 12);
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let (cin, h, wd, cout, k, stride, pad) = (2, 5, 4, 3, 3, 2, 1);
        let (oh, ow) = (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad));
        let x = pseudo(11, cin * h * wd);
        let w = pseudo(12, cout * cin * k * k);
        let b = pseudo(13, cout);
        let r = pseudo(14, cout * oh * ow);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; cout * oh * ow];
            conv2d_forward(x, (cin, h, wd), w, b, (cout, k), stride, pad, &mut y);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        conv2d_backward(&x, (cin, h, wd), &w, (cout, k), stride, pad, &r, &mut gx, &mut gw, &mut gb);
        let hh = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[i] += hh;
            let mut xm = x.clone();
            xm[i] -= hh;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * hh);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-7);
        }
        for i in (0..w.len()).step_by(5) {
            let mut wp = w.clone();
            wp[i] += hh;
            let mut wm = w.clone();
            wm[i] -= hh;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * hh);
            assert_relative_eq!(gw[i], fd, epsilon = 1e-7);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += hh;
            let mut bm = b.clone();
            bm[i] -= hh;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * hh);
            assert_relative_eq!(gb[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn conv3d_backward_matches_finite_differences() {
        let (cin, d, h, wd, cout, k, stride, pad) = (2, 3, 4, 3, 2, 3, 1, 1);
        let (od, oh, ow) = (
            conv_out_len(d, k, stride, pad),
            conv_out_len(h, k, stride, pad),
            conv_out_len(wd, k, stride, pad),
        );
        let x = pseudo(21, cin * d * h * wd);
        let w = pseudo(22, cout * cin * k * k * k);
        let b = pseudo(23, cout);
        let r = pseudo(24, cout * od * oh * ow);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; cout * od * oh * ow];
            conv3d_forward(x, (cin, d, h, wd), w, b, (cout, k), stride, pad, &mut y);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        conv3d_backward(
            &x,
            (cin, d, h, wd),
            &w,
            (cout, k),
            stride,
            pad,
            &r,
            &mut gx,
            &mut gw,
            &mut gb,
        );
        let hh = 1e-6;
        for i in (0..x.len()).step_by(11) {
            let mut xp = x.clone();
            xp[i] += hh;
            let mut xm = x.clone();
            xm[i] -= hh;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * hh);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-7);
        }
        for i in (0..w.len()).step_by(13) {
            let mut wp = w.clone();
            wp[i] += hh;
            let mut wm = w.clone();
            wm[i] -= hh;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * hh);
            assert_relative_eq!(gw[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn upsample_backward_is_the_exact_adjoint() {
        let dims = (2, 2, 3, 2);
        let n = 2 * 2 * 3 * 2;
        let x = pseudo(31, n);
        let y_len = n * 8;
        let mut y = vec![0.0; y_len];
        upsample2_forward(&x, dims, &mut y);
        let gy = pseudo(32, y_len);
        let mut gx = vec![0.0; n];
        upsample2_backward(&gy, dims, &mut gx);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
