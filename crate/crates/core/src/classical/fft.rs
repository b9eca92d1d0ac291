//! Minimal iterative radix-2 FFT for the ramp filtering step.
//!
//! Row lengths in this crate are small (padded detector widths), so a
//! twiddle-table Cooley-Tukey transform is plenty; pulling in a full FFT
//! crate for this would be the heavier dependency.

use std::f64::consts::PI;

/// In-place forward DFT. Length must be a power of two.
pub(crate) fn fft_inplace(re: &mut [f64], im: &mut [f64]) {
    transform(re, im, false);
}

/// In-place inverse DFT including the `1/n` scale.
pub(crate) fn ifft_inplace(re: &mut [f64], im: &mut [f64]) {
    transform(re, im, true);
    let inv = 1.0 / re.len() as f64;
    for x in re.iter_mut() {
        *x *= inv;
    }
    for x in im.iter_mut() {
        *x *= inv;
    }
}

fn transform(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert_eq!(n, im.len(), "re/im length mismatch");
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n < 2 {
        return;
    }

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    // Twiddle table for the full length, reused at every stage by striding.
    let sign = if inverse { 1.0 } else { -1.0 };
    let half = n / 2;
    let mut tw_re = Vec::with_capacity(half);
    let mut tw_im = Vec::with_capacity(half);
    for k in 0..half {
        let (s, c) = (sign * 2.0 * PI * k as f64 / n as f64).sin_cos();
        tw_re.push(c);
        tw_im.push(s);
    }

    let mut len = 2;
    while len <= n {
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (wr, wi) = (tw_re[k * stride], tw_im[k * stride]);
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}
