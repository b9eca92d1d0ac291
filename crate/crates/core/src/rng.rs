//! Counter-based random streams for per-pixel photon statistics.
//!
//! Every pixel owns an independent stream keyed by (seed, pixel index), so
//! sampled rasters are reproducible regardless of traversal or thread order.
//! The generator is splitmix64, which passes through the full 64-bit state
//! space with a fixed odd increment.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream of uniforms private to one (seed, counter) pair.
#[derive(Debug, Clone)]
pub struct PixelRng {
    state: u64,
}

impl PixelRng {
    pub fn new(seed: u64, counter: u64) -> Self {
        // Two mixing rounds decorrelate neighbouring counters under any seed.
        let mut s = seed ^ counter.wrapping_mul(GOLDEN_GAMMA);
        splitmix64(&mut s);
        splitmix64(&mut s);
        PixelRng { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in (0, 1): 53 mantissa bits, never exactly zero.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller (consumes two uniforms).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Mean above which the sampler switches to a rounded normal approximation.
pub const POISSON_NORMAL_CUTOFF: f64 = 1e4;

/// Largest sub-mean handled by one CDF inversion walk; larger means are
/// sampled as sums of independent draws (exact by Poisson additivity),
/// keeping exp(-mean) well inside the normal f64 range.
const INVERSION_CHUNK: f64 = 500.0;

/// Poisson sample with the given mean.
///
/// Inversion of the CDF for small means, sums of inversion draws up to
/// [`POISSON_NORMAL_CUTOFF`], a rounded, clamped normal approximation above.
pub fn poisson(rng: &mut PixelRng, mean: f64) -> f64 {
    assert!(mean.is_finite() && mean >= 0.0, "poisson mean must be >= 0");
    if mean == 0.0 {
        return 0.0;
    }
    if mean >= POISSON_NORMAL_CUTOFF {
        return (mean + mean.sqrt() * rng.next_normal()).round().max(0.0);
    }
    let mut remaining = mean;
    let mut total = 0.0;
    while remaining > INVERSION_CHUNK {
        total += poisson_inversion(rng, INVERSION_CHUNK);
        remaining -= INVERSION_CHUNK;
    }
    total + poisson_inversion(rng, remaining)
}

fn poisson_inversion(rng: &mut PixelRng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let u = rng.next_f64();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0.0;
    // u < 1 strictly, but cap the walk against cdf round-off in the far tail.
    let cap = mean + 12.0 * mean.sqrt() + 30.0;
    while u > cdf && k < cap {
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}
