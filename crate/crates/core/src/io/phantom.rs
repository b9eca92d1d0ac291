//! Procedural attenuation phantoms.
//!
//! All phantoms are deterministic: the ellipsoid phantom draws its geometry
//! from a seeded generator, so equal seeds give equal volumes on every
//! platform.

use crate::volume::Volume;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Phantom families.
#[derive(Debug, Clone, PartialEq)]
pub enum PhantomKind {
    /// Centred ball of constant attenuation.
    Sphere { radius: f64, mu: f64 },
    /// `count` random axis-aligned ellipsoids with additive attenuations
    /// drawn from [0.005, 0.03] per millimetre. The first ellipsoid is a
    /// large soft body near the grid centre and the rest are denser
    /// inclusions packed inside it, so any nonempty phantom has an extended
    /// support region rather than isolated flecks in vacuum.
    Ellipsoids { seed: u64, count: usize },
    /// Classic ten-ellipsoid head phantom, intensities scaled so the outer
    /// shell has attenuation `mu_scale`.
    SheppLogan3d { mu_scale: f64 },
}

impl PhantomKind {
    /// Bench default: 10 mm ball at 0.02 per millimetre.
    pub fn default_sphere() -> Self {
        PhantomKind::Sphere {
            radius: 10.0,
            mu: 0.02,
        }
    }
}

/// Rasterizes a phantom onto the given grid by voxel-center membership.
pub fn make_phantom(kind: &PhantomKind, shape: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let mut vol = Volume::zeros(shape, spacing, 1)?;
    match kind {
        PhantomKind::Sphere { radius, mu } => {
            fill_sphere(&mut vol, *radius, *mu);
        }
        PhantomKind::Ellipsoids { seed, count } => {
            fill_ellipsoids(&mut vol, *seed, *count);
        }
        PhantomKind::SheppLogan3d { mu_scale } => {
            fill_shepp_logan(&mut vol, *mu_scale);
        }
    }
    Ok(vol)
}

fn fill_sphere(vol: &mut Volume, radius: f64, mu: f64) {
    let [w, h, d] = vol.shape();
    let r2 = radius * radius;
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let c = vol.voxel_center(i, j, k);
                if c[0] * c[0] + c[1] * c[1] + c[2] * c[2] <= r2 {
                    vol.set(0, i, j, k, mu);
                }
            }
        }
    }
}

struct AxisEllipsoid {
    center: [f64; 3],
    inv_semi2: [f64; 3],
    value: f64,
}

fn fill_ellipsoids(vol: &mut Volume, seed: u64, count: usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let half = {
        let b = vol.aabb();
        [b.max[0], b.max[1], b.max[2]]
    };
    let ellipsoids: Vec<AxisEllipsoid> = (0..count)
        .map(|idx| {
            // Body first, then inclusions kept well inside its reach.
            let (center, semi, value) = if idx == 0 {
                (
                    [
                        rng.gen_range(-0.06..0.06) * half[0],
                        rng.gen_range(-0.06..0.06) * half[1],
                        rng.gen_range(-0.06..0.06) * half[2],
                    ],
                    [
                        rng.gen_range(0.70..0.92) * half[0],
                        rng.gen_range(0.70..0.92) * half[1],
                        rng.gen_range(0.70..0.92) * half[2],
                    ],
                    rng.gen_range(0.005..0.009),
                )
            } else {
                (
                    [
                        rng.gen_range(-0.40..0.40) * half[0],
                        rng.gen_range(-0.40..0.40) * half[1],
                        rng.gen_range(-0.40..0.40) * half[2],
                    ],
                    [
                        rng.gen_range(0.08..0.25) * half[0],
                        rng.gen_range(0.08..0.25) * half[1],
                        rng.gen_range(0.08..0.25) * half[2],
                    ],
                    rng.gen_range(0.008..0.03),
                )
            };
            AxisEllipsoid {
                center,
                inv_semi2: [
                    1.0 / (semi[0] * semi[0]),
                    1.0 / (semi[1] * semi[1]),
                    1.0 / (semi[2] * semi[2]),
                ],
                value,
            }
        })
        .collect();
    let [w, h, d] = vol.shape();
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let c = vol.voxel_center(i, j, k);
                let mut acc = 0.0;
                for e in &ellipsoids {
                    let dx = c[0] - e.center[0];
                    let dy = c[1] - e.center[1];
                    let dz = c[2] - e.center[2];
                    if dx * dx * e.inv_semi2[0] + dy * dy * e.inv_semi2[1] + dz * dz * e.inv_semi2[2]
                        <= 1.0
                    {
                        acc += e.value;
                    }
                }
                if acc != 0.0 {
                    vol.set(0, i, j, k, acc);
                }
            }
        }
    }
}

/// (intensity, semi-axes a b c, center x0 y0 z0, rotation about z in degrees)
/// in the unit ball; intensities sum to the familiar head contrast pattern.
const SHEPP_LOGAN_3D: [(f64, [f64; 3], [f64; 3], f64); 10] = [
    (1.0, [0.6900, 0.920, 0.810], [0.0, 0.0, 0.0], 0.0),
    (-0.8, [0.6624, 0.874, 0.780], [0.0, -0.0184, 0.0], 0.0),
    (-0.2, [0.1100, 0.310, 0.220], [0.22, 0.0, 0.0], -18.0),
    (-0.2, [0.1600, 0.410, 0.280], [-0.22, 0.0, 0.0], 18.0),
    (0.1, [0.2100, 0.250, 0.410], [0.0, 0.35, -0.15], 0.0),
    (0.1, [0.0460, 0.046, 0.050], [0.0, 0.1, 0.25], 0.0),
    (0.1, [0.0460, 0.046, 0.050], [0.0, -0.1, 0.25], 0.0),
    (0.1, [0.0460, 0.023, 0.050], [-0.08, -0.605, 0.0], 0.0),
    (0.1, [0.0230, 0.023, 0.020], [0.0, -0.606, 0.0], 0.0),
    (0.1, [0.0230, 0.046, 0.020], [0.06, -0.605, 0.0], 0.0),
];

fn fill_shepp_logan(vol: &mut Volume, mu_scale: f64) {
    let [w, h, d] = vol.shape();
    let b = vol.aabb();
    let half = [b.max[0], b.max[1], b.max[2]];
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let c = vol.voxel_center(i, j, k);
                // Normalized coordinates in the unit ball.
                let x = c[0] / half[0];
                let y = c[1] / half[1];
                let z = c[2] / half[2];
                let mut acc = 0.0;
                for (a, semi, center, phi_deg) in &SHEPP_LOGAN_3D {
                    let phi = phi_deg.to_radians();
                    let (sin_p, cos_p) = phi.sin_cos();
                    let dx = x - center[0];
                    let dy = y - center[1];
                    let dz = z - center[2];
                    let rx = cos_p * dx + sin_p * dy;
                    let ry = -sin_p * dx + cos_p * dy;
                    if rx * rx / (semi[0] * semi[0])
                        + ry * ry / (semi[1] * semi[1])
                        + dz * dz / (semi[2] * semi[2])
                        <= 1.0
                    {
                        acc += a;
                    }
                }
                if acc != 0.0 {
                    vol.set(0, i, j, k, acc * mu_scale);
                }
            }
        }
    }
}
