//! Circular-orbit cone-beam scanner geometry.
//!
//! A scanner is described by the source-to-isocenter distance `source_to_object`
//! and the isocenter-to-detector distance `object_to_detector`. The source
//! orbits in the z = 0 plane; at angle theta the source sits at
//! `L_so * (cos theta, sin theta, 0)` and the detector center at
//! `-L_od * (cos theta, sin theta, 0)`, so source, isocenter, and detector
//! center stay collinear. The detector's column step `u` lies in the orbit
//! plane, its row step `v` is the axis direction; both carry the pixel pitch
//! in their norms.
//!
//! Pixel `(m, n)` of a `w x h` raster has its center at
//! `x00 + m*u + n*v`, where `x00` places the raster symmetrically around the
//! detector center. Integer indices address pixel centers; continuous pixel
//! coordinates are only produced by the plane-to-pixel transform.

use crate::error::Error;
use crate::math::{add, axpy, cross, dot, norm, scale, sub, Vec3};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Relative tolerance below which a ray counts as parallel to the detector.
pub const PARALLEL_RAY_TOL: f64 = 1e-12;

/// Relative tolerance for plane membership in [`detector_point_to_pixel`].
pub const PLANE_MEMBERSHIP_TOL: f64 = 1e-6;

/// Full description of a circular cone-beam acquisition.
///
/// Angles are degrees; distances and pitches are millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Number of views N.
    pub views: usize,
    /// Angular increment between consecutive views.
    pub step_deg: f64,
    /// Angle of the first view.
    pub start_deg: f64,
    /// Source-to-isocenter distance L_so.
    pub source_to_object: f64,
    /// Isocenter-to-detector distance L_od.
    pub object_to_detector: f64,
    /// Detector raster size [w, h] in pixels.
    pub det_shape: [usize; 2],
    /// Detector pixel pitch [p_u, p_v].
    pub det_spacing: [f64; 2],
}

impl ScanConfig {
    /// Uniform full-scan step for `views` views (360/N degrees).
    pub fn full_scan_step(views: usize) -> f64 {
        360.0 / views as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::InvalidConfig("views must be >= 1".into()));
        }
        if !(self.source_to_object > 0.0) || !(self.object_to_detector > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "distances must be positive: source_to_object = {}, object_to_detector = {}",
                self.source_to_object, self.object_to_detector
            )));
        }
        if self.det_shape[0] == 0 || self.det_shape[1] == 0 {
            return Err(Error::InvalidConfig(format!(
                "detector shape must be positive, got {:?}",
                self.det_shape
            )));
        }
        if !(self.det_spacing[0] > 0.0) || !(self.det_spacing[1] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "detector spacing must be positive, got {:?}",
                self.det_spacing
            )));
        }
        if !self.step_deg.is_finite() || !self.start_deg.is_finite() {
            return Err(Error::InvalidConfig("angles must be finite".into()));
        }
        Ok(())
    }
}

/// Rigid pose of one view: source position, detector center, and the
/// detector's in-plane pixel steps (pitch included in their norms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub source: Vec3,
    pub det_center: Vec3,
    /// Column step: moving one pixel along m adds `u`.
    pub u: Vec3,
    /// Row step: moving one pixel along n adds `v`.
    pub v: Vec3,
    /// Raster size [w, h] addressed by this pose.
    pub det_shape: [usize; 2],
}

impl ViewPose {
    /// Detector plane normal `u x v` (not normalized).
    pub fn normal(&self) -> Vec3 {
        cross(self.u, self.v)
    }

    /// Position of the center of pixel (0, 0).
    ///
    /// The raster is placed symmetrically around the detector center; the
    /// offset coefficient is `floor(w/2) + floor((w+1)/2) - (w+1)/2`, which
    /// evaluates to `(w-1)/2` for both parities.
    pub fn pixel_origin(&self) -> Vec3 {
        let [w, h] = self.det_shape;
        let cu = (w / 2) as f64 + ((w + 1) / 2) as f64 - (w as f64 + 1.0) / 2.0;
        let cv = (h / 2) as f64 + ((h + 1) / 2) as f64 - (h as f64 + 1.0) / 2.0;
        sub(self.det_center, add(scale(self.u, cu), scale(self.v, cv)))
    }
}

/// Half-open ray `r(t) = origin + t * dir`, `t >= 0`. The direction is kept
/// unnormalized so that `t` measures multiples of `dir`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Rejects zero-norm directions.
    pub fn new(origin: Vec3, dir: Vec3) -> Result<Self> {
        if dot(dir, dir) == 0.0 {
            return Err(Error::ZeroDirection);
        }
        Ok(Ray { origin, dir })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        axpy(self.origin, t, self.dir)
    }
}

/// Axis-aligned box given by its two extreme corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

/// Pose of view `i` (1-based, matching the acquisition numbering): the view
/// angle is `start_deg + step_deg * (i - 1)`.
pub fn view_pose(cfg: &ScanConfig, i: usize) -> Result<ViewPose> {
    cfg.validate()?;
    if i == 0 || i > cfg.views {
        return Err(Error::ViewIndexOutOfRange {
            index: i,
            views: cfg.views,
        });
    }
    let theta = (cfg.start_deg + cfg.step_deg * (i - 1) as f64).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let [pu, pv] = cfg.det_spacing;
    Ok(ViewPose {
        source: [
            cfg.source_to_object * cos_t,
            cfg.source_to_object * sin_t,
            0.0,
        ],
        det_center: [
            -cfg.object_to_detector * cos_t,
            -cfg.object_to_detector * sin_t,
            0.0,
        ],
        u: [-pu * sin_t, pu * cos_t, 0.0],
        v: [0.0, 0.0, pv],
        det_shape: cfg.det_shape,
    })
}

/// Center of pixel `(m, n)`. Valid raster indices are `0..w-1` x `0..h-1`;
/// the mapping extends the affine lattice beyond the raster without clamping.
pub fn detector_pixel_center(pose: &ViewPose, m: u32, n: u32) -> Vec3 {
    let x00 = pose.pixel_origin();
    add(
        x00,
        add(scale(pose.u, m as f64), scale(pose.v, n as f64)),
    )
}

/// Ray from the source through the center of pixel `(m, n)`; `t = 1` lands on
/// the pixel center.
pub fn ray_through_pixel(pose: &ViewPose, m: u32, n: u32) -> Ray {
    let p = detector_pixel_center(pose, m, n);
    Ray {
        origin: pose.source,
        dir: sub(p, pose.source),
    }
}

/// Slab intersection of a ray with an axis-aligned box.
///
/// Returns the parameter interval `(t_near, t_far)` of the overlap with
/// `t_near` clamped to 0 (the ray is half-open); `None` when the ray misses
/// the box or the box lies entirely behind the origin. Grazing hits with
/// `t_near == t_far` are reported.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        let d = ray.dir[k];
        let o = ray.origin[k];
        if d == 0.0 {
            if o < aabb.min[k] || o > aabb.max[k] {
                return None;
            }
            continue;
        }
        let mut t0 = (aabb.min[k] - o) / d;
        let mut t1 = (aabb.max[k] - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    let t_near = t_near.max(0.0);
    if t_far < t_near {
        return None;
    }
    Some((t_near, t_far))
}

/// Central projection of a world point onto the detector plane of a view.
///
/// Casts the ray `source -> x` and intersects it with the detector plane;
/// returns the intersection point and the ray parameter `t` (which equals the
/// magnification `L/(L - s)` for points between source and detector).
/// Rays within [`PARALLEL_RAY_TOL`] of the plane are rejected.
pub fn project_point_to_detector(pose: &ViewPose, x: Vec3) -> Result<(Vec3, f64)> {
    let d = sub(x, pose.source);
    let dn = norm(d);
    if dn == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let n = pose.normal();
    let nd = dot(n, d);
    if nd.abs() / (norm(n) * dn) < PARALLEL_RAY_TOL {
        return Err(Error::RayParallelToDetector {
            tol: PARALLEL_RAY_TOL,
        });
    }
    let t = -dot(n, sub(pose.source, pose.det_center)) / nd;
    Ok((axpy(pose.source, t, d), t))
}

/// Continuous pixel coordinates of a point on the detector plane.
///
/// Decomposes `p - x00` along `u` and `v`; integer results coincide with
/// pixel centers. Points farther than [`PLANE_MEMBERSHIP_TOL`] (relative)
/// off the plane are rejected.
pub fn detector_point_to_pixel(pose: &ViewPose, p: Vec3) -> Result<[f64; 2]> {
    let n = pose.normal();
    let rel = sub(p, pose.det_center);
    let distance = dot(n, rel).abs() / norm(n);
    let tol = PLANE_MEMBERSHIP_TOL * norm(rel).max(1.0);
    if distance > tol {
        return Err(Error::PointOffDetectorPlane { distance, tol });
    }
    let rel0 = sub(p, pose.pixel_origin());
    Ok([
        dot(rel0, pose.u) / dot(pose.u, pose.u),
        dot(rel0, pose.v) / dot(pose.v, pose.v),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Dental bench geometry used across the test suite.
    fn dental() -> ScanConfig {
        ScanConfig {
            views: 20,
            step_deg: 18.0,
            start_deg: 0.0,
            source_to_object: 500.0,
            object_to_detector: 200.0,
            det_shape: [256, 256],
            det_spacing: [0.4386, 0.4386],
        }
    }

    #[test]
    fn first_view_sits_on_the_x_axis() {
        let p = view_pose(&dental(), 1).unwrap();
        assert_eq!(p.source, [500.0, 0.0, 0.0]);
        assert_eq!(p.det_center, [-200.0, 0.0, 0.0]);
        assert_relative_eq!(p.u[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.u[1], 0.4386);
        assert_eq!(p.u[2], 0.0);
        assert_eq!(p.v, [0.0, 0.0, 0.4386]);
    }

    #[test]
    fn second_view_matches_frozen_trigonometry() {
        // Literals computed independently at 30-digit precision.
        let p = view_pose(&dental(), 2).unwrap();
        assert_relative_eq!(p.source[0], 475.5282581475768, epsilon = 1e-9);
        assert_relative_eq!(p.source[1], 154.50849718747372, epsilon = 1e-9);
        assert_eq!(p.source[2], 0.0);
        assert_relative_eq!(p.det_center[0], -190.21130325903071, epsilon = 1e-9);
        assert_relative_eq!(p.det_center[1], -61.80339887498948, epsilon = 1e-9);
        assert_relative_eq!(p.u[0], -0.13553485373285194, epsilon = 1e-12);
        assert_relative_eq!(p.u[1], 0.41713338804705436, epsilon = 1e-12);
    }

    #[test]
    fn start_angle_shifts_every_view() {
        let mut cfg = dental();
        cfg.start_deg = 90.0;
        let p = view_pose(&cfg, 1).unwrap();
        assert_relative_eq!(p.source[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(p.source[1], 500.0);
    }

    #[test]
    fn view_index_is_one_based_and_range_checked() {
        let cfg = dental();
        assert!(matches!(
            view_pose(&cfg, 0),
            Err(Error::ViewIndexOutOfRange { .. })
        ));
        assert!(view_pose(&cfg, 20).is_ok());
        assert!(matches!(
            view_pose(&cfg, 21),
            Err(Error::ViewIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn pixel_origin_coefficient_handles_both_parities() {
        // Even raster: offset (w-1)/2 = 127.5 pitches from the center.
        let p = view_pose(&dental(), 1).unwrap();
        let x00 = p.pixel_origin();
        assert_relative_eq!(x00[1], -127.5 * 0.4386, epsilon = 1e-12);
        assert_relative_eq!(x00[2], -127.5 * 0.4386, epsilon = 1e-12);

        // Odd raster: offset (w-1)/2 = 127 exactly, center pixel on center.
        let mut cfg = dental();
        cfg.det_shape = [255, 255];
        let p = view_pose(&cfg, 1).unwrap();
        let mid = detector_pixel_center(&p, 127, 127);
        assert_relative_eq!(mid[0], p.det_center[0], epsilon = 1e-12);
        assert_relative_eq!(mid[1], p.det_center[1], epsilon = 1e-10);
        assert_relative_eq!(mid[2], p.det_center[2], epsilon = 1e-10);
    }

    #[test]
    fn even_raster_centers_straddle_the_detector_center() {
        let p = view_pose(&dental(), 1).unwrap();
        let a = detector_pixel_center(&p, 127, 127);
        let b = detector_pixel_center(&p, 128, 128);
        let mid = scale(add(a, b), 0.5);
        for k in 0..3 {
            assert_relative_eq!(mid[k], p.det_center[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn pixel_ray_reaches_the_pixel_at_t_one() {
        let p = view_pose(&dental(), 3).unwrap();
        let ray = ray_through_pixel(&p, 40, 200);
        let hit = ray.at(1.0);
        let center = detector_pixel_center(&p, 40, 200);
        for k in 0..3 {
            assert_relative_eq!(hit[k], center[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn ray_rejects_zero_direction() {
        assert!(matches!(
            Ray::new([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]),
            Err(Error::ZeroDirection)
        ));
    }

    fn unit_box() -> Aabb {
        Aabb {
            min: [0.0, 0.0, 0.0],
            max: [1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn slab_hit_from_outside() {
        let ray = Ray::new([-1.0, 0.5, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ray_aabb_intersect(&ray, &unit_box()), Some((1.0, 2.0)));
    }

    #[test]
    fn slab_clamps_interior_origin_to_zero() {
        let ray = Ray::new([0.5, 0.5, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ray_aabb_intersect(&ray, &unit_box()), Some((0.0, 0.5)));
    }

    #[test]
    fn slab_miss_with_zero_component() {
        let ray = Ray::new([2.0, 0.5, -1.0], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ray_aabb_intersect(&ray, &unit_box()), None);
    }

    #[test]
    fn slab_rejects_box_behind_origin() {
        let ray = Ray::new([2.0, 0.5, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ray_aabb_intersect(&ray, &unit_box()), None);
    }

    #[test]
    fn central_projection_magnifies_by_distance_ratio() {
        // A point 10 mm off-axis at the isocenter maps to 14 mm on the
        // detector: magnification (L_so + L_od) / L_so = 1.4.
        let p = view_pose(&dental(), 1).unwrap();
        let (hit, t) = project_point_to_detector(&p, [0.0, 10.0, 0.0]).unwrap();
        assert_relative_eq!(t, 1.4, epsilon = 1e-12);
        assert_relative_eq!(hit[0], -200.0, epsilon = 1e-9);
        assert_relative_eq!(hit[1], 14.0, epsilon = 1e-9);
        assert_relative_eq!(hit[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn isocenter_projects_to_the_raster_center() {
        let p = view_pose(&dental(), 5).unwrap();
        let (hit, _) = project_point_to_detector(&p, [0.0, 0.0, 0.0]).unwrap();
        let q = detector_point_to_pixel(&p, hit).unwrap();
        assert_relative_eq!(q[0], 127.5, epsilon = 1e-9);
        assert_relative_eq!(q[1], 127.5, epsilon = 1e-9);
    }

    #[test]
    fn in_plane_ray_is_rejected_as_parallel() {
        let p = view_pose(&dental(), 1).unwrap();
        // Direction along u is orthogonal to the detector normal.
        let x = add(p.source, p.u);
        assert!(matches!(
            project_point_to_detector(&p, x),
            Err(Error::RayParallelToDetector { .. })
        ));
    }

    #[test]
    fn projecting_the_source_itself_fails() {
        let p = view_pose(&dental(), 1).unwrap();
        assert!(matches!(
            project_point_to_detector(&p, p.source),
            Err(Error::ZeroDirection)
        ));
    }

    #[test]
    fn off_plane_point_is_rejected_by_the_pixel_transform() {
        let p = view_pose(&dental(), 1).unwrap();
        let off = add(p.det_center, scale(p.normal(), 0.1));
        assert!(matches!(
            detector_point_to_pixel(&p, off),
            Err(Error::PointOffDetectorPlane { .. })
        ));
    }

    #[test]
    fn pixel_roundtrip_is_exact_to_nine_digits() {
        let p = view_pose(&dental(), 7).unwrap();
        for &(m, n) in &[(0u32, 0u32), (255, 255), (13, 201), (128, 127)] {
            let world = detector_pixel_center(&p, m, n);
            let q = detector_point_to_pixel(&p, world).unwrap();
            assert_relative_eq!(q[0], m as f64, epsilon = 1e-9);
            assert_relative_eq!(q[1], n as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn config_validation_rejects_nonpositive_values() {
        let mut cfg = dental();
        cfg.det_spacing = [0.0, 0.4386];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = dental();
        cfg.source_to_object = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = dental();
        cfg.views = 0;
        assert!(cfg.validate().is_err());
    }
}
