//! Geometry manifests.
//!
//! A manifest is a TOML document describing detector raster, volume grid,
//! optional projection normalization statistics, and the acquisition
//! geometry in exactly one of two forms:
//!
//! * `[circular]` - a circular orbit given by view count, start/step angles,
//!   and the two axis distances; poses are expanded through the same code
//!   path as [`crate::geometry::view_pose`].
//! * `[[view]]` - explicit per-view pose vectors (source, detector center,
//!   pixel steps u and v), which are trusted as given; nothing re-derives
//!   them from an orbit model.
//!
//! Supplying both forms, or neither, is a schema error. Validation failures
//! name the offending field.

use crate::error::Error;
use crate::geometry::{view_pose, ScanConfig, ViewPose};
use crate::math::{cross, norm, Vec3};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    /// Raster size [w, h] in pixels.
    pub shape: [usize; 2],
    /// Pixel pitch [p_u, p_v] in millimetres.
    pub spacing: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

/// Per-dataset projection statistics for encoder input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircularOrbit {
    pub views: usize,
    #[serde(default)]
    pub start_deg: f64,
    /// Defaults to a full scan: 360 / views.
    pub step_deg: Option<f64>,
    pub source_to_object: f64,
    pub object_to_detector: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitView {
    pub source: Vec3,
    pub detector_center: Vec3,
    pub u: Vec3,
    pub v: Vec3,
}

/// Acquisition geometry: exactly one of the two manifest forms.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometrySpec {
    Circular(CircularOrbit),
    Explicit(Vec<ExplicitView>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryManifest {
    pub detector: DetectorSpec,
    pub volume: VolumeSpec,
    pub normalization: Option<Normalization>,
    pub geometry: GeometrySpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawManifest {
    detector: DetectorSpec,
    volume: VolumeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    circular: Option<CircularOrbit>,
    #[serde(default, rename = "view", skip_serializing_if = "Option::is_none")]
    views: Option<Vec<ExplicitView>>,
}

/// Parses and validates a manifest document.
pub fn parse_manifest(text: &str) -> Result<GeometryManifest> {
    let raw: RawManifest =
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
    let geometry = match (raw.circular, raw.views) {
        (Some(c), None) => GeometrySpec::Circular(c),
        (None, Some(v)) => GeometrySpec::Explicit(v),
        (Some(_), Some(_)) => {
            return Err(Error::Manifest(
                "both [circular] and [[view]] given; pick exactly one geometry form".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Manifest(
                "no geometry: add a [circular] section or [[view]] entries".into(),
            ))
        }
    };
    let manifest = GeometryManifest {
        detector: raw.detector,
        volume: raw.volume,
        normalization: raw.normalization,
        geometry,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl GeometryManifest {
    pub fn validate(&self) -> Result<()> {
        let d = &self.detector;
        if d.shape.iter().any(|&s| s == 0) {
            return Err(Error::Manifest(format!(
                "detector.shape must be positive, got {:?}",
                d.shape
            )));
        }
        if d.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Manifest(format!(
                "detector.spacing must be positive, got {:?}",
                d.spacing
            )));
        }
        let v = &self.volume;
        if v.shape.iter().any(|&s| s == 0) {
            return Err(Error::Manifest(format!(
                "volume.shape must be positive, got {:?}",
                v.shape
            )));
        }
        if v.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Manifest(format!(
                "volume.spacing must be positive, got {:?}",
                v.spacing
            )));
        }
        if let Some(n) = &self.normalization {
            if !(n.std > 0.0) {
                return Err(Error::Manifest(format!(
                    "normalization.std must be positive, got {}",
                    n.std
                )));
            }
        }
        match &self.geometry {
            GeometrySpec::Circular(c) => {
                if c.views == 0 {
                    return Err(Error::Manifest("circular.views must be >= 1".into()));
                }
                if !(c.source_to_object > 0.0) {
                    return Err(Error::Manifest(format!(
                        "circular.source_to_object must be positive, got {}",
                        c.source_to_object
                    )));
                }
                if !(c.object_to_detector > 0.0) {
                    return Err(Error::Manifest(format!(
                        "circular.object_to_detector must be positive, got {}",
                        c.object_to_detector
                    )));
                }
                if let Some(step) = c.step_deg {
                    if !step.is_finite() {
                        return Err(Error::Manifest("circular.step_deg must be finite".into()));
                    }
                }
            }
            GeometrySpec::Explicit(views) => {
                if views.is_empty() {
                    return Err(Error::Manifest("at least one [[view]] is required".into()));
                }
                for (idx, view) in views.iter().enumerate() {
                    for (name, vec) in [("u", view.u), ("v", view.v)] {
                        if norm(vec) == 0.0 {
                            return Err(Error::Manifest(format!(
                                "view[{idx}].{name} must be non-zero"
                            )));
                        }
                    }
                    if norm(cross(view.u, view.v)) == 0.0 {
                        return Err(Error::Manifest(format!(
                            "view[{idx}]: u and v are parallel, detector plane is degenerate"
                        )));
                    }
                    for (name, vec) in [
                        ("source", view.source),
                        ("detector_center", view.detector_center),
                        ("u", view.u),
                        ("v", view.v),
                    ] {
                        if vec.iter().any(|x| !x.is_finite()) {
                            return Err(Error::Manifest(format!(
                                "view[{idx}].{name} must be finite"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The equivalent [`ScanConfig`] for circular manifests.
    pub fn scan_config(&self) -> Option<ScanConfig> {
        match &self.geometry {
            GeometrySpec::Circular(c) => Some(ScanConfig {
                views: c.views,
                step_deg: c.step_deg.unwrap_or(ScanConfig::full_scan_step(c.views)),
                start_deg: c.start_deg,
                source_to_object: c.source_to_object,
                object_to_detector: c.object_to_detector,
                det_shape: self.detector.shape,
                det_spacing: self.detector.spacing,
            }),
            GeometrySpec::Explicit(_) => None,
        }
    }

    /// Expands the manifest to per-view poses.
    pub fn poses(&self) -> Result<Vec<ViewPose>> {
        match &self.geometry {
            GeometrySpec::Circular(_) => {
                let cfg = self.scan_config().expect("circular geometry");
                (1..=cfg.views).map(|i| view_pose(&cfg, i)).collect()
            }
            GeometrySpec::Explicit(views) => Ok(views
                .iter()
                .map(|view| ViewPose {
                    source: view.source,
                    det_center: view.detector_center,
                    u: view.u,
                    v: view.v,
                    det_shape: self.detector.shape,
                })
                .collect()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawManifest {
            detector: self.detector.clone(),
            volume: self.volume.clone(),
            normalization: self.normalization.clone(),
            circular: match &self.geometry {
                GeometrySpec::Circular(c) => Some(c.clone()),
                GeometrySpec::Explicit(_) => None,
            },
            views: match &self.geometry {
                GeometrySpec::Explicit(v) => Some(v.clone()),
                GeometrySpec::Circular(_) => None,
            },
        };
        toml::to_string_pretty(&raw).expect("manifest serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dental_manifest() -> String {
        r#"
[detector]
shape = [256, 256]
spacing = [0.4386, 0.4386]

[volume]
shape = [256, 256, 256]
spacing = [0.3133, 0.3133, 0.3133]

[circular]
views = 20
start_deg = 0.0
step_deg = 18.0
source_to_object = 500.0
object_to_detector = 200.0
"#
        .to_string()
    }

    #[test]
    fn circular_manifest_expands_to_pose_list() {
        let m = parse_manifest(&dental_manifest()).unwrap();
        let poses = m.poses().unwrap();
        assert_eq!(poses.len(), 20);
        let direct = view_pose(&m.scan_config().unwrap(), 2).unwrap();
        assert_eq!(poses[1], direct);
    }

    #[test]
    fn step_defaults_to_a_full_scan() {
        let text = dental_manifest().replace("step_deg = 18.0\n", "");
        let m = parse_manifest(&text).unwrap();
        assert_eq!(m.scan_config().unwrap().step_deg, 18.0);
    }

    #[test]
    fn explicit_views_are_trusted_verbatim() {
        let text = r#"
[detector]
shape = [4, 4]
spacing = [1.0, 1.0]

[volume]
shape = [8, 8, 8]
spacing = [1.0, 1.0, 1.0]

[[view]]
source = [100.0, 0.0, 0.0]
detector_center = [-50.0, 0.0, 1.0]
u = [0.0, 1.0, 0.0]
v = [0.0, 0.0, 1.0]
"#;
        let m = parse_manifest(text).unwrap();
        let poses = m.poses().unwrap();
        assert_eq!(poses.len(), 1);
        // The off-plane detector center is kept, not re-derived.
        assert_eq!(poses[0].det_center, [-50.0, 0.0, 1.0]);
        assert_eq!(poses[0].det_shape, [4, 4]);
    }

    #[test]
    fn both_geometry_forms_are_a_schema_error() {
        let text = dental_manifest()
            + r#"
[[view]]
source = [1.0, 0.0, 0.0]
detector_center = [-1.0, 0.0, 0.0]
u = [0.0, 1.0, 0.0]
v = [0.0, 0.0, 1.0]
"#;
        let err = parse_manifest(&text).unwrap_err();
        assert!(err.to_string().contains("exactly one"), "{err}");
    }

    #[test]
    fn missing_geometry_is_a_schema_error() {
        let text = r#"
[detector]
shape = [4, 4]
spacing = [1.0, 1.0]

[volume]
shape = [8, 8, 8]
spacing = [1.0, 1.0, 1.0]
"#;
        assert!(parse_manifest(text).is_err());
    }

    #[test]
    fn diagnostics_name_the_offending_field() {
        let text = dental_manifest().replace("views = 20", "views = 0");
        let err = parse_manifest(&text).unwrap_err();
        assert!(err.to_string().contains("circular.views"), "{err}");

        let bad_spacing = dental_manifest().replace(
            "spacing = [0.4386, 0.4386]",
            "spacing = [0.4386, -0.4386]",
        );
        let err = parse_manifest(&bad_spacing).unwrap_err();
        assert!(err.to_string().contains("detector.spacing"), "{err}");
    }

    #[test]
    fn parse_errors_carry_toml_diagnostics() {
        let err = parse_manifest("[detector\nshape = [4,4]").unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn round_trip_through_toml_preserves_the_manifest() {
        let m = parse_manifest(&dental_manifest()).unwrap();
        let again = parse_manifest(&m.to_toml_string()).unwrap();
        assert_eq!(m, again);
    }
}
