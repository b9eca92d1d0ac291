//! Shared fixtures for the pipeline benchmarks.

use conelab_core::geometry::{ray_through_pixel, view_pose, ScanConfig};
use conelab_core::io::phantom::{make_phantom, PhantomKind};
use conelab_core::nn::losses::RayBatch;
use conelab_core::nn::model::{ModelConfig, ModelState, TrainSample};
use conelab_core::projector::{default_step, render_stack};
use conelab_core::{ProjectionStack, Volume};

/// Short-orbit scan over a square detector.
pub fn bench_scan(views: usize, det: usize, pitch: f64) -> ScanConfig {
    ScanConfig {
        views,
        step_deg: ScanConfig::full_scan_step(views),
        start_deg: 0.0,
        source_to_object: 200.0,
        object_to_detector: 50.0,
        det_shape: [det, det],
        det_spacing: [pitch, pitch],
    }
}

/// Sphere phantom plus its rendered stack.
pub fn sphere_scene(n: usize, spacing: f64, cfg: &ScanConfig) -> (Volume, ProjectionStack) {
    let kind = PhantomKind::Sphere {
        radius: 0.3 * n as f64 * spacing,
        mu: 0.02,
    };
    let vol = make_phantom(&kind, [n; 3], [spacing; 3]).expect("phantom");
    let poses: Vec<_> = (1..=cfg.views)
        .map(|i| view_pose(cfg, i).expect("pose"))
        .collect();
    let stack = render_stack(&vol, &poses, default_step(&vol)).expect("render");
    (vol, stack)
}

/// Small model plus one training sample and a fixed ray batch, sized so a
/// full gradient step finishes in well under a second.
pub fn tiny_training_scene() -> (ModelState, TrainSample, RayBatch) {
    let cfg = bench_scan(3, 8, 4.0);
    let kind = PhantomKind::Ellipsoids { seed: 11, count: 5 };
    let volume = make_phantom(&kind, [8; 3], [4.0; 3]).expect("phantom");
    let poses: Vec<_> = (1..=cfg.views)
        .map(|i| view_pose(&cfg, i).expect("pose"))
        .collect();
    let stack = render_stack(&volume, &poses, default_step(&volume)).expect("render");

    // Deterministic batch: every fourth pixel of the first view.
    let (pose, image) = &stack.views()[0];
    let [w, h] = image.shape();
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    for n in (0..h).step_by(2) {
        for m in (0..w).step_by(2) {
            rays.push(ray_through_pixel(pose, m as u32, n as u32));
            targets.push(image.get(0, m, n));
        }
    }
    let batch = RayBatch { rays, targets };

    let model = ModelState::new(ModelConfig {
        encoder_widths: [2, 3, 4],
        proj_channels: 4,
        scale: 2,
        seed: 7,
        ..ModelConfig::default()
    })
    .expect("model");
    (model, TrainSample { stack, volume }, batch)
}
