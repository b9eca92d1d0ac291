//! Command-line front end for the cone-beam CT laboratory.
//!
//! Verbs cover the full chain: `phantom` builds test volumes, `simulate`
//! renders projection stacks (optionally through the photon-count noise
//! model), `fdk` and `sart` run the classical reconstructions, `train`,
//! `infer`, and the checkpoints drive the learned reconstructor, `eval`
//! compares volumes, and `slice` exports PNG cross sections.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conelab_core::classical::{
    fdk_reconstruct, sart_reconstruct, FdkOptions, RampFilter, SartOptions, ViewOrder,
};
use conelab_core::geometry::{view_pose, ScanConfig, ViewPose};
use conelab_core::io::phantom::{make_phantom, PhantomKind};
use conelab_core::io::projections_io::{read_projections, write_projections};
use conelab_core::io::volume_io::{read_volume, write_volume};
use conelab_core::metrics::{psnr, ssim, SsimMode, SsimOptions};
use conelab_core::nn::adam::AdamState;
use conelab_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use conelab_core::nn::losses::LossWeights;
use conelab_core::nn::model::{make_training_set, train_loop_with, ModelConfig, ModelState};
use conelab_core::nn::Tensor;
use conelab_core::projector::{
    default_step, flat_dark_correct, render_stack, simulate_photon_counts, ProjectionStack,
    LOG_CLAMP_EPS,
};
use std::path::{Path, PathBuf};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[derive(Parser)]
#[command(name = "conelab", version, about = "Desk-scale cone-beam CT laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom volume.
    Phantom(PhantomArgs),
    /// Render a projection stack from a volume.
    Simulate(SimulateArgs),
    /// Filtered backprojection reconstruction.
    Fdk(FdkArgs),
    /// Iterative SART reconstruction.
    Sart(SartArgs),
    /// Train the learned reconstructor on synthetic phantoms.
    Train(TrainArgs),
    /// Reconstruct a stack with a trained model checkpoint.
    Infer(InferArgs),
    /// Compare a volume against a reference (PSNR, SSIM).
    Eval(EvalArgs),
    /// Export one cross section of a volume as a PNG.
    Slice(SliceArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fdk(a) => cmd_fdk(a),
        Cmd::Sart(a) => cmd_sart(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Slice(a) => cmd_slice(a),
    }
}

/// Parses "n" or "a,b,c" into three integers.
fn parse_shape3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s).map(|v: Vec<usize>| match v[..] {
        [n] => Ok([n, n, n]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected 1 or 3 values, got {}", v.len())),
    })?
}

/// Parses "x" or "x,y,z" into three floats.
fn parse_spacing3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_list(s).map(|v: Vec<f64>| match v[..] {
        [x] => Ok([x, x, x]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected 1 or 3 values, got {}", v.len())),
    })?
}

fn parse_shape2(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_list(s).map(|v: Vec<usize>| match v[..] {
        [n] => Ok([n, n]),
        [a, b] => Ok([a, b]),
        _ => Err(format!("expected 1 or 2 values, got {}", v.len())),
    })?
}

fn parse_spacing2(s: &str) -> std::result::Result<[f64; 2], String> {
    parse_list(s).map(|v: Vec<f64>| match v[..] {
        [x] => Ok([x, x]),
        [x, y] => Ok([x, y]),
        _ => Err(format!("expected 1 or 2 values, got {}", v.len())),
    })?
}

fn parse_widths(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s).map(|v: Vec<usize>| match v[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected 3 values, got {}", v.len())),
    })?
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// Common acquisition geometry flags.
#[derive(Args)]
struct GeometryArgs {
    /// Number of views on the circular orbit.
    #[arg(long, default_value_t = 10)]
    views: usize,
    /// Angular increment in degrees; defaults to a full scan (360 / views).
    #[arg(long)]
    step_deg: Option<f64>,
    /// Angle of the first view in degrees.
    #[arg(long, default_value_t = 0.0)]
    start_deg: f64,
    /// Source-to-isocenter distance in millimetres.
    #[arg(long, default_value_t = 200.0)]
    source_to_object: f64,
    /// Isocenter-to-detector distance in millimetres.
    #[arg(long, default_value_t = 50.0)]
    object_to_detector: f64,
    /// Detector raster "w,h" (or one value for square) in pixels.
    #[arg(long, value_parser = parse_shape2, default_value = "48")]
    det: [usize; 2],
    /// Detector pixel pitch "pu,pv" in millimetres.
    #[arg(long, value_parser = parse_spacing2, default_value = "2")]
    pitch: [f64; 2],
}

impl GeometryArgs {
    fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            views: self.views,
            step_deg: self
                .step_deg
                .unwrap_or_else(|| ScanConfig::full_scan_step(self.views)),
            start_deg: self.start_deg,
            source_to_object: self.source_to_object,
            object_to_detector: self.object_to_detector,
            det_shape: self.det,
            det_spacing: self.pitch,
        }
    }
}

fn orbit_poses(cfg: &ScanConfig) -> Result<Vec<ViewPose>> {
    (1..=cfg.views)
        .map(|i| view_pose(cfg, i).map_err(Into::into))
        .collect()
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    /// Homogeneous centered sphere.
    Sphere,
    /// Random additive ellipsoids.
    Ellipsoids,
    /// Three-dimensional Shepp-Logan head phantom.
    SheppLogan,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Sphere)]
    kind: KindArg,
    /// Volume shape "n" or "nx,ny,nz" in voxels.
    #[arg(long, value_parser = parse_shape3, default_value = "64")]
    shape: [usize; 3],
    /// Voxel spacing "s" or "sx,sy,sz" in millimetres.
    #[arg(long, value_parser = parse_spacing3, default_value = "2")]
    spacing: [f64; 3],
    /// Sphere radius in millimetres.
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    /// Sphere attenuation in 1/mm.
    #[arg(long, default_value_t = 0.02)]
    mu: f64,
    /// Ellipsoid phantom seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ellipsoid count.
    #[arg(long, default_value_t = 6)]
    count: usize,
    /// Peak attenuation of the Shepp-Logan phantom in 1/mm.
    #[arg(long, default_value_t = 0.02)]
    mu_scale: f64,
    /// Output volume path (a .toml sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Sphere => PhantomKind::Sphere {
            radius: a.radius,
            mu: a.mu,
        },
        KindArg::Ellipsoids => PhantomKind::Ellipsoids {
            seed: a.seed,
            count: a.count,
        },
        KindArg::SheppLogan => PhantomKind::SheppLogan3d {
            mu_scale: a.mu_scale,
        },
    };
    let vol = make_phantom(&kind, a.shape, a.spacing).context("phantom generation failed")?;
    write_volume(&a.out, &vol)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({}x{}x{} voxels)",
        a.out.display(),
        a.shape[0],
        a.shape[1],
        a.shape[2]
    );
    Ok(())
}

#[derive(Args)]
struct SimulateArgs {
    /// Input volume path.
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Ray integration step in millimetres; defaults to half the smallest
    /// voxel spacing.
    #[arg(long)]
    step: Option<f64>,
    /// Unattenuated photon count per pixel; enables the photon model.
    #[arg(long)]
    noise_i0: Option<f64>,
    /// Dark offset in counts.
    #[arg(long, default_value_t = 0.0)]
    noise_i1: f64,
    /// Poisson seed; omitting it keeps the exact expected counts.
    #[arg(long)]
    seed: Option<u64>,
    /// Output stack directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let vol = read_volume(&a.volume)
        .with_context(|| format!("reading {}", a.volume.display()))?;
    let cfg = a.geometry.scan_config();
    let poses = orbit_poses(&cfg)?;
    let step = a.step.unwrap_or_else(|| default_step(&vol));
    let stack = render_stack(&vol, &poses, step).context("projection rendering failed")?;
    let stack = match a.noise_i0 {
        None => stack,
        Some(i0) => {
            let views = stack
                .views()
                .iter()
                .enumerate()
                .map(|(idx, (pose, img))| {
                    // Distinct per-view streams from one user seed.
                    let view_seed = a
                        .seed
                        .map(|s| s ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let raster = simulate_photon_counts(img, i0, a.noise_i1, view_seed)?;
                    let corrected = flat_dark_correct(&raster, LOG_CLAMP_EPS)?;
                    Ok((pose.clone(), corrected))
                })
                .collect::<conelab_core::Result<Vec<_>>>()?;
            ProjectionStack::new(views)?
        }
    };
    write_projections(&a.out, &stack)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} views of {}x{} pixels to {}",
        stack.len(),
        cfg.det_shape[0],
        cfg.det_shape[1],
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    RamLak,
    SheppLogan,
}

#[derive(Args)]
struct FdkArgs {
    /// Input stack directory.
    #[arg(long)]
    projections: PathBuf,
    /// Output volume shape.
    #[arg(long, value_parser = parse_shape3, default_value = "64")]
    shape: [usize; 3],
    /// Output voxel spacing in millimetres.
    #[arg(long, value_parser = parse_spacing3, default_value = "2")]
    spacing: [f64; 3],
    #[arg(long, value_enum, default_value_t = FilterArg::RamLak)]
    filter: FilterArg,
    /// Rows are padded to the next power of two of this factor times the
    /// detector width before filtering.
    #[arg(long, default_value_t = 2)]
    pad_factor: usize,
    /// Output volume path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_fdk(a: FdkArgs) -> Result<()> {
    let stack = read_projections(&a.projections)
        .with_context(|| format!("reading {}", a.projections.display()))?;
    let opts = FdkOptions {
        filter: match a.filter {
            FilterArg::RamLak => RampFilter::RamLak,
            FilterArg::SheppLogan => RampFilter::SheppLogan,
        },
        pad_factor: a.pad_factor,
    };
    let vol = fdk_reconstruct(&stack, a.shape, a.spacing, &opts)
        .context("FDK reconstruction failed")?;
    write_volume(&a.out, &vol)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Sequential,
    Shuffled,
}

#[derive(Args)]
struct SartArgs {
    /// Input stack directory.
    #[arg(long)]
    projections: PathBuf,
    #[arg(long, value_parser = parse_shape3, default_value = "64")]
    shape: [usize; 3],
    #[arg(long, value_parser = parse_spacing3, default_value = "2")]
    spacing: [f64; 3],
    /// Full sweeps over the stack.
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    relaxation: f64,
    #[arg(long, value_enum, default_value_t = OrderArg::Sequential)]
    order: OrderArg,
    /// Seed for the shuffled view order.
    #[arg(long, default_value_t = 0)]
    order_seed: u64,
    /// Allow negative voxels instead of clamping at zero.
    #[arg(long)]
    allow_negative: bool,
    /// Ray sampling step in millimetres; defaults to the smallest voxel
    /// spacing.
    #[arg(long)]
    step: Option<f64>,
    /// Output volume path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sart(a: SartArgs) -> Result<()> {
    let stack = read_projections(&a.projections)
        .with_context(|| format!("reading {}", a.projections.display()))?;
    let opts = SartOptions {
        iterations: a.iterations,
        relaxation: a.relaxation,
        view_order: match a.order {
            OrderArg::Sequential => ViewOrder::Sequential,
            OrderArg::Shuffled => ViewOrder::Shuffled { seed: a.order_seed },
        },
        nonnegativity: !a.allow_negative,
        step: a.step,
    };
    let result = sart_reconstruct(&stack, a.shape, a.spacing, &opts)
        .context("SART reconstruction failed")?;
    for (i, rms) in result.residual_trace.iter().enumerate() {
        if i == 0 {
            println!("initial residual rms = {rms:.6}");
        } else {
            println!("after sweep {i}: residual rms = {rms:.6}");
        }
    }
    write_volume(&a.out, &result.volume)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Number of synthetic training phantoms.
    #[arg(long, default_value_t = 40)]
    phantoms: usize,
    /// Phantom volume shape.
    #[arg(long, value_parser = parse_shape3, default_value = "32")]
    shape: [usize; 3],
    /// Phantom voxel spacing in millimetres.
    #[arg(long, value_parser = parse_spacing3, default_value = "2")]
    spacing: [f64; 3],
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Optimization steps (one sample per step, cycling).
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Model seed (initialization and ray batches).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base seed for the training phantoms; sample i uses seed + i.
    #[arg(long, default_value_t = 1000)]
    phantom_seed: u64,
    /// Encoder stage widths "w0,w1,w2".
    #[arg(long, value_parser = parse_widths, default_value = "8,16,32")]
    widths: [usize; 3],
    /// Decoder working width.
    #[arg(long, default_value_t = 24)]
    proj_channels: usize,
    /// Coarse-to-fine upsampling factor (power of two).
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 3e-3)]
    base_lr: f64,
    /// Rays per projection-loss batch.
    #[arg(long, default_value_t = 64)]
    ray_batch: usize,
    /// Gradient loss weight.
    #[arg(long, default_value_t = 1.0)]
    lambda_grad: f64,
    /// Projection loss weight.
    #[arg(long, default_value_t = 0.01)]
    lambda_proj: f64,
    /// Print losses every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.geometry.scan_config();
    let config = ModelConfig {
        encoder_widths: a.widths,
        proj_channels: a.proj_channels,
        scale: a.scale,
        loss: LossWeights {
            grad: a.lambda_grad,
            proj: a.lambda_proj,
        },
        base_lr: a.base_lr,
        ray_batch: a.ray_batch,
        seed: a.seed,
    };
    let mut model = ModelState::new(config).context("model configuration rejected")?;
    println!(
        "training {} parameters on {} phantoms, {} steps",
        model.param_count(),
        a.phantoms,
        a.steps
    );
    let samples = make_training_set(&cfg, a.shape, a.spacing, a.phantoms, a.phantom_seed)
        .context("training set generation failed")?;
    let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(&params);
    drop(params);
    let log_every = a.log_every.max(1);
    let trace = train_loop_with(&mut model, &mut adam, &samples, a.steps, |t, v| {
        if t % log_every == 0 || t + 1 == a.steps {
            println!(
                "step {t}: total {:.6} (recon {:.6}, grad {:.6}, proj {:.6})",
                v.total, v.recon, v.grad, v.proj
            );
        }
    })
    .context("training failed")?;
    save_checkpoint(&a.out, &model, Some(&adam))
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("loss {:.6} -> {:.6}", first.total, last.total);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct InferArgs {
    /// Model checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Input stack directory.
    #[arg(long)]
    projections: PathBuf,
    /// Output volume shape.
    #[arg(long, value_parser = parse_shape3, default_value = "32")]
    shape: [usize; 3],
    /// Output voxel spacing in millimetres.
    #[arg(long, value_parser = parse_spacing3, default_value = "2")]
    spacing: [f64; 3],
    /// Output volume path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)
        .with_context(|| format!("reading {}", a.model.display()))?;
    let stack = read_projections(&a.projections)
        .with_context(|| format!("reading {}", a.projections.display()))?;
    let vol = model
        .infer(&stack, a.shape, a.spacing)
        .context("inference failed")?;
    write_volume(&a.out, &vol)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Reference volume path.
    #[arg(long)]
    reference: PathBuf,
    /// Volume under test.
    #[arg(long)]
    test: PathBuf,
    /// Dynamic range override; defaults to max - min of the reference.
    #[arg(long)]
    data_range: Option<f64>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let reference = read_volume(&a.reference)
        .with_context(|| format!("reading {}", a.reference.display()))?;
    let test = read_volume(&a.test)
        .with_context(|| format!("reading {}", a.test.display()))?;
    let p = psnr(&reference, &test, a.data_range).context("PSNR failed")?;
    let s = ssim(
        &reference,
        &test,
        &SsimOptions {
            data_range: a.data_range,
            mode: SsimMode::SliceWise,
        },
    )
    .context("SSIM failed")?;
    println!("psnr_db = {:.4}", p.db());
    println!("ssim = {s:.6}");
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

#[derive(Args)]
struct SliceArgs {
    /// Input volume path.
    #[arg(long)]
    volume: PathBuf,
    /// Slicing axis.
    #[arg(long, value_enum, default_value_t = AxisArg::Z)]
    axis: AxisArg,
    /// Slice index along the axis; defaults to the middle.
    #[arg(long)]
    index: Option<usize>,
    /// Channel to export.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_slice(a: SliceArgs) -> Result<()> {
    let vol = read_volume(&a.volume)
        .with_context(|| format!("reading {}", a.volume.display()))?;
    let [nx, ny, nz] = vol.shape();
    if a.channel >= vol.channels() {
        bail!("channel {} out of range (volume has {})", a.channel, vol.channels());
    }
    let (extent, w, h) = match a.axis {
        AxisArg::X => (nx, ny, nz),
        AxisArg::Y => (ny, nx, nz),
        AxisArg::Z => (nz, nx, ny),
    };
    let index = a.index.unwrap_or(extent / 2);
    if index >= extent {
        bail!("slice index {index} out of range (axis extent {extent})");
    }
    let mut plane = vec![0.0f64; w * h];
    for b in 0..h {
        for a_ in 0..w {
            let v = match a.axis {
                AxisArg::X => vol.get(a.channel, index, a_, b),
                AxisArg::Y => vol.get(a.channel, a_, index, b),
                AxisArg::Z => vol.get(a.channel, a_, b, index),
            };
            plane[b * w + a_] = v;
        }
    }
    write_gray_png(&plane, w, h, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Min-max normalizes a plane to 8-bit gray and writes a PNG.
fn write_gray_png(plane: &[f64], w: usize, h: usize, out: &Path) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in plane {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("plane length matches dimensions");
    img.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
