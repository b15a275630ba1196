use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{depth_weight_schedule, pose_step_schedule, Mixing, StageConfig};
use super::poses::{depth_pose_errors, depth_ray, depth_ray_vjp, DepthPoseSource};
use super::PipelineError;
use crate::diffcore::{Adam, AdamConfig};
use crate::field::{render_rays, render_rays_backward, RadianceFieldGrid, RenderConfig};
use crate::geom::{ray_from_pixel, Ray};
use crate::synth::AsyncDataset;

/// Pixels drawn for one optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayBatch {
    /// `(rgb frame, u, v)`.
    pub rgb: Vec<(usize, usize, usize)>,
    /// `(depth frame, u, v)`, valid depth only.
    pub depth: Vec<(usize, usize, usize)>,
}

/// Uniform pixels from uniform frames; depth pixels without a measurement
/// are redrawn.
pub fn sample_rays(ds: &AsyncDataset, n_rgb: usize, n_depth: usize, rng: &mut impl Rng) -> RayBatch {
    let (w, h) = (ds.intrinsics.width as usize, ds.intrinsics.height as usize);
    let mut batch = RayBatch::default();
    if !ds.rgb.is_empty() {
        batch.rgb = (0..n_rgb)
            .map(|_| (rng.gen_range(0..ds.rgb.len()), rng.gen_range(0..w), rng.gen_range(0..h)))
            .collect();
    }
    if !ds.depth.is_empty() {
        for _ in 0..n_depth {
            for _ in 0..64 {
                let (j, u, v) = (rng.gen_range(0..ds.depth.len()), rng.gen_range(0..w), rng.gen_range(0..h));
                if ds.depth[j].depth.get(u, v) > 0.0 {
                    batch.depth.push((j, u, v));
                    break;
                }
            }
        }
    }
    batch
}

/// Loss of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    /// Photometric MSE (per channel).
    pub color: f64,
    /// Depth MSE (square meters).
    pub depth: f64,
    pub lambda_depth: f64,
}

/// Renders `batch`, returns its loss and accumulates gradients into the
/// field and, when `pose_grads` is set, into the pose source.
///
/// RGB rays use the dataset poses and the photometric term; depth rays use
/// `poses` composed with the extrinsic and the depth term.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_step(
    grid: &mut RadianceFieldGrid,
    mut poses: Option<&mut DepthPoseSource>,
    ds: &AsyncDataset,
    batch: &RayBatch,
    lambda_color: f64,
    lambda_depth: f64,
    render: &RenderConfig,
    rng: Option<&mut dyn RngCore>,
    pose_grads: bool,
) -> Result<StepLoss, PipelineError> {
    let k = &ds.intrinsics;
    let mut rays: Vec<Ray> = Vec::with_capacity(batch.rgb.len() + batch.depth.len());
    let mut ids = Vec::with_capacity(rays.capacity());
    for &(i, u, v) in &batch.rgb {
        rays.push(ray_from_pixel(&ds.rgb[i].pose, k, u as f64, v as f64)?);
        ids.push(Some(i));
    }
    let frames: Vec<usize> = batch.depth.iter().map(|d| d.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let slot: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(s, &j)| (j, s)).collect();
    let pose_batch = match (poses.as_deref(), batch.depth.is_empty()) {
        (Some(src), false) => Some(src.forward(&frames, &ds.depth_times())?),
        (None, false) => return Err(PipelineError::Stage("depth rays need a pose source")),
        _ => None,
    };
    for &(j, u, v) in &batch.depth {
        let pb = pose_batch.as_ref().expect("pose batch for depth rays");
        rays.push(depth_ray(&pb.rgb_pose(slot[&j]), &ds.extrinsic, k, u as f64, v as f64));
        ids.push(None);
    }
    let (out, trace) = render_rays(grid, &rays, &ids, render, rng)?;
    let n_rgb = batch.rgb.len();
    let mut g_color = vec![[0.0; 3]; rays.len()];
    let mut g_depth = vec![0.0; rays.len()];
    let mut loss = StepLoss {
        lambda_depth,
        ..StepLoss::default()
    };
    for (r, &(i, u, v)) in batch.rgb.iter().enumerate() {
        let target = ds.rgb[i].image.get(u, v);
        for c in 0..3 {
            let e = out[r].color[c] - target[c];
            loss.color += e * e / (3 * n_rgb) as f64;
            g_color[r][c] = lambda_color * 2.0 * e / (3 * n_rgb) as f64;
        }
    }
    let n_depth = batch.depth.len();
    for (r, &(j, u, v)) in batch.depth.iter().enumerate() {
        let e = out[n_rgb + r].depth - ds.depth[j].depth.get(u, v) as f64;
        loss.depth += e * e / n_depth as f64;
        g_depth[n_rgb + r] = lambda_depth * 2.0 * e / n_depth as f64;
    }
    loss.total = lambda_color * loss.color + lambda_depth * loss.depth;
    let want_rays = pose_grads && n_depth > 0;
    let ray_grads = render_rays_backward(grid, &trace, &g_color, &g_depth, want_rays)?;
    if want_rays {
        let pb = pose_batch.as_ref().expect("pose batch for depth rays");
        let mut g_t = vec![Vector3::zeros(); frames.len()];
        let mut g_q = vec![[0.0; 4]; frames.len()];
        for (r, &(j, u, v)) in batch.depth.iter().enumerate() {
            let s = slot[&j];
            let g = &ray_grads[n_rgb + r];
            let (gt, gq) = depth_ray_vjp(&pb.rotation[s], &ds.extrinsic, k, u as f64, v as f64, &g.origin, &g.direction);
            g_t[s] += gt;
            for c in 0..4 {
                g_q[s][c] += gq[c];
            }
        }
        poses
            .as_deref_mut()
            .expect("pose source present")
            .backward(pb, &g_t, &g_q)?;
    }
    Ok(loss)
}

/// One logged point of a loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub stage: String,
    pub step: usize,
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub lambda_depth: f64,
}

/// Depth-pose error after a stage-3 step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePoint {
    pub step: usize,
    pub mean_trans_m: f64,
    pub mean_rot_deg: f64,
}

fn field_optimizer(grid: &RadianceFieldGrid, cfg: &StageConfig) -> Adam {
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr_theta), &grid.store);
    adam.set_lr_scale(&grid.store, "appearance", cfg.lr_embed() / cfg.lr_theta);
    adam
}

fn log_point(stage: &str, step: usize, l: &StepLoss) -> LossPoint {
    LossPoint {
        stage: stage.to_string(),
        step,
        total: l.total,
        color: l.color,
        depth: l.depth,
        lambda_depth: l.lambda_depth,
    }
}

/// Stage 2: photometric-only training of the field on the RGB frames.
pub fn bootstrap_train(
    grid: &mut RadianceFieldGrid,
    ds: &AsyncDataset,
    cfg: &StageConfig,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<LossPoint>, PipelineError> {
    cfg.validate("bootstrap")?;
    if ds.rgb.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007);
    let mut adam = field_optimizer(grid, cfg);
    let mut curve = Vec::new();
    for step in 0..cfg.iters {
        adam.set_lr(cfg.lr_theta * cfg.lr_decay(step));
        let batch = sample_rays(ds, cfg.batch_rays, 0, &mut rng);
        let loss = accumulate_step(grid, None, ds, &batch, cfg.lambda_color, 0.0, render, Some(&mut rng), false)?;
        adam.step(&mut grid.store)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.iters {
            log::debug!("bootstrap step {step}: color mse {:.5}", loss.color);
            curve.push(log_point("bootstrap", step, &loss));
        }
    }
    Ok(curve)
}

/// What stage 3 optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointMode {
    pub use_depth: bool,
    pub refine_poses: bool,
}

/// Stage-3 curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub losses: Vec<LossPoint>,
    pub pose_curve: Vec<PosePoint>,
}

/// Stage 3: joint refinement of the field and the depth poses with the
/// photometric term on RGB rays and the ramped depth term on depth rays.
///
/// Without depth (or with `lambda_depth_max = 0`) every ray is an RGB ray,
/// which continues the bootstrap.
#[allow(clippy::too_many_arguments)]
pub fn joint_optimize(
    grid: &mut RadianceFieldGrid,
    poses: &mut DepthPoseSource,
    ds: &AsyncDataset,
    cfg: &StageConfig,
    render: &RenderConfig,
    mode: JointMode,
    seed: u64,
    pose_log_every: usize,
) -> Result<JointReport, PipelineError> {
    cfg.validate("joint")?;
    if ds.rgb.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let use_depth = mode.use_depth && cfg.lambda_depth_max > 0.0 && !ds.depth.is_empty();
    let refine = mode.refine_poses && use_depth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1017);
    let mut adam = field_optimizer(grid, cfg);
    let mut pose_adam = poses.optimizer(cfg.lr_phi());
    let depth_times = ds.depth_times();
    let (n_i, n_d) = (ds.rgb.len() as f64, ds.depth.len() as f64);
    let mut report = JointReport::default();
    let record_poses = |poses: &DepthPoseSource, step: usize, report: &mut JointReport| {
        let s = depth_pose_errors(&poses.all_poses(&depth_times), &ds.extrinsic, &ds.gt_depth_poses);
        report.pose_curve.push(PosePoint {
            step,
            mean_trans_m: s.mean_trans_m,
            mean_rot_deg: s.mean_rot_deg,
        });
    };
    if !ds.depth.is_empty() {
        record_poses(poses, 0, &mut report);
    }
    for step in 0..cfg.iters {
        let decay = cfg.lr_decay(step);
        adam.set_lr(cfg.lr_theta * decay);
        let lambda_depth = if use_depth { depth_weight_schedule(step, cfg) } else { 0.0 };
        // Adam is invariant to loss scale, so the pose step gets its own ramp.
        pose_adam.set_lr(cfg.lr_phi() * decay * pose_step_schedule(step, cfg));
        let (n_rgb, n_depth) = match (use_depth, cfg.mixing) {
            (false, _) => (cfg.batch_rays, 0),
            (true, Mixing::Proportional) => {
                let nd = ((cfg.batch_rays as f64 * n_d / (n_i + n_d)).round() as usize).clamp(1, cfg.batch_rays);
                (cfg.batch_rays - nd, nd)
            }
            (true, Mixing::Alternate) if step % 2 == 0 => (cfg.batch_rays, 0),
            (true, Mixing::Alternate) => (0, cfg.batch_rays),
        };
        let batch = sample_rays(ds, n_rgb, n_depth, &mut rng);
        let loss = accumulate_step(
            grid,
            Some(poses),
            ds,
            &batch,
            cfg.lambda_color,
            lambda_depth,
            render,
            Some(&mut rng),
            refine,
        )?;
        adam.step(&mut grid.store)?;
        if refine {
            pose_adam.step(poses.store_mut())?;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.iters {
            log::debug!(
                "joint step {step}: color {:.5} depth {:.4} (lambda {:.2e})",
                loss.color,
                loss.depth,
                lambda_depth
            );
            report.losses.push(log_point("joint", step, &loss));
        }
        if refine && ((step + 1) % pose_log_every == 0 || step + 1 == cfg.iters) {
            record_poses(poses, step + 1, &mut report);
        }
    }
    if !refine && !ds.depth.is_empty() {
        record_poses(poses, cfg.iters, &mut report);
    }
    Ok(report)
}
