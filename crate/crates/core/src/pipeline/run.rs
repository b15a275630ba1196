use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Variant};
use super::poses::{depth_pose_errors, interpolated_rgb_poses, nearest_rgb_poses, DepthPoseSource, PoseTable};
use super::train::{bootstrap_train, joint_optimize, JointMode, LossPoint, PosePoint};
use super::PipelineError;
use crate::diffcore::Checkpoint;
use crate::field::{render_image, RadianceFieldGrid};
use crate::geom::Aabb;
use crate::metrics::{depth_eval_mask, depth_metrics, psnr, ssim, write_view_metrics_csv, MetricsBundle};
use crate::synth::AsyncDataset;
use crate::timepose::{fit_timepose, FitReport, PoseErrorStats, TimePoseModel, TimedPoseSample};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE3_CKPT: &str = "stage3.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// Stage-1 result: the time-pose network fitted to the RGB poses.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: TimePoseModel,
    pub fit: FitReport,
    /// Error of `phi(t_j) o E` against the ground-truth depth poses.
    pub depth_pose: PoseErrorStats,
}

pub fn stage1(ds: &AsyncDataset, cfg: &PipelineConfig) -> Result<Stage1, PipelineError> {
    let samples: Vec<TimedPoseSample> = ds.rgb.iter().map(|f| TimedPoseSample::new(f.t, f.pose)).collect();
    let (model, fit) = fit_timepose(&samples, &cfg.timepose)?;
    let depth_pose = depth_pose_errors(&model.poses_at(&ds.depth_times()), &ds.extrinsic, &ds.gt_depth_poses);
    Ok(Stage1 { model, fit, depth_pose })
}

/// Scene bounds grown by `margin` on every side.
pub fn field_bounds(ds: &AsyncDataset, margin: f64) -> Aabb {
    Aabb::new(ds.bounds.min - Vector3::repeat(margin), ds.bounds.max + Vector3::repeat(margin))
}

pub fn new_field(ds: &AsyncDataset, cfg: &PipelineConfig) -> Result<RadianceFieldGrid, PipelineError> {
    let field = crate::field::FieldConfig {
        seed: cfg.field.seed ^ cfg.seed,
        ..cfg.field.clone()
    };
    Ok(RadianceFieldGrid::new(field, field_bounds(ds, cfg.bounds_margin), ds.rgb.len())?)
}

/// Stage 2: RGB-only bootstrap of a fresh field.
pub fn stage2(ds: &AsyncDataset, cfg: &PipelineConfig) -> Result<(RadianceFieldGrid, Vec<LossPoint>), PipelineError> {
    let mut grid = new_field(ds, cfg)?;
    let curve = bootstrap_train(&mut grid, ds, &cfg.bootstrap, &cfg.render, cfg.seed)?;
    Ok((grid, curve))
}

/// Depth-pose source a variant starts stage 3 from.
pub fn initial_pose_source(ds: &AsyncDataset, variant: Variant, phi: &TimePoseModel) -> Result<DepthPoseSource, PipelineError> {
    let (center, scale) = (phi.normalization().center, phi.normalization().scale);
    Ok(match variant {
        Variant::Full | Variant::NoDepth | Variant::NoJoint => DepthPoseSource::TimePose(phi.clone()),
        Variant::RgbInit => DepthPoseSource::Table(PoseTable::new(&nearest_rgb_poses(ds), center, scale)?),
        Variant::LinearInterpInit => DepthPoseSource::Table(PoseTable::new(&interpolated_rgb_poses(ds)?, center, scale)?),
    })
}

/// Stage-3 result.
#[derive(Debug, Clone)]
pub struct Stage3 {
    pub grid: RadianceFieldGrid,
    pub poses: DepthPoseSource,
    pub losses: Vec<LossPoint>,
    pub pose_curve: Vec<PosePoint>,
}

/// Stage 3 for `variant`, continuing from the stage-1 network and a copy of
/// the stage-2 field.
pub fn stage3(
    ds: &AsyncDataset,
    cfg: &PipelineConfig,
    variant: Variant,
    phi: &TimePoseModel,
    mut grid: RadianceFieldGrid,
) -> Result<Stage3, PipelineError> {
    let mut poses = initial_pose_source(ds, variant, phi)?;
    let mode = JointMode {
        use_depth: variant.uses_depth(),
        refine_poses: variant.refines_poses(),
    };
    let report = joint_optimize(&mut grid, &mut poses, ds, &cfg.joint, &cfg.render, mode, cfg.seed, cfg.pose_log_every)?;
    Ok(Stage3 {
        grid,
        poses,
        losses: report.losses,
        pose_curve: report.pose_curve,
    })
}

/// Metrics of one test view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub metrics: MetricsBundle,
}

/// Mean metrics over the test views plus the per-view rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: MetricsBundle,
    pub depth_pose: PoseErrorStats,
    pub views: Vec<ViewMetrics>,
}

/// Renders every test view (default appearance embedding) and scores color
/// and depth; pose errors come from the depth-pose source.
/// Without poses the pose errors are NaN.
pub fn evaluate(
    grid: &RadianceFieldGrid,
    poses: Option<&DepthPoseSource>,
    ds: &AsyncDataset,
    cfg: &PipelineConfig,
) -> Result<Evaluation, PipelineError> {
    let depth_pose = match poses {
        Some(p) => depth_pose_errors(&p.all_poses(&ds.depth_times()), &ds.extrinsic, &ds.gt_depth_poses),
        None => PoseErrorStats {
            count: 0,
            mean_trans_m: f64::NAN,
            mean_rot_deg: f64::NAN,
            max_trans_m: f64::NAN,
            max_rot_deg: f64::NAN,
        },
    };
    let n = cfg.eval.max_views.map_or(ds.test_views.len(), |m| m.min(ds.test_views.len()));
    let mut views = Vec::with_capacity(n);
    for (i, view) in ds.test_views.iter().take(n).enumerate() {
        let (rgb, depth, opacity) = render_image(grid, &view.pose, &ds.intrinsics, None, &cfg.render, cfg.eval.chunk)?;
        let gt: Vec<f64> = view.depth.data.iter().map(|&d| d as f64).collect();
        let pred: Vec<f64> = depth.data.iter().map(|&d| d as f64).collect();
        let mask = depth_eval_mask(&gt, &opacity, cfg.render.min_opacity);
        let valid = mask.iter().filter(|&&m| m).count();
        let dm = if valid > 0 { Some(depth_metrics(&pred, &gt, &mask)?) } else { None };
        views.push(ViewMetrics {
            name: format!("test_{i:04}"),
            metrics: MetricsBundle {
                psnr: psnr(&rgb, &view.image)?,
                ssim: ssim(&rgb, &view.image)?,
                lpips: None,
                depth_rmse: dm.map_or(f64::NAN, |d| d.rmse),
                depth_rmse_log: dm.map_or(f64::NAN, |d| d.rmse_log),
                delta1: dm.map_or(f64::NAN, |d| d.delta1),
                delta2: dm.map_or(f64::NAN, |d| d.delta2),
                delta3: dm.map_or(f64::NAN, |d| d.delta3),
                rot_err_deg: depth_pose.mean_rot_deg,
                trans_err_m: depth_pose.mean_trans_m,
                valid_fraction: valid as f64 / mask.len() as f64,
            },
        });
    }
    let bundles: Vec<MetricsBundle> = views.iter().map(|v| v.metrics).collect();
    let mut mean = MetricsBundle::mean(&bundles);
    mean.rot_err_deg = depth_pose.mean_rot_deg;
    mean.trans_err_m = depth_pose.mean_trans_m;
    Ok(Evaluation { mean, depth_pose, views })
}

/// Seconds spent per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WallClock {
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub stage3_s: f64,
    pub eval_s: f64,
}

/// Everything a run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub stage1_fit: FitReport,
    pub stage1_depth_pose: PoseErrorStats,
    pub losses: Vec<LossPoint>,
    pub pose_curve: Vec<PosePoint>,
    pub final_depth_pose: PoseErrorStats,
    pub metrics: MetricsBundle,
    pub views: Vec<ViewMetrics>,
    pub wall_clock: WallClock,
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Config sidecar written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub config: PipelineConfig,
}

pub fn write_run_config(dir: &Path, cfg: &PipelineConfig, variant: Variant) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&RunConfig {
        variant,
        config: cfg.clone(),
    })?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig, PipelineError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn save_stage1(dir: &Path, model: &TimePoseModel) -> Result<(), PipelineError> {
    let mut ck = Checkpoint::new();
    model.save_into(&mut ck, "timepose");
    Ok(ck.write(&dir.join(STAGE1_CKPT))?)
}

pub fn save_stage2(dir: &Path, grid: &RadianceFieldGrid) -> Result<(), PipelineError> {
    let mut ck = Checkpoint::new();
    grid.save_into(&mut ck, "field");
    Ok(ck.write(&dir.join(STAGE2_CKPT))?)
}

pub fn save_stage3(dir: &Path, grid: &RadianceFieldGrid, poses: &DepthPoseSource) -> Result<(), PipelineError> {
    let mut ck = Checkpoint::new();
    grid.save_into(&mut ck, "field");
    poses.save_into(&mut ck, "poses");
    Ok(ck.write(&dir.join(STAGE3_CKPT))?)
}

fn require(dir: &Path, name: &'static str) -> Result<Checkpoint, PipelineError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingStage {
            stage: name,
            path: path.display().to_string(),
        });
    }
    Ok(Checkpoint::read(&path)?)
}

pub fn load_stage1(dir: &Path, cfg: &PipelineConfig) -> Result<TimePoseModel, PipelineError> {
    Ok(TimePoseModel::load_from(cfg.timepose.clone(), &require(dir, STAGE1_CKPT)?, "timepose")?)
}

pub fn load_stage2(dir: &Path, cfg: &PipelineConfig) -> Result<RadianceFieldGrid, PipelineError> {
    Ok(RadianceFieldGrid::load_from(cfg.field.clone(), &require(dir, STAGE2_CKPT)?, "field")?)
}

pub fn load_stage3(dir: &Path, cfg: &PipelineConfig, depth_frames: usize) -> Result<(RadianceFieldGrid, DepthPoseSource), PipelineError> {
    let ck = require(dir, STAGE3_CKPT)?;
    let grid = RadianceFieldGrid::load_from(cfg.field.clone(), &ck, "field")?;
    let poses = DepthPoseSource::load_from(&cfg.timepose, &ck, "poses", depth_frames)?;
    Ok((grid, poses))
}

/// Field and, for stage-3 checkpoints, depth poses from any field
/// checkpoint. Stage-2 checkpoints take their poses from a `stage1.ckpt`
/// next to them when present.
pub fn load_field_checkpoint(
    path: &Path,
    cfg: &PipelineConfig,
    depth_frames: usize,
) -> Result<(RadianceFieldGrid, Option<DepthPoseSource>), PipelineError> {
    let ck = Checkpoint::read(path)?;
    let grid = RadianceFieldGrid::load_from(cfg.field.clone(), &ck, "field")?;
    if ck.contains_prefix("poses") {
        return Ok((grid, Some(DepthPoseSource::load_from(&cfg.timepose, &ck, "poses", depth_frames)?)));
    }
    let sibling = path.with_file_name(STAGE1_CKPT);
    if sibling.exists() {
        let phi = TimePoseModel::load_from(cfg.timepose.clone(), &Checkpoint::read(&sibling)?, "timepose")?;
        return Ok((grid, Some(DepthPoseSource::TimePose(phi))));
    }
    Ok((grid, None))
}

/// Writes `report.json` (with wall-clock), `metrics.json` (deterministic),
/// `loss_curve.csv`, `pose_errors.csv` and `views.csv`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    put("report.json", serde_json::to_string_pretty(report)?)?;
    put("metrics.json", serde_json::to_string_pretty(&report.metrics)?)?;
    let mut w = csv::Writer::from_path(dir.join("loss_curve.csv"))?;
    for p in &report.losses {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| io_err(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("pose_errors.csv"))?;
    for p in &report.pose_curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| io_err(dir, e))?;
    let rows: Vec<(String, MetricsBundle)> = report.views.iter().map(|v| (v.name.clone(), v.metrics)).collect();
    write_view_metrics_csv(&dir.join("views.csv"), &rows)?;
    Ok(())
}

fn finish(
    variant: Variant,
    s1: &Stage1,
    mut losses: Vec<LossPoint>,
    s3: &Stage3,
    eval: Evaluation,
    wall_clock: WallClock,
) -> RunReport {
    losses.extend(s3.losses.iter().cloned());
    RunReport {
        variant,
        stage1_fit: s1.fit.clone(),
        stage1_depth_pose: s1.depth_pose,
        losses,
        pose_curve: s3.pose_curve.clone(),
        final_depth_pose: eval.depth_pose,
        metrics: eval.mean,
        views: eval.views,
        wall_clock,
    }
}

/// Runs all three stages for `variant`, evaluates, and (with `out`) writes
/// checkpoints, the config sidecar and the report.
pub fn run_pipeline(ds: &AsyncDataset, cfg: &PipelineConfig, variant: Variant, out: Option<&Path>) -> Result<RunReport, PipelineError> {
    Ok(run_variants(ds, cfg, &[variant], out, true)?.remove(0))
}

/// Runs stages 1 and 2 once and stage 3 plus evaluation per variant. With
/// `out`, each variant writes to `out/<variant>` and the shared stages to
/// `out`.
pub fn run_ablation(ds: &AsyncDataset, cfg: &PipelineConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<RunReport>, PipelineError> {
    run_variants(ds, cfg, variants, out, false)
}

fn run_variants(
    ds: &AsyncDataset,
    cfg: &PipelineConfig,
    variants: &[Variant],
    out: Option<&Path>,
    flat: bool,
) -> Result<Vec<RunReport>, PipelineError> {
    cfg.validate()?;
    if ds.rgb.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if variants.is_empty() {
        return Err(PipelineError::InvalidConfig("no variants requested".into()));
    }
    let mut clock = WallClock::default();
    let t = Instant::now();
    let s1 = stage1(ds, cfg)?;
    clock.stage1_s = t.elapsed().as_secs_f64();
    log::info!(
        "stage 1: depth-pose error {:.3} m / {:.3} deg",
        s1.depth_pose.mean_trans_m,
        s1.depth_pose.mean_rot_deg
    );
    let t = Instant::now();
    let (grid, boot) = stage2(ds, cfg)?;
    clock.stage2_s = t.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_run_config(dir, cfg, variants[0])?;
        save_stage1(dir, &s1.model)?;
        save_stage2(dir, &grid)?;
    }
    let mut reports = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut c = clock;
        let t = Instant::now();
        let s3 = stage3(ds, cfg, variant, &s1.model, grid.clone())?;
        c.stage3_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let eval = evaluate(&s3.grid, Some(&s3.poses), ds, cfg)?;
        c.eval_s = t.elapsed().as_secs_f64();
        log::info!(
            "{variant}: psnr {:.2} dB, depth rmse {:.3} m, depth pose {:.3} m / {:.3} deg",
            eval.mean.psnr,
            eval.mean.depth_rmse,
            eval.depth_pose.mean_trans_m,
            eval.depth_pose.mean_rot_deg
        );
        if let Some(dir) = out {
            let vdir = if flat { dir.to_path_buf() } else { dir.join(variant.name()) };
            if !flat {
                write_run_config(&vdir, cfg, variant)?;
            }
            save_stage3(&vdir, &s3.grid, &s3.poses)?;
            let report = finish(variant, &s1, boot.clone(), &s3, eval, c);
            write_report(&vdir, &report)?;
            reports.push(report);
        } else {
            reports.push(finish(variant, &s1, boot.clone(), &s3, eval, c));
        }
    }
    Ok(reports)
}
