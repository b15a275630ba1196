use asrf::diffcore::ParamStore;
use asrf::field::{FieldConfig, RenderConfig};
use asrf::geom::{rgb_to_depth_pose, Pose};
use asrf::pipeline::{
    accumulate_step, depth_weight_schedule, interpolated_rgb_poses, pose_step_schedule, joint_optimize, load_stage3, nearest_rgb_poses,
    new_field, read_run_config, run_ablation, run_pipeline, sample_rays, stage1, DepthPoseSource, JointMode,
    PipelineConfig, PipelineError, PoseTable, RayBatch, StageConfig, Variant, STAGE1_CKPT, STAGE2_CKPT, STAGE3_CKPT,
};
use asrf::synth::{generate_dataset, AsyncDataset, CameraSpec, DatasetSpec, TrajectorySpec};
use asrf::timepose::TimePoseConfig;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> AsyncDataset {
    generate_dataset(&DatasetSpec {
        trajectory: TrajectorySpec { duration: 3.0, ..TrajectorySpec::default() },
        camera: CameraSpec { width: 16, height: 12, hfov_deg: 60.0 },
        test_views: 2,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_config() -> PipelineConfig {
    let stage = StageConfig {
        iters: 6,
        batch_rays: 32,
        log_every: 2,
        ..StageConfig::default()
    };
    PipelineConfig {
        timepose: TimePoseConfig {
            levels: 4,
            base_resolution: 4,
            hidden: vec![16, 16],
            skip_layer: Some(1),
            iters: 60,
            ..TimePoseConfig::default()
        },
        field: FieldConfig {
            nx: 1,
            ny: 1,
            density_hidden: vec![16, 16],
            color_hidden: vec![16],
            feature_dim: 7,
            pos_freqs: 4,
            dir_freqs: 2,
            appearance_dim: 4,
            ..FieldConfig::default()
        },
        render: RenderConfig {
            n_coarse: 8,
            n_fine: 4,
            ..RenderConfig::default()
        },
        bootstrap: stage.clone(),
        joint: StageConfig {
            lambda_depth_max: 1e-2,
            ..stage
        },
        pose_log_every: 2,
        ..PipelineConfig::default()
    }
}

/// Deterministic quadrature with fixed sample distances so that moving a
/// ray only moves its sample positions.
fn exact_render() -> RenderConfig {
    RenderConfig {
        near: 0.5,
        far: 80.0,
        n_coarse: 24,
        n_fine: 0,
        jitter: false,
        clip_to_bounds: false,
        ..RenderConfig::default()
    }
}

#[test]
fn depth_weight_ramps_linearly_then_holds() {
    let cfg = StageConfig {
        iters: 100,
        ramp_fraction: 0.5,
        lambda_depth_max: 0.01,
        ..StageConfig::default()
    };
    for (step, want) in [(0, 0.0), (10, 0.002), (25, 0.005), (50, 0.01), (99, 0.01)] {
        assert!((depth_weight_schedule(step, &cfg) - want).abs() < 1e-15, "step {step}");
    }
}

proptest! {
    #[test]
    fn depth_weight_is_monotone_and_bounded(iters in 1usize..500, ramp in 0.01f64..1.0, lmax in 0.0f64..1.0, a in 0usize..600, b in 0usize..600) {
        let cfg = StageConfig { iters, ramp_fraction: ramp, lambda_depth_max: lmax, ..StageConfig::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (depth_weight_schedule(lo, &cfg), depth_weight_schedule(hi, &cfg));
        prop_assert!(wl <= wh + 1e-15);
        prop_assert!(wl >= 0.0 && wh <= lmax + 1e-15);
    }

    #[test]
    fn pose_step_waits_for_warmup_then_ramps(iters in 1usize..500, ramp in 0.01f64..1.0, warm in 0.0f64..0.99, a in 0usize..600, b in 0usize..600) {
        let cfg = StageConfig { iters, ramp_fraction: ramp, pose_warmup_fraction: warm, lambda_depth_max: 1.0, ..StageConfig::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        let (sl, sh) = (pose_step_schedule(lo, &cfg), pose_step_schedule(hi, &cfg));
        prop_assert!(sl <= sh && sl >= 0.0 && sh <= 1.0);
        if (lo as f64) <= warm * iters as f64 {
            prop_assert_eq!(sl, 0.0);
        }
        if (hi as f64) >= (warm + ramp) * iters as f64 {
            prop_assert_eq!(sh, 1.0);
        }
    }
}

#[test]
fn pose_step_matches_depth_ramp_without_warmup() {
    let cfg = StageConfig { iters: 100, ramp_fraction: 0.4, lambda_depth_max: 0.02, ..StageConfig::default() };
    for step in 0..120 {
        let want = depth_weight_schedule(step, &cfg) / cfg.lambda_depth_max;
        assert!((pose_step_schedule(step, &cfg) - want).abs() < 1e-12, "step {step}");
    }
}

#[test]
fn variants_parse_and_print() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!(matches!("fully".parse::<Variant>(), Err(PipelineError::UnknownVariant(s)) if s == "fully"));
    assert!(!Variant::NoDepth.uses_depth());
    assert!(!Variant::NoJoint.refines_poses());
    assert!(Variant::RgbInit.refines_poses() && Variant::Full.refines_poses());
}

#[test]
fn config_rejects_bad_values() {
    let mut cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    cfg.joint.ramp_fraction = 0.0;
    assert!(matches!(cfg.validate(), Err(PipelineError::InvalidConfig(_))));
    let cfg = PipelineConfig { bounds_margin: -1.0, ..PipelineConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
}

#[test]
fn sampled_depth_pixels_carry_measurements() {
    let ds = tiny_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = sample_rays(&ds, 50, 200, &mut rng);
    assert_eq!(b.rgb.len(), 50);
    assert!(b.depth.len() >= 190);
    for &(j, u, v) in &b.depth {
        assert!(ds.depth[j].depth.get(u, v) > 0.0);
    }
}

#[test]
fn nearest_rgb_poses_match_brute_force() {
    let ds = tiny_dataset();
    let near = nearest_rgb_poses(&ds);
    for (d, p) in ds.depth.iter().zip(&near) {
        let best = ds
            .rgb
            .iter()
            .min_by(|a, b| (a.t - d.t).abs().total_cmp(&(b.t - d.t).abs()))
            .unwrap();
        assert_eq!(*p, best.pose);
    }
    let interp = interpolated_rgb_poses(&ds).unwrap();
    let e = asrf::geom::pose_error(&interp[0], &ds.rgb[0].pose);
    assert!(e.trans_m < ds.rgb[0].pose.translation().metric_distance(ds.rgb[1].pose.translation()));
}

fn depth_batch(ds: &AsyncDataset) -> RayBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = sample_rays(ds, 4, 12, &mut rng);
    assert_eq!(b.depth.len(), 12);
    b
}

fn pose_loss(grid: &mut asrf::field::RadianceFieldGrid, src: &mut DepthPoseSource, ds: &AsyncDataset, b: &RayBatch) -> f64 {
    accumulate_step(grid, Some(src), ds, b, 1.0, 1.0, &exact_render(), None, false).unwrap().total
}

fn check_pose_gradient(mut src: DepthPoseSource, ds: &AsyncDataset) {
    let cfg = tiny_config();
    let mut grid = new_field(ds, &cfg).unwrap();
    let b = depth_batch(ds);
    src.store_mut().zero_grad();
    accumulate_step(&mut grid, Some(&mut src), ds, &b, 1.0, 1.0, &exact_render(), None, true).unwrap();
    let analytic = src.store().flat_grads();
    let base = src.store().flat_values();
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    assert!(analytic[order[0]].abs() > 1e-6, "pose gradient vanished");
    let set = |store: &mut ParamStore, i: usize, v: f64| {
        let mut flat = base.clone();
        flat[i] = v;
        store.set_flat_values(&flat).unwrap();
    };
    let h = 1e-6;
    for &i in order.iter().take(8) {
        set(src.store_mut(), i, base[i] + h);
        let lp = pose_loss(&mut grid, &mut src, ds, &b);
        set(src.store_mut(), i, base[i] - h);
        let lm = pose_loss(&mut grid, &mut src, ds, &b);
        set(src.store_mut(), i, base[i]);
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-4);
        assert!(err < 1e-4, "param {i}: analytic {} vs fd {fd}", analytic[i]);
    }
}

#[test]
fn depth_loss_gradient_reaches_time_pose_network() {
    let ds = tiny_dataset();
    let s1 = stage1(&ds, &tiny_config()).unwrap();
    check_pose_gradient(DepthPoseSource::TimePose(s1.model), &ds);
}

#[test]
fn depth_loss_gradient_reaches_pose_table() {
    let ds = tiny_dataset();
    check_pose_gradient(DepthPoseSource::Table(PoseTable::new(&nearest_rgb_poses(&ds), Vector3::new(1.0, -2.0, 3.0), 7.0).unwrap()), &ds);
}

#[test]
fn pose_table_poses_compose_with_extrinsic() {
    let ds = tiny_dataset();
    let poses = nearest_rgb_poses(&ds);
    let table = PoseTable::new(&poses, Vector3::new(1.0, -2.0, 3.0), 7.0).unwrap();
    for (i, p) in poses.iter().enumerate() {
        let a = rgb_to_depth_pose(&table.pose(i), &ds.extrinsic);
        let b = rgb_to_depth_pose(p, &ds.extrinsic);
        assert!(asrf::geom::pose_error(&a, &b).trans_m < 1e-12);
    }
}

#[test]
fn pose_gradients_stay_zero_without_pose_refinement() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let mut grid = new_field(&ds, &cfg).unwrap();
    let mut src = DepthPoseSource::Table(PoseTable::new(&vec![Pose::identity(); ds.depth.len()], Vector3::zeros(), 1.0).unwrap());
    let b = depth_batch(&ds);
    accumulate_step(&mut grid, Some(&mut src), &ds, &b, 1.0, 1.0, &exact_render(), None, false).unwrap();
    assert!(src.store().flat_grads().iter().all(|&g| g == 0.0));
    let rgb_only = RayBatch { rgb: b.rgb.clone(), depth: vec![] };
    accumulate_step(&mut grid, Some(&mut src), &ds, &rgb_only, 1.0, 1.0, &exact_render(), None, true).unwrap();
    assert!(src.store().flat_grads().iter().all(|&g| g == 0.0));
    assert!(grid.store.grad_norm() > 0.0);
}

#[test]
fn zero_depth_weight_reduces_to_rgb_training() {
    let ds = tiny_dataset();
    let mut cfg = tiny_config();
    cfg.joint.lambda_depth_max = 0.0;
    let s1 = stage1(&ds, &cfg).unwrap();
    let run = |mode: JointMode| {
        let mut grid = new_field(&ds, &cfg).unwrap();
        let mut src = DepthPoseSource::TimePose(s1.model.clone());
        let r = joint_optimize(&mut grid, &mut src, &ds, &cfg.joint, &cfg.render, mode, 5, 2).unwrap();
        (grid.store.flat_values(), src.store().flat_values(), r)
    };
    let (ga, pa, ra) = run(JointMode { use_depth: true, refine_poses: true });
    let (gb, pb, rb) = run(JointMode { use_depth: false, refine_poses: false });
    assert_eq!(ga, gb);
    assert_eq!(pa, pb);
    assert_eq!(pa, s1.model.store.flat_values());
    assert_eq!(ra.losses, rb.losses);
    assert!(ra.losses.iter().all(|l| l.depth == 0.0 && l.lambda_depth == 0.0));
}

#[test]
fn pipeline_is_reproducible_and_writes_artifacts() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&ds, &cfg, Variant::Full, Some(a.path())).unwrap();
    let rb = run_pipeline(&ds, &cfg, Variant::Full, Some(b.path())).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.losses, rb.losses);
    for f in ["metrics.json", "loss_curve.csv", "pose_errors.csv", "views.csv", STAGE3_CKPT] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    for f in [STAGE1_CKPT, STAGE2_CKPT, "report.json", "config.json"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    assert_eq!(read_run_config(a.path()).unwrap().config, cfg);
    assert_eq!(ra.views.len(), 2);
    assert!(ra.metrics.psnr.is_finite());
    let (_, poses) = load_stage3(a.path(), &cfg, ds.depth.len()).unwrap();
    assert!(matches!(poses, DepthPoseSource::TimePose(_)));
    let stages: Vec<&str> = ra.losses.iter().map(|l| l.stage.as_str()).collect();
    assert!(stages.contains(&"bootstrap") && stages.contains(&"joint"));
}

#[test]
fn missing_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_stage3(dir.path(), &tiny_config(), 3).unwrap_err();
    assert!(matches!(err, PipelineError::MissingStage { stage, .. } if stage == STAGE3_CKPT));
}

#[test]
fn ablation_shares_early_stages() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let reports = run_ablation(&ds, &cfg, &[Variant::NoJoint, Variant::RgbInit], Some(dir.path())).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].stage1_depth_pose, reports[1].stage1_depth_pose);
    // NoJoint keeps the stage-1 poses.
    let a = reports[0].final_depth_pose;
    let s = reports[0].stage1_depth_pose;
    assert!((a.mean_trans_m - s.mean_trans_m).abs() < 1e-12);
    let (_, poses) = load_stage3(&dir.path().join("rgb_init"), &cfg, ds.depth.len()).unwrap();
    assert!(matches!(poses, DepthPoseSource::Table(_)));
    assert!(dir.path().join("no_joint").join("metrics.json").exists());
}
