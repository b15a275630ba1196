use asrf::diffcore::gradcheck::{central_difference, max_relative_error};
use asrf::diffcore::Checkpoint;
use asrf::geom::{pose_error, Pose};
use asrf::timepose::{
    fit_timepose, linear_interp_pose, objective, pose_loss_terms, pose_errors, speed_loss_terms, Normalization,
    TimePoseConfig, TimePoseError, TimePoseModel, TimedPoseSample,
};
use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> TimePoseConfig {
    TimePoseConfig {
        levels: 4,
        base_resolution: 4,
        hidden: vec![16, 16],
        skip_layer: Some(1),
        table_init: 0.1,
        head_init_scale: 1.0,
        iters: 300,
        ..TimePoseConfig::default()
    }
}

fn fit_config(iters: usize) -> TimePoseConfig {
    TimePoseConfig {
        hidden: vec![64, 64],
        skip_layer: Some(1),
        iters,
        ..TimePoseConfig::default()
    }
}

fn unit_norm() -> Normalization {
    Normalization {
        t_min: 0.0,
        t_max: 10.0,
        center: Vector3::new(1.0, -2.0, 0.5),
        scale: 3.0,
    }
}

fn trajectory(n: usize, span: f64, f: impl Fn(f64) -> Pose) -> Vec<TimedPoseSample> {
    (0..n)
        .map(|i| {
            let t = span * i as f64 / (n - 1) as f64;
            TimedPoseSample::new(t, f(t))
        })
        .collect()
}

fn smooth_pose(t: f64) -> Pose {
    let x = Vector3::new(10.0 * (0.3 * t).sin(), 4.0 * t, 2.0 + (0.5 * t).cos());
    let q = UnitQuaternion::from_euler_angles(0.2 * (0.4 * t).sin(), -0.6, 0.15 * t);
    Pose::from_parts(q, x)
}

#[test]
fn constant_network_gives_bias_pose_everywhere() {
    let mut model = TimePoseModel::new(small_config(), unit_norm()).unwrap();
    for p in model.store.iter_mut() {
        if p.name.starts_with("decoder") {
            p.value.fill(0.0);
        }
    }
    let b = model.decoder().output_bias();
    {
        let bias = model.store.value_mut(b);
        bias[[0, 0]] = 0.5;
        bias[[0, 1]] = -1.0;
        bias[[0, 2]] = 2.0;
        bias[[0, 3]] = 1.0;
    }
    let expect = Vector3::new(1.0 + 1.5, -2.0 - 3.0, 0.5 + 6.0);
    for &t in &[0.0, 1.3, 5.0, 9.99, 10.0] {
        let p = model.pose_at(t);
        assert!((p.translation() - expect).norm() < 1e-12);
        assert_eq!(p.quaternion_wxyz(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(model.velocity_at(t), Vector3::zeros());
    }
}

#[test]
fn degenerate_quaternion_falls_back_to_identity() {
    let mut model = TimePoseModel::new(small_config(), unit_norm()).unwrap();
    for p in model.store.iter_mut() {
        if p.name.starts_with("decoder") {
            p.value.fill(0.0);
        }
    }
    let (batch, _) = model.forward_batch(&[1.0, 2.0], false).unwrap();
    assert_eq!(batch.degenerate, vec![true, true]);
    assert_eq!(batch.pose(0).quaternion_wxyz(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn out_of_span_queries_are_clamped_and_flagged() {
    let model = TimePoseModel::new(small_config(), unit_norm()).unwrap();
    let (batch, _) = model.forward_batch(&[-1.0, 5.0, 10.5], true).unwrap();
    assert_eq!(batch.clamped, vec![true, false, true]);
    assert_eq!(batch.pose(0), model.pose_at(0.0));
    assert_eq!(batch.pose(2), model.pose_at(10.0));
    let v = batch.velocity.unwrap();
    assert_eq!(v.row(0).to_vec(), vec![0.0; 3]);
}

#[test]
fn velocity_matches_finite_difference() {
    let model = TimePoseModel::new(small_config(), unit_norm()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t = rng.gen_range(0.5..9.5);
        let v = model.velocity_at(t);
        let h = 1e-5;
        let fd = (model.pose_at(t + h).translation() - model.pose_at(t - h).translation()) / (2.0 * h);
        let err = (v - fd).norm() / fd.norm().max(1e-3);
        assert!(err < 1e-3, "t={t}: {v:?} vs {fd:?}");
    }
}

/// Full objective (pose + speed + log variances) against central differences
/// over a random subset of every parameter tensor.
fn check_objective_gradients(config: TimePoseConfig) {
    let samples = TimedPoseSample::with_central_velocities(&trajectory(12, 10.0, smooth_pose));
    let mut model = TimePoseModel::new(config, unit_norm()).unwrap();
    model.set_log_variances(0.3, -0.2);
    model.store.zero_grad();
    objective(&mut model, &samples, 0.5).unwrap();
    let analytic = model.store.flat_grads();
    let base = model.store.flat_values();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut idx: Vec<usize> = Vec::new();
    let mut offset = 0;
    let sizes: Vec<usize> = model.store.iter().map(|p| p.value.len()).collect();
    for n in sizes {
        for _ in 0..4.min(n) {
            idx.push(offset + rng.gen_range(0..n));
        }
        offset += n;
    }
    idx.sort_unstable();
    idx.dedup();
    let probe = |model: &mut TimePoseModel, x: &[f64]| {
        let mut v = base.clone();
        for (k, &i) in idx.iter().enumerate() {
            v[i] = x[k];
        }
        model.store.set_flat_values(&v).unwrap();
        model.store.zero_grad();
        objective(model, &samples, 0.5).unwrap().total
    };
    let x0: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
    let fd = central_difference(|x| probe(&mut model, x), &x0, 1e-5);
    let an: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    // The objective is O(100) here, so FD round-off is around 1e-8.
    let err = max_relative_error(&an, &fd, 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn objective_gradients_match_finite_differences() {
    check_objective_gradients(small_config());
}

#[test]
fn objective_gradients_through_hashed_levels() {
    let cfg = TimePoseConfig {
        max_dense_nodes: 10,
        hash_table_size: 7,
        ..small_config()
    };
    let model = TimePoseModel::new(cfg.clone(), unit_norm()).unwrap();
    assert!(model.levels().iter().any(|l| l.table_rows() == 7));
    check_objective_gradients(cfg);
}

fn batch_from(poses: &[(Vector3<f64>, [f64; 4])]) -> asrf::timepose::TimePoseBatch {
    let n = poses.len();
    let mut tr = Array2::zeros((n, 3));
    let mut q = Array2::zeros((n, 4));
    for (i, (x, qq)) in poses.iter().enumerate() {
        for c in 0..3 {
            tr[[i, c]] = x[c];
        }
        for c in 0..4 {
            q[[i, c]] = qq[c];
        }
    }
    asrf::timepose::TimePoseBatch {
        translation: tr,
        quaternion: q,
        velocity: None,
        clamped: vec![false; n],
        degenerate: vec![false; n],
    }
}

#[test]
fn pose_loss_zero_for_perfect_predictions() {
    let samples = trajectory(5, 4.0, smooth_pose);
    let preds: Vec<_> = samples.iter().map(|s| (*s.pose.translation(), s.pose.quaternion_wxyz())).collect();
    let terms = pose_loss_terms(&batch_from(&preds), &samples, (0.0, 0.0)).unwrap();
    assert!(terms.total.abs() < 1e-24);
    assert!(terms.g_translation.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn pose_loss_matches_hand_arithmetic() {
    let samples = vec![
        TimedPoseSample::new(0.0, Pose::identity()),
        TimedPoseSample::new(1.0, Pose::from_translation(1.0, 2.0, 3.0)),
    ];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let preds = vec![
        (Vector3::new(0.5, 0.0, 0.0), [s, s, 0.0, 0.0]),
        // Opposite hemisphere: aligned to (1, 0, 0, 0) before differencing.
        (Vector3::new(1.0, 1.0, 3.0), [-1.0, 0.0, 0.0, 0.0]),
    ];
    let batch = batch_from(&preds);
    // L_trans = (0.25 + 1) / 2; L_rot = ((s-1)^2 + s^2 + 0) / 2
    let l_trans = 0.625;
    let l_rot = ((s - 1.0).powi(2) + s * s) / 2.0;
    let unit = pose_loss_terms(&batch, &samples, (0.0, 0.0)).unwrap();
    assert!((unit.l_trans - l_trans).abs() < 1e-12);
    assert!((unit.l_rot - l_rot).abs() < 1e-12);
    assert!((unit.total - (l_trans + l_rot)).abs() < 1e-12);
    let (st, sr) = (0.7, -0.4);
    let weighted = pose_loss_terms(&batch, &samples, (st, sr)).unwrap();
    let expect = l_trans * (-st as f64).exp() + st + l_rot * (-sr as f64).exp() + sr;
    assert!((weighted.total - expect).abs() < 1e-12);
    assert!((weighted.g_log_var[0] - (1.0 - l_trans * (-st as f64).exp())).abs() < 1e-12);
}

#[test]
fn speed_loss_of_constant_error() {
    let c = 0.3;
    let samples: Vec<_> = (0..4)
        .map(|i| TimedPoseSample {
            velocity: Some(Vector3::new(i as f64, 1.0, -2.0)),
            ..TimedPoseSample::new(i as f64, Pose::identity())
        })
        .collect();
    let mut v = Array2::zeros((4, 3));
    for (i, s) in samples.iter().enumerate() {
        for k in 0..3 {
            v[[i, k]] = s.velocity.unwrap()[k] + c;
        }
    }
    let t = speed_loss_terms(&v, &samples).unwrap();
    assert!((t.value - 3.0 * c * c).abs() < 1e-12);
    let exact = speed_loss_terms(&(&v - c), &samples).unwrap();
    assert!(exact.value.abs() < 1e-24);
}

#[test]
fn speed_loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 17;
    let samples: Vec<_> = (0..n)
        .map(|i| TimedPoseSample {
            velocity: Some(Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0))),
            ..TimedPoseSample::new(i as f64, Pose::identity())
        })
        .collect();
    let v = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-5.0..5.0));
    let mut brute = 0.0;
    for i in 0..n {
        let gt = samples[i].velocity.unwrap();
        brute += (Vector3::new(v[[i, 0]], v[[i, 1]], v[[i, 2]]) - gt).norm_squared();
    }
    brute /= n as f64;
    assert!((speed_loss_terms(&v, &samples).unwrap().value - brute).abs() < 1e-10);
}

#[test]
fn losses_reject_bad_batches() {
    let empty = batch_from(&[]);
    assert!(matches!(pose_loss_terms(&empty, &[], (0.0, 0.0)), Err(TimePoseError::EmptyBatch)));
    let samples = vec![TimedPoseSample::new(0.0, Pose::identity())];
    assert!(matches!(
        speed_loss_terms(&Array2::zeros((1, 3)), &samples),
        Err(TimePoseError::MissingVelocity(0))
    ));
}

#[test]
fn fit_rejects_bad_inputs() {
    let cfg = small_config();
    let two = trajectory(2, 1.0, smooth_pose);
    assert!(matches!(fit_timepose(&two, &cfg), Err(TimePoseError::TooFewSamples { .. })));
    let mut s = trajectory(5, 4.0, smooth_pose);
    s.swap(1, 2);
    assert!(matches!(fit_timepose(&s, &cfg), Err(TimePoseError::NonMonotone { index: 2, .. })));
}

#[test]
fn fits_constant_trajectory() {
    let pose = Pose::from_axis_angle(Vector3::new(1.0, 2.0, 0.5).normalize(), 0.8, Vector3::new(3.0, -1.0, 20.0));
    let samples = trajectory(20, 5.0, |_| pose);
    let cfg = fit_config(1000);
    let (model, report) = fit_timepose(&samples, &cfg).unwrap();
    assert!(report.train.max_trans_m < 0.01, "{:?}", report.train);
    assert!(report.train.max_rot_deg < 0.1, "{:?}", report.train);
    assert!(report.loss_curve.first().unwrap().1 > report.final_loss);
    assert_eq!(pose_errors(&model, &samples), report.train);
}

#[test]
fn fitted_linear_motion_recovers_velocity() {
    let samples = trajectory(40, 10.0, |t| Pose::from_translation(2.0 * t, 0.0, 0.0));
    let cfg = fit_config(1000);
    let (model, _) = fit_timepose(&samples, &cfg).unwrap();
    for &t in &[1.0, 3.3, 5.0, 8.7] {
        let v = model.velocity_at(t);
        assert!((v - Vector3::new(2.0, 0.0, 0.0)).norm() < 0.1, "t={t}: {v:?}");
    }
}

#[test]
fn midpoint_queries_track_linear_interpolation() {
    let all = trajectory(81, 20.0, smooth_pose);
    let train: Vec<_> = all.iter().step_by(2).cloned().collect();
    let mid: Vec<_> = all.iter().skip(1).step_by(2).cloned().collect();
    let (model, _) = fit_timepose(&train, &fit_config(3000)).unwrap();
    let mut net = 0.0;
    let mut lin = 0.0;
    for s in &mid {
        net += pose_error(&model.pose_at(s.t), &s.pose).trans_m;
        lin += pose_error(&linear_interp_pose(&train, s.t).unwrap(), &s.pose).trans_m;
    }
    assert!(net <= 2.0 * lin, "network {net} vs linear {lin}");
}

#[test]
fn speed_term_smooths_jittery_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean = |t: f64| Vector3::new(3.0 * t, 5.0 * (0.2 * t).sin(), 10.0);
    let samples: Vec<_> = (0..60)
        .map(|i| {
            let t = i as f64 * 0.25;
            let x = clean(t) + Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            TimedPoseSample::new(t, Pose::from_parts(UnitQuaternion::identity(), x))
        })
        .collect();
    let rms = |lambda: f64| {
        let cfg = TimePoseConfig {
            lambda_speed: lambda,
            ..fit_config(1500)
        };
        let (model, _) = fit_timepose(&samples, &cfg).unwrap();
        let mut acc = 0.0;
        let n = 400;
        for k in 0..n {
            let t = 14.75 * (k as f64 + 0.5) / n as f64;
            let true_v = Vector3::new(3.0, (0.2 * t).cos(), 0.0);
            acc += (model.velocity_at(t) - true_v).norm_squared();
        }
        (acc / n as f64).sqrt()
    };
    let plain = rms(0.0);
    let regularized = rms(0.01);
    assert!(regularized <= plain, "regularized {regularized} vs plain {plain}");
}

#[test]
fn fit_is_reproducible() {
    let samples = trajectory(15, 3.0, smooth_pose);
    let cfg = TimePoseConfig { iters: 50, ..small_config() };
    let (a, ra) = fit_timepose(&samples, &cfg).unwrap();
    let (b, rb) = fit_timepose(&samples, &cfg).unwrap();
    assert_eq!(a.store.flat_values(), b.store.flat_values());
    assert_eq!(ra.final_loss.to_bits(), rb.final_loss.to_bits());
}

#[test]
fn minibatch_fit_runs() {
    let samples = trajectory(30, 3.0, smooth_pose);
    let cfg = TimePoseConfig {
        iters: 20,
        batch_size: 8,
        ..small_config()
    };
    let (_, report) = fit_timepose(&samples, &cfg).unwrap();
    assert!(report.final_loss.is_finite());
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let samples = trajectory(10, 3.0, smooth_pose);
    let cfg = TimePoseConfig { iters: 30, ..small_config() };
    let (model, _) = fit_timepose(&samples, &cfg).unwrap();
    let mut ck = Checkpoint::new();
    model.save_into(&mut ck, "phi");
    let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let back = TimePoseModel::load_from(cfg, &ck, "phi").unwrap();
    for &t in &[0.0, 1.1, 3.0] {
        assert_eq!(model.pose_at(t), back.pose_at(t));
    }
}

#[test]
fn central_velocities_use_one_sided_ends() {
    let s = trajectory(4, 3.0, |t| Pose::from_translation(t * t, 0.0, 0.0));
    let v = TimedPoseSample::with_central_velocities(&s);
    let vx: Vec<f64> = v.iter().map(|s| s.velocity.unwrap().x).collect();
    assert_eq!(vx, vec![1.0, 2.0, 4.0, 5.0]);
}

#[test]
fn sample_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.csv");
    let s = trajectory(6, 2.5, smooth_pose);
    asrf::timepose::write_samples_csv(&path, &s).unwrap();
    let back = asrf::timepose::read_samples_csv(&path).unwrap();
    for (a, b) in s.iter().zip(&back) {
        assert_eq!(a.t, b.t);
        let e = pose_error(&a.pose, &b.pose);
        assert!(e.trans_m < 1e-12 && e.rot_deg < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_quaternion_is_unit(t in -1.0f64..11.0, seed in 0u64..4) {
        let cfg = TimePoseConfig { seed, ..small_config() };
        let model = TimePoseModel::new(cfg, unit_norm()).unwrap();
        let q = model.pose_at(t).quaternion_wxyz();
        let n: f64 = q.iter().map(|c| c * c).sum();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_loss_ignores_ground_truth_sign(
        w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
        st in -1.0f64..1.0, sr in -1.0f64..1.0,
    ) {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        prop_assume!(norm > 1e-3);
        let gt = Pose::new([w, x, y, z], Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let q = gt.quaternion_wxyz();
        let flipped = Pose::from_parts(
            UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(-q[0], -q[1], -q[2], -q[3])),
            *gt.translation(),
        );
        let pred = batch_from(&[(Vector3::new(0.0, 2.0, 3.5), [0.6, 0.0, 0.8, 0.0])]);
        let a = pose_loss_terms(&pred, &[TimedPoseSample::new(0.0, gt)], (st, sr)).unwrap();
        let b = pose_loss_terms(&pred, &[TimedPoseSample::new(0.0, flipped)], (st, sr)).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
        prop_assert!(a.l_trans >= 0.0 && a.l_rot >= 0.0);
        prop_assert!(a.total >= st + sr - 1e-12);
    }
}
