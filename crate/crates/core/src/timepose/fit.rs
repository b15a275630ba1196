use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::objective;
use super::model::{Normalization, TimePoseConfig, TimePoseModel};
use super::{validate_samples, TimePoseError, TimedPoseSample};
use crate::diffcore::{Adam, AdamConfig};
use crate::geom::pose_error;

/// Summary of pose errors over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseErrorStats {
    pub count: usize,
    pub mean_trans_m: f64,
    pub mean_rot_deg: f64,
    pub max_trans_m: f64,
    pub max_rot_deg: f64,
}

impl PoseErrorStats {
    pub fn from_errors(errors: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut s = Self::default();
        for (tr, rot) in errors {
            s.count += 1;
            s.mean_trans_m += tr;
            s.mean_rot_deg += rot;
            s.max_trans_m = s.max_trans_m.max(tr);
            s.max_rot_deg = s.max_rot_deg.max(rot);
        }
        if s.count > 0 {
            s.mean_trans_m /= s.count as f64;
            s.mean_rot_deg /= s.count as f64;
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// `(iteration, objective)` at every logged step.
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub train: PoseErrorStats,
    pub holdout: Option<PoseErrorStats>,
    pub log_variances: (f64, f64),
}

/// Fits a time-pose model to all samples and reports the training error.
pub fn fit_timepose(samples: &[TimedPoseSample], config: &TimePoseConfig) -> Result<(TimePoseModel, FitReport), TimePoseError> {
    fit_timepose_with_holdout(samples, &[], config)
}

/// Fits on `train` and additionally reports errors at `holdout` timestamps.
///
/// Missing ground-truth velocities are filled in by neighbor differences.
pub fn fit_timepose_with_holdout(
    train: &[TimedPoseSample],
    holdout: &[TimedPoseSample],
    config: &TimePoseConfig,
) -> Result<(TimePoseModel, FitReport), TimePoseError> {
    validate_samples(train, 3)?;
    let train = if train.iter().all(|s| s.velocity.is_some()) {
        train.to_vec()
    } else {
        TimedPoseSample::with_central_velocities(train)
    };
    let mut effective = config.clone();
    if config.min_samples_per_cell > 0.0 {
        let cap = ((train.len() as f64 / config.min_samples_per_cell).floor() as usize).max(config.base_resolution);
        effective.max_resolution = Some(effective.max_resolution.map_or(cap, |r| r.min(cap)));
    }
    let config = &effective;
    let mut model = TimePoseModel::new(config.clone(), normalization_for(&train))?;
    let mut adam = Adam::new(
        AdamConfig {
            beta2: config.adam_beta2,
            ..AdamConfig::with_lr(config.lr)
        },
        &model.store,
    );
    adam.set_lr_scale(&model.store, "log_var", config.log_var_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let log_every = (config.iters / 100).max(1);
    let mut loss_curve = Vec::new();
    let mut last = f64::NAN;
    let mut batch = Vec::new();
    for it in 0..config.iters {
        let frac = it as f64 / config.iters.max(1) as f64;
        adam.set_lr(config.lr * config.lr_final_factor.powf(frac));
        let obj = if config.batch_size == 0 || config.batch_size >= train.len() {
            objective(&mut model, &train, config.lambda_speed)?
        } else {
            let mut idx = sample(&mut rng, train.len(), config.batch_size).into_vec();
            idx.sort_unstable();
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i].clone()));
            objective(&mut model, &batch, config.lambda_speed)?
        };
        adam.step(&mut model.store)?;
        last = obj.total;
        if it % log_every == 0 || it + 1 == config.iters {
            loss_curve.push((it, obj.total));
            log::debug!("timepose iter {it}: loss {:.6e} (trans {:.3e}, rot {:.3e}, speed {:.3e})", obj.total, obj.l_trans, obj.l_rot, obj.speed);
        }
    }
    let train_stats = pose_errors(&model, &train);
    let holdout_stats = (!holdout.is_empty()).then(|| pose_errors(&model, holdout));
    let report = FitReport {
        loss_curve,
        final_loss: last,
        train: train_stats,
        holdout: holdout_stats,
        log_variances: model.log_variances(),
    };
    Ok((model, report))
}

/// Translation/rotation errors of the model at the sample timestamps.
pub fn pose_errors(model: &TimePoseModel, samples: &[TimedPoseSample]) -> PoseErrorStats {
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let poses = model.poses_at(&ts);
    PoseErrorStats::from_errors(poses.iter().zip(samples).map(|(p, s)| {
        let e = pose_error(p, &s.pose);
        (e.trans_m, e.rot_deg)
    }))
}

fn normalization_for(samples: &[TimedPoseSample]) -> Normalization {
    let n = samples.len() as f64;
    let center = samples.iter().fold(Vector3::zeros(), |acc, s| acc + s.pose.translation()) / n;
    let radius = samples
        .iter()
        .map(|s| (s.pose.translation() - center).amax())
        .fold(0.0, f64::max);
    Normalization {
        t_min: samples[0].t,
        t_max: samples[samples.len() - 1].t,
        center,
        scale: radius.max(1.0),
    }
}
