use ndarray::Array2;

use super::model::{TimePoseBatch, TimePoseModel};
use super::{TimePoseError, TimedPoseSample};

/// Pose-loss value and its gradients with respect to network outputs.
#[derive(Debug, Clone)]
pub struct PoseLossTerms {
    pub total: f64,
    pub l_trans: f64,
    pub l_rot: f64,
    pub g_translation: Array2<f64>,
    pub g_quaternion: Array2<f64>,
    /// `d total / d (s_trans, s_rot)`.
    pub g_log_var: [f64; 2],
}

/// Uncertainty-weighted translation + rotation MSE.
///
/// `L_trans` sums squared components and averages over the batch. The
/// predicted quaternion is sign-aligned with the ground truth before
/// differencing, so `q` and `-q` give the same loss.
pub fn pose_loss_terms(
    batch: &TimePoseBatch,
    samples: &[TimedPoseSample],
    log_var: (f64, f64),
) -> Result<PoseLossTerms, TimePoseError> {
    let n = samples.len();
    if n == 0 {
        return Err(TimePoseError::EmptyBatch);
    }
    let inv_n = 1.0 / n as f64;
    let mut g_translation = Array2::zeros((n, 3));
    let mut g_quaternion = Array2::zeros((n, 4));
    let (mut l_trans, mut l_rot) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let x = s.pose.translation();
        for c in 0..3 {
            let r = batch.translation[[i, c]] - x[c];
            l_trans += r * r;
            g_translation[[i, c]] = 2.0 * r * inv_n;
        }
        let q = s.pose.quaternion_wxyz();
        let qh = batch.quaternion.row(i);
        let dot: f64 = (0..4).map(|c| q[c] * qh[c]).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            let r = sign * qh[c] - q[c];
            l_rot += r * r;
            g_quaternion[[i, c]] = 2.0 * sign * r * inv_n;
        }
    }
    l_trans *= inv_n;
    l_rot *= inv_n;
    let (s_t, s_r) = log_var;
    let (w_t, w_r) = ((-s_t).exp(), (-s_r).exp());
    g_translation *= w_t;
    g_quaternion *= w_r;
    Ok(PoseLossTerms {
        total: l_trans * w_t + s_t + l_rot * w_r + s_r,
        l_trans,
        l_rot,
        g_translation,
        g_quaternion,
        g_log_var: [1.0 - l_trans * w_t, 1.0 - l_rot * w_r],
    })
}

#[derive(Debug, Clone)]
pub struct SpeedLossTerms {
    pub value: f64,
    pub g_velocity: Array2<f64>,
}

/// Mean over the batch of `|v - v_hat|^2`.
pub fn speed_loss_terms(velocity: &Array2<f64>, samples: &[TimedPoseSample]) -> Result<SpeedLossTerms, TimePoseError> {
    let n = samples.len();
    if n == 0 {
        return Err(TimePoseError::EmptyBatch);
    }
    let inv_n = 1.0 / n as f64;
    let mut g_velocity = Array2::zeros((n, 3));
    let mut value = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let v = s.velocity.ok_or(TimePoseError::MissingVelocity(i))?;
        for c in 0..3 {
            let r = velocity[[i, c]] - v[c];
            value += r * r;
            g_velocity[[i, c]] = 2.0 * r * inv_n;
        }
    }
    Ok(SpeedLossTerms {
        value: value * inv_n,
        g_velocity,
    })
}

/// Evaluates the pose loss and accumulates its gradients into `model.store`.
pub fn pose_loss(model: &mut TimePoseModel, samples: &[TimedPoseSample]) -> Result<PoseLossTerms, TimePoseError> {
    if samples.is_empty() {
        return Err(TimePoseError::EmptyBatch);
    }
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (batch, trace) = model.forward_batch(&ts, false)?;
    let terms = pose_loss_terms(&batch, samples, model.log_variances())?;
    model.backward(&trace, &terms.g_translation, &terms.g_quaternion, None)?;
    add_log_var_grad(model, terms.g_log_var);
    Ok(terms)
}

/// Evaluates the speed loss and accumulates its gradients.
pub fn speed_loss(model: &mut TimePoseModel, samples: &[TimedPoseSample]) -> Result<SpeedLossTerms, TimePoseError> {
    if samples.is_empty() {
        return Err(TimePoseError::EmptyBatch);
    }
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (batch, trace) = model.forward_batch(&ts, true)?;
    let terms = speed_loss_terms(batch.velocity.as_ref().unwrap(), samples)?;
    let n = samples.len();
    model.backward(&trace, &Array2::zeros((n, 3)), &Array2::zeros((n, 4)), Some(&terms.g_velocity))?;
    Ok(terms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub pose: f64,
    pub speed: f64,
    pub l_trans: f64,
    pub l_rot: f64,
}

/// `pose_loss + lambda_speed * speed_loss` from a single forward pass,
/// accumulating gradients. The speed term is skipped when `lambda_speed` is 0.
pub fn objective(model: &mut TimePoseModel, samples: &[TimedPoseSample], lambda_speed: f64) -> Result<Objective, TimePoseError> {
    if samples.is_empty() {
        return Err(TimePoseError::EmptyBatch);
    }
    let with_speed = lambda_speed != 0.0;
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (batch, trace) = model.forward_batch(&ts, with_speed)?;
    let pose = pose_loss_terms(&batch, samples, model.log_variances())?;
    let (speed, g_vel) = if with_speed {
        let mut st = speed_loss_terms(batch.velocity.as_ref().unwrap(), samples)?;
        st.g_velocity *= lambda_speed;
        (st.value, Some(st.g_velocity))
    } else {
        (0.0, None)
    };
    model.backward(&trace, &pose.g_translation, &pose.g_quaternion, g_vel.as_ref())?;
    add_log_var_grad(model, pose.g_log_var);
    Ok(Objective {
        total: pose.total + lambda_speed * speed,
        pose: pose.total,
        speed,
        l_trans: pose.l_trans,
        l_rot: pose.l_rot,
    })
}

fn add_log_var_grad(model: &mut TimePoseModel, g: [f64; 2]) {
    let id = model.log_var_param();
    let grad = model.store.grad_mut(id);
    grad[[0, 0]] += g[0];
    grad[[0, 1]] += g[1];
}
