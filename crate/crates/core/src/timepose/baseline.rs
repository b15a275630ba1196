use nalgebra::UnitQuaternion;

use super::{TimePoseError, TimedPoseSample};
use crate::geom::Pose;

/// Piecewise-linear translation and slerped rotation between the two
/// keyframes bracketing `t`; clamped to the first/last keyframe outside.
pub fn linear_interp_pose(keyframes: &[TimedPoseSample], t: f64) -> Result<Pose, TimePoseError> {
    let (first, last) = match (keyframes.first(), keyframes.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(TimePoseError::EmptyBatch),
    };
    if t <= first.t {
        return Ok(first.pose);
    }
    if t >= last.t {
        return Ok(last.pose);
    }
    let j = keyframes.partition_point(|k| k.t <= t);
    let (a, b) = (&keyframes[j - 1], &keyframes[j]);
    let s = (t - a.t) / (b.t - a.t);
    let x = a.pose.translation().lerp(b.pose.translation(), s);
    let qa = *a.pose.rotation();
    let mut qb = *b.pose.rotation();
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = qa.try_slerp(&qb, s, 1e-12).unwrap_or(qa);
    Ok(Pose::from_parts(q, x))
}
