use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use ndarray::Array2;

use super::PipelineError;
use crate::diffcore::{Adam, AdamConfig, Checkpoint, ParamId, ParamStore};
use crate::geom::{pose_error, rgb_to_depth_pose, rotate_vjp, Extrinsic, Intrinsics, Pose, Ray};
use crate::synth::AsyncDataset;
use crate::timepose::{linear_interp_pose, PoseErrorStats, TimePoseConfig, TimePoseModel, TimePoseTrace, TimedPoseSample};

/// Learnable per-frame RGB-camera poses at the depth timestamps.
/// Translations are stored as `(t - center) / scale`, so one learning rate
/// means the same step as for a time-pose network with that normalization.
#[derive(Debug, Clone)]
pub struct PoseTable {
    pub store: ParamStore,
    trans: ParamId,
    quat: ParamId,
    center: Vector3<f64>,
    scale: f64,
}

impl PoseTable {
    pub fn new(poses: &[Pose], center: Vector3<f64>, scale: f64) -> Result<Self, PipelineError> {
        if !(scale > 0.0) {
            return Err(PipelineError::InvalidConfig(format!("pose table scale must be positive, got {scale}")));
        }
        let n = poses.len();
        let mut store = ParamStore::new();
        let t = Array2::from_shape_fn((n, 3), |(i, c)| (poses[i].translation()[c] - center[c]) / scale);
        let q = Array2::from_shape_fn((n, 4), |(i, c)| poses[i].quaternion_wxyz()[c]);
        let trans = store.add("pose_table.trans", t)?;
        let quat = store.add("pose_table.quat", q)?;
        Ok(Self {
            store,
            trans,
            quat,
            center,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.store.value(self.trans).nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unit(&self, i: usize) -> (Vector3<f64>, UnitQuaternion<f64>, f64) {
        let t = self.store.value(self.trans);
        let q = self.store.value(self.quat);
        let raw = Quaternion::new(q[[i, 0]], q[[i, 1]], q[[i, 2]], q[[i, 3]]);
        let norm = raw.norm();
        let p = Vector3::new(t[[i, 0]], t[[i, 1]], t[[i, 2]]) * self.scale + self.center;
        (p, UnitQuaternion::new_normalize(raw), norm)
    }

    pub fn pose(&self, i: usize) -> Pose {
        let (t, q, _) = self.unit(i);
        Pose::from_parts(q, t)
    }
}

/// Where depth-frame poses come from during stage 3.
#[derive(Debug, Clone)]
pub enum DepthPoseSource {
    TimePose(TimePoseModel),
    Table(PoseTable),
}

/// Poses evaluated for a set of depth frames, with what the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct PoseBatch {
    pub frames: Vec<usize>,
    /// RGB-camera translation and unit quaternion per frame.
    pub translation: Vec<Vector3<f64>>,
    pub rotation: Vec<UnitQuaternion<f64>>,
    trace: Option<TimePoseTrace>,
}

impl PoseBatch {
    pub fn rgb_pose(&self, k: usize) -> Pose {
        Pose::from_parts(self.rotation[k], self.translation[k])
    }
}

impl DepthPoseSource {
    /// RGB-camera poses of the given depth frames.
    pub fn forward(&self, frames: &[usize], times: &[f64]) -> Result<PoseBatch, PipelineError> {
        match self {
            DepthPoseSource::TimePose(model) => {
                let ts: Vec<f64> = frames.iter().map(|&j| times[j]).collect();
                let (b, trace) = model.forward_batch(&ts, false)?;
                let translation = (0..ts.len())
                    .map(|i| Vector3::new(b.translation[[i, 0]], b.translation[[i, 1]], b.translation[[i, 2]]))
                    .collect();
                let rotation = (0..ts.len())
                    .map(|i| {
                        let q = b.quaternion.row(i);
                        UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
                    })
                    .collect();
                Ok(PoseBatch {
                    frames: frames.to_vec(),
                    translation,
                    rotation,
                    trace: Some(trace),
                })
            }
            DepthPoseSource::Table(table) => {
                let (translation, rotation) = frames
                    .iter()
                    .map(|&j| {
                        let (t, q, _) = table.unit(j);
                        (t, q)
                    })
                    .unzip();
                Ok(PoseBatch {
                    frames: frames.to_vec(),
                    translation,
                    rotation,
                    trace: None,
                })
            }
        }
    }

    /// Accumulates gradients given `d loss / d translation` and
    /// `d loss / d (unit quaternion components)` per batch entry.
    pub fn backward(&mut self, batch: &PoseBatch, g_trans: &[Vector3<f64>], g_quat: &[[f64; 4]]) -> Result<(), PipelineError> {
        let n = batch.frames.len();
        match self {
            DepthPoseSource::TimePose(model) => {
                let gt = Array2::from_shape_fn((n, 3), |(i, c)| g_trans[i][c]);
                let gq = Array2::from_shape_fn((n, 4), |(i, c)| g_quat[i][c]);
                let trace = batch.trace.as_ref().ok_or(PipelineError::Stage("pose batch lacks a time-pose trace"))?;
                model.backward(trace, &gt, &gq, None)?;
            }
            DepthPoseSource::Table(table) => {
                for (k, &j) in batch.frames.iter().enumerate() {
                    let (_, q, norm) = table.unit(j);
                    let qc = q.quaternion();
                    let qv = [qc.w, qc.i, qc.j, qc.k];
                    let dot: f64 = (0..4).map(|c| qv[c] * g_quat[k][c]).sum();
                    let gq = table.store.grad_mut(table.quat);
                    for c in 0..4 {
                        gq[[j, c]] += (g_quat[k][c] - qv[c] * dot) / norm;
                    }
                    let scale = table.scale;
                    let gt = table.store.grad_mut(table.trans);
                    for c in 0..3 {
                        gt[[j, c]] += scale * g_trans[k][c];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            DepthPoseSource::TimePose(m) => &m.store,
            DepthPoseSource::Table(t) => &t.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            DepthPoseSource::TimePose(m) => &mut m.store,
            DepthPoseSource::Table(t) => &mut t.store,
        }
    }

    /// Optimizer over the pose parameters. The time-pose log-variances are
    /// frozen because the pose loss is inactive in this stage.
    pub fn optimizer(&self, lr: f64) -> Adam {
        let mut adam = Adam::new(AdamConfig::with_lr(lr), self.store());
        adam.set_lr_scale(self.store(), "log_var", 0.0);
        adam
    }

    /// RGB-camera pose of every depth frame.
    pub fn all_poses(&self, times: &[f64]) -> Vec<Pose> {
        match self {
            DepthPoseSource::TimePose(m) => m.poses_at(times),
            DepthPoseSource::Table(t) => (0..t.len()).map(|i| t.pose(i)).collect(),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        match self {
            DepthPoseSource::TimePose(m) => m.save_into(ck, prefix),
            DepthPoseSource::Table(t) => {
                ck.insert_store(prefix, &t.store);
                let c = t.center;
                ck.insert(format!("{prefix}/meta.table_frame"), vec![4], vec![c.x, c.y, c.z, t.scale]);
            }
        }
    }

    /// Restores a source saved by [`Self::save_into`]; a time-pose model is
    /// expected when the checkpoint holds its metadata.
    pub fn load_from(config: &TimePoseConfig, ck: &Checkpoint, prefix: &str, frames: usize) -> Result<Self, PipelineError> {
        if ck.get(&format!("{prefix}/pose_table.trans")).is_some() {
            let f = ck.scalars(&format!("{prefix}/meta.table_frame"), 4)?;
            let mut table = PoseTable::new(&vec![Pose::identity(); frames], Vector3::new(f[0], f[1], f[2]), f[3])?;
            ck.restore_store(prefix, &mut table.store)?;
            Ok(DepthPoseSource::Table(table))
        } else {
            Ok(DepthPoseSource::TimePose(TimePoseModel::load_from(config.clone(), ck, prefix)?))
        }
    }
}

/// Pose-error summary of depth-sensor poses `rgb_poses[j] o E` against the
/// ground truth.
pub fn depth_pose_errors(rgb_poses: &[Pose], extrinsic: &Extrinsic, gt: &[Pose]) -> PoseErrorStats {
    PoseErrorStats::from_errors(rgb_poses.iter().zip(gt).map(|(p, g)| {
        let e = pose_error(&rgb_to_depth_pose(p, extrinsic), g);
        (e.trans_m, e.rot_deg)
    }))
}

/// RGB-camera poses at the depth timestamps from the nearest RGB frame.
pub fn nearest_rgb_poses(ds: &AsyncDataset) -> Vec<Pose> {
    ds.depth
        .iter()
        .map(|d| {
            let i = ds.rgb.partition_point(|f| f.t < d.t);
            let best = [i.saturating_sub(1), i.min(ds.rgb.len() - 1)]
                .into_iter()
                .min_by(|&a, &b| (ds.rgb[a].t - d.t).abs().total_cmp(&(ds.rgb[b].t - d.t).abs()))
                .expect("non-empty rgb frames");
            ds.rgb[best].pose
        })
        .collect()
}

/// RGB-camera poses at the depth timestamps by interpolating RGB poses.
pub fn interpolated_rgb_poses(ds: &AsyncDataset) -> Result<Vec<Pose>, PipelineError> {
    let keys: Vec<TimedPoseSample> = ds.rgb.iter().map(|f| TimedPoseSample::new(f.t, f.pose)).collect();
    ds.depth.iter().map(|d| Ok(linear_interp_pose(&keys, d.t)?)).collect()
}

/// World-space ray of depth pixel `(u, v)` for RGB-camera pose `rgb`: the
/// depth sensor sits at `rgb o E`.
pub fn depth_ray(rgb: &Pose, extrinsic: &Extrinsic, k: &Intrinsics, u: f64, v: f64) -> Ray {
    let e = extrinsic.pose();
    let dir = rgb.rotate(&e.rotate(&k.camera_direction(u, v)));
    Ray {
        origin: rgb.transform_point(e.translation()),
        direction: dir,
        near: 0.0,
        far: f64::INFINITY,
    }
}

/// Gradients with respect to the RGB-camera translation and unit quaternion
/// given ray gradients of depth pixel `(u, v)`.
pub fn depth_ray_vjp(
    q: &UnitQuaternion<f64>,
    extrinsic: &Extrinsic,
    k: &Intrinsics,
    u: f64,
    v: f64,
    g_origin: &Vector3<f64>,
    g_dir: &Vector3<f64>,
) -> (Vector3<f64>, [f64; 4]) {
    let e = extrinsic.pose();
    let a = rotate_vjp(q, e.translation(), g_origin);
    let b = rotate_vjp(q, &e.rotate(&k.camera_direction(u, v)), g_dir);
    (*g_origin, [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]])
}
