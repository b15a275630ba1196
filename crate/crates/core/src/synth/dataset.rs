use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::resample::{resample_plan, ResampleProtocol};
use super::scene::{build_scene, gt_render, Scene, SceneSpec};
use super::trajectory::{gen_trajectory, TrajectorySpec};
use super::SynthError;
use crate::geom::{read_pose_csv, rgb_to_depth_pose, write_pose_csv, Aabb, Extrinsic, Intrinsics, Pose, PoseRow};
use crate::raster::{DepthImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            hfov_deg: 60.0,
        }
    }
}

/// Everything needed to regenerate a dataset deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub protocol: ResampleProtocol,
    pub camera: CameraSpec,
    /// RGB-to-depth-sensor transform (the `t` column is ignored).
    pub extrinsic: PoseRow,
    /// Synchronized RGB + depth views midway between RGB frames, held out
    /// for evaluation.
    pub test_views: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let e = Pose::from_axis_angle(Vector3::y(), 2f64.to_radians(), Vector3::new(0.1, 0.0, 0.0));
        Self {
            scene: SceneSpec::default(),
            trajectory: TrajectorySpec::default(),
            protocol: ResampleProtocol::default(),
            camera: CameraSpec::default(),
            extrinsic: PoseRow::new(0.0, &e),
            test_views: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub t: f64,
    pub pose: Pose,
    pub image: RgbImage,
}

/// Depth raster; its pose is not part of the training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub t: f64,
    pub depth: DepthImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub t: f64,
    pub pose: Pose,
    pub image: RgbImage,
    pub depth: DepthImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncDataset {
    pub intrinsics: Intrinsics,
    pub extrinsic: Extrinsic,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub rgb: Vec<RgbFrame>,
    pub depth: Vec<DepthFrame>,
    /// Depth-sensor poses, for evaluation only.
    pub gt_depth_poses: Vec<Pose>,
    pub test_views: Vec<TestView>,
    pub dropped_pairs: usize,
    pub spec: Option<DatasetSpec>,
}

impl AsyncDataset {
    pub fn rgb_times(&self) -> Vec<f64> {
        self.rgb.iter().map(|f| f.t).collect()
    }

    pub fn depth_times(&self) -> Vec<f64> {
        self.depth.iter().map(|f| f.t).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.intrinsics.validate()?;
        check_increasing("rgb frames", self.rgb.iter().map(|f| f.t))?;
        check_increasing("depth frames", self.depth.iter().map(|f| f.t))?;
        if self.gt_depth_poses.len() != self.depth.len() {
            return Err(SynthError::Invalid(format!(
                "{} depth frames but {} ground-truth depth poses",
                self.depth.len(),
                self.gt_depth_poses.len()
            )));
        }
        let (w, h) = (self.intrinsics.width as usize, self.intrinsics.height as usize);
        let sizes = self
            .rgb
            .iter()
            .map(|f| (f.image.width, f.image.height))
            .chain(self.depth.iter().map(|f| (f.depth.width, f.depth.height)))
            .chain(self.test_views.iter().flat_map(|v| [(v.image.width, v.image.height), (v.depth.width, v.depth.height)]));
        for (i, s) in sizes.enumerate() {
            if s != (w, h) {
                return Err(SynthError::Invalid(format!("raster {i} is {}x{}, intrinsics say {w}x{h}", s.0, s.1)));
            }
        }
        Ok(())
    }
}

fn check_increasing(what: &str, ts: impl Iterator<Item = f64>) -> Result<(), SynthError> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in ts.enumerate() {
        if !(t > prev) || !t.is_finite() {
            return Err(SynthError::Invalid(format!("{what}: timestamp {i} ({t}) does not increase")));
        }
        prev = t;
    }
    Ok(())
}

/// Builds the scene and trajectory, resamples into asynchronous RGB/depth
/// streams and renders every frame. RGB is quantized to 8 bits so the
/// dataset survives a PNG round trip unchanged.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<AsyncDataset, SynthError> {
    let scene = build_scene(&spec.scene)?;
    let base = gen_trajectory(&spec.trajectory, &spec.scene.bounds)?;
    let plan = resample_plan(base.len(), &spec.protocol)?;
    let k = Intrinsics::from_fov(spec.camera.width, spec.camera.height, spec.camera.hfov_deg)?;
    let extrinsic = Extrinsic(spec.extrinsic.pose()?);

    let render = |pose: &Pose| {
        let (rgb, depth) = gt_render(&scene, pose, &k);
        (rgb.quantized(), depth)
    };
    let rgb: Vec<RgbFrame> = plan
        .pairs
        .par_iter()
        .map(|&(i, _)| {
            let s = &base[i];
            RgbFrame {
                t: s.t,
                pose: s.pose,
                image: render(&s.pose).0,
            }
        })
        .collect();
    let depth_poses: Vec<Pose> = plan.pairs.iter().map(|&(_, j)| rgb_to_depth_pose(&base[j].pose, &extrinsic)).collect();
    let depth: Vec<DepthFrame> = plan
        .pairs
        .par_iter()
        .zip(&depth_poses)
        .map(|(&(_, j), pose)| DepthFrame {
            t: base[j].t,
            depth: render(pose).1,
        })
        .collect();
    let test_views = test_view_indices(&plan.pairs, spec.protocol.rgb_stride, spec.test_views, base.len())
        .into_par_iter()
        .map(|i| {
            let s = &base[i];
            let (image, depth) = render(&s.pose);
            TestView {
                t: s.t,
                pose: s.pose,
                image,
                depth,
            }
        })
        .collect();
    let ds = AsyncDataset {
        intrinsics: k,
        extrinsic,
        bounds: spec.scene.bounds,
        background: spec.scene.background,
        rgb,
        depth,
        gt_depth_poses: depth_poses,
        test_views,
        dropped_pairs: plan.dropped,
        spec: Some(spec.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Base frames halfway between evenly spread consecutive RGB frames.
fn test_view_indices(pairs: &[(usize, usize)], stride: usize, count: usize, n_base: usize) -> Vec<usize> {
    if count == 0 || pairs.len() < 2 {
        return Vec::new();
    }
    let gaps = pairs.len() - 1;
    let count = count.min(gaps);
    (0..count)
        .map(|k| {
            let g = (2 * k + 1) * gaps / (2 * count);
            (pairs[g].0 + stride / 2).min(n_base - 1)
        })
        .collect()
}

/// Scene used to generate a dataset, rebuilt from its spec.
pub fn dataset_scene(ds: &AsyncDataset) -> Result<Option<Scene>, SynthError> {
    ds.spec.as_ref().map(|s| build_scene(&s.scene)).transpose()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    t: f64,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestEntry {
    t: f64,
    rgb: String,
    depth: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    intrinsics: Intrinsics,
    extrinsic: PoseRow,
    bounds: Aabb,
    background: [f64; 3],
    rgb_frames: Vec<FrameEntry>,
    depth_frames: Vec<FrameEntry>,
    #[serde(default)]
    test_views: Vec<TestEntry>,
    #[serde(default)]
    dropped_pairs: usize,
    #[serde(default)]
    provenance: Option<DatasetSpec>,
}

const FORMAT: &str = "asrf-dataset-1";

pub fn save_dataset(ds: &AsyncDataset, dir: &Path) -> Result<(), SynthError> {
    ds.validate()?;
    for sub in ["rgb", "depth", "test"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| SynthError::io(&p, e))?;
    }
    let name = |sub: &str, i: usize, ext: &str| format!("{sub}/{i:06}.{ext}");
    let manifest = Manifest {
        format: FORMAT.into(),
        intrinsics: ds.intrinsics,
        extrinsic: PoseRow::new(0.0, &ds.extrinsic.0),
        bounds: ds.bounds,
        background: ds.background,
        rgb_frames: ds.rgb.iter().enumerate().map(|(i, f)| FrameEntry { t: f.t, file: name("rgb", i, "png") }).collect(),
        depth_frames: ds.depth.iter().enumerate().map(|(i, f)| FrameEntry { t: f.t, file: name("depth", i, "f32") }).collect(),
        test_views: ds
            .test_views
            .iter()
            .enumerate()
            .map(|(i, v)| TestEntry {
                t: v.t,
                rgb: name("test", i, "png"),
                depth: name("test", i, "f32"),
            })
            .collect(),
        dropped_pairs: ds.dropped_pairs,
        provenance: ds.spec.clone(),
    };
    ds.rgb
        .par_iter()
        .zip(&manifest.rgb_frames)
        .try_for_each(|(f, e)| f.image.write_png(&dir.join(&e.file)))?;
    ds.depth
        .par_iter()
        .zip(&manifest.depth_frames)
        .try_for_each(|(f, e)| f.depth.write(&dir.join(&e.file)))?;
    for (v, e) in ds.test_views.iter().zip(&manifest.test_views) {
        v.image.write_png(&dir.join(&e.rgb))?;
        v.depth.write(&dir.join(&e.depth))?;
    }
    let rows = |it: &mut dyn Iterator<Item = (f64, Pose)>| it.collect::<Vec<_>>();
    write_pose_csv(&dir.join("rgb_poses.csv"), &rows(&mut ds.rgb.iter().map(|f| (f.t, f.pose))))?;
    write_pose_csv(
        &dir.join("gt_depth_poses.csv"),
        &rows(&mut ds.depth.iter().zip(&ds.gt_depth_poses).map(|(f, p)| (f.t, *p))),
    )?;
    write_pose_csv(&dir.join("test_poses.csv"), &rows(&mut ds.test_views.iter().map(|v| (v.t, v.pose))))?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| SynthError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<AsyncDataset, SynthError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| SynthError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| SynthError::Manifest {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(SynthError::Manifest {
            path: path.display().to_string(),
            msg: format!("unsupported format `{}`", m.format),
        });
    }
    m.intrinsics.validate()?;
    for (name, frames) in [("rgb_frames", &m.rgb_frames), ("depth_frames", &m.depth_frames)] {
        if let Some(i) = frames.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(SynthError::Manifest {
                path: path.display().to_string(),
                msg: format!("{name}[{}] timestamp {} does not increase", i + 1, frames[i + 1].t),
            });
        }
    }
    let poses =|file: &str, expected: &[f64]| -> Result<Vec<Pose>, SynthError> {
        let p = dir.join(file);
        let rows = read_pose_csv(&p)?;
        if rows.len() != expected.len() {
            return Err(SynthError::Manifest {
                path: p.display().to_string(),
                msg: format!("{} rows but the manifest lists {} frames", rows.len(), expected.len()),
            });
        }
        for (i, ((t, _), te)) in rows.iter().zip(expected).enumerate() {
            if t.to_bits() != te.to_bits() {
                return Err(SynthError::Manifest {
                    path: p.display().to_string(),
                    msg: format!("line {}: timestamp {t} does not match manifest ({te})", i + 2),
                });
            }
        }
        Ok(rows.into_iter().map(|(_, p)| p).collect())
    };
    let rgb_t: Vec<f64> = m.rgb_frames.iter().map(|f| f.t).collect();
    let depth_t: Vec<f64> = m.depth_frames.iter().map(|f| f.t).collect();
    let test_t: Vec<f64> = m.test_views.iter().map(|f| f.t).collect();
    let rgb_poses = poses("rgb_poses.csv", &rgb_t)?;
    let gt_depth_poses = poses("gt_depth_poses.csv", &depth_t)?;
    let test_poses = if m.test_views.is_empty() && !dir.join("test_poses.csv").exists() {
        Vec::new()
    } else {
        poses("test_poses.csv", &test_t)?
    };
    let at = |f: &str| -> PathBuf { dir.join(f) };
    let rgb = m
        .rgb_frames
        .par_iter()
        .zip(rgb_poses)
        .map(|(e, pose)| Ok(RgbFrame { t: e.t, pose, image: RgbImage::read_png(&at(&e.file))? }))
        .collect::<Result<Vec<_>, SynthError>>()?;
    let depth = m
        .depth_frames
        .par_iter()
        .map(|e| Ok(DepthFrame { t: e.t, depth: DepthImage::read(&at(&e.file))? }))
        .collect::<Result<Vec<_>, SynthError>>()?;
    let test_views = m
        .test_views
        .iter()
        .zip(test_poses)
        .map(|(e, pose)| {
            Ok(TestView {
                t: e.t,
                pose,
                image: RgbImage::read_png(&at(&e.rgb))?,
                depth: DepthImage::read(&at(&e.depth))?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let ds = AsyncDataset {
        intrinsics: m.intrinsics,
        extrinsic: Extrinsic(m.extrinsic.pose()?),
        bounds: m.bounds,
        background: m.background,
        rgb,
        depth,
        gt_depth_poses,
        test_views,
        dropped_pairs: m.dropped_pairs,
        spec: m.provenance,
    };
    ds.validate().map_err(|e| SynthError::Manifest {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(ds)
}
