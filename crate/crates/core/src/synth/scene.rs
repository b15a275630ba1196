use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geom::{ray_from_pixel, Aabb, Intrinsics, Pose};
use crate::raster::{DepthImage, RgbImage};

/// Parameters of a procedural block-city scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub bounds: Aabb,
    pub box_count: usize,
    /// Side length range of a box footprint (m).
    pub box_size: [f64; 2],
    pub box_height: [f64; 2],
    /// Minimum clearance between footprints (m).
    pub min_gap: f64,
    pub checker_size: f64,
    pub ground_albedo: [[f64; 3]; 2],
    pub background: [f64; 3],
    /// Direction towards the sun (normalized on use).
    pub sun: [f64; 3],
    pub ambient: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            bounds: Aabb::new(Vector3::new(-60.0, -60.0, 0.0), Vector3::new(60.0, 60.0, 40.0)),
            box_count: 14,
            box_size: [8.0, 20.0],
            box_height: [4.0, 25.0],
            min_gap: 3.0,
            checker_size: 6.0,
            ground_albedo: [[0.62, 0.6, 0.52], [0.3, 0.42, 0.3]],
            background: [0.7, 0.8, 0.95],
            sun: [0.4, 0.3, 0.85],
            ambient: 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub aabb: Aabb,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub boxes: Vec<SceneBox>,
}

/// Nearest surface hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

/// Places non-overlapping boxes by rejection sampling.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    let b = spec.bounds;
    let size = b.size();
    if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) || b.min.z != 0.0 {
        return Err(SynthError::InvalidSpec("scene bounds must be a non-empty box resting on z = 0".into()));
    }
    let [s_lo, s_hi] = spec.box_size;
    let [h_lo, h_hi] = spec.box_height;
    if !(s_lo > 0.0 && s_lo <= s_hi && h_lo > 0.0 && h_lo <= h_hi && h_hi <= size.z) {
        return Err(SynthError::InvalidSpec("box size/height ranges must be positive, ordered and fit the bounds".into()));
    }
    let footprint = (s_lo + spec.min_gap).powi(2);
    if spec.box_count > 0 && (s_lo > size.x || s_lo > size.y || footprint * spec.box_count as f64 > size.x * size.y) {
        return Err(SynthError::PackingCapacity { requested: spec.box_count, placed: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(spec.box_count);
    let max_attempts = 2000 * spec.box_count.max(1);
    let mut attempts = 0;
    while boxes.len() < spec.box_count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::PackingCapacity {
                requested: spec.box_count,
                placed: boxes.len(),
            });
        }
        let sx = rng.gen_range(s_lo..=s_hi).min(size.x);
        let sy = rng.gen_range(s_lo..=s_hi).min(size.y);
        let h = rng.gen_range(h_lo..=h_hi);
        let x0 = rng.gen_range(b.min.x..=b.max.x - sx);
        let y0 = rng.gen_range(b.min.y..=b.max.y - sy);
        let aabb = Aabb::new(Vector3::new(x0, y0, 0.0), Vector3::new(x0 + sx, y0 + sy, h));
        let albedo = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
        if boxes.iter().all(|o| !o.aabb.overlaps_xy(&aabb, spec.min_gap)) {
            boxes.push(SceneBox { aabb, albedo });
        }
    }
    Ok(Scene { spec: spec.clone(), boxes })
}

impl Scene {
    /// First surface along `o + t d` with `t > 0` (boxes and the ground
    /// inside the bounds footprint).
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let bounds = &self.spec.bounds;
        if d.z < 0.0 && o.z > 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if p.x >= bounds.min.x && p.x <= bounds.max.x && p.y >= bounds.min.y && p.y <= bounds.max.y {
                let s = self.spec.checker_size;
                let parity = ((p.x / s).floor() as i64 + (p.y / s).floor() as i64).rem_euclid(2) as usize;
                best = Some(Hit {
                    t,
                    normal: Vector3::z(),
                    albedo: self.spec.ground_albedo[parity],
                });
            }
        }
        for b in &self.boxes {
            if let Some((t, axis, sign)) = box_entry(&b.aabb, o, d) {
                if t > 0.0 && best.map_or(true, |h| t < h.t) {
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    best = Some(Hit { t, normal, albedo: b.albedo });
                }
            }
        }
        best
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let sun = Vector3::from(self.spec.sun).normalize();
        let k = self.spec.ambient + (1.0 - self.spec.ambient) * hit.normal.dot(&sun).max(0.0);
        [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
    }
}

/// Entry distance, entry axis and outward normal sign for a ray starting
/// outside the box.
fn box_entry(b: &Aabb, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut axis, mut sign) = (0, 0.0);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (ta, tb) = ((b.min[i] - o[i]) * inv, (b.max[i] - o[i]) * inv);
        let (near, far, s) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
        if near > t0 {
            t0 = near;
            axis = i;
            sign = s;
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0, axis, sign))
}

/// Ray-cast RGB and Euclidean depth; misses get the background color and
/// depth 0.
pub fn gt_render(scene: &Scene, pose: &Pose, k: &Intrinsics) -> (RgbImage, DepthImage) {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let ray = ray_from_pixel(pose, k, u as f64, v as f64).expect("pixel inside image");
            match scene.cast(&ray.origin, &ray.direction) {
                Some(hit) => {
                    rgb.set(u, v, scene.shade(&hit));
                    depth.set(u, v, hit.t as f32);
                }
                None => rgb.set(u, v, scene.spec.background),
            }
        }
    }
    (rgb, depth)
}
