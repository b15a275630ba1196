use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geom::{Aabb, Pose};
use crate::timepose::TimedPoseSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    /// Lawnmower sweep at constant altitude and speed.
    Simple,
    /// Smoothed random waypoints with random per-waypoint orientation.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub rate_hz: f64,
    /// Flight altitude range (m); the simple sweep uses the lower value.
    pub altitude: [f64; 2],
    pub max_speed: f64,
    /// Number of parallel legs of the simple sweep.
    pub legs: usize,
    /// Downward camera pitch (deg).
    pub pitch_deg: f64,
    /// Random pitch spread around `pitch_deg` for hard waypoints (deg).
    pub pitch_jitter_deg: f64,
    /// Distance kept from the scene bounds (m).
    pub margin: f64,
    pub waypoint_spacing: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Simple,
            duration: 60.0,
            rate_hz: 50.0,
            altitude: [30.0, 40.0],
            max_speed: 15.0,
            legs: 4,
            pitch_deg: 45.0,
            pitch_jitter_deg: 15.0,
            margin: 10.0,
            waypoint_spacing: 35.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if !(self.duration > 0.0) || !(self.rate_hz > 0.0) {
            return bad("duration and rate must be positive");
        }
        if !(self.max_speed > 0.0) {
            return bad("max speed must be positive");
        }
        if self.altitude[0] > self.altitude[1] || self.altitude[0] <= 0.0 {
            return bad("altitude range must be positive and ordered");
        }
        if self.kind == TrajectoryKind::Simple && self.legs == 0 {
            return bad("simple sweep needs at least one leg");
        }
        Ok(())
    }
}

/// Camera-to-world rotation looking along `forward` with the image `x` axis
/// horizontal.
pub fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let f = forward.normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    UnitQuaternion::from_matrix(&Matrix3::from_columns(&[right, down, f]))
}

fn heading_rotation(heading: &Vector3<f64>, pitch: f64) -> UnitQuaternion<f64> {
    let h = Vector3::new(heading.x, heading.y, 0.0).normalize();
    look_rotation(&(h * pitch.cos() - Vector3::z() * pitch.sin()))
}

/// Camera poses sampled at `rate_hz`, timestamps `k / rate_hz`.
pub fn gen_trajectory(spec: &TrajectorySpec, bounds: &Aabb) -> Result<Vec<TimedPoseSample>, SynthError> {
    spec.validate()?;
    let lo = bounds.min + Vector3::new(spec.margin, spec.margin, 0.0);
    let hi = bounds.max - Vector3::new(spec.margin, spec.margin, 0.0);
    if !(hi.x > lo.x && hi.y > lo.y) {
        return Err(SynthError::InvalidSpec("bounds too small for the flight margin".into()));
    }
    let n = (spec.duration * spec.rate_hz).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 / spec.rate_hz).collect();
    match spec.kind {
        TrajectoryKind::Simple => simple_sweep(spec, lo, hi, &times),
        TrajectoryKind::Hard => random_waypoints(spec, lo, hi, &times),
    }
}

enum Segment {
    Line { start: Vector3<f64>, dir: Vector3<f64>, len: f64 },
    Turn { center: Vector3<f64>, radius: f64, theta0: f64, ccw: bool },
}

impl Segment {
    fn length(&self) -> f64 {
        match self {
            Segment::Line { len, .. } => *len,
            Segment::Turn { radius, .. } => PI * radius,
        }
    }

    fn eval(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Segment::Line { start, dir, .. } => (start + dir * s, *dir),
            Segment::Turn { center, radius, theta0, ccw } => {
                let sign = if *ccw { 1.0 } else { -1.0 };
                let th = theta0 + sign * s / radius;
                let p = center + Vector3::new(th.cos(), th.sin(), 0.0) * *radius;
                (p, Vector3::new(-th.sin(), th.cos(), 0.0) * sign)
            }
        }
    }
}

fn simple_sweep(spec: &TrajectorySpec, lo: Vector3<f64>, hi: Vector3<f64>, times: &[f64]) -> Result<Vec<TimedPoseSample>, SynthError> {
    let z = spec.altitude[0];
    let legs = spec.legs;
    let spacing = if legs > 1 { (hi.y - lo.y) / (legs - 1) as f64 } else { 0.0 };
    let r = spacing / 2.0;
    let (x0, x1) = (lo.x + r, hi.x - r);
    if x1 - x0 <= 0.0 {
        return Err(SynthError::InvalidSpec(format!(
            "bounds too small for one sweep leg: {legs} legs need more than {:.1} m along x",
            2.0 * r
        )));
    }
    let mut segs = Vec::new();
    for i in 0..legs {
        let y = lo.y + i as f64 * spacing;
        let forward = i % 2 == 0;
        let (start, dir) = if forward {
            (Vector3::new(x0, y, z), Vector3::x())
        } else {
            (Vector3::new(x1, y, z), -Vector3::x())
        };
        segs.push(Segment::Line { start, dir, len: x1 - x0 });
        if i + 1 < legs {
            let cx = if forward { x1 } else { x0 };
            segs.push(Segment::Turn {
                center: Vector3::new(cx, y + r, z),
                radius: r,
                theta0: -PI / 2.0,
                ccw: forward,
            });
        }
    }
    let total: f64 = segs.iter().map(Segment::length).sum();
    let speed = total / spec.duration;
    let pitch = spec.pitch_deg.to_radians();
    Ok(times
        .iter()
        .map(|&t| {
            let mut s = (speed * t).min(total);
            let mut k = 0;
            while k + 1 < segs.len() && s > segs[k].length() {
                s -= segs[k].length();
                k += 1;
            }
            let (p, heading) = segs[k].eval(s.min(segs[k].length()));
            TimedPoseSample::new(t, Pose::from_parts(heading_rotation(&heading, pitch), p))
        })
        .collect())
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, u: f64) -> Vector3<f64> {
    let u2 = u * u;
    let u3 = u2 * u;
    (p1 * 2.0 + (p2 - p0) * u + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * u2 + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * u3) * 0.5
}

fn random_waypoints(spec: &TrajectorySpec, lo: Vector3<f64>, hi: Vector3<f64>, times: &[f64]) -> Result<Vec<TimedPoseSample>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speed = 0.8 * spec.max_speed;
    let needed = speed * spec.duration;
    let random_point = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            rng.gen_range(spec.altitude[0]..=spec.altitude[1]),
        )
    };
    let min_step = spec.waypoint_spacing.min(0.5 * (hi.x - lo.x).min(hi.y - lo.y));
    let mut pts = vec![random_point(&mut rng)];
    let mut chord = 0.0;
    // Chord length underestimates spline length, so this is sufficient.
    while chord < needed {
        let mut p = random_point(&mut rng);
        let mut tries = 0;
        while (p - pts[pts.len() - 1]).norm() < min_step && tries < 100 {
            p = random_point(&mut rng);
            tries += 1;
        }
        chord += (p - pts[pts.len() - 1]).norm();
        pts.push(p);
    }
    let pitch0 = spec.pitch_deg;
    let rots: Vec<UnitQuaternion<f64>> = pts
        .iter()
        .map(|_| {
            let yaw = rng.gen_range(0.0..2.0 * PI);
            let pitch = (pitch0 + rng.gen_range(-1.0..=1.0) * spec.pitch_jitter_deg).to_radians();
            heading_rotation(&Vector3::new(yaw.cos(), yaw.sin(), 0.0), pitch)
        })
        .collect();

    // Arc-length table over the spline parameter.
    let segs = pts.len() - 1;
    let sub = 256;
    let at = |i: usize, u: f64| {
        let p0 = pts[i.saturating_sub(1)];
        let p3 = pts[(i + 2).min(pts.len() - 1)];
        catmull_rom(&p0, &pts[i], &pts[i + 1], &p3, u)
    };
    let mut table = vec![(0.0, 0.0)];
    let mut acc = 0.0;
    let mut prev = at(0, 0.0);
    for i in 0..segs {
        for j in 1..=sub {
            let u = j as f64 / sub as f64;
            let p = at(i, u);
            acc += (p - prev).norm();
            prev = p;
            table.push((acc, i as f64 + u));
        }
    }
    let param_at = |s: f64| {
        let k = table.partition_point(|e| e.0 < s).clamp(1, table.len() - 1);
        let (s0, u0) = table[k - 1];
        let (s1, u1) = table[k];
        if s1 > s0 {
            u0 + (u1 - u0) * (s - s0) / (s1 - s0)
        } else {
            u1
        }
    };
    Ok(times
        .iter()
        .map(|&t| {
            let g = param_at((speed * t).min(acc));
            let i = (g.floor() as usize).min(segs - 1);
            let u = g - i as f64;
            let p = at(i, u);
            let (qa, mut qb) = (rots[i], rots[i + 1]);
            if qa.coords.dot(&qb.coords) < 0.0 {
                qb = UnitQuaternion::new_unchecked(-qb.into_inner());
            }
            let q = qa.try_slerp(&qb, u, 1e-12).unwrap_or(qa);
            TimedPoseSample::new(t, Pose::from_parts(q, p))
        })
        .collect())
}
