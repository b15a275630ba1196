use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{FieldError, QueryTrace, RadianceFieldGrid};
use crate::geom::{ray_from_pixel, Intrinsics, Pose, Ray};
use crate::raster::{DepthImage, RgbImage};

/// Ray sampling and compositing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    /// Extra samples drawn from the coarse weights; 0 renders coarse only.
    pub n_fine: usize,
    pub background: [f64; 3],
    /// Stratified jitter of the coarse samples and random fine samples when
    /// an rng is supplied.
    pub jitter: bool,
    /// Rays below this opacity carry no valid depth.
    pub min_opacity: f64,
    /// Restrict each ray to its intersection with the field bounds.
    pub clip_to_bounds: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.0,
            far: 250.0,
            n_coarse: 32,
            n_fine: 32,
            background: [0.7, 0.8, 0.95],
            jitter: true,
            min_opacity: 0.05,
            clip_to_bounds: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(FieldError::InvalidConfig("require 0 <= near < far".into()));
        }
        if self.n_coarse == 0 {
            return Err(FieldError::InvalidConfig("n_coarse must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_opacity) {
            return Err(FieldError::InvalidConfig("min_opacity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One sample per uniform bin of `[near, far]`: the bin midpoint, or a
/// uniform draw inside the bin when `rng` is given.
pub fn sample_coarse(near: f64, far: f64, n: usize, mut rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let u = match rng.as_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + u) * step
        })
        .collect()
}

/// Inverse-CDF samples from the piecewise-constant density given by
/// `weights` over equal bins of `[near, far]`; all-zero weights fall back to
/// uniform. Deterministic quantiles are used without an rng.
pub fn sample_fine(near: f64, far: f64, weights: &[f64], n: usize, mut rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let bins = weights.len();
    if bins == 0 || n == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let uniform = !(total > 0.0) || !total.is_finite();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += if uniform { 1.0 / bins as f64 } else { w.max(0.0) / total };
        cdf.push(acc);
    }
    let step = (far - near) / bins as f64;
    let mut out: Vec<f64> = (0..n)
        .map(|k| {
            let u = match rng.as_mut() {
                Some(r) => r.gen::<f64>() * acc,
                None => (k as f64 + 0.5) / n as f64 * acc,
            };
            let j = cdf[1..].partition_point(|&c| c <= u).min(bins - 1);
            let width = cdf[j + 1] - cdf[j];
            let frac = if width > 0.0 { ((u - cdf[j]) / width).clamp(0.0, 1.0) } else { 0.5 };
            near + (j as f64 + frac) * step
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Quadrature of the volume rendering integral over sorted samples `t`,
/// with the last interval ending at `end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance before each sample.
    pub trans: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Transmittance past the last sample.
    pub trans_end: f64,
}

pub fn composite(sigma: &[f64], rgb: &[[f64; 3]], t: &[f64], end: f64, background: [f64; 3]) -> Composite {
    let n = t.len();
    let mut out = Composite {
        color: [0.0; 3],
        depth: 0.0,
        opacity: 0.0,
        weights: Vec::with_capacity(n),
        trans: Vec::with_capacity(n),
        deltas: Vec::with_capacity(n),
        trans_end: 1.0,
    };
    let mut optical = 0.0f64;
    for i in 0..n {
        let delta = if i + 1 < n { t[i + 1] - t[i] } else { (end - t[i]).max(0.0) };
        let tr = (-optical).exp();
        optical += sigma[i] * delta;
        let w = tr - (-optical).exp();
        out.deltas.push(delta);
        out.trans.push(tr);
        out.weights.push(w);
        for c in 0..3 {
            out.color[c] += w * rgb[i][c];
        }
        out.depth += w * t[i];
    }
    out.trans_end = (-optical).exp();
    out.opacity = 1.0 - out.trans_end;
    for c in 0..3 {
        out.color[c] += out.trans_end * background[c];
    }
    out
}

/// Gradients of a scalar loss with respect to the per-sample densities and
/// colors, given its gradients with respect to the composited color and
/// depth.
pub fn composite_backward(
    comp: &Composite,
    rgb: &[[f64; 3]],
    t: &[f64],
    background: [f64; 3],
    g_color: [f64; 3],
    g_depth: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = t.len();
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let v_bg = dot(g_color, background);
    let mut g_sigma = vec![0.0; n];
    let mut g_rgb = vec![[0.0; 3]; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let v = dot(g_color, rgb[k]) + g_depth * t[k];
        let t_next = comp.trans[k] - comp.weights[k];
        g_sigma[k] = comp.deltas[k] * (t_next * v - suffix - comp.trans_end * v_bg);
        suffix += comp.weights[k] * v;
        for c in 0..3 {
            g_rgb[k][c] = comp.weights[k] * g_color[c];
        }
    }
    (g_sigma, g_rgb)
}

/// Rendered color, depth and opacity of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Unnormalized expected distance `sum w_i t_i` (meters); 0 for missed rays.
    pub depth: f64,
    pub opacity: f64,
    pub t: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RenderOutput {
    fn miss(background: [f64; 3]) -> Self {
        Self {
            color: background,
            depth: 0.0,
            opacity: 0.0,
            t: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn from_composite(c: &Composite, t: Vec<f64>) -> Self {
        Self {
            color: c.color,
            depth: c.depth,
            opacity: c.opacity,
            t,
            weights: c.weights.clone(),
        }
    }

    /// Whether the depth is meaningful under `min_opacity`.
    pub fn depth_valid(&self, min_opacity: f64) -> bool {
        self.opacity >= min_opacity && self.opacity > 0.0
    }
}

/// Analytic field used by oracle tests and reference renders.
pub trait RadianceSource {
    fn sigma(&self, p: &Vector3<f64>) -> f64;
    fn color(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3];
}

fn ray_interval(ray: &Ray, cfg: &RenderConfig, bounds: Option<&crate::geom::Aabb>) -> Option<(f64, f64)> {
    let mut lo = cfg.near.max(ray.near);
    let mut hi = cfg.far.min(ray.far);
    if let Some(b) = bounds {
        let (t0, t1) = b.intersect(&ray.origin, &ray.direction)?;
        lo = lo.max(t0);
        hi = hi.min(t1);
    }
    (lo < hi).then_some((lo, hi))
}

fn merge(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.extend(b);
    a.sort_by(f64::total_cmp);
    a
}

/// Coarse-to-fine rendering of an analytic source along `ray` (no bounds
/// clipping).
pub fn render_source(src: &dyn RadianceSource, ray: &Ray, cfg: &RenderConfig, mut rng: Option<&mut dyn RngCore>) -> RenderOutput {
    let Some((near, far)) = ray_interval(ray, cfg, None) else {
        return RenderOutput::miss(cfg.background);
    };
    let eval = |ts: &[f64]| -> (Vec<f64>, Vec<[f64; 3]>) {
        ts.iter()
            .map(|&t| {
                let p = ray.at(t);
                (src.sigma(&p), src.color(&p, &ray.direction))
            })
            .unzip()
    };
    let coarse = sample_coarse(near, far, cfg.n_coarse, jitter_rng(cfg, &mut rng));
    let ts = if cfg.n_fine > 0 {
        let (s, c) = eval(&coarse);
        let comp = composite(&s, &c, &coarse, far, cfg.background);
        let fine = sample_fine(near, far, &comp.weights, cfg.n_fine, jitter_rng(cfg, &mut rng));
        merge(coarse, fine)
    } else {
        coarse
    };
    let (s, c) = eval(&ts);
    let comp = composite(&s, &c, &ts, far, cfg.background);
    RenderOutput::from_composite(&comp, ts)
}

fn jitter_rng<'a>(cfg: &RenderConfig, rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    if cfg.jitter {
        rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
struct RayRecord {
    offset: usize,
    t: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    comp: Composite,
}

/// Forward record consumed by [`render_rays_backward`].
#[derive(Debug, Clone)]
pub struct RenderTrace {
    query: Option<QueryTrace>,
    records: Vec<Option<RayRecord>>,
    samples: usize,
    background: [f64; 3],
}

/// Gradient of a loss with respect to a ray's origin and direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayGrad {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

fn flatten(
    rays: &[Ray],
    images: &[Option<usize>],
    ts: &[Option<Vec<f64>>],
) -> (Array2<f64>, Array2<f64>, Vec<Option<usize>>, Vec<usize>) {
    let total: usize = ts.iter().flatten().map(Vec::len).sum();
    let mut pts = Array2::zeros((total, 3));
    let mut dirs = Array2::zeros((total, 3));
    let mut ids = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(rays.len());
    let mut k = 0;
    for ((ray, img), t) in rays.iter().zip(images).zip(ts) {
        offsets.push(k);
        for &ti in t.iter().flatten() {
            let p = ray.at(ti);
            for c in 0..3 {
                pts[[k, c]] = p[c];
                dirs[[k, c]] = ray.direction[c];
            }
            ids.push(*img);
            k += 1;
        }
    }
    (pts, dirs, ids, offsets)
}

/// Renders a batch of rays through the grid. Sample positions are treated
/// as constants by the backward pass.
pub fn render_rays(
    grid: &RadianceFieldGrid,
    rays: &[Ray],
    images: &[Option<usize>],
    cfg: &RenderConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Vec<RenderOutput>, RenderTrace), FieldError> {
    cfg.validate()?;
    if images.len() != rays.len() {
        return Err(FieldError::Length("one image id per ray"));
    }
    let bounds = cfg.clip_to_bounds.then_some(grid.bounds());
    let spans: Vec<Option<(f64, f64)>> = rays.iter().map(|r| ray_interval(r, cfg, bounds)).collect();
    let coarse: Vec<Option<Vec<f64>>> = spans
        .iter()
        .map(|s| s.map(|(lo, hi)| sample_coarse(lo, hi, cfg.n_coarse, jitter_rng(cfg, &mut rng))))
        .collect();
    let ts: Vec<Option<Vec<f64>>> = if cfg.n_fine > 0 {
        let (pts, dirs, ids, offsets) = flatten(rays, images, &coarse);
        let (q, _) = grid.query(pts.view(), dirs.view(), &ids)?;
        coarse
            .into_iter()
            .enumerate()
            .map(|(r, c)| {
                let c = c?;
                let (lo, hi) = spans[r].expect("span exists for sampled ray");
                let o = offsets[r];
                let rgb: Vec<[f64; 3]> = (o..o + c.len()).map(|i| [q.rgb[[i, 0]], q.rgb[[i, 1]], q.rgb[[i, 2]]]).collect();
                let comp = composite(&q.sigma[o..o + c.len()], &rgb, &c, hi, cfg.background);
                let fine = sample_fine(lo, hi, &comp.weights, cfg.n_fine, jitter_rng(cfg, &mut rng));
                Some(merge(c, fine))
            })
            .collect()
    } else {
        coarse
    };
    render_at_samples(grid, rays, images, ts, &spans, cfg.background)
}

fn render_at_samples(
    grid: &RadianceFieldGrid,
    rays: &[Ray],
    images: &[Option<usize>],
    ts: Vec<Option<Vec<f64>>>,
    spans: &[Option<(f64, f64)>],
    background: [f64; 3],
) -> Result<(Vec<RenderOutput>, RenderTrace), FieldError> {
    let (pts, dirs, ids, offsets) = flatten(rays, images, &ts);
    let samples = pts.nrows();
    let (q, trace) = if samples > 0 {
        let (q, tr) = grid.query(pts.view(), dirs.view(), &ids)?;
        (Some(q), Some(tr))
    } else {
        (None, None)
    };
    let mut outputs = Vec::with_capacity(rays.len());
    let mut records = Vec::with_capacity(rays.len());
    for (r, t) in ts.into_iter().enumerate() {
        let (Some(t), Some(q)) = (t, q.as_ref()) else {
            outputs.push(RenderOutput::miss(background));
            records.push(None);
            continue;
        };
        let (_, hi) = spans[r].expect("span exists for sampled ray");
        let o = offsets[r];
        let rgb: Vec<[f64; 3]> = (o..o + t.len()).map(|i| [q.rgb[[i, 0]], q.rgb[[i, 1]], q.rgb[[i, 2]]]).collect();
        let comp = composite(&q.sigma[o..o + t.len()], &rgb, &t, hi, background);
        outputs.push(RenderOutput::from_composite(&comp, t.clone()));
        records.push(Some(RayRecord { offset: o, t, rgb, comp }));
    }
    Ok((
        outputs,
        RenderTrace {
            query: trace,
            records,
            samples,
            background,
        },
    ))
}

/// Renders rays at caller-chosen sample distances, each ray's last interval
/// ending at `ends[r]`.
pub fn render_rays_at(
    grid: &RadianceFieldGrid,
    rays: &[Ray],
    images: &[Option<usize>],
    samples: &[Vec<f64>],
    ends: &[f64],
    background: [f64; 3],
) -> Result<(Vec<RenderOutput>, RenderTrace), FieldError> {
    if samples.len() != rays.len() || ends.len() != rays.len() || images.len() != rays.len() {
        return Err(FieldError::Length("one sample list, end and image id per ray"));
    }
    let ts: Vec<Option<Vec<f64>>> = samples.iter().map(|s| (!s.is_empty()).then(|| s.clone())).collect();
    let spans: Vec<Option<(f64, f64)>> = samples
        .iter()
        .zip(ends)
        .map(|(s, &e)| s.first().map(|&t0| (t0, e)))
        .collect();
    render_at_samples(grid, rays, images, ts, &spans, background)
}

/// Backpropagates `d loss / d color` and `d loss / d depth` per ray into the
/// grid parameters; returns per-ray origin and direction gradients when
/// `need_ray_grads` is set (zero for missed rays).
pub fn render_rays_backward(
    grid: &mut RadianceFieldGrid,
    trace: &RenderTrace,
    g_color: &[[f64; 3]],
    g_depth: &[f64],
    need_ray_grads: bool,
) -> Result<Vec<RayGrad>, FieldError> {
    let n = trace.records.len();
    if g_color.len() != n || g_depth.len() != n {
        return Err(FieldError::Length("one color and depth gradient per ray"));
    }
    let zero = RayGrad {
        origin: Vector3::zeros(),
        direction: Vector3::zeros(),
    };
    let Some(query) = trace.query.as_ref() else {
        return Ok(if need_ray_grads { vec![zero; n] } else { Vec::new() });
    };
    let mut g_sigma = vec![0.0; trace.samples];
    let mut g_rgb = Array2::zeros((trace.samples, 3));
    for (r, rec) in trace.records.iter().enumerate() {
        let Some(rec) = rec else { continue };
        let (gs, gc) = composite_backward(&rec.comp, &rec.rgb, &rec.t, trace.background, g_color[r], g_depth[r]);
        for (k, (s, c)) in gs.into_iter().zip(gc).enumerate() {
            g_sigma[rec.offset + k] = s;
            for j in 0..3 {
                g_rgb[[rec.offset + k, j]] = c[j];
            }
        }
    }
    let grads = grid.query_backward(query, &g_sigma, g_rgb.view(), need_ray_grads)?;
    let Some((gp, gd)) = grads else {
        return Ok(Vec::new());
    };
    Ok(trace
        .records
        .iter()
        .map(|rec| {
            let Some(rec) = rec else { return zero };
            let mut g = zero;
            for (k, &t) in rec.t.iter().enumerate() {
                let i = rec.offset + k;
                let p = Vector3::new(gp[[i, 0]], gp[[i, 1]], gp[[i, 2]]);
                g.origin += p;
                g.direction += p * t + Vector3::new(gd[[i, 0]], gd[[i, 1]], gd[[i, 2]]);
            }
            g
        })
        .collect())
}

/// Renders a full image without jitter, returning color, depth and per-pixel
/// opacity (row-major).
pub fn render_image(
    grid: &RadianceFieldGrid,
    pose: &Pose,
    k: &Intrinsics,
    image: Option<usize>,
    cfg: &RenderConfig,
    chunk: usize,
) -> Result<(RgbImage, DepthImage, Vec<f64>), FieldError> {
    let (w, h) = (k.width as usize, k.height as usize);
    let rays: Vec<Ray> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| ray_from_pixel(pose, k, u as f64, v as f64).expect("pixel inside image"))
        .collect();
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthImage::new(w, h);
    let mut opacity = vec![0.0; w * h];
    let cfg = RenderConfig { jitter: false, ..cfg.clone() };
    for (c, batch) in rays.chunks(chunk.max(1)).enumerate() {
        let ids = vec![image; batch.len()];
        let (out, _) = render_rays(grid, batch, &ids, &cfg, None)?;
        for (j, o) in out.iter().enumerate() {
            let idx = c * chunk.max(1) + j;
            let (u, v) = (idx % w, idx / w);
            rgb.set(u, v, o.color);
            depth.set(u, v, o.depth as f32);
            opacity[idx] = o.opacity;
        }
    }
    Ok((rgb, depth, opacity))
}
