use asrf::diffcore::gradcheck::{central_difference, max_relative_error};
use asrf::diffcore::Checkpoint;
use asrf::field::{
    composite, composite_backward, render_image, render_rays, render_rays_at, render_rays_backward, render_source,
    route_submodel, sample_coarse, sample_fine, FieldConfig, FieldError, RadianceFieldGrid, RadianceSource,
    RenderConfig,
};
use asrf::geom::{Aabb, Intrinsics, Pose, Ray};
use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_bounds() -> Aabb {
    Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
}

fn small_config() -> FieldConfig {
    FieldConfig {
        density_hidden: vec![8, 8],
        color_hidden: vec![8],
        feature_dim: 3,
        pos_freqs: 2,
        dir_freqs: 1,
        appearance_dim: 2,
        seed: 3,
        ..FieldConfig::default()
    }
}

fn small_grid() -> RadianceFieldGrid {
    let mut grid = RadianceFieldGrid::new(small_config(), unit_bounds(), 3).unwrap();
    // Give the appearance table non-trivial values.
    let id = grid.appearance_table().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    grid.store.value_mut(id).mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    grid
}

#[test]
fn routing_examples() {
    let grid = small_grid();
    let c = grid.centroids().to_vec();
    assert_eq!(c.len(), 4);
    assert_eq!(grid.route(&Vector3::new(c[3].x, c[3].y, 0.7)), 3);
    // Midway between centroids 0 and 1.
    let mid = (c[0] + c[1]) / 2.0;
    assert_eq!(grid.route(&Vector3::new(mid.x, mid.y, 0.0)), 0);
}

#[test]
fn routing_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centroids: Vec<Vector2<f64>> = (0..7).map(|_| Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
    for _ in 0..1000 {
        let p = Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
        let dists: Vec<f64> = centroids.iter().map(|c| (Vector2::new(p.x, p.y) - c).norm()).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let expect = dists.iter().position(|&d| d == min).unwrap();
        assert_eq!(route_submodel(&centroids, &p), expect);
    }
}

fn batch(points: &[[f64; 3]], dir: [f64; 3]) -> (Array2<f64>, Array2<f64>) {
    let n = points.len();
    let p = Array2::from_shape_fn((n, 3), |(i, j)| points[i][j]);
    let d = Array2::from_shape_fn((n, 3), |(_, j)| dir[j]);
    (p, d)
}

#[test]
fn fresh_field_outputs_are_in_range() {
    let grid = small_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let p = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let (c, s) = grid.query_point(&p, &d, Some(rng.gen_range(0..3))).unwrap();
        assert!(s >= 0.0);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn density_ignores_direction() {
    let grid = small_grid();
    let p = Vector3::new(0.3, -0.4, 0.2);
    let (c1, s1) = grid.query_point(&p, &Vector3::x(), Some(1)).unwrap();
    let (c2, s2) = grid.query_point(&p, &Vector3::new(0.0, 0.6, 0.8), Some(1)).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(c1, c2);
}

#[test]
fn routed_query_equals_direct_tile_query() {
    let grid = small_grid();
    let pts = [[0.5, -0.5, 0.1], [0.8, -0.2, -0.6], [0.1, -0.9, 0.9]];
    for p in pts {
        assert_eq!(grid.route(&Vector3::new(p[0], p[1], p[2])), 1);
    }
    let (p, d) = batch(&pts, [0.0, 0.0, 1.0]);
    let ids = [Some(0), None, Some(2)];
    let (routed, _) = grid.query(p.view(), d.view(), &ids).unwrap();
    let (direct, _) = grid.query_tile(1, p.view(), d.view(), &ids).unwrap();
    assert_eq!(routed.sigma, direct.sigma);
    assert_eq!(routed.rgb, direct.rgb);
    let (other, _) = grid.query_tile(2, p.view(), d.view(), &ids).unwrap();
    assert_ne!(routed.sigma, other.sigma);
}

#[test]
fn invalid_queries_are_rejected() {
    let grid = small_grid();
    let (p, d) = batch(&[[0.0, 0.0, 0.0]], [1.0, 1.0, 0.0]);
    assert!(matches!(grid.query(p.view(), d.view(), &[None]), Err(FieldError::NonUnitDirection { .. })));
    let (p, d) = batch(&[[0.0, 0.0, 0.0]], [1.0, 0.0, 0.0]);
    assert!(matches!(grid.query(p.view(), d.view(), &[Some(3)]), Err(FieldError::ImageId { id: 3, count: 3 })));
    assert!(RadianceFieldGrid::new(FieldConfig { nx: 0, ..small_config() }, unit_bounds(), 1).is_err());
}

#[test]
fn coarse_samples_are_bin_midpoints() {
    assert_eq!(sample_coarse(0.0, 4.0, 4, None), vec![0.5, 1.5, 2.5, 3.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sample_coarse(1.0, 3.0, 8, Some(&mut rng));
    for (i, t) in s.iter().enumerate() {
        assert!(*t >= 1.0 + 0.25 * i as f64 && *t < 1.0 + 0.25 * (i + 1) as f64);
    }
}

#[test]
fn fine_samples_from_uniform_weights_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bins = 10;
    let mut hist = [0usize; 10];
    for _ in 0..1000 {
        for t in sample_fine(0.0, 10.0, &[0.3; 10], 100, Some(&mut rng as &mut dyn RngCore)) {
            hist[(t.floor() as usize).min(bins - 1)] += 1;
        }
    }
    let e = 1e5 / bins as f64;
    let chi2: f64 = hist.iter().map(|&h| (h as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 21.67, "chi2 = {chi2}");
}

#[test]
fn fine_samples_concentrate_in_the_weighted_bin() {
    let mut w = vec![0.0; 16];
    w[11] = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = sample_fine(0.0, 16.0, &w, 1000, Some(&mut rng));
    let inside = s.iter().filter(|&&t| (11.0..=12.0).contains(&t)).count();
    assert!(inside as f64 >= 0.99 * 1000.0);
    let det = sample_fine(0.0, 16.0, &w, 8, None);
    assert!(det.iter().all(|&t| (11.0..=12.0).contains(&t)));
    assert!(det.windows(2).all(|p| p[0] <= p[1]));
}

#[test]
fn zero_weights_fall_back_to_uniform() {
    let s = sample_fine(0.0, 4.0, &[0.0; 4], 4, None);
    assert_eq!(s, vec![0.5, 1.5, 2.5, 3.5]);
}

struct Slabs {
    slabs: Vec<(f64, f64, f64)>,
}

impl RadianceSource for Slabs {
    fn sigma(&self, p: &Vector3<f64>) -> f64 {
        self.slabs.iter().filter(|(a, b, _)| p.z >= *a && p.z <= *b).map(|s| s.2).sum()
    }
    fn color(&self, p: &Vector3<f64>, _d: &Vector3<f64>) -> [f64; 3] {
        [0.2, 0.5 + 0.1 * p.z.sin(), 0.9]
    }
}

fn z_ray(far: f64) -> Ray {
    Ray::new(Vector3::zeros(), Vector3::z(), 0.0, far).unwrap()
}

fn slab_cfg() -> RenderConfig {
    RenderConfig {
        near: 0.0,
        far: 4.0,
        n_coarse: 32,
        n_fine: 32,
        background: [1.0, 1.0, 1.0],
        jitter: false,
        ..RenderConfig::default()
    }
}

/// Expected depth and opacity by dense midpoint quadrature.
fn dense_oracle(src: &dyn RadianceSource, near: f64, far: f64, n: usize) -> (f64, f64) {
    let h = (far - near) / n as f64;
    let mut optical = 0.0f64;
    let mut depth = 0.0;
    for i in 0..n {
        let t = near + (i as f64 + 0.5) * h;
        let s = src.sigma(&Vector3::new(0.0, 0.0, t));
        let before = (-optical).exp();
        optical += s * h;
        depth += (before - (-optical).exp()) * t;
    }
    (depth, 1.0 - (-optical).exp())
}

#[test]
fn empty_space_shows_background() {
    let src = Slabs { slabs: vec![] };
    let out = render_source(&src, &z_ray(4.0), &slab_cfg(), None);
    assert_eq!(out.color, [1.0, 1.0, 1.0]);
    assert_eq!(out.depth, 0.0);
    assert_eq!(out.opacity, 0.0);
}

#[test]
fn opaque_slab_depth_matches_dense_oracle() {
    let src = Slabs { slabs: vec![(2.0, 2.5, 1e3)] };
    let cfg = slab_cfg();
    let out = render_source(&src, &z_ray(4.0), &cfg, None);
    let (depth, opacity) = dense_oracle(&src, 0.0, 4.0, 10_000);
    assert!((depth - 2.0).abs() < 0.01);
    assert!(opacity > 0.999 && out.opacity > 0.999);
    let spacing = 4.0 / cfg.n_coarse as f64;
    assert!((out.depth - depth).abs() <= spacing, "{} vs {depth}", out.depth);
}

#[test]
fn hidden_slab_is_invisible() {
    let cfg = slab_cfg();
    let one = render_source(&Slabs { slabs: vec![(2.0, 2.5, 1e3)] }, &z_ray(4.0), &cfg, None);
    let two = render_source(&Slabs { slabs: vec![(2.0, 2.5, 1e3), (3.0, 3.5, 1e3)] }, &z_ray(4.0), &cfg, None);
    for c in 0..3 {
        assert!((one.color[c] - two.color[c]).abs() < 1e-6);
    }
    assert!((one.depth - two.depth).abs() < 1e-6);
    assert!((one.opacity - two.opacity).abs() < 1e-6);
}

struct Smooth;

impl RadianceSource for Smooth {
    fn sigma(&self, p: &Vector3<f64>) -> f64 {
        0.6 + 0.4 * (1.3 * p.z).sin()
    }
    fn color(&self, _p: &Vector3<f64>, _d: &Vector3<f64>) -> [f64; 3] {
        [0.5; 3]
    }
}

#[test]
fn quadrature_converges_to_dense_oracle() {
    let (truth, _) = dense_oracle(&Smooth, 0.0, 4.0, 200_000);
    let err = |n: usize| {
        let cfg = RenderConfig { n_coarse: n, n_fine: 0, ..slab_cfg() };
        (render_source(&Smooth, &z_ray(4.0), &cfg, None).depth - truth).abs()
    };
    let errs: Vec<f64> = [16, 32, 64, 128].iter().map(|&n| err(n)).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 0.65 * w[0], "{errs:?}");
    }
}

proptest! {
    #[test]
    fn weights_and_residual_transmittance_sum_to_one(
        sigma in prop::collection::vec(0.0f64..50.0, 1..40),
        gaps in prop::collection::vec(0.001f64..0.5, 40),
    ) {
        let mut t = Vec::new();
        let mut acc = 0.3;
        for g in gaps.iter().take(sigma.len()) {
            t.push(acc);
            acc += g;
        }
        let rgb = vec![[0.5; 3]; sigma.len()];
        let c = composite(&sigma, &rgb, &t, acc + 0.1, [0.0; 3]);
        prop_assert!(c.weights.iter().all(|&w| w >= 0.0));
        let total: f64 = c.weights.iter().sum::<f64>() + c.trans_end;
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!((c.opacity - c.weights.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn front_truncation_never_decreases_depth(
        sigma in prop::collection::vec(0.0f64..5.0, 2..30),
        cut in 0usize..30,
    ) {
        let n = sigma.len();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + 0.2 * i as f64).collect();
        let rgb = vec![[0.5; 3]; n];
        let end = t[n - 1] + 0.2;
        let full = composite(&sigma, &rgb, &t, end, [0.0; 3]);
        let mut cut_sigma = sigma.clone();
        for s in cut_sigma.iter_mut().take(cut.min(n)) {
            *s = 0.0;
        }
        let cut = composite(&cut_sigma, &rgb, &t, end, [0.0; 3]);
        prop_assert!(cut.depth >= full.depth - 1e-12 || cut.opacity < full.opacity);
    }
}

#[test]
fn composite_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 12;
    let t: Vec<f64> = (0..n).map(|i| 1.0 + 0.3 * i as f64 + rng.gen_range(0.0..0.1)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
    let rgb: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let bg = [0.3, 0.6, 0.9];
    let (gc, gd) = ([0.7, -1.1, 0.4], 0.35);
    let loss = |s: &[f64], c: &[[f64; 3]]| {
        let out = composite(s, c, &t, 5.5, bg);
        gc[0] * out.color[0] + gc[1] * out.color[1] + gc[2] * out.color[2] + gd * out.depth
    };
    let comp = composite(&sigma, &rgb, &t, 5.5, bg);
    let (g_sigma, g_rgb) = composite_backward(&comp, &rgb, &t, bg, gc, gd);
    let fd_sigma = central_difference(|x| loss(x, &rgb), &sigma, 1e-6);
    assert!(max_relative_error(&g_sigma, &fd_sigma, 1e-8) < 1e-6);
    let flat: Vec<f64> = rgb.iter().flatten().copied().collect();
    let fd_rgb = central_difference(
        |x| {
            let c: Vec<[f64; 3]> = x.chunks(3).map(|v| [v[0], v[1], v[2]]).collect();
            loss(&sigma, &c)
        },
        &flat,
        1e-6,
    );
    let an: Vec<f64> = g_rgb.iter().flatten().copied().collect();
    assert!(max_relative_error(&an, &fd_rgb, 1e-8) < 1e-6);
}

/// Rays confined to tile 3 (x > 0, y > 0) with fixed sample distances.
fn grad_rays() -> (Vec<Ray>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rays = Vec::new();
    let mut samples = Vec::new();
    let mut ends = Vec::new();
    for (i, (x, y)) in [(0.3, 0.4), (0.6, 0.7), (0.5, 0.2)].into_iter().enumerate() {
        let d = Vector3::new(0.05 * i as f64, 0.03, -1.0).normalize();
        rays.push(Ray::new(Vector3::new(x, y, 0.9), d, 0.0, 2.0).unwrap());
        samples.push((0..10).map(|k| 0.1 + 0.17 * k as f64).collect());
        ends.push(1.9);
    }
    (rays, samples, ends)
}

const G_COLOR: [[f64; 3]; 3] = [[0.3, -0.2, 0.5], [0.1, 0.4, -0.6], [-0.5, 0.2, 0.2]];
const G_DEPTH: [f64; 3] = [0.2, -0.3, 0.15];
const IMAGES: [Option<usize>; 3] = [Some(0), Some(2), None];

fn ray_loss(grid: &RadianceFieldGrid, rays: &[Ray], samples: &[Vec<f64>], ends: &[f64]) -> f64 {
    let (out, _) = render_rays_at(grid, rays, &IMAGES, samples, ends, [0.2, 0.3, 0.4]).unwrap();
    out.iter()
        .enumerate()
        .map(|(r, o)| (0..3).map(|c| G_COLOR[r][c] * o.color[c]).sum::<f64>() + G_DEPTH[r] * o.depth)
        .sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut grid = small_grid();
    // Zero biases put dead units exactly on the ReLU kink; move off it.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in grid.store.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    // Stronger densities so that transmittance varies along the rays.
    let b = grid.store.find("tile3.density.l2.b").unwrap();
    grid.store.value_mut(b)[[0, 0]] = 1.5;
    let (rays, samples, ends) = grad_rays();
    grid.store.zero_grad();
    let (_, trace) = render_rays_at(&grid, &rays, &IMAGES, &samples, &ends, [0.2, 0.3, 0.4]).unwrap();
    render_rays_backward(&mut grid, &trace, &G_COLOR, &G_DEPTH, false).unwrap();
    let analytic = grid.store.flat_grads();
    let x0 = grid.store.flat_values();
    let mut idx: Vec<usize> = (0..80).map(|_| rng.gen_range(0..x0.len())).collect();
    // Always include the appearance table (stored last).
    idx.extend(x0.len() - 6..x0.len());
    idx.sort_unstable();
    idx.dedup();
    let mut probe = grid.clone();
    let sub: Vec<f64> = idx.iter().map(|&i| x0[i]).collect();
    let fd = central_difference(
        |x| {
            let mut v = x0.clone();
            for (k, &i) in idx.iter().enumerate() {
                v[i] = x[k];
            }
            probe.store.set_flat_values(&v).unwrap();
            ray_loss(&probe, &rays, &samples, &ends)
        },
        &sub,
        1e-6,
    );
    let an: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let err = max_relative_error(&an, &fd, 1e-7);
    assert!(err < 1e-4, "max rel err {err}");
    assert!(an.iter().any(|g| g.abs() > 1e-6));
}

#[test]
fn ray_gradients_match_finite_differences() {
    let mut grid = small_grid();
    let (rays, samples, ends) = grad_rays();
    let (_, trace) = render_rays_at(&grid, &rays, &IMAGES, &samples, &ends, [0.2, 0.3, 0.4]).unwrap();
    let g = render_rays_backward(&mut grid, &trace, &G_COLOR, &G_DEPTH, true).unwrap();
    for r in 0..rays.len() {
        let o0 = [rays[r].origin.x, rays[r].origin.y, rays[r].origin.z];
        let fd_o = central_difference(
            |x| {
                let mut rs = rays.clone();
                rs[r].origin = Vector3::new(x[0], x[1], x[2]);
                ray_loss(&grid, &rs, &samples, &ends)
            },
            &o0,
            1e-6,
        );
        let an_o = [g[r].origin.x, g[r].origin.y, g[r].origin.z];
        assert!(max_relative_error(&an_o, &fd_o, 1e-7) < 1e-4, "{an_o:?} vs {fd_o:?}");
        // Perturbations stay within the unit-norm tolerance of the field.
        let d0 = [rays[r].direction.x, rays[r].direction.y, rays[r].direction.z];
        let fd_d = central_difference(
            |x| {
                let mut rs = rays.clone();
                rs[r].direction = Vector3::new(x[0], x[1], x[2]);
                ray_loss(&grid, &rs, &samples, &ends)
            },
            &d0,
            1e-7,
        );
        let an_d = [g[r].direction.x, g[r].direction.y, g[r].direction.z];
        assert!(max_relative_error(&an_d, &fd_d, 1e-6) < 1e-4, "{an_d:?} vs {fd_d:?}");
    }
}

#[test]
fn rays_missing_the_bounds_render_background() {
    let grid = small_grid();
    let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..RenderConfig::default() };
    let away = Ray::new(Vector3::new(0.0, 0.0, 5.0), Vector3::z(), 0.0, f64::INFINITY).unwrap();
    let into = Ray::new(Vector3::new(0.2, 0.3, 5.0), -Vector3::z(), 0.0, f64::INFINITY).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, trace) = render_rays(&grid, &[away, into], &[None, Some(1)], &cfg, Some(&mut rng)).unwrap();
    assert_eq!(out[0].color, [0.1, 0.2, 0.3]);
    assert_eq!(out[0].depth, 0.0);
    assert_eq!(out[1].t.len(), 64);
    assert!(out[1].t.iter().all(|&t| (4.0..=6.0).contains(&t)));
    let mut g = grid.clone();
    let rg = render_rays_backward(&mut g, &trace, &[[1.0; 3]; 2], &[1.0; 2], true).unwrap();
    assert_eq!(rg[0].origin, Vector3::zeros());
}

#[test]
fn checkpoint_roundtrip_preserves_renders() {
    let grid = small_grid();
    let mut ck = Checkpoint::new();
    grid.save_into(&mut ck, "field");
    let back = RadianceFieldGrid::load_from(small_config(), &Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "field").unwrap();
    assert_eq!(back.bounds(), grid.bounds());
    assert_eq!(back.num_images(), 3);
    let pose = Pose::from_translation(0.1, 0.2, -3.0);
    let k = Intrinsics::from_fov(6, 5, 50.0).unwrap();
    let cfg = RenderConfig { n_coarse: 8, n_fine: 8, ..RenderConfig::default() };
    let a = render_image(&grid, &pose, &k, None, &cfg, 7).unwrap();
    let b = render_image(&back, &pose, &k, None, &cfg, 4).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert!(a.2.iter().all(|o| (0.0..=1.0).contains(o)));
}
