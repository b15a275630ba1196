use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FieldError;
use crate::diffcore::{
    encode_backward, encode_batch, encoded_dim, sigmoid, softplus, Checkpoint, Mlp, MlpSpec, MlpTrace, ParamId,
    ParamStore,
};
use crate::geom::Aabb;

/// Architecture of the tiled radiance field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub nx: usize,
    pub ny: usize,
    /// Density trunk widths; it outputs `1 + feature_dim` values.
    pub density_hidden: Vec<usize>,
    /// Color head widths.
    pub color_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    /// Per-image appearance embeddings appended to the color head input.
    pub appearance: bool,
    pub appearance_dim: usize,
    /// Initial bias of the density pre-activation.
    pub density_bias: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            nx: 2,
            ny: 2,
            density_hidden: vec![64; 4],
            color_hidden: vec![32, 32],
            feature_dim: 15,
            pos_freqs: 10,
            dir_freqs: 4,
            appearance: true,
            appearance_dim: 8,
            density_bias: 0.0,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidConfig(m.into()));
        if self.nx == 0 || self.ny == 0 {
            return bad("tile counts must be positive");
        }
        if self.density_hidden.is_empty() || self.color_hidden.is_empty() {
            return bad("both branches need at least one hidden layer");
        }
        if self.appearance && self.appearance_dim == 0 {
            return bad("appearance embeddings need appearance_dim > 0");
        }
        if !self.density_bias.is_finite() {
            return bad("density_bias must be finite");
        }
        Ok(())
    }

    fn emb_dim(&self) -> usize {
        if self.appearance {
            self.appearance_dim
        } else {
            0
        }
    }

    fn dir_dim(&self) -> usize {
        encoded_dim(3, self.dir_freqs, true)
    }
}

/// Index of the centroid nearest to `p` in the xy plane; ties go to the
/// lowest index.
pub fn route_submodel(centroids: &[Vector2<f64>], p: &Vector3<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = (p.x - c.x).powi(2) + (p.y - c.y).powi(2);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Densities and colors of a batch of samples.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub sigma: Vec<f64>,
    /// `N x 3`, in `[0, 1]`.
    pub rgb: Array2<f64>,
}

#[derive(Debug, Clone)]
struct TileGroup {
    tile: usize,
    idx: Vec<usize>,
    pn: Array2<f64>,
    dirs: Array2<f64>,
    images: Vec<Option<usize>>,
    density: MlpTrace,
    color: MlpTrace,
    raw_sigma: Vec<f64>,
    rgb: Array2<f64>,
}

/// Forward record consumed by [`RadianceFieldGrid::query_backward`].
#[derive(Debug, Clone)]
pub struct QueryTrace {
    n: usize,
    groups: Vec<TileGroup>,
}

/// `N_x x N_y` equal tiles over the scene bounds, each with its own
/// density trunk and color head.
#[derive(Debug, Clone)]
pub struct RadianceFieldGrid {
    config: FieldConfig,
    bounds: Aabb,
    centroids: Vec<Vector2<f64>>,
    density: Vec<Mlp>,
    color: Vec<Mlp>,
    appearance: Option<ParamId>,
    n_images: usize,
    center: Vector3<f64>,
    scale: f64,
    pub store: ParamStore,
}

impl RadianceFieldGrid {
    /// `n_images` sizes the appearance table (one embedding per training image).
    pub fn new(config: FieldConfig, bounds: Aabb, n_images: usize) -> Result<Self, FieldError> {
        config.validate()?;
        let size = bounds.size();
        if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
            return Err(FieldError::InvalidConfig("bounds must have positive extent".into()));
        }
        let mut centroids = Vec::with_capacity(config.nx * config.ny);
        for iy in 0..config.ny {
            for ix in 0..config.nx {
                centroids.push(Vector2::new(
                    bounds.min.x + (ix as f64 + 0.5) * size.x / config.nx as f64,
                    bounds.min.y + (iy as f64 + 0.5) * size.y / config.ny as f64,
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let pos_dim = encoded_dim(3, config.pos_freqs, true);
        let color_in = config.feature_dim + config.dir_dim() + config.emb_dim();
        let mut density = Vec::new();
        let mut color = Vec::new();
        for k in 0..centroids.len() {
            let d = Mlp::new(
                MlpSpec::new(pos_dim, config.density_hidden.clone(), 1 + config.feature_dim),
                &mut store,
                &format!("tile{k}.density"),
                &mut rng,
            )?;
            store.value_mut(d.output_bias())[[0, 0]] = config.density_bias;
            density.push(d);
            color.push(Mlp::new(
                MlpSpec::new(color_in, config.color_hidden.clone(), 3),
                &mut store,
                &format!("tile{k}.color"),
                &mut rng,
            )?);
        }
        let appearance = if config.appearance {
            let rows = n_images.max(1);
            Some(store.add("appearance", Array2::zeros((rows, config.appearance_dim)))?)
        } else {
            None
        };
        Ok(Self {
            center: bounds.center(),
            scale: 0.5 * size.x.max(size.y).max(size.z),
            config,
            bounds,
            centroids,
            density,
            color,
            appearance,
            n_images,
            store,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn centroids(&self) -> &[Vector2<f64>] {
        &self.centroids
    }

    pub fn num_tiles(&self) -> usize {
        self.centroids.len()
    }

    pub fn num_images(&self) -> usize {
        self.n_images
    }

    pub fn appearance_table(&self) -> Option<ParamId> {
        self.appearance
    }

    pub fn route(&self, p: &Vector3<f64>) -> usize {
        route_submodel(&self.centroids, p)
    }

    /// Embedding used for `image = None`: the mean of the table.
    fn embedding(&self, image: Option<usize>) -> Vec<f64> {
        let Some(id) = self.appearance else {
            return Vec::new();
        };
        let table = self.store.value(id);
        match image {
            Some(i) => table.row(i).to_vec(),
            None => table.mean_axis(ndarray::Axis(0)).map(|m| m.to_vec()).unwrap_or_default(),
        }
    }

    fn check_inputs(&self, points: ArrayView2<f64>, dirs: ArrayView2<f64>, images: &[Option<usize>]) -> Result<(), FieldError> {
        if points.ncols() != 3 || dirs.ncols() != 3 {
            return Err(FieldError::Length("points and directions must have 3 columns"));
        }
        if dirs.nrows() != points.nrows() || images.len() != points.nrows() {
            return Err(FieldError::Length("points, directions and image ids differ in count"));
        }
        for (i, d) in dirs.rows().into_iter().enumerate() {
            let norm = d.dot(&d).sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(FieldError::NonUnitDirection { index: i, norm });
            }
        }
        if self.appearance.is_some() {
            if let Some(&id) = images.iter().flatten().find(|&&i| i >= self.n_images) {
                return Err(FieldError::ImageId { id, count: self.n_images });
            }
        }
        Ok(())
    }

    fn eval_tile(
        &self,
        tile: usize,
        idx: Vec<usize>,
        points: ArrayView2<f64>,
        dirs: ArrayView2<f64>,
        images: &[Option<usize>],
    ) -> Result<TileGroup, FieldError> {
        let m = idx.len();
        let f = self.config.feature_dim;
        let mut pn = Array2::zeros((m, 3));
        let mut dd = Array2::zeros((m, 3));
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..3 {
                pn[[r, c]] = (points[[i, c]] - self.center[c]) / self.scale;
                dd[[r, c]] = dirs[[i, c]];
            }
        }
        let enc = encode_batch(pn.view(), self.config.pos_freqs, true);
        let (dout, density) = self.density[tile].forward(&self.store, enc.view(), None)?;
        let emb_dim = self.config.emb_dim();
        let dir_dim = self.config.dir_dim();
        let mut cin = Array2::zeros((m, f + dir_dim + emb_dim));
        cin.slice_mut(s![.., ..f]).assign(&dout.slice(s![.., 1..]));
        cin.slice_mut(s![.., f..f + dir_dim]).assign(&encode_batch(dd.view(), self.config.dir_freqs, true));
        let sub_images: Vec<Option<usize>> = idx.iter().map(|&i| images[i]).collect();
        if emb_dim > 0 {
            for (r, img) in sub_images.iter().enumerate() {
                for (c, v) in self.embedding(*img).into_iter().enumerate() {
                    cin[[r, f + dir_dim + c]] = v;
                }
            }
        }
        let (cout, color) = self.color[tile].forward(&self.store, cin.view(), None)?;
        Ok(TileGroup {
            tile,
            idx,
            pn,
            dirs: dd,
            images: sub_images,
            density,
            color,
            raw_sigma: dout.column(0).to_vec(),
            rgb: cout.mapv(sigmoid),
        })
    }

    fn run(&self, groups: Vec<(usize, Vec<usize>)>, points: ArrayView2<f64>, dirs: ArrayView2<f64>, images: &[Option<usize>]) -> Result<(QueryOutput, QueryTrace), FieldError> {
        let n = points.nrows();
        let mut out = QueryOutput {
            sigma: vec![0.0; n],
            rgb: Array2::zeros((n, 3)),
        };
        let mut traces = Vec::new();
        for (tile, idx) in groups {
            if idx.is_empty() {
                continue;
            }
            let g = self.eval_tile(tile, idx, points, dirs, images)?;
            for (r, &i) in g.idx.iter().enumerate() {
                out.sigma[i] = softplus(g.raw_sigma[r]);
                out.rgb.row_mut(i).assign(&g.rgb.row(r));
            }
            traces.push(g);
        }
        Ok((out, QueryTrace { n, groups: traces }))
    }

    /// Evaluates `(sigma, rgb)` at each point, routing every sample to the
    /// tile of its nearest centroid. `images[i] = None` uses the default
    /// embedding.
    pub fn query(&self, points: ArrayView2<f64>, dirs: ArrayView2<f64>, images: &[Option<usize>]) -> Result<(QueryOutput, QueryTrace), FieldError> {
        self.check_inputs(points, dirs, images)?;
        let mut groups: Vec<(usize, Vec<usize>)> = (0..self.num_tiles()).map(|k| (k, Vec::new())).collect();
        for (i, p) in points.rows().into_iter().enumerate() {
            let k = self.route(&Vector3::new(p[0], p[1], p[2]));
            groups[k].1.push(i);
        }
        self.run(groups, points, dirs, images)
    }

    /// Evaluates every point with sub-field `tile`, bypassing routing.
    pub fn query_tile(&self, tile: usize, points: ArrayView2<f64>, dirs: ArrayView2<f64>, images: &[Option<usize>]) -> Result<(QueryOutput, QueryTrace), FieldError> {
        self.check_inputs(points, dirs, images)?;
        if tile >= self.num_tiles() {
            return Err(FieldError::InvalidConfig(format!("tile {tile} out of range")));
        }
        self.run(vec![(tile, (0..points.nrows()).collect())], points, dirs, images)
    }

    /// Single-point convenience wrapper around [`Self::query`].
    pub fn query_point(&self, p: &Vector3<f64>, dir: &Vector3<f64>, image: Option<usize>) -> Result<([f64; 3], f64), FieldError> {
        let pts = Array2::from_shape_vec((1, 3), vec![p.x, p.y, p.z]).expect("shape");
        let ds = Array2::from_shape_vec((1, 3), vec![dir.x, dir.y, dir.z]).expect("shape");
        let (out, _) = self.query(pts.view(), ds.view(), &[image])?;
        Ok(([out.rgb[[0, 0]], out.rgb[[0, 1]], out.rgb[[0, 2]]], out.sigma[0]))
    }

    /// Accumulates parameter gradients for `d loss / d sigma` and
    /// `d loss / d rgb`; returns gradients with respect to the points and
    /// directions when `need_input_grads` is set.
    pub fn query_backward(
        &mut self,
        trace: &QueryTrace,
        g_sigma: &[f64],
        g_rgb: ArrayView2<f64>,
        need_input_grads: bool,
    ) -> Result<Option<(Array2<f64>, Array2<f64>)>, FieldError> {
        if g_sigma.len() != trace.n || g_rgb.nrows() != trace.n {
            return Err(FieldError::Length("gradient rows differ from the query batch"));
        }
        let f = self.config.feature_dim;
        let dir_dim = self.config.dir_dim();
        let emb_dim = self.config.emb_dim();
        let mut gp = Array2::zeros((trace.n, 3));
        let mut gd = Array2::zeros((trace.n, 3));
        for g in &trace.groups {
            let m = g.idx.len();
            let mut gc = Array2::zeros((m, 3));
            for (r, &i) in g.idx.iter().enumerate() {
                for c in 0..3 {
                    let y = g.rgb[[r, c]];
                    gc[[r, c]] = g_rgb[[i, c]] * y * (1.0 - y);
                }
            }
            let cg = self.color[g.tile].backward(&mut self.store, &g.color, gc.view(), None, true)?;
            let g_cin = cg.input.expect("input gradients requested");
            let mut g_dout = Array2::zeros((m, 1 + f));
            for (r, &i) in g.idx.iter().enumerate() {
                g_dout[[r, 0]] = g_sigma[i] * sigmoid(g.raw_sigma[r]);
            }
            g_dout.slice_mut(s![.., 1..]).assign(&g_cin.slice(s![.., ..f]));
            if let (Some(id), true) = (self.appearance, emb_dim > 0) {
                let rows = self.store.value(id).nrows();
                let table_grad = self.store.grad_mut(id);
                for (r, img) in g.images.iter().enumerate() {
                    let ge = g_cin.slice(s![r, f + dir_dim..]);
                    match img {
                        Some(i) => {
                            let mut row = table_grad.row_mut(*i);
                            row += &ge;
                        }
                        None => {
                            for mut row in table_grad.rows_mut() {
                                row.scaled_add(1.0 / rows as f64, &ge);
                            }
                        }
                    }
                }
            }
            let dg = self.density[g.tile].backward(&mut self.store, &g.density, g_dout.view(), None, need_input_grads)?;
            if need_input_grads {
                let g_enc = dg.input.expect("input gradients requested");
                let g_pn = encode_backward(g.pn.view(), g_enc.view(), self.config.pos_freqs, true);
                let g_dir = encode_backward(g.dirs.view(), g_cin.slice(s![.., f..f + dir_dim]), self.config.dir_freqs, true);
                for (r, &i) in g.idx.iter().enumerate() {
                    for c in 0..3 {
                        gp[[i, c]] = g_pn[[r, c]] / self.scale;
                        gd[[i, c]] = g_dir[[r, c]];
                    }
                }
            }
        }
        Ok(need_input_grads.then_some((gp, gd)))
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_store(prefix, &self.store);
        let b = &self.bounds;
        ck.insert(
            format!("{prefix}.meta.bounds"),
            vec![6],
            vec![b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z],
        );
        ck.insert(format!("{prefix}.meta.images"), vec![1], vec![self.n_images as f64]);
    }

    pub fn load_from(config: FieldConfig, ck: &Checkpoint, prefix: &str) -> Result<Self, FieldError> {
        let b = ck.scalars(&format!("{prefix}.meta.bounds"), 6)?;
        let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
        let n_images = ck.scalars(&format!("{prefix}.meta.images"), 1)?[0] as usize;
        let mut grid = Self::new(config, bounds, n_images)?;
        ck.restore_store(prefix, &mut grid.store)?;
        Ok(grid)
    }
}
