use nalgebra::Vector3;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hashgrid::{build_levels, init_table, quadratic_weight_derivs, quadratic_weights, HashLevel};
use super::TimePoseError;
use crate::diffcore::{Checkpoint, Mlp, MlpSpec, MlpTrace, ParamId, ParamStore};
use crate::geom::Pose;

/// Architecture and training hyper-parameters of the time-pose network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimePoseConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    /// Upper bound on the finest resolution; the growth factor shrinks to
    /// respect it.
    pub max_resolution: Option<usize>,
    /// When fitting, cap the finest resolution so every cell spans at least
    /// this many training samples on average (0 disables the cap).
    pub min_samples_per_cell: f64,
    pub features_per_level: usize,
    /// Levels needing more dense rows than this use hashed indexing.
    pub max_dense_nodes: usize,
    pub hash_table_size: usize,
    pub hidden: Vec<usize>,
    /// Layer that receives the normalized timestamp as an extra input.
    pub skip_layer: Option<usize>,
    pub table_init: f64,
    pub head_init_scale: f64,
    pub iters: usize,
    pub lr: f64,
    pub adam_beta2: f64,
    /// Learning rate decays exponentially to `lr * lr_final_factor`.
    pub lr_final_factor: f64,
    pub lambda_speed: f64,
    /// Learning-rate multiplier for the two log-variances.
    pub log_var_lr_scale: f64,
    /// Samples per step; 0 uses the full set.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TimePoseConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            growth: 2.0,
            max_resolution: None,
            min_samples_per_cell: 2.0,
            features_per_level: 2,
            max_dense_nodes: 65536,
            hash_table_size: 4096,
            hidden: vec![128; 4],
            skip_layer: Some(2),
            table_init: 1e-4,
            head_init_scale: 0.1,
            iters: 2000,
            lr: 5e-3,
            adam_beta2: 0.99,
            lr_final_factor: 0.05,
            lambda_speed: 0.01,
            log_var_lr_scale: 10.0,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl TimePoseConfig {
    /// The large decoder: ten layers of 1024 with the timestamp re-injected
    /// at the fifth.
    pub fn full_scale() -> Self {
        Self {
            hidden: vec![1024; 10],
            skip_layer: Some(5),
            ..Self::default()
        }
    }

    /// Growth factor after applying `max_resolution`.
    pub fn effective_growth(&self) -> f64 {
        match self.max_resolution {
            Some(cap) if self.levels > 1 => {
                let needed = (cap as f64 / self.base_resolution as f64).powf(1.0 / (self.levels - 1) as f64);
                self.growth.min(needed.max(1.0))
            }
            _ => self.growth,
        }
    }

    pub fn validate(&self) -> Result<(), TimePoseError> {
        let bad = |m: &'static str| Err(TimePoseError::InvalidConfig(m));
        if self.levels == 0 || self.features_per_level == 0 {
            return bad("need at least one level and one feature");
        }
        if self.base_resolution < 2 {
            return bad("base resolution must be >= 2");
        }
        if self.growth <= 1.0 && self.levels > 1 {
            return bad("growth must exceed 1");
        }
        if self.hidden.is_empty() {
            return bad("decoder needs a hidden layer");
        }
        if let Some(k) = self.skip_layer {
            if k > self.hidden.len() {
                return bad("skip layer beyond decoder depth");
            }
        }
        if self.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(self.log_var_lr_scale >= 0.0) {
            return bad("log_var_lr_scale must be non-negative");
        }
        Ok(())
    }
}

/// Maps query times to `[0, 1]` and poses to a unit-scale frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub t_min: f64,
    pub t_max: f64,
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.t_min) / self.span()
    }
}

/// Batched network output.
#[derive(Debug, Clone)]
pub struct TimePoseBatch {
    /// `N x 3` positions (meters).
    pub translation: Array2<f64>,
    /// `N x 4` unit quaternions `(w, x, y, z)`, not sign-canonicalized.
    pub quaternion: Array2<f64>,
    /// `N x 3` `d translation / dt` (m/s), when requested.
    pub velocity: Option<Array2<f64>>,
    pub clamped: Vec<bool>,
    pub degenerate: Vec<bool>,
}

impl TimePoseBatch {
    pub fn pose(&self, i: usize) -> Pose {
        let x = Vector3::new(self.translation[[i, 0]], self.translation[[i, 1]], self.translation[[i, 2]]);
        let q = self.quaternion.row(i);
        Pose::new([q[0], q[1], q[2], q[3]], x).unwrap_or_else(|_| Pose::from_translation(x.x, x.y, x.z))
    }

    pub fn len(&self) -> usize {
        self.translation.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward record consumed by [`TimePoseModel::backward`].
#[derive(Debug, Clone)]
pub struct TimePoseTrace {
    /// Per level, per sample: `(node, u)`.
    cells: Vec<Vec<(i64, f64)>>,
    /// Tangent of normalized time (0 where clamped).
    t_dot: Vec<f64>,
    raw_norm: Vec<f64>,
    quaternion: Array2<f64>,
    mlp: MlpTrace,
    tangent: bool,
}

/// Timestamp-to-pose network: multi-resolution 1-D grid, MLP decoder with a
/// translation head (3 outputs) and a rotation head (4 outputs, normalized).
#[derive(Debug, Clone)]
pub struct TimePoseModel {
    config: TimePoseConfig,
    levels: Vec<HashLevel>,
    tables: Vec<ParamId>,
    decoder: Mlp,
    log_var: ParamId,
    pub store: ParamStore,
    norm: Normalization,
}

const DEGENERATE_NORM: f64 = 1e-8;

impl TimePoseModel {
    pub fn new(config: TimePoseConfig, norm: Normalization) -> Result<Self, TimePoseError> {
        config.validate()?;
        if !(norm.t_min < norm.t_max) {
            return Err(TimePoseError::InvalidConfig("time span must satisfy t_min < t_max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let levels = build_levels(
            config.levels,
            config.base_resolution,
            config.effective_growth(),
            config.features_per_level,
            config.max_dense_nodes,
            config.hash_table_size,
        );
        let mut store = ParamStore::new();
        let mut tables = Vec::with_capacity(levels.len());
        for (l, level) in levels.iter().enumerate() {
            tables.push(store.add(format!("grid.l{l}"), init_table(level, config.table_init, &mut rng))?);
        }
        let input_dim = levels.len() * config.features_per_level;
        let mut spec = MlpSpec::new(input_dim, config.hidden.clone(), 7);
        if let Some(k) = config.skip_layer {
            spec = spec.with_skip(k, 1);
        }
        let decoder = Mlp::new(spec, &mut store, "decoder", &mut rng)?;
        store.value_mut(decoder.output_weight()).mapv_inplace(|w| w * config.head_init_scale);
        {
            let b = store.value_mut(decoder.output_bias());
            b.fill(0.0);
            b[[0, 3]] = 1.0;
        }
        let log_var = store.add("log_var", Array2::zeros((1, 2)))?;
        Ok(Self {
            config,
            levels,
            tables,
            decoder,
            log_var,
            store,
            norm,
        })
    }

    pub fn config(&self) -> &TimePoseConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn levels(&self) -> &[HashLevel] {
        &self.levels
    }

    pub fn table(&self, level: usize) -> ParamId {
        self.tables[level]
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Learnable `(s_trans, s_rot)`.
    pub fn log_variances(&self) -> (f64, f64) {
        let v = self.store.value(self.log_var);
        (v[[0, 0]], v[[0, 1]])
    }

    pub(crate) fn log_var_param(&self) -> ParamId {
        self.log_var
    }

    pub fn set_log_variances(&mut self, s_trans: f64, s_rot: f64) {
        let v = self.store.value_mut(self.log_var);
        v[[0, 0]] = s_trans;
        v[[0, 1]] = s_rot;
    }

    pub fn forward_batch(&self, ts: &[f64], with_velocity: bool) -> Result<(TimePoseBatch, TimePoseTrace), TimePoseError> {
        let n = ts.len();
        let f = self.config.features_per_level;
        let width = self.levels.len() * f;
        let mut v = Array2::zeros((n, width));
        let mut v_dot = Array2::zeros((n, width));
        let mut clamped = vec![false; n];
        let mut t_norm = Array2::zeros((n, 1));
        let mut t_dot = vec![1.0; n];
        for (i, &t) in ts.iter().enumerate() {
            let tn = self.norm.normalize_time(t);
            if !(0.0..=1.0).contains(&tn) {
                clamped[i] = true;
                t_dot[i] = 0.0;
            }
            t_norm[[i, 0]] = tn.clamp(0.0, 1.0);
        }
        let mut cells = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let table = self.store.value(self.tables[l]);
            let r = level.resolution as f64;
            let mut lc = Vec::with_capacity(n);
            for i in 0..n {
                let cell = level.locate(t_norm[[i, 0]]);
                let w = quadratic_weights(cell.u);
                let dw = quadratic_weight_derivs(cell.u);
                for k in 0..3 {
                    let row = table.row(level.node_row(cell.node - 1 + k as i64));
                    for c in 0..f {
                        v[[i, l * f + c]] += w[k] * row[c];
                        v_dot[[i, l * f + c]] += dw[k] * r * t_dot[i] * row[c];
                    }
                }
                lc.push((cell.node, cell.u));
            }
            cells.push(lc);
        }
        let skip = self.config.skip_layer.map(|_| t_norm.view());
        let (out, out_dot, mlp) = if with_velocity {
            let skip_dot = Array2::from_shape_vec((n, 1), t_dot.clone()).unwrap();
            let sd = self.config.skip_layer.map(|_| skip_dot.view());
            let (y, yd, tr) = self.decoder.forward_tangent(&self.store, v.view(), v_dot.view(), skip, sd)?;
            (y, Some(yd), tr)
        } else {
            let (y, tr) = self.decoder.forward(&self.store, v.view(), skip)?;
            (y, None, tr)
        };

        let scale = self.norm.scale;
        let center = self.norm.center;
        let mut translation = out.slice(s![.., 0..3]).to_owned() * scale;
        for mut row in translation.rows_mut() {
            for c in 0..3 {
                row[c] += center[c];
            }
        }
        let velocity = out_dot.map(|od| od.slice(s![.., 0..3]).to_owned() * (scale / self.norm.span()));
        let raw = out.slice(s![.., 3..7]).to_owned();
        let mut quaternion = Array2::zeros((n, 4));
        let mut raw_norm = vec![0.0; n];
        let mut degenerate = vec![false; n];
        for i in 0..n {
            let r = raw.row(i);
            let nr = r.dot(&r).sqrt();
            raw_norm[i] = nr;
            if nr < DEGENERATE_NORM || !nr.is_finite() {
                degenerate[i] = true;
                quaternion[[i, 0]] = 1.0;
            } else {
                for c in 0..4 {
                    quaternion[[i, c]] = r[c] / nr;
                }
            }
        }
        let batch = TimePoseBatch {
            translation,
            quaternion: quaternion.clone(),
            velocity,
            clamped,
            degenerate,
        };
        let trace = TimePoseTrace {
            cells,
            t_dot,
            raw_norm,
            quaternion,
            mlp,
            tangent: with_velocity,
        };
        Ok((batch, trace))
    }

    /// Accumulates parameter gradients given gradients with respect to the
    /// translations, the normalized quaternions and (optionally) velocities.
    pub fn backward(
        &mut self,
        trace: &TimePoseTrace,
        g_translation: &Array2<f64>,
        g_quaternion: &Array2<f64>,
        g_velocity: Option<&Array2<f64>>,
    ) -> Result<(), TimePoseError> {
        let n = trace.raw_norm.len();
        if g_velocity.is_some() && !trace.tangent {
            return Err(TimePoseError::InvalidConfig("velocity gradient needs a velocity-enabled forward pass"));
        }
        let mut g_out = Array2::zeros((n, 7));
        let scale = self.norm.scale;
        for i in 0..n {
            for c in 0..3 {
                g_out[[i, c]] = g_translation[[i, c]] * scale;
            }
            let nr = trace.raw_norm[i];
            if nr < DEGENERATE_NORM || !nr.is_finite() {
                continue;
            }
            let q = trace.quaternion.row(i);
            let gq = g_quaternion.row(i);
            let radial = q.dot(&gq);
            for c in 0..4 {
                g_out[[i, 3 + c]] = (gq[c] - q[c] * radial) / nr;
            }
        }
        let g_out_dot = if trace.tangent {
            let mut gd = Array2::zeros((n, 7));
            if let Some(gv) = g_velocity {
                let k = scale / self.norm.span();
                gd.slice_mut(s![.., 0..3]).assign(&(gv * k));
            }
            Some(gd)
        } else {
            None
        };
        let grads = self
            .decoder
            .backward(&mut self.store, &trace.mlp, g_out.view(), g_out_dot.as_ref().map(|g| g.view()), true)?;
        let gv = grads.input.expect("input gradients requested");
        let gv_dot = grads.input_dot;
        let f = self.config.features_per_level;
        for (l, level) in self.levels.iter().enumerate() {
            let r = level.resolution as f64;
            let table = self.store.grad_mut(self.tables[l]);
            for (i, &(node, u)) in trace.cells[l].iter().enumerate() {
                let w = quadratic_weights(u);
                let dw = quadratic_weight_derivs(u);
                for k in 0..3 {
                    let row = level.node_row(node - 1 + k as i64);
                    for c in 0..f {
                        let mut g = w[k] * gv[[i, l * f + c]];
                        if let Some(gd) = gv_dot.as_ref() {
                            g += dw[k] * r * trace.t_dot[i] * gd[[i, l * f + c]];
                        }
                        table[[row, c]] += g;
                    }
                }
            }
        }
        Ok(())
    }

    /// Pose at time `t` (clamped to the fitted span).
    pub fn pose_at(&self, t: f64) -> Pose {
        let (b, _) = self.forward_batch(&[t], false).expect("single-sample forward");
        b.pose(0)
    }

    pub fn poses_at(&self, ts: &[f64]) -> Vec<Pose> {
        let (b, _) = self.forward_batch(ts, false).expect("batched forward");
        (0..ts.len()).map(|i| b.pose(i)).collect()
    }

    /// `d translation / dt` (m/s) at `t`.
    pub fn velocity_at(&self, t: f64) -> Vector3<f64> {
        let (b, _) = self.forward_batch(&[t], true).expect("single-sample forward");
        let v = b.velocity.unwrap();
        Vector3::new(v[[0, 0]], v[[0, 1]], v[[0, 2]])
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_store(prefix, &self.store);
        let c = self.norm.center;
        ck.insert(
            format!("{prefix}/meta.normalization"),
            vec![6],
            vec![self.norm.t_min, self.norm.t_max, c.x, c.y, c.z, self.norm.scale],
        );
        ck.insert(format!("{prefix}/meta.growth"), vec![1], vec![self.config.effective_growth()]);
    }

    /// Rebuilds a model saved by [`Self::save_into`]; the grid growth stored
    /// in the checkpoint overrides the one in `config`.
    pub fn load_from(mut config: TimePoseConfig, ck: &Checkpoint, prefix: &str) -> Result<Self, TimePoseError> {
        let m = ck.scalars(&format!("{prefix}/meta.normalization"), 6)?;
        config.growth = ck.scalars(&format!("{prefix}/meta.growth"), 1)?[0];
        config.max_resolution = None;
        let norm = Normalization {
            t_min: m[0],
            t_max: m[1],
            center: Vector3::new(m[2], m[3], m[4]),
            scale: m[5],
        };
        let mut model = Self::new(config, norm)?;
        ck.restore_store(prefix, &mut model.store)?;
        Ok(model)
    }

    pub fn grad_norm(&self) -> f64 {
        self.store.grad_norm()
    }
}
