//! One-dimensional multi-resolution feature grid with three-node quadratic
//! interpolation.

use ndarray::{Array2, ArrayView2};

/// Multipliers for the hashed node index, one per level (cycled).
const HASH_PRIMES: [u64; 8] = [
    2_654_435_761,
    805_459_861,
    3_674_653_429,
    2_097_192_037,
    1_434_869_437,
    2_165_219_737,
    3_367_900_313,
    1_618_033_999,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeIndexing {
    /// One row per node `-1..=R+1`.
    Dense,
    /// Node `k` lives at row `((k + 1) * prime) mod table_size`.
    Hashed { table_size: usize, prime: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashLevel {
    pub resolution: usize,
    pub features: usize,
    pub indexing: NodeIndexing,
}

/// Position of a normalized timestamp inside a level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// `floor(t * R)`, in `0..=R`.
    pub node: i64,
    /// Fractional offset in `[0, 1)`.
    pub u: f64,
    pub clamped: bool,
}

/// Lagrange weights for nodes `n-1, n, n+1` at offset `u`.
#[inline]
pub fn quadratic_weights(u: f64) -> [f64; 3] {
    [0.5 * u * (u - 1.0), 1.0 - u * u, 0.5 * u * (u + 1.0)]
}

/// `d/du` of [`quadratic_weights`].
#[inline]
pub fn quadratic_weight_derivs(u: f64) -> [f64; 3] {
    [u - 0.5, -2.0 * u, u + 0.5]
}

impl HashLevel {
    pub fn dense(resolution: usize, features: usize) -> Self {
        Self {
            resolution,
            features,
            indexing: NodeIndexing::Dense,
        }
    }

    pub fn hashed(resolution: usize, features: usize, table_size: usize, level: usize) -> Self {
        Self {
            resolution,
            features,
            indexing: NodeIndexing::Hashed {
                table_size,
                prime: HASH_PRIMES[level % HASH_PRIMES.len()],
            },
        }
    }

    /// Rows of the feature table.
    pub fn table_rows(&self) -> usize {
        match self.indexing {
            NodeIndexing::Dense => self.resolution + 3,
            NodeIndexing::Hashed { table_size, .. } => table_size,
        }
    }

    /// Table row for grid node `k` (`-1 <= k <= R + 1`).
    pub fn node_row(&self, k: i64) -> usize {
        debug_assert!(k >= -1 && k <= self.resolution as i64 + 1);
        let k = (k + 1) as u64;
        match self.indexing {
            NodeIndexing::Dense => k as usize,
            NodeIndexing::Hashed { table_size, prime } => (k.wrapping_mul(prime) % table_size as u64) as usize,
        }
    }

    /// Clamps `t_norm` to `[0, 1]` and locates its cell.
    pub fn locate(&self, t_norm: f64) -> Cell {
        let clamped = !(0.0..=1.0).contains(&t_norm);
        let t = t_norm.clamp(0.0, 1.0);
        let x = t * self.resolution as f64;
        let node = (x.floor() as i64).min(self.resolution as i64);
        Cell {
            node,
            u: x - node as f64,
            clamped,
        }
    }
}

/// Interpolated feature at `t_norm`; the flag reports clamping.
pub fn hash_interp(level: &HashLevel, table: ArrayView2<f64>, t_norm: f64) -> (Vec<f64>, bool) {
    let cell = level.locate(t_norm);
    let w = quadratic_weights(cell.u);
    let mut out = vec![0.0; level.features];
    for (k, wk) in w.iter().enumerate() {
        let row = table.row(level.node_row(cell.node - 1 + k as i64));
        for (o, g) in out.iter_mut().zip(row) {
            *o += wk * g;
        }
    }
    (out, cell.clamped)
}

/// Levels with geometrically growing resolution; levels whose dense table
/// would exceed `max_dense_nodes` switch to hashed indexing.
pub fn build_levels(
    count: usize,
    base_resolution: usize,
    growth: f64,
    features: usize,
    max_dense_nodes: usize,
    hash_table_size: usize,
) -> Vec<HashLevel> {
    let mut out = Vec::with_capacity(count);
    let mut prev = 0;
    for l in 0..count {
        let r = ((base_resolution as f64) * growth.powi(l as i32)).round() as usize;
        let r = r.max(prev + 1).max(2);
        prev = r;
        if r + 3 <= max_dense_nodes {
            out.push(HashLevel::dense(r, features));
        } else {
            out.push(HashLevel::hashed(r, features, hash_table_size, l));
        }
    }
    out
}

pub fn init_table(level: &HashLevel, scale: f64, rng: &mut impl rand::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((level.table_rows(), level.features), || rng.gen_range(-scale..scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn node_coincidence() {
        assert_eq!(quadratic_weights(0.0), [0.0, 1.0, 0.0]);
        let level = HashLevel::dense(4, 1);
        let table = Array2::from_shape_fn((7, 1), |(i, _)| (i as f64) * 10.0 + 3.0);
        // t = 0.5 -> x = 2, node 2 -> row 3.
        let (f, clamped) = hash_interp(&level, table.view(), 0.5);
        assert_eq!(f, vec![33.0]);
        assert!(!clamped);
    }

    #[test]
    fn half_offset_weights() {
        assert_eq!(quadratic_weights(0.5), [-0.125, 0.75, 0.375]);
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let u: f64 = rng.gen_range(0.0..1.0);
            let s: f64 = quadratic_weights(u).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let ds: f64 = quadratic_weight_derivs(u).iter().sum();
            assert!(ds.abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_quadratics() {
        // Node features sampled from p(k) reproduce p at every x.
        let level = HashLevel::dense(8, 1);
        let p = |k: f64| 0.3 * k * k - 1.2 * k + 0.7;
        let table = Array2::from_shape_fn((11, 1), |(i, _)| p(i as f64 - 1.0));
        for i in 0..=400 {
            let t = i as f64 / 400.0;
            let (f, _) = hash_interp(&level, table.view(), t);
            let expect = p(t * 8.0);
            assert!((f[0] - expect).abs() < 1e-9, "t={t} {} vs {expect}", f[0]);
        }
        // Linear ramp f(k) = k reproduces x.
        let ramp = Array2::from_shape_fn((11, 1), |(i, _)| i as f64 - 1.0);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert!((hash_interp(&level, ramp.view(), t).0[0] - 8.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_across_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let level = HashLevel::dense(16, 3);
        let table = init_table(&level, 1.0, &mut rng);
        for n in 1..16 {
            let t = n as f64 / 16.0;
            let (l, _) = hash_interp(&level, table.view(), t - 1e-13);
            let (r, _) = hash_interp(&level, table.view(), t);
            for (a, b) in l.iter().zip(&r) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clamps_out_of_range() {
        let level = HashLevel::dense(4, 1);
        let table = Array2::from_shape_fn((7, 1), |(i, _)| i as f64);
        let (f, clamped) = hash_interp(&level, table.view(), 1.2);
        assert!(clamped);
        assert_eq!(f, hash_interp(&level, table.view(), 1.0).0);
        assert!(hash_interp(&level, table.view(), -0.1).1);
    }

    #[test]
    fn hashed_indexing_stays_in_table() {
        let level = HashLevel::hashed(100_000, 2, 1024, 3);
        assert_eq!(level.table_rows(), 1024);
        for k in -1..=100_001 {
            assert!(level.node_row(k) < 1024);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = init_table(&level, 1.0, &mut rng);
        let (f, _) = hash_interp(&level, table.view(), 0.37);
        assert_eq!(f.len(), 2);
        // At a node the feature is exactly that node's row.
        let (f, _) = hash_interp(&level, table.view(), 0.5);
        let row = level.node_row(50_000);
        assert_eq!(f, table.row(row).to_vec());
    }

    #[test]
    fn level_construction() {
        let levels = build_levels(8, 16, 2.0, 2, 65536, 4096);
        assert_eq!(levels[0].resolution, 16);
        assert_eq!(levels[7].resolution, 2048);
        assert!(levels.windows(2).all(|w| w[1].resolution > w[0].resolution));
        assert!(levels.iter().all(|l| l.indexing == NodeIndexing::Dense));
        let levels = build_levels(3, 40_000, 2.0, 2, 65536, 4096);
        assert!(matches!(levels[1].indexing, NodeIndexing::Hashed { .. }));
    }
}
