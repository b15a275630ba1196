use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    Fixed,
    Random,
}

/// How RGB and depth frames are picked from the high-rate base sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleProtocol {
    pub mode: ResampleMode,
    /// Base frames between consecutive RGB frames.
    pub rgb_stride: usize,
    /// Depth lag as a percentage of the RGB period (lower bound in random mode).
    pub x_percent: f64,
    /// Upper bound of the random lag (percent); ignored in fixed mode.
    pub y_percent: f64,
    pub seed: u64,
}

impl Default for ResampleProtocol {
    fn default() -> Self {
        Self {
            mode: ResampleMode::Fixed,
            rgb_stride: 10,
            x_percent: 30.0,
            y_percent: 50.0,
            seed: 0,
        }
    }
}

impl ResampleProtocol {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.rgb_stride == 0 {
            return bad("rgb stride must be positive");
        }
        if !(0.0..=100.0).contains(&self.x_percent) {
            return bad("offset x must lie in [0, 100]");
        }
        if self.mode == ResampleMode::Random {
            if !(self.x_percent <= self.y_percent && self.y_percent <= 100.0) {
                return bad("random mode requires x <= y <= 100");
            }
            let (lo, hi) = self.offset_range();
            if lo > hi {
                return bad("no whole base frame lies inside [x, y]");
            }
            if hi >= lo + self.rgb_stride {
                return bad("offset spread of a full RGB period would reorder depth frames");
            }
        }
        Ok(())
    }

    /// Inclusive range of depth lags in base frames.
    pub fn offset_range(&self) -> (usize, usize) {
        let s = self.rgb_stride as f64;
        match self.mode {
            ResampleMode::Fixed => {
                let k = (s * self.x_percent / 100.0).round() as usize;
                (k, k)
            }
            ResampleMode::Random => (
                (s * self.x_percent / 100.0 - 1e-9).ceil() as usize,
                (s * self.y_percent / 100.0 + 1e-9).floor() as usize,
            ),
        }
    }
}

/// Base-frame indices of each kept RGB/depth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub pairs: Vec<(usize, usize)>,
    /// Pairs whose depth frame would fall past the end of the sequence.
    pub dropped: usize,
}

/// RGB at `0, s, 2s, ...`; depth at `i*s + offset_i`. Random offsets are drawn
/// uniformly from the whole base frames inside `[x, y]` percent.
pub fn resample_plan(n_base: usize, protocol: &ResampleProtocol) -> Result<ResamplePlan, SynthError> {
    protocol.validate()?;
    let (lo, hi) = protocol.offset_range();
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for rgb in (0..n_base).step_by(protocol.rgb_stride) {
        let off = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let depth = rgb + off;
        if depth < n_base {
            pairs.push((rgb, depth));
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("resampling dropped {dropped} trailing pair(s) whose depth frame falls past the sequence end");
    }
    Ok(ResamplePlan { pairs, dropped })
}
