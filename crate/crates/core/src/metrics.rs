//! Image, depth and pose metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;

/// Returned by [`psnr`] when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("non-positive depth at masked pixel {0}")]
    NonPositive(usize),
}

/// `10 log10(1 / MSE)` over all channels.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    psnr_values(&a.data, &b.data)
}

pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Normalized 2-D Gaussian window, row-major `size x size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean SSIM of the luma channels (valid windows only).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    ssim_gray(&a.to_gray(), &b.to_gray(), a.width, a.height)
}

pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MetricsError> {
    if a.len() != width * height || b.len() != width * height {
        return Err(MetricsError::Shape(format!("expected {} pixels, got {} and {}", width * height, a.len(), b.len())));
    }
    let k = SSIM_WINDOW;
    if width < k || height < k {
        return Err(MetricsError::TooSmall { width, height, window: k });
    }
    let win = gaussian_window(k, SSIM_SIGMA);
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..k {
                let row = (oy + wy) * width + ox;
                for wx in 0..k {
                    let w = win[wy * k + wx];
                    let (x, y) = (a[row + wx], b[row + wx]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rmse_log: f64,
    /// Percent of masked pixels with `max(f/g, g/f) < 1.25^k`.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

/// Depth errors over the masked pixels of prediction `f` and ground truth `g`.
pub fn depth_metrics(f: &[f64], g: &[f64], mask: &[bool]) -> Result<DepthMetrics, MetricsError> {
    if f.len() != g.len() || f.len() != mask.len() {
        return Err(MetricsError::Shape(format!("{} / {} / {} pixels", f.len(), g.len(), mask.len())));
    }
    let (mut se, mut sle, mut d) = (0.0, 0.0, [0usize; 3]);
    let mut count = 0;
    for i in (0..f.len()).filter(|&i| mask[i]) {
        let (fi, gi) = (f[i], g[i]);
        if !(fi > 0.0 && gi > 0.0) {
            return Err(MetricsError::NonPositive(i));
        }
        count += 1;
        se += (fi - gi) * (fi - gi);
        sle += (fi.ln() - gi.ln()).powi(2);
        let ratio = (fi / gi).max(gi / fi);
        for (k, dk) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *dk += 1;
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let n = count as f64;
    Ok(DepthMetrics {
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        delta1: 100.0 * d[0] as f64 / n,
        delta2: 100.0 * d[1] as f64 / n,
        delta3: 100.0 * d[2] as f64 / n,
        count,
    })
}

/// Pixels usable for depth evaluation: valid ground truth and enough
/// rendered opacity.
pub fn depth_eval_mask(gt: &[f64], opacity: &[f64], min_opacity: f64) -> Vec<bool> {
    gt.iter()
        .zip(opacity)
        .map(|(&g, &o)| g > 0.0 && g.is_finite() && o >= min_opacity)
        .collect()
}

/// Aggregate evaluation result. LPIPS is not computed and serializes as null.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub depth_rmse: f64,
    pub depth_rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    pub valid_fraction: f64,
}

impl MetricsBundle {
    /// Per-field mean over views (pose errors are set by the caller).
    pub fn mean(views: &[MetricsBundle]) -> MetricsBundle {
        let n = views.len().max(1) as f64;
        let sum = |f: fn(&MetricsBundle) -> f64| views.iter().map(f).sum::<f64>() / n;
        MetricsBundle {
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
            lpips: None,
            depth_rmse: sum(|m| m.depth_rmse),
            depth_rmse_log: sum(|m| m.depth_rmse_log),
            delta1: sum(|m| m.delta1),
            delta2: sum(|m| m.delta2),
            delta3: sum(|m| m.delta3),
            rot_err_deg: sum(|m| m.rot_err_deg),
            trans_err_m: sum(|m| m.trans_err_m),
            valid_fraction: sum(|m| m.valid_fraction),
        }
    }
}

/// One CSV row per view.
pub fn write_view_metrics_csv(path: &Path, views: &[(String, MetricsBundle)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "view", "psnr", "ssim", "lpips", "depth_rmse", "depth_rmse_log", "delta1", "delta2", "delta3", "rot_err_deg",
        "trans_err_m", "valid_fraction",
    ])?;
    for (name, m) in views {
        w.write_record([
            name.clone(),
            m.psnr.to_string(),
            m.ssim.to_string(),
            "n/a".to_string(),
            m.depth_rmse.to_string(),
            m.depth_rmse_log.to_string(),
            m.delta1.to_string(),
            m.delta2.to_string(),
            m.delta3.to_string(),
            m.rot_err_deg.to_string(),
            m.trans_err_m.to_string(),
            m.valid_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
