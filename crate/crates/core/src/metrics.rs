//! PSNR and SSIM with batch evaluation over restored/reference pairs.
//!
//! Both metrics map samples to [0, 1] first (peak 1). PSNR is capped at
//! 100 dB so identical images keep aggregates finite. SSIM uses the standard
//! 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, valid windows
//! only, channels averaged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, Image, CHANNELS};
use crate::parallel::{default_exec, map_collect};

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn ensure_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error over raw [-1, 1] samples.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let se: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(se / a.samples().len() as f64)
}

/// Root mean squared error over raw [-1, 1] samples.
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Peak signal-to-noise ratio in dB after mapping to [0, 1]: `10 log10(1/MSE)`,
/// capped at 100 dB (the zero-MSE convention).
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    // (s+1)/2 mapping halves the difference, so MSE_[0,1] = MSE_[-1,1] / 4.
    let m = mse(a, b)? / 4.0;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid region only: output is (h-10) x (w-10).
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wt) in win.iter().enumerate() {
                acc += wt * plane[y * w + x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wt) in win.iter().enumerate() {
                acc += wt * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity in [-1, 1], averaged over channels and valid
/// windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for c in 0..CHANNELS {
        let to01 = |s: &f32| (*s as f64 + 1.0) / 2.0;
        let pa: Vec<f64> = a.channel(c).iter().map(to01).collect();
        let pb: Vec<f64> = b.channel(c).iter().map(to01).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let s_aa = filter_valid(&paa, h, w, &win);
        let s_bb = filter_valid(&pbb, h, w, &win);
        let s_ab = filter_valid(&pab, h, w, &win);

        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / CHANNELS as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedPair {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    pub skipped: Vec<SkippedPair>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub partial: bool,
}

impl MetricReport {
    fn from_parts(per_image: Vec<PairMetrics>, skipped: Vec<SkippedPair>) -> Self {
        let count = per_image.len();
        let (mut mean_psnr_db, mut mean_ssim) = (0.0, 0.0);
        if count > 0 {
            mean_psnr_db = per_image.iter().map(|p| p.psnr_db).sum::<f64>() / count as f64;
            mean_ssim = per_image.iter().map(|p| p.ssim).sum::<f64>() / count as f64;
        }
        let partial = !skipped.is_empty();
        MetricReport { per_image, skipped, mean_psnr_db, mean_ssim, count, partial }
    }

    /// `id,psnr_db,ssim` rows, one per evaluated image.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("id,psnr_db,ssim\n");
        for p in &self.per_image {
            out.push_str(&format!("{},{},{}\n", p.id, p.psnr_db, p.ssim));
        }
        std::fs::write(path, out)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    /// JSON summary: means, count, skipped entries, partial flag.
    pub fn write_json_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let summary = serde_json::json!({
            "mean_psnr_db": self.mean_psnr_db,
            "mean_ssim": self.mean_ssim,
            "count": self.count,
            "partial": self.partial,
            "skipped": self.skipped,
        });
        std::fs::write(path, serde_json::to_string_pretty(&summary).expect("serializable"))
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

fn pair_id(restored: &Path) -> String {
    restored
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| restored.display().to_string())
}

/// Evaluate (restored, reference) path pairs. Unreadable or mismatched pairs
/// are recorded as skipped with a reason; aggregates are arithmetic means of
/// the evaluated entries and do not depend on processing order.
pub fn evaluate_pairs(pairs: &[(PathBuf, PathBuf)]) -> MetricReport {
    let results = map_collect(default_exec(), pairs, |(restored, reference)| {
        let id = pair_id(restored);
        let go = || -> Result<PairMetrics> {
            let a = load_image(restored)?;
            let b = load_image(reference)?;
            Ok(PairMetrics { id: id.clone(), psnr_db: psnr(&a, &b)?, ssim: ssim(&a, &b)? })
        };
        go().map_err(|e| SkippedPair { id, reason: e.to_string() })
    });
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(m) => per_image.push(m),
            Err(s) => skipped.push(s),
        }
    }
    MetricReport::from_parts(per_image, skipped)
}
