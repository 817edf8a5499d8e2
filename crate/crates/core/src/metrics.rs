//! Fusion quality metrics: PSNR, SSIM, SAM and ERGAS.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::tensor::{Float, Tensor};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const ERGAS_EPS: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn f(v: impl Float) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (f(x) - f(y)).powi(2)).sum::<f64>() / n)
}

pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(invalid("psnr", "peak must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Mean spectral angle in degrees plus the per-pixel map `[H, W]`.
pub fn sam<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<f64>)> {
    same_shape("sam", a, b)?;
    let (h, w, c) = a.dims3()?;
    if c < 2 {
        return Err(invalid("sam", "needs at least two bands"));
    }
    let mut map = Vec::with_capacity(h * w);
    for (pa, pb) in a.data().chunks(c).zip(b.data().chunks(c)) {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&x, &y) in pa.iter().zip(pb) {
            let (x, y) = (f(x), f(y));
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let angle = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos().to_degrees()
        };
        map.push(angle);
    }
    let mean = map.iter().sum::<f64>() / map.len().max(1) as f64;
    Ok((mean, Tensor::from_vec(&[h, w], map)?))
}

pub fn ergas<T: Float>(reference: &Tensor<T>, est: &Tensor<T>, scale: f64) -> Result<f64> {
    same_shape("ergas", reference, est)?;
    if scale < 1.0 {
        return Err(invalid("ergas", "scale must be at least 1"));
    }
    let (h, w, c) = reference.dims3()?;
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for band in 0..c {
        let (mut se, mut sum) = (0.0, 0.0);
        for p in 0..h * w {
            let r = f(reference.data()[p * c + band]);
            se += (r - f(est.data()[p * c + band])).powi(2);
            sum += r;
        }
        let mut mean = sum / n;
        if mean == 0.0 {
            log::warn!("ergas: band {band} has zero mean");
            mean = ERGAS_EPS;
        }
        acc += (se / n) / (mean * mean);
    }
    Ok(100.0 / scale * (acc / c as f64).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w: Vec<f64> = g.iter().flat_map(|&a| g.iter().map(move |&b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let win = gaussian_window();
    let k = SSIM_WINDOW;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..k {
                let row = (i + di) * w + j;
                for dj in 0..k {
                    let g = win[di * k + dj];
                    let (x, y) = (a[row + dj], b[row + dj]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (oh * ow) as f64
}

/// Single-scale SSIM over valid windows; `[H, W, C]` inputs average the bands.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, c) = match a.shape() {
        &[h, w] => (h, w, 1),
        &[h, w, c] => (h, w, c),
        s => return Err(invalid("ssim", format!("expected [H, W] or [H, W, C], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid("ssim", format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let plane = |t: &Tensor<T>, band: usize| -> Vec<f64> { (0..h * w).map(|p| f(t.data()[p * c + band])).collect() };
    let sum: f64 = (0..c).map(|band| ssim_plane(&plane(a, band), &plane(b, band), h, w, peak)).sum();
    Ok(sum / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub scale: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub ergas: f64,
    pub params: usize,
    pub ms_per_image: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dataset,scale,psnr,ssim,sam,ergas,params,ms_per_image";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
            self.dataset, self.scale, self.psnr, self.ssim, self.sam, self.ergas, self.params, self.ms_per_image
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// All four quality metrics of `est` against `reference` (peak 1).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub ergas: f64,
}

impl Quality {
    pub fn mean(items: &[Quality]) -> Quality {
        let n = items.len().max(1) as f64;
        let mut q = Quality::default();
        for i in items {
            q.psnr += i.psnr / n;
            q.ssim += i.ssim / n;
            q.sam += i.sam / n;
            q.ergas += i.ergas / n;
        }
        q
    }
}

/// SSIM is skipped (reported as NaN) on images smaller than the window.
pub fn evaluate<T: Float>(reference: &Tensor<T>, est: &Tensor<T>, scale: usize) -> Result<(Quality, Tensor<f64>)> {
    let (h, w, _) = reference.dims3()?;
    let (sam_mean, map) = sam(reference, est)?;
    let ssim_v = if h >= SSIM_WINDOW && w >= SSIM_WINDOW { ssim(reference, est, 1.0)? } else { f64::NAN };
    Ok((
        Quality {
            psnr: psnr(reference, est, 1.0)?,
            ssim: ssim_v,
            sam: sam_mean,
            ergas: ergas(reference, est, scale as f64)?,
        },
        map,
    ))
}
