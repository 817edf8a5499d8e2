use serde::{Deserialize, Serialize};

use crate::data::degrade::{degrade_lrhsi, simulate_hrmsi, Downsample, SpectralResponse};
use crate::data::synth::HsiCube;
use crate::error::{invalid, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch: usize,
    pub stride: usize,
    pub scale: usize,
    pub msi_bands: usize,
    #[serde(default)]
    pub downsample: Downsample,
    /// Height of the held-out strip at the bottom of the scene.
    pub test_rows: usize,
}

/// Ground-truth crop with its simulated inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample<T: Float> {
    pub z: Tensor<T>,
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub scale: usize,
    /// Top-left corner of the crop in the scene.
    pub origin: (usize, usize),
}

impl FusionSample<f64> {
    pub fn cast<U: Float>(&self) -> FusionSample<U> {
        FusionSample {
            z: self.z.cast(),
            x: self.x.cast(),
            y: self.y.cast(),
            scale: self.scale,
            origin: self.origin,
        }
    }
}

fn crop(t: &Tensor<f64>, i0: usize, j0: usize, p: usize) -> Tensor<f64> {
    let (_, w, c) = t.dims3().expect("cube is 3-D");
    Tensor::from_fn(&[p, p, c], |k| {
        let (i, rest) = (k / (p * c), k % (p * c));
        t.data()[((i0 + i) * w + j0 + rest / c) * c + rest % c]
    })
}

/// Degrade one ground-truth crop into its `(x, y)` pair.
pub fn make_sample(z: Tensor<f64>, origin: (usize, usize), cfg: &PatchConfig, srf: &SpectralResponse) -> Result<FusionSample<f64>> {
    Ok(FusionSample {
        x: degrade_lrhsi(&z, cfg.scale, cfg.downsample)?,
        y: simulate_hrmsi(&z, srf)?,
        z,
        scale: cfg.scale,
        origin,
    })
}

fn tile(cube: &HsiCube, rows: std::ops::Range<usize>, stride: usize, cfg: &PatchConfig) -> Result<Vec<FusionSample<f64>>> {
    let (_, w, c) = cube.data.dims3()?;
    let p = cfg.patch;
    let srf = SpectralResponse::block_average(cfg.msi_bands, c)?;
    let mut out = Vec::new();
    if rows.end - rows.start < p {
        return Ok(out);
    }
    let mut i = rows.start;
    while i + p <= rows.end {
        let mut j = 0;
        while j + p <= w {
            out.push(make_sample(crop(&cube.data, i, j, p), (i, j), cfg, &srf)?);
            j += stride;
        }
        i += stride;
    }
    Ok(out)
}

fn check(cube: &HsiCube, cfg: &PatchConfig) -> Result<(usize, usize)> {
    let (h, w, _) = cube.data.dims3()?;
    let p = cfg.patch;
    if cfg.scale == 0 || p % cfg.scale != 0 {
        return Err(invalid("extract_patches", format!("patch {p} not divisible by scale {}", cfg.scale)));
    }
    if p == 0 || p > h.min(w) {
        return Err(invalid("extract_patches", format!("patch {p} larger than the {h}x{w} scene")));
    }
    if cfg.stride == 0 {
        return Err(invalid("extract_patches", "stride must be positive"));
    }
    Ok((h, w))
}

/// Raster-order crops over the whole scene.
pub fn extract_patches(cube: &HsiCube, cfg: &PatchConfig) -> Result<Vec<FusionSample<f64>>> {
    let (h, _) = check(cube, cfg)?;
    tile(cube, 0..h, cfg.stride, cfg)
}

/// Train crops from the top region, non-overlapping test crops from the bottom
/// `test_rows` rows. The regions share no pixel.
pub fn split_patches(cube: &HsiCube, cfg: &PatchConfig) -> Result<(Vec<FusionSample<f64>>, Vec<FusionSample<f64>>)> {
    let (h, _) = check(cube, cfg)?;
    if cfg.test_rows < cfg.patch || cfg.test_rows + cfg.patch > h {
        return Err(invalid("split_patches", format!("test strip of {} rows does not fit", cfg.test_rows)));
    }
    let boundary = h - cfg.test_rows;
    let train = tile(cube, 0..boundary, cfg.stride, cfg)?;
    let test = tile(cube, boundary..h, cfg.patch, cfg)?;
    Ok((train, test))
}
