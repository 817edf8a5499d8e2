use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Float, Tensor};

pub const BLUR_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Downsample {
    /// Keep the top-left sample of each block.
    #[default]
    Decimate,
    AreaAverage,
}

/// Normalized 3x3 Gaussian, row-major.
pub fn blur_kernel(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
            k[i * 3 + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn blur3<T: Float>(z: &Tensor<T>) -> Result<Vec<T>> {
    let (h, w, c) = z.dims3()?;
    let k = blur_kernel(BLUR_SIGMA).map(T::from_f64c);
    let zd = z.data();
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * c;
            for di in 0..3 {
                let y = (i + di).saturating_sub(1).min(h - 1);
                for dj in 0..3 {
                    let x = (j + dj).saturating_sub(1).min(w - 1);
                    let kv = k[di * 3 + dj];
                    let s = (y * w + x) * c;
                    for b in 0..c {
                        out[o + b] += kv * zd[s + b];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Blur each band with the 3x3 sigma-0.5 kernel, then reduce by `s`.
pub fn degrade_lrhsi<T: Float>(z: &Tensor<T>, s: usize, mode: Downsample) -> Result<Tensor<T>> {
    let (h, w, c) = z.dims3()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(invalid("degrade_lrhsi", format!("{h}x{w} not divisible by scale {s}")));
    }
    let blurred = blur3(z)?;
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![T::zero(); oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let o = (i * ow + j) * c;
            match mode {
                Downsample::Decimate => {
                    let src = (i * s * w + j * s) * c;
                    out[o..o + c].copy_from_slice(&blurred[src..src + c]);
                }
                Downsample::AreaAverage => {
                    let inv = T::from_f64c(1.0 / (s * s) as f64);
                    for di in 0..s {
                        for dj in 0..s {
                            let src = ((i * s + di) * w + j * s + dj) * c;
                            for b in 0..c {
                                out[o + b] += blurred[src + b] * inv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

/// Row-stochastic spectral response `[c, C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResponse {
    pub msi_bands: usize,
    pub hsi_bands: usize,
    pub matrix: Vec<f64>,
}

impl SpectralResponse {
    pub fn new(msi_bands: usize, hsi_bands: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != msi_bands * hsi_bands || msi_bands == 0 {
            return Err(invalid("srf", format!("matrix has {} entries, expected {msi_bands}x{hsi_bands}", matrix.len())));
        }
        for (r, row) in matrix.chunks(hsi_bands).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-7 {
                return Err(invalid("srf", format!("row {r} is not a probability vector")));
            }
        }
        Ok(Self { msi_bands, hsi_bands, matrix })
    }

    /// `c` equal contiguous groups averaged.
    pub fn block_average(c: usize, hsi_bands: usize) -> Result<Self> {
        if c == 0 || c > hsi_bands {
            return Err(invalid("srf", format!("cannot form {c} groups from {hsi_bands} bands")));
        }
        let mut m = vec![0.0; c * hsi_bands];
        let group = |b: usize| b * c / hsi_bands;
        for b in 0..hsi_bands {
            m[group(b) * hsi_bands + b] = 1.0;
        }
        for row in m.chunks_mut(hsi_bands) {
            let n: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(c, hsi_bands, m)
    }

    pub fn identity(bands: usize) -> Result<Self> {
        Self::new(bands, bands, (0..bands * bands).map(|i| if i / bands == i % bands { 1.0 } else { 0.0 }).collect())
    }
}

pub fn simulate_hrmsi<T: Float>(z: &Tensor<T>, srf: &SpectralResponse) -> Result<Tensor<T>> {
    let (h, w, c) = z.dims3()?;
    if c != srf.hsi_bands {
        return Err(invalid("simulate_hrmsi", format!("cube has {c} bands, response expects {}", srf.hsi_bands)));
    }
    let m: Vec<T> = srf.matrix.iter().map(|&v| T::from_f64c(v)).collect();
    let mb = srf.msi_bands;
    let mut out = vec![T::zero(); h * w * mb];
    for (px, o) in z.data().chunks(c).zip(out.chunks_mut(mb)) {
        for (r, ov) in o.iter_mut().enumerate() {
            *ov = m[r * c..(r + 1) * c].iter().zip(px).map(|(&a, &b)| a * b).sum();
        }
    }
    Tensor::from_vec(&[h, w, mb], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_cube_stays_constant() {
        let z = Tensor::<f64>::full(&[8, 8, 3], 0.4);
        for mode in [Downsample::Decimate, Downsample::AreaAverage] {
            let x = degrade_lrhsi(&z, 4, mode).unwrap();
            assert_eq!(x.shape(), &[2, 2, 3]);
            assert!(x.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        }
        assert!(degrade_lrhsi(&z, 3, Downsample::Decimate).is_err());
    }

    #[test]
    fn srf_rows_and_identity() {
        let s = SpectralResponse::block_average(4, 31).unwrap();
        for row in s.matrix.chunks(31) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[3, 3, 5], 1.0, &mut rng);
        assert_eq!(simulate_hrmsi(&z, &SpectralResponse::identity(5).unwrap()).unwrap(), z);
        let flat = Tensor::<f64>::full(&[2, 2, 31], 0.7);
        assert!(simulate_hrmsi(&flat, &s).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(simulate_hrmsi(&z, &s).is_err());
        assert!(SpectralResponse::new(1, 2, vec![0.5, 0.6]).is_err());
    }
}
