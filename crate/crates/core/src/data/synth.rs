use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Synthetic,
    UserSupplied,
}

#[derive(Debug, Clone)]
pub struct HsiCube {
    pub data: Tensor<f64>,
    pub provenance: Provenance,
}

impl HsiCube {
    /// Wrap user data, normalizing globally to `[0, 1]`.
    pub fn from_user(data: Tensor<f64>) -> Result<Self> {
        data.dims3()?;
        if !data.all_finite() {
            return Err(invalid("hsi_cube", "cube contains non-finite samples"));
        }
        Ok(Self {
            data: normalize(data),
            provenance: Provenance::UserSupplied,
        })
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Global min-max to `[0, 1]`; a flat cube is left as is.
pub fn normalize(t: Tensor<f64>) -> Tensor<f64> {
    let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return t;
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Natural cubic spline through `(xs[i], ys[i])`, evaluated at `at`.
fn natural_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives via the tridiagonal system with m_0 = m_{n-1} = 0.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..k {
            let f = h[i] / diag[i - 1];
            diag[i] -= f * h[i];
            rhs[i] -= f * rhs[i - 1];
        }
        for i in (0..k).rev() {
            let upper = if i + 1 < k { h[i + 1] * m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
    }
    at.iter()
        .map(|&x| {
            let i = xs.windows(2).position(|w| x <= w[1]).unwrap_or(n - 2);
            let (a, b) = (xs[i + 1] - x, x - xs[i]);
            let hi = h[i];
            m[i] * a.powi(3) / (6.0 * hi)
                + m[i + 1] * b.powi(3) / (6.0 * hi)
                + (ys[i] / hi - m[i] * hi / 6.0) * a
                + (ys[i + 1] / hi - m[i + 1] * hi / 6.0) * b
        })
        .collect()
}

/// Separable Gaussian blur of one plane, edges clamped.
fn blur_plane(p: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (-r..=r).map(|d| k[(d + r) as usize] * p[i * w + clamp(j as i64 + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clamp(i as i64 + d, h) * w + j]).sum();
        }
    }
    out
}

/// Endmember spectra, one row of `bands` values each.
pub fn endmembers(rng: &mut ChaCha8Rng, count: usize, bands: usize) -> Vec<Vec<f64>> {
    let knots = 6.min(bands);
    let xs: Vec<f64> = (0..knots).map(|i| i as f64 * (bands - 1) as f64 / (knots - 1) as f64).collect();
    let at: Vec<f64> = (0..bands).map(|b| b as f64).collect();
    (0..count)
        .map(|_| {
            let ys: Vec<f64> = (0..knots).map(|_| rng.random_range(0.1..1.0)).collect();
            natural_spline(&xs, &ys, &at).into_iter().map(|v| v.max(0.02)).collect()
        })
        .collect()
}

/// Blurred Voronoi abundances, `[h*w][k]`, each row on the simplex.
pub fn abundances(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Vec<Vec<f64>> {
    let cells = 3 * k;
    let sites: Vec<(f64, f64)> = (0..cells).map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))).collect();
    let mut planes = vec![vec![0.0; h * w]; k];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let nearest = (0..cells)
                .min_by(|&a, &b| {
                    let d = |s: (f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
                    d(sites[a]).total_cmp(&d(sites[b]))
                })
                .unwrap_or(0);
            planes[nearest % k][i * w + j] = 1.0;
        }
    }
    let sigma = (h.min(w) as f64 / 48.0).max(0.75);
    let planes: Vec<Vec<f64>> = planes.iter().map(|p| blur_plane(p, h, w, sigma)).collect();
    (0..h * w)
        .map(|p| {
            let row: Vec<f64> = planes.iter().map(|pl| pl[p].max(0.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Deterministic synthetic scene with `complexity + 1` endmembers.
pub fn synth_scene(seed: u64, h: usize, w: usize, c: usize, complexity: usize) -> Result<HsiCube> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(invalid("synth_scene", format!("{h}x{w} is not a power-of-two size")));
    }
    if c < 4 {
        return Err(invalid("synth_scene", format!("need at least 4 bands, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = complexity + 1;
    let spectra = endmembers(&mut rng, k, c);
    let mut data = vec![0.0; h * w * c];
    if complexity == 0 {
        for p in 0..h * w {
            data[p * c..(p + 1) * c].copy_from_slice(&spectra[0]);
        }
    } else {
        let ab = abundances(&mut rng, h, w, k);
        // Fine texture modulating brightness, plus faint band-correlated noise.
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let raw: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
        let texture = blur_plane(&raw, h, w, 1.0);
        let tex_scale = texture.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        let band_tilt: Vec<f64> = (0..c).map(|b| 0.5 + b as f64 / (c - 1) as f64).collect();
        for p in 0..h * w {
            let bright = 1.0 + 0.25 * texture[p] / tex_scale;
            let common = normal.sample(&mut rng);
            for b in 0..c {
                let mix: f64 = (0..k).map(|e| ab[p][e] * spectra[e][b]).sum();
                let noise = 0.004 * (0.8 * common * band_tilt[b] + 0.2 * normal.sample(&mut rng));
                data[p * c + b] = mix * bright + noise;
            }
        }
    }
    Ok(HsiCube {
        data: normalize(Tensor::from_vec(&[h, w, c], data)?),
        provenance: Provenance::Synthetic,
    })
}
