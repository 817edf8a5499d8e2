//! Fixed linear resampling operators: bicubic upsampling, local box mean
//! and global average pooling.

use crate::autograd::{ReduceKind, Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::{lit, Float, Tensor};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output position, half-pixel
/// aligned and clamped at the borders.
fn cubic_taps(n: usize, s: usize) -> Vec<[(usize, f64); 4]> {
    (0..n * s)
        .map(|o| {
            let u = (o as f64 + 0.5) / s as f64 - 0.5;
            let i0 = u.floor();
            let t = u - i0;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = i0 as isize + k as isize - 1;
                let clamped = idx.clamp(0, n as isize - 1) as usize;
                *tap = (clamped, cubic_kernel(t - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Apply taps along rows (`axis == 0`) or columns (`axis == 1`).
fn resample<T: Float>(x: &[T], h: usize, w: usize, c: usize, taps: &[[(usize, f64); 4]], axis: usize) -> Vec<T> {
    let (oh, ow) = if axis == 0 { (taps.len(), w) } else { (h, taps.len()) };
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * c;
            let tp = if axis == 0 { &taps[oy] } else { &taps[ox] };
            for &(src, wt) in tp {
                if wt == 0.0 {
                    continue;
                }
                let wt = lit::<T>(wt);
                let s = if axis == 0 { (src * w + ox) * c } else { (oy * w + src) * c };
                for ch in 0..c {
                    out[o + ch] += wt * x[s + ch];
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample`]: scatter `g` (output-shaped) back to the input grid.
fn resample_adjoint<T: Float>(g: &[T], h: usize, w: usize, c: usize, taps: &[[(usize, f64); 4]], axis: usize, dx: &mut [T]) {
    let (oh, ow) = if axis == 0 { (taps.len(), w) } else { (h, taps.len()) };
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * c;
            let tp = if axis == 0 { &taps[oy] } else { &taps[ox] };
            for &(src, wt) in tp {
                if wt == 0.0 {
                    continue;
                }
                let wt = lit::<T>(wt);
                let s = if axis == 0 { (src * w + ox) * c } else { (oy * w + src) * c };
                for ch in 0..c {
                    dx[s + ch] += wt * g[o + ch];
                }
            }
        }
    }
}

/// Separable bicubic upsampling by an integer factor.
pub fn bicubic_upsample_var<T: Float>(x: Var<'_, T>, s: usize) -> Result<Var<'_, T>> {
    if s < 1 {
        return Err(invalid("bicubic_upsample", "scale must be >= 1"));
    }
    let xv = x.value();
    let (h, w, c) = xv.dims3()?;
    let (th, tw) = (cubic_taps(h, s), cubic_taps(w, s));
    let mid = resample(xv.data(), h, w, c, &th, 0);
    let out = resample(&mid, h * s, w, c, &tw, 1);
    let y = Tensor::new_unchecked(vec![h * s, w * s, c], out);
    let id = x.id();
    Ok(x.tape().record(y, &[x], move |g, sink| {
        let mut gmid = vec![T::zero(); h * s * w * c];
        resample_adjoint(g.data(), h * s, w, c, &tw, 1, &mut gmid);
        sink.accumulate(id, |buf| resample_adjoint(&gmid, h, w, c, &th, 0, buf));
    }))
}

pub fn bicubic_upsample<T: Float>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(bicubic_upsample_var(tape.constant(x.clone()), s)?.value())
}

/// Per-channel mean over the in-bounds part of each pixel's 3x3 neighbourhood.
pub fn box_mean3<T: Float>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let xv = x.value();
    let (h, w, c) = xv.dims3()?;
    let neighbours = move |i: usize, j: usize| {
        let (y0, y1) = (i.saturating_sub(1), (i + 1).min(h - 1));
        let (x0, x1) = (j.saturating_sub(1), (j + 1).min(w - 1));
        (y0, y1, x0, x1, ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64)
    };
    let xd = xv.data();
    let mut out = vec![T::zero(); xv.len()];
    for i in 0..h {
        for j in 0..w {
            let (y0, y1, x0, x1, n) = neighbours(i, j);
            let inv = lit::<T>(1.0 / n);
            let o = (i * w + j) * c;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let s = (yy * w + xx) * c;
                    for ch in 0..c {
                        out[o + ch] += xd[s + ch] * inv;
                    }
                }
            }
        }
    }
    let id = x.id();
    Ok(x.tape().record(Tensor::new_unchecked(vec![h, w, c], out), &[x], move |g, sink| {
        let gd = g.data();
        sink.accumulate(id, |buf| {
            for i in 0..h {
                for j in 0..w {
                    let (y0, y1, x0, x1, n) = neighbours(i, j);
                    let inv = lit::<T>(1.0 / n);
                    let o = (i * w + j) * c;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            let s = (yy * w + xx) * c;
                            for ch in 0..c {
                                buf[s + ch] += gd[o + ch] * inv;
                            }
                        }
                    }
                }
            }
        });
    }))
}

/// Per-channel spatial mean: `[H, W, C] -> [C]`.
pub fn global_avg_pool<T: Float>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let (h, w, c) = x.value().dims3()?;
    if h == 0 || w == 0 {
        return Err(invalid("global_avg_pool", "empty spatial extent"));
    }
    x.reshape(&[h * w, c])?.reduce(0, ReduceKind::Mean)
}
