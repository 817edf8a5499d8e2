//! Single-level orthonormal 2D Haar transform.
//!
//! On each 2x2 block `[a b; c d]`:
//! `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`, `hh = (a-b-c+d)/2`.
//! The transform is its own adjoint's inverse, so it preserves energy and
//! contributes nothing to a Jacobian log-determinant.

use crate::autograd::Var;
use crate::error::{invalid, mismatch, Result};
use crate::tensor::{lit, Float, Tensor};

/// The four subbands, each `[H/2, W/2, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<T: Float> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Float> WaveletPyramid<T> {
    /// Subbands packed along channels as `[ll | lh | hl | hh]`.
    pub fn packed(&self) -> Result<Tensor<T>> {
        Tensor::concat_last(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    pub fn from_packed(p: &Tensor<T>) -> Result<Self> {
        let (_, _, c4) = p.dims3()?;
        if c4 % 4 != 0 {
            return Err(invalid("haar", format!("packed channel count {c4} not divisible by 4")));
        }
        let c = c4 / 4;
        Ok(Self {
            ll: p.narrow_last(0, c)?,
            lh: p.narrow_last(c, c)?,
            hl: p.narrow_last(2 * c, c)?,
            hh: p.narrow_last(3 * c, c)?,
        })
    }

    /// The three detail subbands concatenated along channels (`3C` wide).
    pub fn details(&self) -> Result<Tensor<T>> {
        Tensor::concat_last(&[&self.lh, &self.hl, &self.hh])
    }
}

fn analyze_kernel<T: Float>(x: &[T], h: usize, w: usize, c: usize, out: &mut [T]) {
    let half = lit::<T>(0.5);
    let (h2, w2) = (h / 2, w / 2);
    for i in 0..h2 {
        for j in 0..w2 {
            let base = (i * w2 + j) * 4 * c;
            for ch in 0..c {
                let a = x[((2 * i) * w + 2 * j) * c + ch];
                let b = x[((2 * i) * w + 2 * j + 1) * c + ch];
                let cc = x[((2 * i + 1) * w + 2 * j) * c + ch];
                let d = x[((2 * i + 1) * w + 2 * j + 1) * c + ch];
                out[base + ch] += (a + b + cc + d) * half;
                out[base + c + ch] += (a + b - cc - d) * half;
                out[base + 2 * c + ch] += (a - b + cc - d) * half;
                out[base + 3 * c + ch] += (a - b - cc + d) * half;
            }
        }
    }
}

fn synthesize_kernel<T: Float>(p: &[T], h2: usize, w2: usize, c: usize, out: &mut [T]) {
    let half = lit::<T>(0.5);
    let w = 2 * w2;
    for i in 0..h2 {
        for j in 0..w2 {
            let base = (i * w2 + j) * 4 * c;
            for ch in 0..c {
                let ll = p[base + ch];
                let lh = p[base + c + ch];
                let hl = p[base + 2 * c + ch];
                let hh = p[base + 3 * c + ch];
                out[((2 * i) * w + 2 * j) * c + ch] += (ll + lh + hl + hh) * half;
                out[((2 * i) * w + 2 * j + 1) * c + ch] += (ll + lh - hl - hh) * half;
                out[((2 * i + 1) * w + 2 * j) * c + ch] += (ll - lh + hl - hh) * half;
                out[((2 * i + 1) * w + 2 * j + 1) * c + ch] += (ll - lh - hl + hh) * half;
            }
        }
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(invalid("haar_analyze", format!("spatial size {h}x{w} must be even and non-zero")));
    }
    Ok(())
}

fn analyze_packed<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    check_even(h, w)?;
    let mut out = vec![T::zero(); x.len()];
    analyze_kernel(x.data(), h, w, c, &mut out);
    Ok(Tensor::new_unchecked(vec![h / 2, w / 2, 4 * c], out))
}

fn synthesize_packed<T: Float>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let (h2, w2, c4) = p.dims3()?;
    if c4 % 4 != 0 {
        return Err(invalid("haar_synthesize", format!("packed channel count {c4} not divisible by 4")));
    }
    let mut out = vec![T::zero(); p.len()];
    synthesize_kernel(p.data(), h2, w2, c4 / 4, &mut out);
    Ok(Tensor::new_unchecked(vec![2 * h2, 2 * w2, c4 / 4], out))
}

pub fn haar_analyze<T: Float>(x: &Tensor<T>) -> Result<WaveletPyramid<T>> {
    WaveletPyramid::from_packed(&analyze_packed(x)?)
}

pub fn haar_synthesize<T: Float>(p: &WaveletPyramid<T>) -> Result<Tensor<T>> {
    let s = p.ll.shape();
    for band in [&p.lh, &p.hl, &p.hh] {
        if band.shape() != s {
            return Err(mismatch("haar_synthesize", s, band.shape()));
        }
    }
    synthesize_packed(&p.packed()?)
}

impl<'t, T: Float> Var<'t, T> {
    /// Haar analysis on the tape; output `[H/2, W/2, 4C]` packed `[ll | lh | hl | hh]`.
    pub fn haar_analyze(self) -> Result<Var<'t, T>> {
        let y = analyze_packed(&self.value())?;
        let (h, w, c) = self.value().dims3()?;
        let id = self.id();
        Ok(self.tape().record(y, &[self], move |g, sink| {
            sink.accumulate(id, |buf| synthesize_kernel(g.data(), h / 2, w / 2, c, buf));
        }))
    }

    /// Inverse of [`Var::haar_analyze`] on packed subbands.
    pub fn haar_synthesize(self) -> Result<Var<'t, T>> {
        let y = synthesize_packed(&self.value())?;
        let (h, w, c) = y.dims3()?;
        let id = self.id();
        Ok(self.tape().record(y, &[self], move |g, sink| {
            sink.accumulate(id, |buf| analyze_kernel(g.data(), h, w, c, buf));
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_lives_in_ll() {
        let x = Tensor::<f64>::full(&[4, 6, 2], 1.5);
        let p = haar_analyze(&x).unwrap();
        assert!(p.ll.data().iter().all(|&v| v == 3.0));
        for band in [&p.lh, &p.hl, &p.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_hand_values() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = haar_analyze(&x).unwrap();
        assert_eq!(p.ll.data(), &[5.0]);
        assert_eq!(p.lh.data(), &[-2.0]);
        assert_eq!(p.hl.data(), &[-1.0]);
        assert_eq!(p.hh.data(), &[0.0]);
    }

    #[test]
    fn analysis_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[8, 8, 2], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[8, 8, 2], 1.0, &mut rng);
        let lhs = haar_analyze(&x.add(&y).unwrap()).unwrap().packed().unwrap();
        let px = haar_analyze(&x).unwrap().packed().unwrap();
        let py = haar_analyze(&y).unwrap().packed().unwrap();
        assert!(lhs.max_abs_diff(&px.add(&py).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn round_trip_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[16, 16, 4], 1.0, &mut rng);
        let back = haar_synthesize(&haar_analyze(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn synthesis_of_special_pyramids() {
        let z = Tensor::<f64>::zeros(&[3, 3, 2]);
        let zero = WaveletPyramid { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z.clone() };
        assert!(haar_synthesize(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let flat = WaveletPyramid { ll: Tensor::full(&[3, 3, 2], 2.0), ..zero };
        let img = haar_synthesize(&flat).unwrap();
        assert_eq!(img.shape(), &[6, 6, 2]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn odd_sizes_and_mismatched_bands_rejected() {
        assert!(haar_analyze(&Tensor::<f64>::zeros(&[3, 4, 1])).is_err());
        assert!(haar_analyze(&Tensor::<f64>::zeros(&[4, 5, 1])).is_err());
        let z = Tensor::<f64>::zeros(&[2, 2, 1]);
        let bad = WaveletPyramid { ll: z.clone(), lh: z.clone(), hl: Tensor::zeros(&[2, 3, 1]), hh: z };
        assert!(haar_synthesize(&bad).is_err());
    }

    #[test]
    fn energy_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[8, 10, 3], 1.0, &mut rng);
        let p = haar_analyze(&x).unwrap().packed().unwrap();
        assert!(((x.sum_sq() - p.sum_sq()) / x.sum_sq()).abs() < 1e-12);
    }

    #[test]
    fn tape_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[4, 4, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 2, 8], 1.0, &mut rng);
        let r = gradcheck(
            |t: &Tape<f64>, v| {
                let wv = t.constant(w.clone());
                Ok(v.haar_analyze()?.mul(wv)?.haar_synthesize()?.square().sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
