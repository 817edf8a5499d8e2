//! Composite training loss: L1 reconstruction, log-det volume penalty and
//! branch-consistency cosine term.

use serde::{Deserialize, Serialize};

use crate::autograd::{ReduceKind, Var};
use crate::error::{mismatch, Result};
use crate::tensor::Float;

pub const LAMBDA_INV: f64 = 0.01;
pub const LAMBDA_COS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_inv: f64,
    pub lambda_cos: f64,
    /// Use the literal `logdet / n` instead of `|logdet / n|`.
    #[serde(default)]
    pub signed_logdet: bool,
    /// Mean of per-pixel cosines instead of one global angle.
    #[serde(default)]
    pub per_pixel_cos: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_inv: LAMBDA_INV,
            lambda_cos: LAMBDA_COS,
            signed_logdet: false,
            per_pixel_cos: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l_inv: f64,
    pub l_cos: f64,
    pub total: f64,
    pub lambda_inv: f64,
    pub lambda_cos: f64,
}

/// `1 - cos(a, b)` over the flattened tensors; 1 when either norm is zero.
pub fn cosine_distance<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("cosine_distance", &a.shape(), &b.shape()));
    }
    let (na, nb) = (a.value().sum_sq(), b.value().sum_sq());
    if na == T::zero() || nb == T::zero() {
        log::warn!("cosine term on a zero-norm tensor, using 1");
        return Ok(a.tape().constant(crate::tensor::Tensor::scalar(T::one())));
    }
    let dot = a.mul(b)?.sum_all();
    let norms = a.square().sum_all().mul(b.square().sum_all())?.sqrt();
    Ok(dot.div(norms)?.neg().add_scalar(T::one()))
}

/// Mean over pixels of `1 - cos` between spectra; zero-norm pixels count as 1.
pub fn per_pixel_cosine_distance<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("cosine_distance", &a.shape(), &b.shape()));
    }
    let (h, w, c) = a.value().dims3()?;
    let a = a.reshape(&[h * w, c])?;
    let b = b.reshape(&[h * w, c])?;
    let dot = a.mul(b)?.reduce(1, ReduceKind::Sum)?;
    let na = a.square().reduce(1, ReduceKind::Sum)?;
    let nb = b.square().reduce(1, ReduceKind::Sum)?;
    let tiny = T::from_f64c(1e-24);
    let cos = dot.div(na.mul(nb)?.add_scalar(tiny).sqrt())?;
    Ok(cos.neg().add_scalar(T::one()).mean_all())
}

/// Returns the differentiable total and the scalar breakdown. `coupled_len` is
/// the element count of one coupled stream.
pub fn composite_loss<'t, T: Float>(
    z_hat: Var<'t, T>,
    z: Var<'t, T>,
    z_bar: Var<'t, T>,
    logdet: Var<'t, T>,
    coupled_len: usize,
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if z_hat.shape() != z.shape() {
        return Err(mismatch("composite_loss", &z_hat.shape(), &z.shape()));
    }
    if z_bar.shape() != z_hat.shape() {
        return Err(mismatch("composite_loss", &z_bar.shape(), &z_hat.shape()));
    }
    let l1 = z_hat.sub(z)?.abs().mean_all();
    let per = logdet.scale(T::from_f64c(1.0 / coupled_len.max(1) as f64));
    let l_inv = if cfg.signed_logdet { per } else { per.abs() };
    let l_cos = if cfg.per_pixel_cos {
        per_pixel_cosine_distance(z_bar, z_hat)?
    } else {
        cosine_distance(z_bar, z_hat)?
    };
    let total = l1
        .add(l_inv.scale(T::from_f64c(cfg.lambda_inv)))?
        .add(l_cos.scale(T::from_f64c(cfg.lambda_cos)))?;
    let f = |v: Var<'t, T>| v.item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        l1: f(l1),
        l_inv: f(l_inv),
        l_cos: f(l_cos),
        total: f(total),
        lambda_inv: cfg.lambda_inv,
        lambda_cos: cfg.lambda_cos,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(z_hat: &Tensor<f64>, z: &Tensor<f64>, z_bar: &Tensor<f64>, logdet: f64) -> LossBreakdown {
        let t = Tape::no_grad();
        let c = |v: &Tensor<f64>| t.constant(v.clone());
        composite_loss(c(z_hat), c(z), c(z_bar), t.constant(Tensor::scalar(logdet)), 10, &LossConfig::default())
            .unwrap()
            .1
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::rand_uniform(&[4, 4, 3], 0.1, 1.0, &mut rng);
        let b = run(&z, &z, &z, 0.0);
        assert_eq!(b.l1, 0.0);
        assert_eq!(b.l_inv, 0.0);
        assert!(b.l_cos.abs() < 1e-15);
        assert!(b.total.abs() < 1e-15);
    }

    #[test]
    fn closed_form_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f64>::rand_uniform(&[4, 4, 3], 0.1, 1.0, &mut rng);
        let z_hat = z.map(|v| v + 0.5);
        let b = run(&z_hat, &z, &z_hat.scale(-1.0), -3.0);
        assert!((b.l1 - 0.5).abs() < 1e-15);
        assert!((b.l_cos - 2.0).abs() < 1e-15);
        assert!((b.l_inv - 0.3).abs() < 1e-15);
        let want = b.l1 + 0.01 * b.l_inv + 0.1 * b.l_cos;
        assert_eq!(b.total, want);
    }

    #[test]
    fn zero_norm_cosine_is_one() {
        let z = Tensor::<f64>::ones(&[2, 2, 2]);
        let b = run(&z, &z, &Tensor::zeros(&[2, 2, 2]), 0.0);
        assert_eq!(b.l_cos, 1.0);
    }

    #[test]
    fn signed_flag_keeps_sign() {
        let t = Tape::no_grad();
        let z = t.constant(Tensor::<f64>::ones(&[2, 2, 2]));
        let cfg = LossConfig { signed_logdet: true, ..LossConfig::default() };
        let (_, b) = composite_loss(z, z, z, t.constant(Tensor::scalar(-4.0)), 8, &cfg).unwrap();
        assert_eq!(b.l_inv, -0.5);
    }
}
