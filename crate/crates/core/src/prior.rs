//! Ill-posed residual prior and the high-frequency guidance that feeds the
//! spatial branch.

use rand::Rng;

use crate::autograd::{ReduceKind, Tape, Var};
use crate::error::{invalid, mismatch, Result};
use crate::nn::{bicubic_upsample_var, box_mean3, Conv2dLayer, ConvSpec, Init};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Per-pixel channel range of the (optionally 3x3-smoothed) features, `[H, W, 1]`.
pub fn residue_channel_gate<'t, T: Float>(xs: Var<'t, T>, local_mean: bool) -> Result<Var<'t, T>> {
    let (h, w, d) = xs.value().dims3()?;
    if d == 1 {
        log::warn!("residue gate on a single channel is identically zero");
    }
    let m = if local_mean { box_mean3(xs)? } else { xs };
    let hi = m.reduce(2, ReduceKind::Max)?;
    let lo = m.reduce(2, ReduceKind::Min)?;
    hi.sub(lo)?.reshape(&[h, w, 1])
}

#[derive(Debug, Clone)]
pub struct PriorExtractor {
    pub diff: Conv2dLayer,
    pub refine: Conv2dLayer,
    pub beta: f64,
    /// Smooth features over a 3x3 window before taking the channel range.
    pub local_mean: bool,
}

impl PriorExtractor {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, beta: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid("prior", format!("beta {beta} outside [0, 1]")));
        }
        Ok(Self {
            diff: Conv2dLayer::new(ps, &format!("{name}.diff"), channels, channels, ConvSpec::same(3), Init::He, rng)?,
            refine: Conv2dLayer::new(ps, &format!("{name}.refine"), channels, channels, ConvSpec::same(3), Init::He, rng)?,
            beta,
            local_mean: true,
        })
    }

    /// Prior before the `beta` scaling.
    pub fn raw<'t, T: Float>(&self, ps: &ParamStore<T>, xs: Var<'t, T>, ys: Var<'t, T>) -> Result<Var<'t, T>> {
        if xs.shape() != ys.shape() {
            return Err(mismatch("extract_prior", &xs.shape(), &ys.shape()));
        }
        let gate = residue_channel_gate(xs, self.local_mean)?;
        let t = self.diff.forward(ps, xs.sub(ys)?)?.relu().mul(gate)?;
        Ok(self.refine.forward(ps, t)?.relu())
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, xs: Var<'t, T>, ys: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.raw(ps, xs, ys)?.scale(T::from_f64c(self.beta)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.diff.param_ids(), self.refine.param_ids()].concat()
    }
}

pub fn extract_prior<T: Float>(xs: &Tensor<T>, ys: &Tensor<T>, p: &PriorExtractor, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(p.forward(ps, t.constant(xs.clone()), t.constant(ys.clone()))?.value())
}

/// `relu(conv3x3(concat(bicubic(xh_feats, 2), x_r)))`.
#[derive(Debug, Clone)]
pub struct HfSemanticPerception {
    pub fuse: Conv2dLayer,
    pub channels: usize,
}

impl HfSemanticPerception {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fuse: Conv2dLayer::new(ps, &format!("{name}.fuse"), 2 * channels, channels, ConvSpec::same(3), Init::He, rng)?,
            channels,
        })
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, xh_feats: Var<'t, T>, x_r: Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w, _) = xh_feats.value().dims3()?;
        let (rh, rw, _) = x_r.value().dims3()?;
        if rh != 2 * h || rw != 2 * w {
            return Err(invalid(
                "hf_semantic_guidance",
                format!("prior is {rh}x{rw}, expected {}x{}", 2 * h, 2 * w),
            ));
        }
        let up = bicubic_upsample_var(xh_feats, 2)?;
        Ok(self.fuse.forward(ps, Var::concat_last(&[up, x_r])?)?.relu())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.fuse.param_ids().to_vec()
    }
}

pub fn hf_semantic_guidance<T: Float>(
    xh_feats: &Tensor<T>,
    x_r: &Tensor<T>,
    m: &HfSemanticPerception,
    ps: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(m.forward(ps, t.constant(xh_feats.clone()), t.constant(x_r.clone()))?.value())
}
