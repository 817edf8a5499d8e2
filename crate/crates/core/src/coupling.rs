//! Affine coupling between the high- and low-frequency streams.
//!
//! Scale and shift are conditioned on the updated high-frequency stream, so
//! each block has a closed-form inverse and a log-determinant equal to the
//! sum of its clamped log-scales.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, mismatch, Result};
use crate::nn::{Conv2dLayer, ConvSpec, Init};
use crate::params::{ParamId, ParamStore};
use crate::ssm::SsmmBlock;
use crate::tensor::{Float, Tensor};

/// Default soft bound on the log-scale.
pub const SCALE_CLAMP: f64 = 2.0;

/// SSMM block followed by a zero-initialized 1x1 projection.
#[derive(Debug, Clone)]
pub struct Subnet {
    pub block: SsmmBlock,
    pub out: Conv2dLayer,
}

impl Subnet {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, state: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            block: SsmmBlock::new(ps, &format!("{name}.ssmm"), channels, state, Init::He, rng)?,
            out: Conv2dLayer::new(ps, &format!("{name}.out"), channels, channels, ConvSpec::same(1), Init::Zero, rng)?,
        })
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.out.forward(ps, self.block.forward(ps, x)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.block.param_ids();
        ids.extend(self.out.param_ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct CouplingBlock {
    pub i1: Subnet,
    pub i2: Subnet,
    pub i3: Subnet,
    pub alpha: f64,
    pub channels: usize,
}

impl CouplingBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, state: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            i1: Subnet::new(ps, &format!("{name}.i1"), channels, state, rng)?,
            i2: Subnet::new(ps, &format!("{name}.i2"), channels, state, rng)?,
            i3: Subnet::new(ps, &format!("{name}.i3"), channels, state, rng)?,
            alpha: SCALE_CLAMP,
            channels,
        })
    }

    /// `alpha * tanh(i2(xh) / alpha)`.
    pub fn log_scale<'t, T: Float>(&self, ps: &ParamStore<T>, xh: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = T::from_f64c(self.alpha);
        Ok(self.i2.forward(ps, xh)?.scale(T::one() / a).tanh().scale(a))
    }

    fn check<T: Float>(&self, xh: &Var<'_, T>, xl: &Var<'_, T>) -> Result<()> {
        let (sh, sl) = (xh.shape(), xl.shape());
        if sh != sl {
            return Err(mismatch("coupling", &sh, &sl));
        }
        if sh.len() != 3 || sh[2] != self.channels {
            return Err(invalid("coupling", format!("expected [H, W, {}], got {sh:?}", self.channels)));
        }
        Ok(())
    }

    /// Returns `(xh', xl', logdet)`.
    pub fn forward<'t, T: Float>(
        &self,
        ps: &ParamStore<T>,
        xh: Var<'t, T>,
        xl: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        self.check(&xh, &xl)?;
        let xh2 = xh.add(self.i1.forward(ps, xl)?)?;
        let s = self.log_scale(ps, xh2)?;
        let xl2 = xl.mul(s.exp())?.add(self.i3.forward(ps, xh2)?)?;
        Ok((xh2, xl2, s.sum_all()))
    }

    pub fn inverse<'t, T: Float>(&self, ps: &ParamStore<T>, xh2: Var<'t, T>, xl2: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(&xh2, &xl2)?;
        let s = self.log_scale(ps, xh2)?;
        let xl = xl2.sub(self.i3.forward(ps, xh2)?)?.mul(s.neg().exp())?;
        if !xl.value().all_finite() {
            return Err(invalid("coupling_inverse", "non-finite intermediate"));
        }
        let xh = xh2.sub(self.i1.forward(ps, xl)?)?;
        Ok((xh, xl))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.i1, &self.i2, &self.i3].iter().flat_map(|s| s.param_ids()).collect()
    }
}

pub fn coupling_forward<T: Float>(
    xh: &Tensor<T>,
    xl: &Tensor<T>,
    b: &CouplingBlock,
    ps: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let t = Tape::no_grad();
    let (h, l, ld) = b.forward(ps, t.constant(xh.clone()), t.constant(xl.clone()))?;
    Ok((h.value(), l.value(), ld.item()))
}

pub fn coupling_inverse<T: Float>(xh2: &Tensor<T>, xl2: &Tensor<T>, b: &CouplingBlock, ps: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = Tape::no_grad();
    let (h, l) = b.inverse(ps, t.constant(xh2.clone()), t.constant(xl2.clone()))?;
    Ok((h.value(), l.value()))
}

#[derive(Debug, Clone)]
pub struct CouplingStack {
    pub blocks: Vec<CouplingBlock>,
}

impl CouplingStack {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("coupling_stack", "depth must be at least 1"));
        }
        let blocks = (0..depth)
            .map(|i| CouplingBlock::new(ps, &format!("{name}.{i}"), channels, state, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<'t, T: Float>(
        &self,
        ps: &ParamStore<T>,
        mut xh: Var<'t, T>,
        mut xl: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let mut total: Option<Var<'t, T>> = None;
        for b in &self.blocks {
            let (h, l, ld) = b.forward(ps, xh, xl)?;
            xh = h;
            xl = l;
            total = Some(match total {
                None => ld,
                Some(t) => t.add(ld)?,
            });
        }
        Ok((xh, xl, total.expect("non-empty stack")))
    }

    pub fn inverse<'t, T: Float>(&self, ps: &ParamStore<T>, mut xh: Var<'t, T>, mut xl: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        for b in self.blocks.iter().rev() {
            (xh, xl) = b.inverse(ps, xh, xl)?;
        }
        Ok((xh, xl))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.param_ids()).collect()
    }
}

pub fn stack_forward<T: Float>(
    xh: &Tensor<T>,
    xl: &Tensor<T>,
    s: &CouplingStack,
    ps: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let t = Tape::no_grad();
    let (h, l, ld) = s.forward(ps, t.constant(xh.clone()), t.constant(xl.clone()))?;
    Ok((h.value(), l.value(), ld.item()))
}

pub fn stack_inverse<T: Float>(xh: &Tensor<T>, xl: &Tensor<T>, s: &CouplingStack, ps: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = Tape::no_grad();
    let (h, l) = s.inverse(ps, t.constant(xh.clone()), t.constant(xl.clone()))?;
    Ok((h.value(), l.value()))
}

/// Overwrite `i2`'s output layer so the clamped log-scale is the constant `c`.
pub fn pin_log_scale<T: Float>(b: &CouplingBlock, ps: &mut ParamStore<T>, c: f64) -> Result<()> {
    if c.abs() >= b.alpha {
        return Err(invalid("pin_log_scale", format!("|c| must be below {}", b.alpha)));
    }
    let raw = b.alpha * (c / b.alpha).atanh();
    let [w, bias] = b.i2.out.param_ids();
    let ws = ps.value(w).shape().to_vec();
    let bs = ps.value(bias).shape().to_vec();
    if !ps.set_value(w, Tensor::zeros(&ws)) || !ps.set_value(bias, Tensor::full(&bs, T::from_f64c(raw))) {
        return Err(invalid("pin_log_scale", "i2 output layer is frozen"));
    }
    Ok(())
}
