use rand::Rng;

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Float, Tensor};

const EPS: f64 = 1e-5;

/// Layer normalization over the last (channel) axis of each pixel.
pub fn layer_norm<'t, T: Float>(x: Var<'t, T>, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let c = *xv.shape().last().ok_or_else(|| invalid("layer_norm", "rank 0"))?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(invalid("layer_norm", format!("gain/bias must be [{c}]")));
    }
    let (gv, bv) = (gain.value(), bias.value());
    let rows = xv.len() / c;
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xv.len()];
    let cn = lit::<T>(c as f64);
    for r in 0..rows {
        let px = &xv.data()[r * c..(r + 1) * c];
        let mean = px.iter().copied().sum::<T>() / cn;
        let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let is = T::one() / (var + lit(EPS)).sqrt();
        inv_std[r] = is;
        for k in 0..c {
            let xh = (px[k] - mean) * is;
            xhat[r * c + k] = xh;
            out[r * c + k] = xh * gv.data()[k] + bv.data()[k];
        }
    }
    let (ix, ig, ib) = (x.id(), gain.id(), bias.id());
    let y = Tensor::new_unchecked(xv.shape().to_vec(), out);
    Ok(x.tape().record(y, &[x, gain, bias], move |g, sink| {
        let gd = g.data();
        sink.accumulate(ig, |buf| {
            for r in 0..rows {
                for k in 0..c {
                    buf[k] += gd[r * c + k] * xhat[r * c + k];
                }
            }
        });
        sink.accumulate(ib, |buf| {
            for r in 0..rows {
                for k in 0..c {
                    buf[k] += gd[r * c + k];
                }
            }
        });
        sink.accumulate(ix, |buf| {
            for r in 0..rows {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for k in 0..c {
                    let dxh = gd[r * c + k] * gv.data()[k];
                    m1 += dxh;
                    m2 += dxh * xhat[r * c + k];
                }
                m1 = m1 / cn;
                m2 = m2 / cn;
                for k in 0..c {
                    let dxh = gd[r * c + k] * gv.data()[k];
                    buf[r * c + k] += inv_std[r] * (dxh - m1 - xhat[r * c + k] * m2);
                }
            }
        });
    }))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, _rng: &mut R) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::ones(&[channels])),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let t = x.tape();
        layer_norm(x, ps.var(t, self.gain), ps.var(t, self.bias))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
