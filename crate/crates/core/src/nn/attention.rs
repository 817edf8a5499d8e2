//! Squeeze-and-Excitation channel gating and Large-Kernel Attention.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::conv::{Conv2dLayer, ConvSpec, Init};
use crate::nn::resample::global_avg_pool;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Default SE channel reduction ratio.
pub const SE_REDUCTION: usize = 4;

/// Squeeze-and-Excitation with an additive injection port on the pooled descriptor.
#[derive(Debug, Clone)]
pub struct SeLayer {
    pub reduce: Conv2dLayer,
    pub expand: Conv2dLayer,
    pub channels: usize,
}

impl SeLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            reduce: Conv2dLayer::new(ps, &format!("{name}.reduce"), channels, hidden, ConvSpec::same(1), Init::He, rng)?,
            expand: Conv2dLayer::new(ps, &format!("{name}.expand"), hidden, channels, ConvSpec::same(1), Init::He, rng)?,
            channels,
        })
    }

    /// Per-channel gates `sigmoid(expand(relu(reduce(gap(x) + inject))))`, shape `[C]`.
    pub fn gates<'t, T: Float>(
        &self,
        ps: &ParamStore<T>,
        x: Var<'t, T>,
        inject: Option<Var<'t, T>>,
        detach: bool,
    ) -> Result<Var<'t, T>> {
        let c = self.channels;
        let mut desc = global_avg_pool(x)?;
        if let Some(inj) = inject {
            if inj.shape() != [c] {
                return Err(invalid("se_forward", format!("inject shape {:?} != [{c}]", inj.shape())));
            }
            desc = desc.add(inj)?;
        }
        let d = desc.reshape(&[1, 1, c])?;
        let h = self.reduce.forward_with(ps, d, detach)?.relu();
        let g = self.expand.forward_with(ps, h, detach)?.sigmoid();
        g.reshape(&[c])
    }

    pub fn forward<'t, T: Float>(
        &self,
        ps: &ParamStore<T>,
        x: Var<'t, T>,
        inject: Option<Var<'t, T>>,
        detach: bool,
    ) -> Result<Var<'t, T>> {
        let (_, _, c) = x.value().dims3()?;
        if c != self.channels {
            return Err(invalid("se_forward", format!("expected {} channels, got {c}", self.channels)));
        }
        let g = self.gates(ps, x, inject, detach)?;
        x.mul(g.reshape(&[1, 1, c])?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.reduce.param_ids(), self.expand.param_ids()].concat()
    }
}

/// `attn = pw(dw_dilated(dw(x)))`, output `attn * x`.
#[derive(Debug, Clone)]
pub struct LkaLayer {
    pub depthwise: Conv2dLayer,
    pub dilated: Conv2dLayer,
    pub pointwise: Conv2dLayer,
}

impl LkaLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let c = channels;
        Ok(Self {
            depthwise: Conv2dLayer::new(ps, &format!("{name}.dw"), c, c, ConvSpec::same(5).groups(c), Init::He, rng)?,
            dilated: Conv2dLayer::new(
                ps,
                &format!("{name}.dw_dilated"),
                c,
                c,
                ConvSpec::same(7).dilation(3).groups(c),
                Init::He,
                rng,
            )?,
            pointwise: Conv2dLayer::new(ps, &format!("{name}.pw"), c, c, ConvSpec::same(1), Init::He, rng)?,
        })
    }

    /// Radius of the receptive field: 2 + 9 + 0 = 11, i.e. a 23x23 window.
    pub fn field_radius(&self) -> usize {
        self.depthwise.spec.reach() + self.dilated.spec.reach() + self.pointwise.spec.reach()
    }

    pub fn attention<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>, detach: bool) -> Result<Var<'t, T>> {
        let a = self.depthwise.forward_with(ps, x, detach)?;
        let a = self.dilated.forward_with(ps, a, detach)?;
        self.pointwise.forward_with(ps, a, detach)
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>, detach: bool) -> Result<Var<'t, T>> {
        self.attention(ps, x, detach)?.mul(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.depthwise.param_ids(), self.dilated.param_ids(), self.pointwise.param_ids()].concat()
    }
}

/// Plain-tensor SE inference.
pub fn se_forward<T: Float>(x: &Tensor<T>, layer: &SeLayer, ps: &ParamStore<T>, inject: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let inj = inject.map(|t| tape.constant(t.clone()));
    Ok(layer.forward(ps, tape.constant(x.clone()), inj, false)?.value())
}

/// Plain-tensor LKA inference.
pub fn lka_forward<T: Float>(x: &Tensor<T>, layer: &LkaLayer, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(layer.forward(ps, tape.constant(x.clone()), false)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, gradcheck_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(ps: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let z = Tensor::zeros(ps.value(id).shape());
            ps.set_value(id, z);
        }
    }

    #[test]
    fn se_zero_input_and_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 8, 4, &mut rng).unwrap();
        let zero = Tensor::zeros(&[4, 4, 8]);
        assert!(se_forward(&zero, &se, &ps, None).unwrap().data().iter().all(|&v| v == 0.0));
        zero_all(&mut ps, &se.param_ids());
        let x = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
        let y = se_forward(&x, &se, &ps, None).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn se_large_injection_saturates_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 4, 1, &mut rng).unwrap();
        let eye = Tensor::from_fn(&[1, 1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        ps.set_value(se.reduce.weight, eye.clone());
        ps.set_value(se.expand.weight, eye);
        let x = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let inject = Tensor::full(&[4], 50.0);
        let y = se_forward(&x, &se, &ps, Some(&inject)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
        assert!(se_forward(&x, &se, &ps, Some(&Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn se_gates_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 8, 4, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::randn(&[5, 5, 8], 2.0, &mut rng));
        let g = se.gates(&ps, x, None, false).unwrap().value();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn lka_zero_cases_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f64>::new();
        let lka = LkaLayer::new(&mut ps, "lka", 4, &mut rng).unwrap();
        assert_eq!(lka.field_radius(), 11);
        let zero = Tensor::zeros(&[6, 7, 4]);
        assert!(lka_forward(&zero, &lka, &ps).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::randn(&[6, 7, 4], 1.0, &mut rng);
        assert_eq!(lka_forward(&x, &lka, &ps).unwrap().shape(), x.shape());
        zero_all(&mut ps, &lka.param_ids());
        assert!(lka_forward(&x, &lka, &ps).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lka_receptive_field_is_23() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let lka = LkaLayer::new(&mut ps, "lka", 2, &mut rng).unwrap();
        let (h, w) = (30, 30);
        let base = Tensor::<f64>::randn(&[h, w, 2], 1.0, &mut rng);
        let y0 = lka_forward(&base, &lka, &ps).unwrap();
        let probe = |dy: usize, dx: usize| {
            let mut x = base.clone();
            let o = x.offset(&[dy, dx, 1]);
            x.data_mut()[o] += 1.0;
            let y = lka_forward(&x, &lka, &ps).unwrap();
            (y.get(&[0, 0, 0]) - y0.get(&[0, 0, 0])).abs()
        };
        // Chebyshev distance 12 lies outside the 23x23 window around the origin.
        assert_eq!(probe(12, 0), 0.0);
        assert_eq!(probe(5, 24), 0.0);
        assert!(probe(9, 9) > 0.0);
    }

    #[test]
    fn gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::<f64>::new();
        let se = SeLayer::new(&mut ps, "se", 8, 4, &mut rng).unwrap();
        let lka = LkaLayer::new(&mut ps, "lka", 8, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut rng);
        let inj = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[5, 5, 8], 1.0, &mut rng);
        fn f<'t>(
            t: &'t Tape<f64>,
            p: &ParamStore<f64>,
            v: Var<'t, f64>,
            (se, lka, inj, w): (&SeLayer, &LkaLayer, &Tensor<f64>, &Tensor<f64>),
        ) -> Result<Var<'t, f64>> {
            let u = lka.forward(p, v, false)?;
            let u = se.forward(p, u, Some(t.constant(inj.clone())), false)?;
            Ok(u.mul(t.constant(w.clone()))?.sum_all())
        }
        let ctx = (&se, &lka, &inj, &w);
        let r = gradcheck(|t, v| f(t, &ps, v, ctx), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let ids: Vec<_> = [se.param_ids(), lka.param_ids()].concat();
        let r = gradcheck_params(|t, p| f(t, p, t.constant(x.clone()), ctx), &ps, &ids, 1e-5, 6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
