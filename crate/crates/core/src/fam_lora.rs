//! Fusion-aware multi-head low-rank adaptation block.
//!
//! Channel transform, LKA + SE applied twice (the second time with the
//! auxiliary prior injected into the SE descriptor and, by default, with the
//! attention weights held constant), a second channel transform, then four
//! per-quarter low-rank adapters around a residual.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, mismatch, Result};
use crate::nn::{global_avg_pool, Conv2dLayer, ConvSpec, Init, LkaLayer, SeLayer, SE_REDUCTION};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const LORA_HEADS: usize = 4;

/// Low-rank map `x + x * down * up` over one channel quarter.
#[derive(Debug, Clone)]
pub struct LoraHead {
    pub down: ParamId,
    pub up: ParamId,
    pub width: usize,
    pub rank: usize,
}

impl LoraHead {
    /// `down ~ N(0, 1)`, `up = 0`; requires `rank < width`.
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, width: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= width {
            return Err(invalid("lora", format!("rank {rank} must be in 1..{width}")));
        }
        Ok(Self {
            down: ps.add(format!("{name}.down"), Tensor::randn(&[width, rank], 1.0, rng)),
            up: ps.add(format!("{name}.up"), Tensor::zeros(&[rank, width])),
            width,
            rank,
        })
    }

    /// Head with given factors `down: [w, r]`, `up: [r, w]`, `r <= w`.
    pub fn from_factors<T: Float>(ps: &mut ParamStore<T>, name: &str, down: Tensor<T>, up: Tensor<T>) -> Result<Self> {
        let (width, rank) = match down.shape() {
            &[w, r] => (w, r),
            s => return Err(invalid("lora", format!("down must be 2-D, got {s:?}"))),
        };
        if up.shape() != [rank, width] || rank == 0 || rank > width {
            return Err(mismatch("lora", down.shape(), up.shape()));
        }
        Ok(Self {
            down: ps.add(format!("{name}.down"), down),
            up: ps.add(format!("{name}.up"), up),
            width,
            rank,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// Split channels into four quarters and adapt each with its own head.
pub fn multihead_lora_var<'t, T: Float>(ps: &ParamStore<T>, x: Var<'t, T>, heads: &[LoraHead]) -> Result<Var<'t, T>> {
    let (h, w, c) = x.value().dims3()?;
    if heads.len() != LORA_HEADS || c % LORA_HEADS != 0 {
        return Err(invalid("multihead_lora", format!("{c} channels over {} heads", heads.len())));
    }
    let q = c / LORA_HEADS;
    let tape = x.tape();
    let parts = heads
        .iter()
        .enumerate()
        .map(|(j, head)| {
            if head.width != q {
                return Err(invalid("multihead_lora", format!("head width {} != quarter {q}", head.width)));
            }
            let xj = x.narrow_last(j * q, q)?.reshape(&[h * w, q])?;
            let delta = xj.matmul(ps.var(tape, head.down))?.matmul(ps.var(tape, head.up))?;
            xj.add(delta)?.reshape(&[h, w, q])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_last(&parts)
}

pub fn multihead_lora<T: Float>(x: &Tensor<T>, heads: &[LoraHead], ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(multihead_lora_var(ps, t.constant(x.clone()), heads)?.value())
}

#[derive(Debug, Clone)]
pub struct FamLoraBlock {
    pub t1: Conv2dLayer,
    pub t2: Conv2dLayer,
    pub t3: Conv2dLayer,
    pub t4: Conv2dLayer,
    pub lka: LkaLayer,
    pub se: SeLayer,
    /// Separate second-pass attention; `None` reuses `lka` / `se`.
    pub second: Option<(LkaLayer, SeLayer)>,
    pub heads: Vec<LoraHead>,
    pub pass2_frozen: bool,
    pub channels: usize,
}

impl FamLoraBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % LORA_HEADS != 0 {
            return Err(invalid("fam_lora", format!("channel count {channels} not divisible by {LORA_HEADS}")));
        }
        let c = channels;
        let pw = |ps: &mut ParamStore<T>, rng: &mut R, n: &str, init| Conv2dLayer::new(ps, &format!("{name}.{n}"), c, c, ConvSpec::same(1), init, rng);
        Ok(Self {
            t1: pw(ps, rng, "t1", Init::He)?,
            t2: pw(ps, rng, "t2", Init::He)?,
            lka: LkaLayer::new(ps, &format!("{name}.lka"), c, rng)?,
            se: SeLayer::new(ps, &format!("{name}.se"), c, SE_REDUCTION, rng)?,
            t3: pw(ps, rng, "t3", Init::He)?,
            t4: pw(ps, rng, "t4", Init::Zero)?,
            second: None,
            heads: (0..LORA_HEADS)
                .map(|j| LoraHead::new(ps, &format!("{name}.lora{j}"), c / LORA_HEADS, rank, rng))
                .collect::<Result<_>>()?,
            pass2_frozen: true,
            channels,
        })
    }

    /// Give the second attention pass its own weights, copied from the first.
    pub fn split_second_pass<T: Float, R: Rng + ?Sized>(&mut self, ps: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<()> {
        let lka = LkaLayer::new(ps, &format!("{name}.lka2"), self.channels, rng)?;
        let se = SeLayer::new(ps, &format!("{name}.se2"), self.channels, SE_REDUCTION, rng)?;
        let src: Vec<ParamId> = self.lka.param_ids().into_iter().chain(self.se.param_ids()).collect();
        let dst: Vec<ParamId> = lka.param_ids().into_iter().chain(se.param_ids()).collect();
        for (d, s) in dst.into_iter().zip(src) {
            let v = ps.value(s).clone();
            ps.set_value(d, v);
        }
        self.second = Some((lka, se));
        self.apply_freeze(ps);
        Ok(())
    }

    /// Mirror `pass2_frozen` onto the store flags of a separate second-pass copy,
    /// so the optimizer never touches it while frozen. Shared weights are
    /// unaffected; their pass-2 use is detached in `forward` instead.
    pub fn apply_freeze<T: Float>(&self, ps: &mut ParamStore<T>) {
        if let Some((l, s)) = &self.second {
            for id in l.param_ids().into_iter().chain(s.param_ids()) {
                ps.set_frozen(id, self.pass2_frozen);
            }
        }
    }

    pub fn freeze_attention(&mut self) {
        self.pass2_frozen = true;
    }

    pub fn set_pass2_frozen(&mut self, frozen: bool) {
        self.pass2_frozen = frozen;
    }

    pub fn toggle_pass2_frozen(&mut self) {
        self.pass2_frozen = !self.pass2_frozen;
    }

    /// `x_r = None` disables the injection port.
    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, y: Var<'t, T>, x_r: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (_, _, c) = y.value().dims3()?;
        if c != self.channels {
            return Err(invalid("fam_lora_forward", format!("expected {} channels, got {c}", self.channels)));
        }
        let inject = match x_r {
            Some(r) => {
                if r.shape() != y.shape() {
                    return Err(mismatch("fam_lora_forward", &y.shape(), &r.shape()));
                }
                Some(global_avg_pool(r)?)
            }
            None => None,
        };
        let u = self.t2.forward(ps, self.t1.forward(ps, y)?.relu())?;
        let u = self.se.forward(ps, self.lka.forward(ps, u, false)?, None, false)?;
        let (lka2, se2) = match &self.second {
            Some((l, s)) => (l, s),
            None => (&self.lka, &self.se),
        };
        let frozen = self.pass2_frozen;
        let u = se2.forward(ps, lka2.forward(ps, u, frozen)?, inject, frozen)?;
        let u = self.t4.forward(ps, self.t3.forward(ps, u)?.relu())?;
        y.add(multihead_lora_var(ps, u, &self.heads)?)
    }

    pub fn attention_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lka.param_ids();
        ids.extend(self.se.param_ids());
        if let Some((l, s)) = &self.second {
            ids.extend(l.param_ids());
            ids.extend(s.param_ids());
        }
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [&self.t1, &self.t2, &self.t3, &self.t4].iter().flat_map(|l| l.param_ids()).collect();
        ids.extend(self.attention_param_ids());
        ids.extend(self.heads.iter().flat_map(|h| h.param_ids()));
        ids
    }
}

pub fn fam_lora_forward<T: Float>(y: &Tensor<T>, x_r: &Tensor<T>, b: &FamLoraBlock, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(b.forward(ps, t.constant(y.clone()), Some(t.constant(x_r.clone())))?.value())
}

pub fn freeze_attention(b: &mut FamLoraBlock) {
    b.freeze_attention();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_heads_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let heads: Vec<_> = (0..4).map(|j| LoraHead::new(&mut ps, &format!("h{j}"), 4, 2, &mut rng).unwrap()).collect();
        let x = Tensor::randn(&[3, 3, 16], 1.0, &mut rng);
        assert_eq!(multihead_lora(&x, &heads, &ps).unwrap(), x);
        assert!(LoraHead::new(&mut ps, "bad", 4, 4, &mut rng).is_err());
    }

    #[test]
    fn full_rank_identity_factors_double_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let q = 4;
        // Orthogonal down (a signed permutation) with up = down^T.
        let perm = [2usize, 0, 3, 1];
        let down = Tensor::from_fn(&[q, q], |i| {
            let (r, c) = (i / q, i % q);
            if perm[r] == c { if r % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 }
        });
        let up = Tensor::from_fn(&[q, q], |i| down.data()[(i % q) * q + i / q]);
        let heads: Vec<_> = (0..4)
            .map(|j| LoraHead::from_factors(&mut ps, &format!("h{j}"), down.clone(), up.clone()).unwrap())
            .collect();
        let x = Tensor::randn(&[2, 3, 16], 1.0, &mut rng);
        let y = multihead_lora(&x, &heads, &ps).unwrap();
        assert!(y.max_abs_diff(&x.scale(2.0)).unwrap() < 1e-14);
    }

    #[test]
    fn heads_act_on_their_own_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let heads: Vec<_> = (0..4)
            .map(|j| {
                LoraHead::from_factors(&mut ps, &format!("h{j}"), Tensor::randn(&[4, 2], 1.0, &mut rng), Tensor::randn(&[2, 4], 1.0, &mut rng))
                    .unwrap()
            })
            .collect();
        let x = Tensor::randn(&[2, 2, 16], 1.0, &mut rng);
        let mut x2 = x.clone();
        for px in x2.data_mut().chunks_mut(16) {
            px[5] += 1.0;
        }
        let (a, b) = (multihead_lora(&x, &heads, &ps).unwrap(), multihead_lora(&x2, &heads, &ps).unwrap());
        let mut touched = false;
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            if (4..8).contains(&(i % 16)) {
                touched |= u != v;
            } else {
                assert_eq!(u, v);
            }
        }
        assert!(touched);
    }

    #[test]
    fn fresh_block_is_identity_and_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f64>::new();
        let mut b = FamLoraBlock::new(&mut ps, "f", 16, 2, &mut rng).unwrap();
        assert!(b.pass2_frozen);
        b.toggle_pass2_frozen();
        b.toggle_pass2_frozen();
        assert!(b.pass2_frozen);
        let y = Tensor::randn(&[8, 8, 16], 1.0, &mut rng);
        let xr = Tensor::randn(&[8, 8, 16], 1.0, &mut rng);
        assert_eq!(fam_lora_forward(&y, &xr, &b, &ps).unwrap(), y);
        assert!(FamLoraBlock::new(&mut ps, "g", 6, 1, &mut rng).is_err());
    }

    #[test]
    fn lora_parameter_economy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let b = FamLoraBlock::new(&mut ps, "f", 16, 2, &mut rng).unwrap();
        let lora: usize = b.heads.iter().flat_map(|h| h.param_ids()).map(|id| ps.value(id).len()).sum();
        assert_eq!(lora, 2 * 16 * 2);
        assert!(lora < 16 * 16);
        let mut ps2 = ParamStore::<f64>::new();
        LoraHead::new(&mut ps2, "h", 4, 3, &mut rng).unwrap();
        assert_eq!(ps2.scalar_count(), 24);
    }
}
