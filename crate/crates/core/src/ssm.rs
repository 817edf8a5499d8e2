//! Selective state-space scan and the channel-segmented 2D module built on it.
//!
//! For each channel `c` and state `n` the scan runs
//! `h_t = exp(delta_t * a) * h_{t-1} + delta_t * B_t * x_t`,
//! `y_t = <C_t, h_t> + d * x_t`, with `delta`, `B`, `C` projected from `x_t`.
//! The recurrence is evaluated in one fused tape node with a hand-written
//! reverse sweep, so cost stays linear in sequence length.

use std::cell::Cell;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Conv2dLayer, ConvSpec, Init, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Default scan state size.
pub const STATE_SIZE: usize = 8;

/// Number of channel segments in an SSMM block. Narrower inputs use one
/// segment per channel.
pub const SEGMENTS: usize = 4;

thread_local! {
    static SCAN_UPDATES: Cell<u64> = const { Cell::new(0) };
}

/// Recurrence updates (`T * C * N`) performed on this thread so far.
pub fn scan_update_count() -> u64 {
    SCAN_UPDATES.with(|c| c.get())
}

pub fn reset_scan_update_count() {
    SCAN_UPDATES.with(|c| c.set(0));
}

/// Traversal order of a flattened `H x W` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];

    /// Pixel index visited at each time step.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let col_major = |t: usize| (t % h) * w + t / h;
        match self {
            ScanDirection::RowForward => (0..n).collect(),
            ScanDirection::RowBackward => (0..n).rev().collect(),
            ScanDirection::ColForward => (0..n).map(col_major).collect(),
            ScanDirection::ColBackward => (0..n).rev().map(col_major).collect(),
        }
    }
}

/// Fused selective scan.
///
/// Shapes: `x`, `delta` are `[P, C]`; `b`, `c` are `[P, N]`; `a` is `[C, N]`;
/// `d` is `[C]`. `order` lists the positions in time order.
pub fn selective_scan<'t, T: Float>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    a: Var<'t, T>,
    d: Var<'t, T>,
    order: Vec<usize>,
) -> Result<Var<'t, T>> {
    let (xv, dv, bv, cv, av, skip) = (x.value(), delta.value(), b.value(), c.value(), a.value(), d.value());
    let (p, ch) = match xv.shape() {
        &[p, ch] => (p, ch),
        s => return Err(invalid("selective_scan", format!("x must be [P, C], got {s:?}"))),
    };
    let n = match av.shape() {
        &[c2, n] if c2 == ch => n,
        s => return Err(invalid("selective_scan", format!("a must be [{ch}, N], got {s:?}"))),
    };
    if dv.shape() != [p, ch] || bv.shape() != [p, n] || cv.shape() != [p, n] || skip.shape() != [ch] {
        return Err(invalid("selective_scan", "inconsistent delta/B/C/d shapes"));
    }
    if order.len() != p || order.iter().any(|&i| i >= p) {
        return Err(invalid("selective_scan", "order must index every position"));
    }
    let steps = order.len();
    let (xd, dd, bd, cd, ad, sd) = (xv.data(), dv.data(), bv.data(), cv.data(), av.data(), skip.data());
    // States after every step, time-major: hs[t][c][n].
    let mut hs = vec![T::zero(); steps * ch * n];
    let mut out = vec![T::zero(); p * ch];
    let mut h = vec![T::zero(); ch * n];
    for (t, &pos) in order.iter().enumerate() {
        for k in 0..ch {
            let dl = dd[pos * ch + k];
            let xk = xd[pos * ch + k];
            let mut acc = sd[k] * xk;
            for s in 0..n {
                let abar = (dl * ad[k * n + s]).exp();
                let hv = abar * h[k * n + s] + dl * bd[pos * n + s] * xk;
                h[k * n + s] = hv;
                acc += cd[pos * n + s] * hv;
            }
            out[pos * ch + k] = acc;
        }
        hs[t * ch * n..(t + 1) * ch * n].copy_from_slice(&h);
    }
    SCAN_UPDATES.with(|cnt| cnt.set(cnt.get() + (steps * ch * n) as u64));

    let ids = [x.id(), delta.id(), b.id(), c.id(), a.id(), d.id()];
    let y = Tensor::new_unchecked(vec![p, ch], out);
    Ok(x.tape().record(y, &[x, delta, b, c, a, d], move |g, sink| {
        let (xd, dd, bd, cd, ad, sd) = (xv.data(), dv.data(), bv.data(), cv.data(), av.data(), skip.data());
        let gy = g.data();
        let mut gx = vec![T::zero(); p * ch];
        let mut gdelta = vec![T::zero(); p * ch];
        let mut gb = vec![T::zero(); p * n];
        let mut gc = vec![T::zero(); p * n];
        let mut ga = vec![T::zero(); ch * n];
        let mut gd = vec![T::zero(); ch];
        // Gradient flowing into h_t from later steps.
        let mut carry = vec![T::zero(); ch * n];
        for t in (0..steps).rev() {
            let pos = order[t];
            let h_t = &hs[t * ch * n..(t + 1) * ch * n];
            for k in 0..ch {
                let gyk = gy[pos * ch + k];
                let dl = dd[pos * ch + k];
                let xk = xd[pos * ch + k];
                gd[k] += gyk * xk;
                gx[pos * ch + k] += gyk * sd[k];
                for s in 0..n {
                    let i = k * n + s;
                    let gh = carry[i] + cd[pos * n + s] * gyk;
                    gc[pos * n + s] += gyk * h_t[i];
                    let abar = (dl * ad[i]).exp();
                    let h_prev = if t > 0 { hs[(t - 1) * ch * n + i] } else { T::zero() };
                    let g_abar = gh * h_prev * abar;
                    gdelta[pos * ch + k] += g_abar * ad[i] + gh * bd[pos * n + s] * xk;
                    ga[i] += g_abar * dl;
                    gb[pos * n + s] += gh * dl * xk;
                    gx[pos * ch + k] += gh * dl * bd[pos * n + s];
                    carry[i] = gh * abar;
                }
            }
        }
        for (id, grad) in ids.into_iter().zip([gx, gdelta, gb, gc, ga, gd]) {
            sink.add(id, &grad);
        }
    }))
}

/// Learned projections of one directional scanner.
#[derive(Debug, Clone)]
pub struct SelectiveScanParams {
    pub delta_weight: ParamId,
    pub delta_bias: ParamId,
    pub b_weight: ParamId,
    pub c_weight: ParamId,
    /// The decay is `a = -exp(log_a)`, so the discretized factor stays in `(0, 1]`.
    pub log_a: ParamId,
    pub d: ParamId,
    pub channels: usize,
    pub state: usize,
}

impl SelectiveScanParams {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let proj_std = 1.0 / (c as f64).sqrt();
        // softplus^-1(0.5)
        let delta_bias0 = (0.5f64.exp() - 1.0).ln();
        Self {
            delta_weight: ps.add(format!("{name}.delta_w"), Tensor::randn(&[c, c], 0.1 * proj_std, rng)),
            delta_bias: ps.add(format!("{name}.delta_b"), Tensor::full(&[c], T::from_f64c(delta_bias0))),
            b_weight: ps.add(format!("{name}.b_w"), Tensor::randn(&[c, state], proj_std, rng)),
            c_weight: ps.add(format!("{name}.c_w"), Tensor::randn(&[c, state], proj_std, rng)),
            log_a: ps.add(
                format!("{name}.log_a"),
                Tensor::from_fn(&[c, state], |i| T::from_f64c(((i % state) as f64 + 1.0).ln())),
            ),
            d: ps.add(format!("{name}.d"), Tensor::ones(&[c])),
            channels,
            state,
        }
    }

    /// Scan `x: [P, C]` in the given position order.
    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>, order: Vec<usize>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let c = self.channels;
        let bias = ps.var(tape, self.delta_bias).reshape(&[1, c])?;
        let delta = x.matmul(ps.var(tape, self.delta_weight))?.add(bias)?.softplus();
        let b = x.matmul(ps.var(tape, self.b_weight))?;
        let cm = x.matmul(ps.var(tape, self.c_weight))?;
        let a = ps.var(tape, self.log_a).exp().neg();
        let d = ps.var(tape, self.d);
        selective_scan(x, delta, b, cm, a, d, order)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.delta_weight, self.delta_bias, self.b_weight, self.c_weight, self.log_a, self.d]
    }
}

/// Plain-tensor 1D scan over `x: [T, C]` in time order.
pub fn selective_scan_1d<T: Float>(x: &Tensor<T>, p: &SelectiveScanParams, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(invalid("selective_scan_1d", "sequence must be non-empty"));
    }
    Ok(p.forward(ps, tape.constant(x.clone()), (0..n).collect())?.value())
}

/// Four directional scanners with averaged outputs.
#[derive(Debug, Clone)]
pub struct Ss2d {
    pub scanners: [SelectiveScanParams; 4],
}

impl Ss2d {
    pub fn new<T: Float, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, channels: usize, state: usize, rng: &mut R) -> Self {
        let mk = |ps: &mut ParamStore<T>, rng: &mut R, i: usize| SelectiveScanParams::new(ps, &format!("{name}.dir{i}"), channels, state, rng);
        Self {
            scanners: [mk(ps, rng, 0), mk(ps, rng, 1), mk(ps, rng, 2), mk(ps, rng, 3)],
        }
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w, c) = x.value().dims3()?;
        let flat = x.reshape(&[h * w, c])?;
        let mut acc: Option<Var<'t, T>> = None;
        for (scanner, dir) in self.scanners.iter().zip(ScanDirection::ALL) {
            let y = scanner.forward(ps, flat, dir.order(h, w))?;
            acc = Some(match acc {
                None => y,
                Some(s) => s.add(y)?,
            });
        }
        acc.expect("four scanners").scale(T::from_f64c(0.25)).reshape(&[h, w, c])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.scanners.iter().flat_map(|s| s.param_ids()).collect()
    }
}

pub fn ss2d_forward<T: Float>(x: &Tensor<T>, block: &Ss2d, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(block.forward(ps, tape.constant(x.clone()))?.value())
}

/// Segmented spectral block: pre-norm, four channel segments each with its
/// own SS2D, concatenation, 1x1 fuse, residual.
#[derive(Debug, Clone)]
pub struct SsmmBlock {
    pub norm: LayerNorm,
    pub segments: Vec<Ss2d>,
    pub fuse: Conv2dLayer,
    pub channels: usize,
}

impl SsmmBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state: usize,
        fuse_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let count = SEGMENTS.min(channels);
        if channels == 0 || channels % count != 0 {
            return Err(invalid("ssmm", format!("channel count {channels} not divisible by {SEGMENTS}")));
        }
        let seg = channels / count;
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), channels, rng),
            segments: (0..count).map(|i| Ss2d::new(ps, &format!("{name}.seg{i}"), seg, state, rng)).collect(),
            fuse: Conv2dLayer::new(ps, &format!("{name}.fuse"), channels, channels, ConvSpec::same(1), fuse_init, rng)?,
            channels,
        })
    }

    /// Concatenated per-segment scan outputs, before the fuse convolution.
    pub fn mixed<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, c) = x.value().dims3()?;
        if c != self.channels {
            return Err(invalid("ssmm", format!("expected {} channels, got {c}", self.channels)));
        }
        let seg = c / self.segments.len();
        let normed = self.norm.forward(ps, x)?;
        let parts = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| s.forward(ps, normed.narrow_last(i * seg, seg)?))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_last(&parts)
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let m = self.mixed(ps, x)?;
        self.fuse.forward(ps, m)?.add(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids().to_vec();
        ids.extend(self.segments.iter().flat_map(|s| s.param_ids()));
        ids.extend(self.fuse.param_ids());
        ids
    }
}

pub fn ssmm_forward<T: Float>(x: &Tensor<T>, block: &SsmmBlock, ps: &ParamStore<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(block.forward(ps, tape.constant(x.clone()))?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, gradcheck_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw_scan(x: &Tensor<f64>, delta: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, a: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
        let t = Tape::no_grad();
        let k = |v: &Tensor<f64>| t.constant(v.clone());
        let n = x.shape()[0];
        selective_scan(k(x), k(delta), k(b), k(c), k(a), k(d), (0..n).collect()).unwrap().value()
    }

    #[test]
    fn no_decay_unit_gains_give_prefix_sums() {
        let xs = [0.5, -1.0, 2.0, 0.25, 3.0];
        let x = Tensor::from_vec(&[5, 1], xs.to_vec()).unwrap();
        let ones = Tensor::ones(&[5, 1]);
        let y = raw_scan(&x, &ones, &ones, &ones, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1]));
        let mut acc = 0.0;
        for (t, &v) in xs.iter().enumerate() {
            acc += v;
            assert!((y.data()[t] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_has_no_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ch, n) = (3, 4);
        let x = Tensor::<f64>::randn(&[1, ch], 1.0, &mut rng);
        let delta = Tensor::<f64>::rand_uniform(&[1, ch], 0.1, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, n], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[1, n], 1.0, &mut rng);
        let a = Tensor::<f64>::rand_uniform(&[ch, n], -2.0, 0.0, &mut rng);
        let d = Tensor::<f64>::randn(&[ch], 1.0, &mut rng);
        let y = raw_scan(&x, &delta, &b, &c, &a, &d);
        for k in 0..ch {
            let cb: f64 = (0..n).map(|s| c.data()[s] * delta.data()[k] * b.data()[s]).sum();
            let want = cb * x.data()[k] + d.data()[k] * x.data()[k];
            assert!((y.data()[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let p = SelectiveScanParams::new(&mut ps, "s", 4, STATE_SIZE, &mut rng);
        let y = selective_scan_1d(&Tensor::zeros(&[10, 4]), &p, &ps).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let ss = Ss2d::new(&mut ps, "ss", 4, STATE_SIZE, &mut rng);
        assert!(ss2d_forward(&Tensor::zeros(&[3, 5, 4]), &ss, &ps).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_factor_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let p = SelectiveScanParams::new(&mut ps, "s", 4, STATE_SIZE, &mut rng);
        let t = Tape::no_grad();
        let a = ps.var(&t, p.log_a).exp().neg().value();
        let x = t.constant(Tensor::randn(&[16, 4], 3.0, &mut rng));
        let bias = ps.var(&t, p.delta_bias).reshape(&[1, 4]).unwrap();
        let delta = x.matmul(ps.var(&t, p.delta_weight)).unwrap().add(bias).unwrap().softplus().value();
        assert!(delta.data().iter().all(|&v| v > 0.0));
        for &dl in delta.data() {
            for &av in a.data() {
                let abar = (dl * av).exp();
                assert!(abar > 0.0 && abar <= 1.0);
            }
        }
    }

    #[test]
    fn long_scan_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f32>::new();
        let p = SelectiveScanParams::new(&mut ps, "s", 4, STATE_SIZE, &mut rng);
        let x = Tensor::<f32>::rand_uniform(&[4096, 4], -1.0, 1.0, &mut rng);
        let y = selective_scan_1d(&x, &p, &ps).unwrap();
        assert!(y.all_finite());
        assert!(y.max_abs() < 1e3);
    }

    #[test]
    fn single_pixel_directions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let ss = Ss2d::new(&mut ps, "ss", 4, STATE_SIZE, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 1, 4], 1.0, &mut rng);
        let y = ss2d_forward(&x, &ss, &ps).unwrap();
        let flat = x.reshape(&[1, 4]).unwrap();
        let singles: Vec<Tensor<f64>> = ss.scanners.iter().map(|s| selective_scan_1d(&flat, s, &ps).unwrap()).collect();
        for k in 0..4 {
            let mean: f64 = singles.iter().map(|s| s.data()[k]).sum::<f64>() / 4.0;
            assert!((y.data()[k] - mean).abs() < 1e-14);
        }
    }

    fn rotate180(x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, c) = x.dims3().unwrap();
        Tensor::from_fn(&[h, w, c], |i| {
            let (r, rest) = (i / (w * c), i % (w * c));
            let (j, k) = (rest / c, rest % c);
            x.get(&[h - 1 - r, w - 1 - j, k])
        })
    }

    #[test]
    fn half_turn_equivariance_with_shared_scanners() {
        // A half-turn maps each forward scan onto its backward twin, so with
        // shared scanner parameters the block commutes with it.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::<f64>::new();
        let ss = Ss2d::new(&mut ps, "ss", 4, STATE_SIZE, &mut rng);
        let src = ss.scanners[0].param_ids();
        for s in &ss.scanners[1..] {
            for (dst, &from) in s.param_ids().into_iter().zip(&src) {
                let v = ps.value(from).clone();
                ps.set_value(dst, v);
            }
        }
        let x = Tensor::<f64>::randn(&[4, 4, 4], 1.0, &mut rng);
        let y = ss2d_forward(&x, &ss, &ps).unwrap();
        let ym = ss2d_forward(&rotate180(&x), &ss, &ps).unwrap();
        assert!(ym.max_abs_diff(&rotate180(&y)).unwrap() < 1e-12);
    }

    #[test]
    fn work_is_linear_in_sequence_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::<f32>::new();
        let ss = Ss2d::new(&mut ps, "ss", 4, STATE_SIZE, &mut rng);
        let mut count = |h: usize, w: usize| {
            reset_scan_update_count();
            ss2d_forward(&Tensor::randn(&[h, w, 4], 1.0, &mut rng), &ss, &ps).unwrap();
            scan_update_count()
        };
        let small = count(8, 8);
        let big = count(8, 16);
        assert_eq!(big, 2 * small);
        assert_eq!(small, 4 * 64 * 4 * STATE_SIZE as u64);
    }

    #[test]
    fn ssmm_zero_fuse_is_identity_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::<f64>::new();
        let b = SsmmBlock::new(&mut ps, "m", 16, STATE_SIZE, Init::Zero, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[8, 8, 16], 1.0, &mut rng);
        assert_eq!(ssmm_forward(&x, &b, &ps).unwrap(), x);
        assert!(SsmmBlock::new(&mut ps, "bad", 6, STATE_SIZE, Init::Zero, &mut rng).is_err());
        let b2 = SsmmBlock::new(&mut ps, "m2", 16, STATE_SIZE, Init::He, &mut rng).unwrap();
        assert_eq!(ssmm_forward(&x, &b2, &ps).unwrap().shape(), &[8, 8, 16]);
    }

    #[test]
    fn ssmm_segment_ablation_localizes_before_fuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::<f64>::new();
        let b = SsmmBlock::new(&mut ps, "m", 8, STATE_SIZE, Init::He, &mut rng).unwrap();
        // Identity norm statistics would couple segments, so compare the scans
        // on already-normalized input by probing `mixed` with norm disabled.
        let x = Tensor::<f64>::randn(&[4, 4, 8], 1.0, &mut rng);
        let t = Tape::no_grad();
        let seg_out = |x: &Tensor<f64>| -> Vec<Tensor<f64>> {
            let v = t.constant(x.clone());
            (0..4).map(|i| b.segments[i].forward(&ps, v.narrow_last(2 * i, 2).unwrap()).unwrap().value()).collect()
        };
        let mut ablated = x.clone();
        for px in ablated.data_mut().chunks_mut(8) {
            px[2] = 0.0;
            px[3] = 0.0;
        }
        let (before, after) = (seg_out(&x), seg_out(&ablated));
        for i in 0..4 {
            let changed = before[i].max_abs_diff(&after[i]).unwrap() > 0.0;
            assert_eq!(changed, i == 1, "segment {i}");
        }
    }

    #[test]
    fn scan_gradcheck_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (p, ch, n) = (6, 2, 3);
        let x = Tensor::<f64>::randn(&[p, ch], 1.0, &mut rng);
        let delta = Tensor::<f64>::rand_uniform(&[p, ch], 0.2, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[p, n], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[p, n], 1.0, &mut rng);
        let a = Tensor::<f64>::rand_uniform(&[ch, n], -1.5, -0.1, &mut rng);
        let d = Tensor::<f64>::randn(&[ch], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[p, ch], 1.0, &mut rng);
        let order = vec![3, 0, 5, 1, 4, 2];
        let inputs = [&x, &delta, &b, &c, &a, &d];
        for which in 0..6 {
            let r = gradcheck(
                |t, v| {
                    let mut vars: Vec<Var<'_, f64>> = inputs.iter().map(|i| t.constant((*i).clone())).collect();
                    vars[which] = v;
                    let y = selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], order.clone())?;
                    Ok(y.mul(t.constant(w.clone()))?.sum_all())
                },
                inputs[which],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "input {which}: {r:?}");
        }
    }

    #[test]
    fn ssmm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::<f64>::new();
        let b = SsmmBlock::new(&mut ps, "m", 8, STATE_SIZE, Init::He, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[4, 4, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 4, 8], 1.0, &mut rng);
        let r = gradcheck(|t, v| Ok(b.forward(&ps, v)?.mul(t.constant(w.clone()))?.sum_all()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = gradcheck_params(
            |t, p| Ok(b.forward(p, t.constant(x.clone()))?.mul(t.constant(w.clone()))?.sum_all()),
            &ps,
            &b.param_ids(),
            1e-5,
            3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
