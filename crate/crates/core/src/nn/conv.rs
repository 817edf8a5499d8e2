//! 2D cross-correlation over `[H, W, C]` feature maps.
//!
//! Dense convolutions go through im2col + GEMM. Grouped convolutions use a
//! direct loop since their per-group matrices are too small for GEMM to pay
//! off; the depthwise case gets its own loop with a contiguous channel axis.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1) / 2`; preserves extents at stride 1.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }

    pub fn valid(kernel: usize) -> Self {
        Self {
            padding: Padding::Valid,
            ..Self::same(kernel)
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.pad();
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Spatial reach from an output pixel to the farthest input pixel.
    pub fn reach(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    spec: ConvSpec,
}

impl Geometry {
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let p = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.pad() as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }

    fn dense_shortcut(&self) -> bool {
        self.spec.kernel == 1 && self.spec.stride == 1 && self.spec.pad() == 0
    }

    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let k = self.spec.kernel;
        let row = k * k * self.cin;
        let mut cols = vec![T::zero(); self.ho * self.wo * row];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * row;
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let dst = base + (ky * k + kx) * self.cin;
                        let s = (iy * self.w + ix) * self.cin;
                        cols[dst..dst + self.cin].copy_from_slice(&x[s..s + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let k = self.spec.kernel;
        let row = k * k * self.cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * row;
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let src = base + (ky * k + kx) * self.cin;
                        let d = (iy * self.w + ix) * self.cin;
                        for c in 0..self.cin {
                            dx[d + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }

    fn depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout
    }

    /// Visit every (output pixel, input pixel, tap) base offset of a depthwise
    /// conv; the callee runs the contiguous channel loop.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, c) = (self.spec.kernel, self.cin);
        for oy in 0..self.ho {
            for ky in 0..k {
                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                for ox in 0..self.wo {
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        f((oy * self.wo + ox) * c, (iy * self.w + ix) * c, (ky * k + kx) * c);
                    }
                }
            }
        }
    }

    /// Visit every (output index, input index, weight index) triple of a grouped conv.
    #[inline]
    fn for_each_grouped(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.spec.kernel;
        let g = self.spec.groups;
        let (cin_g, cout_g) = (self.cin / g, self.cout / g);
        for oy in 0..self.ho {
            for ky in 0..k {
                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                for ox in 0..self.wo {
                    let o_base = (oy * self.wo + ox) * self.cout;
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let i_base = (iy * self.w + ix) * self.cin;
                        let w_base = (ky * k + kx) * cin_g * self.cout;
                        for co in 0..self.cout {
                            let gi = co / cout_g;
                            for ci in 0..cin_g {
                                f(o_base + co, i_base + gi * cin_g + ci, w_base + ci * self.cout + co);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution on the tape. `w` is `[k, k, Cin/groups, Cout]`, `b` is `[Cout]`.
pub fn conv2d<'t, T: Float>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>, spec: ConvSpec) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = w.value();
    let (h, wd, cin) = xv.dims3()?;
    let (k, g) = (spec.kernel, spec.groups);
    let cout = match wv.shape() {
        &[k1, k2, ci, co] if k1 == k && k2 == k && g > 0 && ci * g == cin && co % g == 0 => co,
        s => {
            return Err(invalid(
                "conv2d",
                format!("input with {cin} channels does not match weight {s:?} (kernel {k}, groups {g})"),
            ))
        }
    };
    if let Some(b) = &b {
        if b.shape() != [cout] {
            return Err(invalid("conv2d", format!("bias shape {:?} != [{cout}]", b.shape())));
        }
    }
    let (ho, wo) = match (spec.out_extent(h), spec.out_extent(wd)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(invalid("conv2d", format!("kernel does not fit {h}x{wd}"))),
    };
    let geo = Geometry { h, w: wd, cin, ho, wo, cout, spec };
    let bias = b.map(|b| b.value());

    let mut out = vec![T::zero(); ho * wo * cout];
    if let Some(bias) = &bias {
        for px in out.chunks_mut(cout) {
            px.copy_from_slice(bias.data());
        }
    }
    let cols = if g == 1 {
        let cols = if geo.dense_shortcut() { None } else { Some(geo.im2col(xv.data())) };
        let a = cols.as_deref().unwrap_or(xv.data());
        gemm(ho * wo, k * k * cin, cout, a, false, wv.data(), false, &mut out, T::one());
        cols
    } else if geo.depthwise() {
        let (xd, wdat) = (xv.data(), wv.data());
        geo.for_each_tap(|o, i, t| {
            for ((y, &a), &b) in out[o..o + cin].iter_mut().zip(&xd[i..i + cin]).zip(&wdat[t..t + cin]) {
                *y += a * b;
            }
        });
        None
    } else {
        let (xd, wdat) = (xv.data(), wv.data());
        geo.for_each_grouped(|o, i, wi| out[o] += xd[i] * wdat[wi]);
        None
    };
    let y = Tensor::new_unchecked(vec![ho, wo, cout], out);

    let (ix, iw) = (x.id(), w.id());
    let ib = b.map(|b| b.id());
    let mut parents = vec![x, w];
    parents.extend(b);
    Ok(x.tape().record(y, &parents, move |grad, sink| {
        let gd = grad.data();
        if let Some(ib) = ib {
            sink.accumulate(ib, |buf| {
                for px in gd.chunks(cout) {
                    for (b, &v) in buf.iter_mut().zip(px) {
                        *b += v;
                    }
                }
            });
        }
        if g == 1 {
            let a = cols.as_deref().unwrap_or(xv.data());
            let kk = k * k * cin;
            sink.accumulate(iw, |buf| gemm(kk, ho * wo, cout, a, true, gd, false, buf, T::one()));
            if sink.wants(ix) {
                if geo.dense_shortcut() {
                    sink.accumulate(ix, |buf| gemm(ho * wo, cout, kk, gd, false, wv.data(), true, buf, T::one()));
                } else {
                    let mut dcols = vec![T::zero(); ho * wo * kk];
                    gemm(ho * wo, cout, kk, gd, false, wv.data(), true, &mut dcols, T::zero());
                    sink.accumulate(ix, |buf| geo.col2im(&dcols, buf));
                }
            }
        } else if geo.depthwise() {
            let (xd, wdat) = (xv.data(), wv.data());
            sink.accumulate(iw, |buf| {
                geo.for_each_tap(|o, i, t| {
                    for ((b, &gv), &a) in buf[t..t + cin].iter_mut().zip(&gd[o..o + cin]).zip(&xd[i..i + cin]) {
                        *b += gv * a;
                    }
                })
            });
            sink.accumulate(ix, |buf| {
                geo.for_each_tap(|o, i, t| {
                    for ((b, &gv), &wv) in buf[i..i + cin].iter_mut().zip(&gd[o..o + cin]).zip(&wdat[t..t + cin]) {
                        *b += gv * wv;
                    }
                })
            });
        } else {
            let (xd, wdat) = (xv.data(), wv.data());
            sink.accumulate(iw, |buf| geo.for_each_grouped(|o, i, wi| buf[wi] += gd[o] * xd[i]));
            sink.accumulate(ix, |buf| geo.for_each_grouped(|o, i, wi| buf[i] += gd[o] * wdat[wi]));
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Centered normal with std `sqrt(2 / fan_in)`; zero bias.
    He,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2dLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(invalid("conv2d", format!("groups {g} must divide Cin {cin} and Cout {cout}")));
        }
        if spec.kernel == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(invalid("conv2d", "kernel, stride and dilation must be positive"));
        }
        if spec.padding == Padding::Same && spec.kernel % 2 == 0 {
            return Err(invalid("conv2d", "same padding needs an odd kernel"));
        }
        let k = spec.kernel;
        let shape = [k, k, cin / g, cout];
        let fan_in = (k * k * cin / g) as f64;
        let w = match init {
            Init::He => Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        Ok(Self {
            weight: ps.add(format!("{name}.weight"), w),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            spec,
            cin,
            cout,
        })
    }

    pub fn forward<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with(ps, x, false)
    }

    /// `detach` uses the weights as constants for this call only.
    pub fn forward_with<'t, T: Float>(&self, ps: &ParamStore<T>, x: Var<'t, T>, detach: bool) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let (w, b) = if detach {
            (ps.detached(tape, self.weight), ps.detached(tape, self.bias))
        } else {
            (ps.var(tape, self.weight), ps.var(tape, self.bias))
        };
        conv2d(x, w, Some(b), self.spec)
    }

    /// Inference on plain tensors.
    pub fn apply<T: Float>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        Ok(self.forward(ps, tape.constant(x.clone()))?.value())
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, gradcheck_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window reference, independent of im2col and grouping tricks.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
        let (h, wd, cin) = x.dims3().unwrap();
        let (k, cout, g) = (spec.kernel, w.shape()[3], spec.groups);
        let (ho, wo) = (spec.out_extent(h).unwrap(), spec.out_extent(wd).unwrap());
        let pad = spec.pad() as isize;
        let mut out = Tensor::zeros(&[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let gi = co / (cout / g);
                    let mut acc = b[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin / g {
                                acc += x.get(&[iy as usize, ix as usize, gi * (cin / g) + ci]) * w.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    let o = out.offset(&[oy, ox, co]);
                    out.data_mut()[o] = acc;
                }
            }
        }
        out
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let tape = Tape::no_grad();
        conv2d(tape.constant(x.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())), spec)
            .unwrap()
            .value()
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[5, 4, 3], 1.0, &mut rng);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(run(&x, &w, &Tensor::zeros(&[3]), ConvSpec::same(1)), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::ones(&[5, 5, 1]);
        let y = run(&x, &Tensor::ones(&[3, 3, 1, 1]), &Tensor::zeros(&[1]), ConvSpec::same(3));
        assert_eq!(y.get(&[2, 2, 0]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[4, 4, 0]), 4.0);
        assert_eq!(y.get(&[0, 2, 0]), 6.0);
    }

    #[test]
    fn matches_reference_across_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            (ConvSpec::same(3), 3, 5),
            (ConvSpec::valid(3), 2, 4),
            (ConvSpec::same(3).stride(2), 2, 3),
            (ConvSpec::same(5).groups(4), 4, 4),
            (ConvSpec::same(7).dilation(3).groups(4), 4, 4),
            (ConvSpec::same(3).groups(2), 4, 6),
            (ConvSpec::same(1), 6, 2),
        ];
        for (spec, cin, cout) in specs {
            let x = Tensor::<f64>::randn(&[9, 8, cin], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[spec.kernel, spec.kernel, cin / spec.groups, cout], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[cout], 1.0, &mut rng);
            let got = run(&x, &w, &b, spec);
            let want = reference(&x, &w, b.data(), spec);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn depthwise_keeps_channels_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Tensor::<f64>::randn(&[6, 6, 4], 1.0, &mut rng);
        for px in x.data_mut().chunks_mut(4) {
            px[2] = 0.0;
        }
        let w = Tensor::<f64>::randn(&[5, 5, 1, 4], 1.0, &mut rng);
        let y = run(&x, &w, &Tensor::zeros(&[4]), ConvSpec::same(5).groups(4));
        assert!(y.data().chunks(4).all(|px| px[2] == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Conv2dLayer::new(&mut ps, "c", 3, 2, ConvSpec::same(3), Init::He, &mut rng).unwrap();
        assert!(layer.apply(&ps, &Tensor::zeros(&[4, 4, 2])).is_err());
        assert!(Conv2dLayer::new(&mut ps, "g", 3, 4, ConvSpec::same(3).groups(2), Init::He, &mut rng).is_err());
    }

    #[test]
    fn gradcheck_input_and_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [ConvSpec::same(3), ConvSpec::same(3).stride(2), ConvSpec::same(3).dilation(2).groups(3), ConvSpec::same(1)] {
            let mut ps = ParamStore::<f64>::new();
            let layer = Conv2dLayer::new(&mut ps, "c", 3, 3, spec, Init::He, &mut rng).unwrap();
            let b = ps.value(layer.bias).map(|_| 0.3);
            ps.set_value(layer.bias, b);
            let x = Tensor::<f64>::randn(&[6, 5, 3], 1.0, &mut rng);
            let wts = Tensor::<f64>::randn(&layer.apply(&ps, &x).unwrap().shape().to_vec(), 1.0, &mut rng);
            let r = gradcheck(
                |t, v| Ok(layer.forward(&ps, v)?.mul(t.constant(wts.clone()))?.sum_all()),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{spec:?} {r:?}");
            let r = gradcheck_params(
                |t, p| {
                    let x = t.constant(x.clone());
                    Ok(layer.forward(p, x)?.mul(t.constant(wts.clone()))?.sum_all())
                },
                &ps,
                &layer.param_ids(),
                1e-5,
                usize::MAX,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{spec:?} {r:?}");
        }
    }
}
