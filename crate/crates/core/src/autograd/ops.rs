//! Element-wise, reduction and shape operators on [`Var`].

use super::Var;
use crate::error::{invalid, mismatch, Result};
use crate::tensor::{gemm, lit, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Square,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

/// Per-output index maps into `a` and `b` for singleton broadcasting.
/// `None` means the shapes are identical and indexing is the identity.
fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Option<(Vec<usize>, Vec<usize>)>)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    // A single-element operand broadcasts against anything.
    if nb == 1 {
        return Ok((a.to_vec(), Some(((0..na).collect(), vec![0; na]))));
    }
    if na == 1 {
        return Ok((b.to_vec(), Some((vec![0; nb], (0..nb).collect()))));
    }
    if a.len() != b.len() {
        return Err(mismatch("broadcast", a, b));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(mismatch("broadcast", a, b));
        }
    }
    let n: usize = out.iter().product();
    let strides = |s: &[usize]| {
        let mut st = vec![0; s.len()];
        let mut acc = 1;
        for d in (0..s.len()).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let mut ia = vec![0; n];
    let mut ib = vec![0; n];
    let mut idx = vec![0usize; out.len()];
    for k in 0..n {
        ia[k] = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        ib[k] = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, Some((ia, ib))))
}

fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (shape, plan) = broadcast_plan(a.shape(), b.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = match &plan {
            None => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some((ia, ib)) => ia
                .iter()
                .zip(ib)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect(),
        };
        let out = Tensor::new_unchecked(shape, data);
        let (ida, idb) = (self.id, other.id);
        Ok(self.tape.record(out, &[self, other], move |g, sink| {
            let g = g.data();
            let n = g.len();
            let map_a = |k: usize| plan.as_ref().map_or(k, |(ia, _)| ia[k]);
            let map_b = |k: usize| plan.as_ref().map_or(k, |(_, ib)| ib[k]);
            let (ad, bd) = (a.data(), b.data());
            sink.accumulate(ida, |buf| {
                for k in 0..n {
                    let (i, j) = (map_a(k), map_b(k));
                    buf[i] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[k],
                        BinaryKind::Mul => g[k] * bd[j],
                        BinaryKind::Div => g[k] / bd[j],
                    };
                }
            });
            sink.accumulate(idb, |buf| {
                for k in 0..n {
                    let (i, j) = (map_a(k), map_b(k));
                    buf[j] += match kind {
                        BinaryKind::Add => g[k],
                        BinaryKind::Sub => -g[k],
                        BinaryKind::Mul => g[k] * ad[i],
                        BinaryKind::Div => -g[k] * ad[i] / (bd[j] * bd[j]),
                    };
                }
            });
        }))
    }

    /// Element-wise sum; `other` may broadcast along singleton axes.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Square => v * v,
            UnaryKind::Neg => -v,
        });
        let id = self.id;
        let yk = y.clone();
        self.tape.record(y, &[self], move |g, sink| {
            let (xd, yd) = (x.data(), yk.data());
            let half = lit::<T>(0.5);
            let two = lit::<T>(2.0);
            sink.accumulate(id, |buf| {
                for (k, (b, &gk)) in buf.iter_mut().zip(g.data()).enumerate() {
                    let (xv, yv) = (xd[k], yd[k]);
                    *b += gk * match kind {
                        UnaryKind::Exp => yv,
                        UnaryKind::Log => T::one() / xv,
                        UnaryKind::Sqrt => half / yv,
                        UnaryKind::Relu => {
                            if xv > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sigmoid => yv * (T::one() - yv),
                        UnaryKind::Tanh => T::one() - yv * yv,
                        UnaryKind::Softplus => sigmoid(xv),
                        UnaryKind::Abs => {
                            if xv > T::zero() {
                                T::one()
                            } else if xv < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Square => two * xv,
                        UnaryKind::Neg => -T::one(),
                    };
                }
            });
        })
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnaryKind::Square)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg)
    }

    /// Multiply by a constant.
    pub fn scale(self, k: T) -> Var<'t, T> {
        let y = self.value().scale(k);
        let id = self.id;
        self.tape.record(y, &[self], move |g, sink| {
            sink.accumulate(id, |buf| {
                for (b, &gk) in buf.iter_mut().zip(g.data()) {
                    *b += gk * k;
                }
            });
        })
    }

    pub fn add_scalar(self, k: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + k);
        let id = self.id;
        self.tape.record(y, &[self], move |g, sink| sink.add(id, g.data()))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.len();
        let id = self.id;
        self.tape.record(Tensor::scalar(x.sum()), &[self], move |g, sink| {
            let gv = g.data()[0];
            sink.accumulate(id, |buf| buf.iter_mut().take(n).for_each(|b| *b += gv));
        })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.len();
        self.sum_all().scale(T::one() / lit(n as f64))
    }

    /// Reduce along `axis`, dropping it. Max/min route the gradient to the
    /// first attaining element in row-major order.
    pub fn reduce(self, axis: usize, kind: ReduceKind) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("reduce", format!("axis {axis} out of range for {shape:?}")));
        }
        let extent = shape[axis];
        if extent == 0 {
            return Err(invalid("reduce", "empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = x.data();
        let mut vals = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let r = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for k in 0..extent {
                            s += xd[at(k)];
                        }
                        vals[r] = if kind == ReduceKind::Mean { s / lit(extent as f64) } else { s };
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        let mut best = at(0);
                        for k in 1..extent {
                            let v = xd[at(k)];
                            let better = if kind == ReduceKind::Max { v > xd[best] } else { v < xd[best] };
                            if better {
                                best = at(k);
                            }
                        }
                        vals[r] = xd[best];
                        arg[r] = best;
                    }
                }
            }
        }
        let id = self.id;
        let out = Tensor::new_unchecked(out_shape, vals);
        Ok(self.tape.record(out, &[self], move |g, sink| {
            let gd = g.data();
            sink.accumulate(id, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let gv = if kind == ReduceKind::Mean { gd[r] / lit(extent as f64) } else { gd[r] };
                                for k in 0..extent {
                                    buf[(o * extent + k) * inner + i] += gv;
                                }
                            }
                            ReduceKind::Max | ReduceKind::Min => buf[arg[r]] += gd[r],
                        }
                    }
                }
            });
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let y = self.value().reshape(shape)?;
        let id = self.id;
        Ok(self.tape.record(y, &[self], move |g, sink| sink.add(id, g.data())))
    }

    /// Slice of the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| invalid("narrow", "rank 0"))?;
        let y = x.narrow_last(start, len)?;
        let id = self.id;
        Ok(self.tape.record(y, &[self], move |g, sink| {
            let gd = g.data();
            sink.accumulate(id, |buf| {
                for (r, chunk) in gd.chunks(len).enumerate() {
                    for (k, &v) in chunk.iter().enumerate() {
                        buf[r * c + start + k] += v;
                    }
                }
            });
        }))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let y = Tensor::concat_last(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record(y, parts, move |g, sink| {
            let gd = g.data();
            let rows = gd.len() / total.max(1);
            let mut off = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                sink.accumulate(id, |buf| {
                    for r in 0..rows {
                        for k in 0..w {
                            buf[r * w + k] += gd[r * total + off + k];
                        }
                    }
                });
                off += w;
            }
        }))
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(mismatch("matmul", sa, sb)),
        };
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, T::zero());
        let (ida, idb) = (self.id, other.id);
        let out = Tensor::new_unchecked(vec![m, n], c);
        Ok(self.tape.record(out, &[self, other], move |g, sink| {
            // dA = G B^T, dB = A^T G
            sink.accumulate(ida, |buf| gemm(m, n, k, g.data(), false, b.data(), true, buf, T::one()));
            sink.accumulate(idb, |buf| gemm(k, m, n, a.data(), true, g.data(), false, buf, T::one()));
        }))
    }
}
