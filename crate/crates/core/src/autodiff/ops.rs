use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Var;
use crate::error::{KinoError, Result};
use crate::tensor::{numel_of, Scalar, Tensor};

/// Padding rule for out-of-range taps of a 1D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Replicate,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

/// `exp(-|x|)` elementwise.
fn neg_abs_exp<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut e: Vec<T> = x.iter().map(|v| -v.abs()).collect();
    T::exp_in_place(&mut e);
    e
}

/// Sigmoid from `x` and `exp(-|x|)`.
fn sigmoid_from<T: Scalar>(x: &[T], e: &[T]) -> Vec<T> {
    x.iter()
        .zip(e)
        .map(|(&x, &e)| {
            let r = T::one() / (T::one() + e);
            if x >= T::zero() {
                r
            } else {
                e * r
            }
        })
        .collect()
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    softplus(x)
}

pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu(x)
}

/// `c[b] = op(a[b]) · op(b[b])` for every batch item. `a` is `[batch, m, k]`
/// (or `[batch, k, m]` when `trans_a`), `b` is `[k, n]` / `[n, k]` when
/// shared, otherwise batched the same way.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    b_shared: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if b_shared && !trans_a {
        // one tall product covers every batch item
        unsafe {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return c;
    }
    let a_stride = m * k;
    let b_stride = if b_shared { 0 } else { k * n };
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a[i * a_stride..].as_ptr(),
            rsa,
            csa,
            b[i * b_stride..].as_ptr(),
            rsb,
            csb,
            T::zero(),
            ci.as_mut_ptr(),
            n as isize,
            1,
        );
    });
    c
}

/// Sums `[outer, inner]` rows into `[inner]` in row order.
fn reduce_leading<T: Scalar>(data: &[T], inner: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); inner];
    for row in data.chunks_exact(inner) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<(Tensor<T>, Tensor<T>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(KinoError::shape(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "add")?;
        let y = a.zip_map(&b, |x, y| x + y)?;
        self.tape.push_op(
            "add",
            y,
            &[self, other],
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        let y = a.zip_map(&b, |x, y| x - y)?;
        self.tape.push_op(
            "sub",
            y,
            &[self, other],
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])),
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        let y = a.zip_map(&b, |x, y| x * y)?;
        self.tape.push_op(
            "mul",
            y,
            &[self, other],
            Box::new(move |g, mask| {
                Ok(vec![
                    mask[0].then(|| g.zip_map(&b, |g, b| g * b)).transpose()?,
                    mask[1].then(|| g.zip_map(&a, |g, a| g * a)).transpose()?,
                ])
            }),
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, T>> {
        let s = T::lit(s);
        let y = self.value().map(|v| v * s);
        self.tape
            .push_op("scale", y, &[self], Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * s))])))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-1.0)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (bias, positional
    /// table, per-channel offsets).
    pub fn add_broadcast(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = other.value();
        let (xs, ys) = (x.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(KinoError::shape("add_broadcast", xs, ys));
        }
        let inner = y.numel();
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(inner) {
            for (o, &b) in row.iter_mut().zip(y.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_raw(xs.to_vec(), out);
        let y_shape = ys.to_vec();
        self.tape.push_op(
            "add_broadcast",
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let gy = mask[1]
                    .then(|| Tensor::from_raw(y_shape.clone(), reduce_leading(g.data(), inner)));
                Ok(vec![Some(g.clone()), gy])
            }),
        )
    }

    /// Records an elementwise op whose value `y` and optional auxiliary buffer
    /// were computed up front; `deriv(x, y, aux)` gives `dy/dx`.
    fn unary_aux(
        self,
        op: &'static str,
        y: Vec<T>,
        aux: Option<Vec<T>>,
        deriv: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = Tensor::from_raw(x.shape().to_vec(), y);
        let y_keep = y.clone();
        self.tape.push_op(
            op,
            y,
            &[self],
            Box::new(move |g, _| {
                let (xs, ys) = (x.data(), y_keep.data());
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * deriv(xs[i], ys[i], aux.as_ref().map_or(T::zero(), |a| a[i])))
                    .collect();
                Ok(vec![Some(Tensor::from_raw(g.shape().to_vec(), d))])
            }),
        )
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let y = self.value().data().iter().map(|v| v.exp()).collect();
        self.unary_aux("exp", y, None, |_, y, _| y)
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let e = neg_abs_exp(x.data());
        let y = x.data().iter().zip(&e).map(|(&x, &e)| x.max(T::zero()) + e.ln_1p()).collect();
        let sig = sigmoid_from(x.data(), &e);
        self.unary_aux("softplus", y, Some(sig), |_, _, s| s)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = sigmoid_from(x.data(), &neg_abs_exp(x.data()));
        self.unary_aux("sigmoid", y, None, |_, y, _| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`, the smooth gate nonlinearity.
    pub fn silu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let sig = sigmoid_from(x.data(), &neg_abs_exp(x.data()));
        let y = x.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        self.unary_aux("silu", y, Some(sig), |x, _, s| s * (T::one() + x * (T::one() - s)))
    }

    /// Gaussian-error linear unit (tanh form).
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
        let u: Vec<T> = x.data().iter().map(|&x| k * (x + c * x * x * x)).collect();
        let mut e: Vec<T> = u.iter().map(|&u| T::lit(-2.0) * u.abs()).collect();
        T::exp_in_place(&mut e);
        // tanh(u) = sign(u)·(1 - e^{-2|u|}) / (1 + e^{-2|u|})
        let th: Vec<T> = u
            .iter()
            .zip(&e)
            .map(|(&u, &e)| {
                let t = (T::one() - e) / (T::one() + e);
                if u < T::zero() {
                    -t
                } else {
                    t
                }
            })
            .collect();
        let y = x.data().iter().zip(&th).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        self.unary_aux("gelu", y, Some(th), move |x, _, th| {
            let du = k * (T::one() + T::lit(3.0) * c * x * x);
            half * (T::one() + th) + half * x * (T::one() - th * th) * du
        })
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum_all());
        self.tape.push_op(
            "sum",
            y,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(Tensor::from_raw(shape.clone(), vec![g.data()[0]; numel_of(&shape)]))])),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(KinoError::Argument(format!("mean_axis({axis}) on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::lit(1.0 / dim as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.tape.push_op(
            "mean_axis",
            Tensor::from_raw(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let go = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        for (dst, &v) in gx[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .iter_mut()
                            .zip(go)
                        {
                            *dst = v * inv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_raw(shape.clone(), gx))])
            }),
        )
    }

    /// Matrix product. `self` is `[.., m, k]`; `rhs` is either a shared
    /// `[k, n]` matrix or carries the same leading batch dimensions.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes; `rhs` is `[.., n, k]`.
    pub fn matmul_nt(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(KinoError::shape("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        let b_shared = bsh.len() == 2;
        let batch_ok = b_shared || ash[..ash.len() - 2] == bsh[..bsh.len() - 2];
        if k != kb || !batch_ok {
            return Err(KinoError::shape("matmul", &ash, &bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let c = batched_gemm(batch, m, k, n, a.data(), false, b.data(), trans_b, b_shared);
        let mut out_shape = ash.clone();
        *out_shape.last_mut().expect("rank >= 2") = n;
        self.tape.push_op(
            "matmul",
            Tensor::from_raw(out_shape, c),
            &[self, rhs],
            Box::new(move |g, mask| {
                let gd = g.data();
                // dA = dC · op(B)ᵀ  : [m,n]x[n,k]
                let ga = mask[0].then(|| {
                    Tensor::from_raw(
                        ash.clone(),
                        batched_gemm(batch, m, n, k, gd, false, b.data(), !trans_b, b_shared),
                    )
                });
                let gb = mask[1].then(|| {
                    if b_shared {
                        // sum over batch folded into one product over batch*m rows
                        let prod = if trans_b {
                            batched_gemm(1, n, batch * m, k, gd, true, a.data(), false, true)
                        } else {
                            batched_gemm(1, k, batch * m, n, a.data(), true, gd, false, true)
                        };
                        Tensor::from_raw(bsh.clone(), prod)
                    } else if trans_b {
                        // dB[n,k] = dCᵀ[n,m] · A[m,k]
                        Tensor::from_raw(
                            bsh.clone(),
                            batched_gemm(batch, n, m, k, gd, true, a.data(), false, false),
                        )
                    } else {
                        // dB[k,n] = Aᵀ[k,m] · dC[m,n]
                        Tensor::from_raw(
                            bsh.clone(),
                            batched_gemm(batch, k, m, n, a.data(), true, gd, false, false),
                        )
                    }
                });
                Ok(vec![ga, gb])
            }),
        )
    }

    /// `x · W + b` with `W: [in, out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = x.reshape(shape)?;
        self.tape.push_op(
            "reshape",
            y,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(g.reshape(in_shape.clone())?)])),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let y = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push_op(
            "permute",
            y,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(g.permute(&inverse)?)])),
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.narrow(axis, start, len)?;
        self.tape.push_op(
            "narrow",
            y,
            &[self],
            Box::new(move |g, _| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[axis];
                let mut gx = vec![T::zero(); numel_of(&shape)];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(src);
                }
                Ok(vec![Some(Tensor::from_raw(shape.clone(), gx))])
            }),
        )
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| KinoError::Argument("concat of zero tensors".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let y = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        first.tape.push_op(
            "concat",
            y,
            parts,
            Box::new(move |g, _| {
                let mut start = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for &s in &sizes {
                    out.push(Some(g.narrow(axis, start, s)?));
                    start += s;
                }
                Ok(out)
            }),
        )
    }

    /// Tiles the value over new leading axes: result shape is `lead ++ shape`.
    pub fn expand_leading(self, lead: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let reps: usize = lead.iter().product();
        if lead.contains(&0) {
            return Err(KinoError::Argument(format!("expand_leading({lead:?})")));
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(x.shape());
        let mut out = Vec::with_capacity(reps * x.numel());
        for _ in 0..reps {
            out.extend_from_slice(x.data());
        }
        let in_shape = x.shape().to_vec();
        let inner = x.numel();
        self.tape.push_op(
            "expand_leading",
            Tensor::from_raw(shape, out),
            &[self],
            Box::new(move |g, _| {
                Ok(vec![Some(Tensor::from_raw(in_shape.clone(), reduce_leading(g.data(), inner)))])
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| KinoError::Argument("softmax of scalar".into()))?;
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            for v in row.iter_mut() {
                *v -= mx;
            }
        }
        T::exp_in_place(&mut out);
        for row in out.chunks_exact_mut(c) {
            let inv = T::one() / row.iter().copied().sum::<T>();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let y = Tensor::from_raw(x.shape().to_vec(), out);
        let y_keep = y.clone();
        self.tape.push_op(
            "softmax",
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.numel()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks_exact(c)
                    .zip(y_keep.data().chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for ((d, &g), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                Ok(vec![Some(Tensor::from_raw(g.shape().to_vec(), gx))])
            }),
        )
    }

    /// Standardizes every row of the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let c = *x.shape().last().ok_or_else(|| KinoError::Argument("layer_norm of scalar".into()))?;
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(KinoError::shape("layer_norm", x.shape(), gm.shape()));
        }
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let rows = x.numel() / c;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.tape.push_op(
            "layer_norm",
            Tensor::from_raw(shape.clone(), out),
            &[self, gamma, beta],
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut gx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let gh = gr[j] * gm.data()[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let gh = gr[j] * gm.data()[j];
                            gx[r * c + j] = inv_std[r] * (gh - m1 - hr[j] * m2);
                        }
                    }
                    Tensor::from_raw(shape.clone(), gx)
                });
                let (ggamma, gbeta) = if mask[1] || mask[2] {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += gd[r * c + j] * xhat[r * c + j];
                            gb[j] += gd[r * c + j];
                        }
                    }
                    (
                        Some(Tensor::from_raw(vec![c], gg)),
                        Some(Tensor::from_raw(vec![c], gb)),
                    )
                } else {
                    (None, None)
                };
                Ok(vec![gx, ggamma, gbeta])
            }),
        )
    }

    /// Divides every vector along `axis` by `(‖v‖₂ + eps)`; zero vectors stay zero.
    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(KinoError::Argument(format!("l2_normalize axis {axis} on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let eps = T::lit(eps);
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    let v = x.data()[(o * dim + d) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    let f = (o * dim + d) * inner + i;
                    out[f] = x.data()[f] / (norms[o * inner + i] + eps);
                }
            }
        }
        self.tape.push_op(
            "l2_normalize",
            Tensor::from_raw(shape.clone(), out),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let xd = x.data();
                let mut gx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        let den = n + eps;
                        let mut dot = T::zero();
                        for d in 0..dim {
                            let f = (o * dim + d) * inner + i;
                            dot += gd[f] * xd[f];
                        }
                        let corr = if n > T::zero() { dot / (den * den * n) } else { T::zero() };
                        for d in 0..dim {
                            let f = (o * dim + d) * inner + i;
                            gx[f] = gd[f] / den - xd[f] * corr;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_raw(shape.clone(), gx))])
            }),
        )
    }

    /// Per-channel 1D convolution along the time axis of `[L, T, C]`.
    ///
    /// Causal mode reads `x[t-k+1..=t]`; non-causal mode (odd `k` only) reads
    /// `x[t-(k-1)/2..=t+(k-1)/2]`. Tap `j` of channel `c` weights the `j`-th
    /// element of that window.
    pub fn depthwise_conv1d(self, kernel: Var<'t, T>, causal: bool, pad: PadMode) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = kernel.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] {
            return Err(KinoError::shape("depthwise_conv1d", &xs, &ws));
        }
        let k = ws[1];
        if !causal && k % 2 == 0 {
            return Err(KinoError::Config(format!(
                "non-causal depthwise conv needs an odd kernel, got k={k}"
            )));
        }
        let (l_len, t_len, c_len) = (xs[0], xs[1], xs[2]);
        let left = if causal { k - 1 } else { (k - 1) / 2 };
        // source time index for output t and tap j
        let src = move |t: usize, j: usize| -> Option<usize> {
            let s = t as isize + j as isize - left as isize;
            if (0..t_len as isize).contains(&s) {
                Some(s as usize)
            } else {
                match pad {
                    PadMode::Zero => None,
                    PadMode::Replicate => Some(s.clamp(0, t_len as isize - 1) as usize),
                }
            }
        };
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        let wd = w.data();
        for l in 0..l_len {
            for t in 0..t_len {
                let o = (l * t_len + t) * c_len;
                for j in 0..k {
                    let Some(s) = src(t, j) else { continue };
                    let xi = (l * t_len + s) * c_len;
                    for c in 0..c_len {
                        out[o + c] += wd[c * k + j] * xd[xi + c];
                    }
                }
            }
        }
        self.tape.push_op(
            "depthwise_conv1d",
            Tensor::from_raw(xs.clone(), out),
            &[self, kernel],
            Box::new(move |g, mask| {
                let gd = g.data();
                let xd = x.data();
                let wd = w.data();
                let mut gx = mask[0].then(|| vec![T::zero(); xd.len()]);
                let mut gw = mask[1].then(|| vec![T::zero(); wd.len()]);
                for l in 0..l_len {
                    for t in 0..t_len {
                        let o = (l * t_len + t) * c_len;
                        for j in 0..k {
                            let Some(s) = src(t, j) else { continue };
                            let xi = (l * t_len + s) * c_len;
                            for c in 0..c_len {
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi + c] += wd[c * k + j] * gd[o + c];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[c * k + j] += gd[o + c] * xd[xi + c];
                                }
                            }
                        }
                    }
                }
                Ok(vec![
                    gx.map(|v| Tensor::from_raw(xs.clone(), v)),
                    gw.map(|v| Tensor::from_raw(ws.clone(), v)),
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);

        let m = tape.constant(Tensor::from_fn([3, 3], |i| i as f64 * 1.5 - 2.0).unwrap());
        let eye = tape.constant(Tensor::identity(3).unwrap());
        assert_eq!(eye.matmul(m).unwrap().value(), m.value());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros([4, 1]).unwrap());
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_shift_kernels() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let id = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let shift = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        assert_eq!(x.depthwise_conv1d(id, false, PadMode::Zero).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.depthwise_conv1d(shift, false, PadMode::Zero).unwrap().value().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(
            x.depthwise_conv1d(shift, false, PadMode::Replicate).unwrap().value().data(),
            &[1.0, 1.0, 2.0]
        );
        let even = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        assert!(matches!(x.depthwise_conv1d(even, false, PadMode::Zero), Err(KinoError::Config(_))));
        assert!(x.depthwise_conv1d(even, true, PadMode::Zero).is_ok());
    }

    #[test]
    fn layer_norm_analytic_cases() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones([2]).unwrap());
        let b = tape.constant(Tensor::zeros([2]).unwrap());
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = x.layer_norm(g, b, 1e-12).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let c = tape.constant(t(&[1, 2], &[5.0, 5.0]));
        assert_eq!(c.layer_norm(g, b, 1e-5).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_analytic_values() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert!((z.softplus().unwrap().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(z.sigmoid().unwrap().item().unwrap(), 0.5);
        let logits = tape.constant(t(&[4], &[0.3; 4]));
        for &p in logits.softmax().unwrap().value().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_zero_and_unit_vectors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.6, 0.8]));
        let y = x.l2_normalize(1, 1e-6).unwrap().value();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] - 0.6).abs() < 1e-5 && (y.data()[3] - 0.8).abs() < 1e-5);
    }
}
