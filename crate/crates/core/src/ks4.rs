//! Selective temporal scanner.
//!
//! Each of the `L` input sequences `u: [T, C]` is normalized, expanded into a
//! content and a gate stream, locally mixed along time, and then fed through
//! an input-dependent diagonal state space recurrence
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t
//! y_t = C_t · h_t + D ⊙ x_t
//! ũ_t = W_out(y_t ⊙ silu(g_t)) + u_t
//! ```
//!
//! The recurrence runs either as a plain left-to-right loop or as a
//! work-efficient prefix scan over affine maps `h ↦ a·h + b`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{KinoError, Result};
use crate::nn::{param_rng, Init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = KinoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(KinoError::Config(format!("unknown scan mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ks4Config {
    pub expand: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub mode: ScanMode,
}

impl Default for Ks4Config {
    fn default() -> Self {
        Self {
            expand: 2,
            d_state: 16,
            conv_kernel: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
            mode: ScanMode::Sequential,
        }
    }
}

impl Ks4Config {
    pub fn validate(&self) -> Result<()> {
        if self.expand == 0 || self.d_state == 0 || self.conv_kernel == 0 {
            return Err(KinoError::Config("expand, d_state and conv_kernel must be positive".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(KinoError::Config(format!(
                "step-size range [{}, {}] is invalid",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScannerParams {
    pub norm: LayerNorm,
    pub w_in: Linear,
    pub conv_kernel: ParamId,
    pub w_delta: Linear,
    pub b_delta: ParamId,
    pub w_b: Linear,
    pub w_c: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_out: Linear,
    pub d_model: usize,
    pub c_inner: usize,
    pub d_state: usize,
    pub k_conv: usize,
}

/// `softplus⁻¹(y) = y + ln(1 - e^{-y})`
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl ScannerParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        cfg: &Ks4Config,
    ) -> Result<Self> {
        cfg.validate()?;
        let ci = cfg.expand * d_model;
        let ds = cfg.d_state;
        let k = cfg.conv_kernel;
        let name = |s: &str| format!("{prefix}.{s}");

        let norm = LayerNorm::register(store, &name("norm"), d_model)?;
        let w_in = Linear::register(store, seed, &name("w_in"), d_model, 2 * ci, true, Init::FanIn)?;
        let conv_name = name("conv.weight");
        let conv = Tensor::uniform([ci, k], 1.0 / (k as f64).sqrt(), &mut param_rng(seed, &conv_name))?;
        let conv_kernel = store.register(conv_name, conv)?;
        let w_delta = Linear::register(store, seed, &name("w_delta"), ci, ci, true, Init::FanIn)?;

        let bd_name = name("b_delta");
        let mut rng = param_rng(seed, &bd_name);
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let b_delta = Tensor::from_fn([ci], |_| T::lit(inverse_softplus(rng.random_range(lo..=hi).exp())))?;
        let b_delta = store.register(bd_name, b_delta)?;

        let w_b = Linear::register(store, seed, &name("w_b"), ci, ds, false, Init::FanIn)?;
        let w_c = Linear::register(store, seed, &name("w_c"), ci, ds, false, Init::FanIn)?;
        let a_log = store.register(
            name("a_log"),
            Tensor::from_fn([ci, ds], |i| T::lit(((i % ds) + 1) as f64).ln())?,
        )?;
        let d = store.register(name("d"), Tensor::ones([ci])?)?;
        let w_out = Linear::register(store, seed, &name("w_out"), ci, d_model, true, Init::Zero)?;
        Ok(Self {
            norm,
            w_in,
            conv_kernel,
            w_delta,
            b_delta,
            w_b,
            w_c,
            a_log,
            d,
            w_out,
            d_model,
            c_inner: ci,
            d_state: ds,
            k_conv: k,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.d_model
            + self.w_in.param_count()
            + self.c_inner * self.k_conv
            + self.w_delta.param_count()
            + self.c_inner
            + self.w_b.param_count()
            + self.w_c.param_count()
            + self.c_inner * self.d_state
            + self.c_inner
            + self.w_out.param_count()
    }

    /// `A = -exp(A_log)`
    pub fn transition<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        store.value(self.a_log).map(|v| -v.exp())
    }
}

/// Materialized inputs of the recurrence for `L` sequences.
#[derive(Clone, Debug)]
pub struct ScanInputs<T: Scalar> {
    /// `[L, T, C_inner, d_s]`
    pub a_bar: Tensor<T>,
    /// `[L, T, C_inner, d_s]`
    pub bx: Tensor<T>,
    /// `[L, T, d_s]`
    pub c_seq: Tensor<T>,
    /// `[L, T, C_inner]`
    pub x: Tensor<T>,
}

impl<T: Scalar> ScanInputs<T> {
    /// `(L, T, C_inner, d_s)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn check(&self, d: &Tensor<T>) -> Result<()> {
        let s = self.a_bar.shape();
        if s.len() != 4 {
            return Err(KinoError::InvalidShape {
                shape: s.to_vec(),
                reason: "a_bar must be [L, T, C_inner, d_s]".into(),
            });
        }
        let (l, t, c, n) = self.dims();
        if self.bx.shape() != s {
            return Err(KinoError::shape("scan", s, self.bx.shape()));
        }
        if self.c_seq.shape() != [l, t, n] {
            return Err(KinoError::shape("scan", &[l, t, n], self.c_seq.shape()));
        }
        if self.x.shape() != [l, t, c] {
            return Err(KinoError::shape("scan", &[l, t, c], self.x.shape()));
        }
        if d.shape() != [c] {
            return Err(KinoError::shape("scan", &[c], d.shape()));
        }
        Ok(())
    }
}

/// Hidden state of `L` sequences at one time step, `[L, C_inner, d_s]`.
#[derive(Clone, Debug)]
pub struct ScanState<T: Scalar> {
    pub h: Tensor<T>,
}

/// Composition of affine maps `h ↦ a·h + b`: `earlier` applied first.
#[inline]
pub fn combine<T: Scalar>(earlier: (T, T), later: (T, T)) -> (T, T) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

/// State columns swept together by the prefix scan.
const PAR_COLUMNS: usize = 64;

#[derive(Clone, Copy)]
struct LaneDims {
    t: usize,
    c: usize,
    s: usize,
}

fn first_bad<T: Scalar>(h: &[T], dims: LaneDims, t: usize, lane: usize) -> Option<KinoError> {
    h.iter().position(|v| !v.is_finite()).map(|i| KinoError::ScanNumeric {
        lane,
        t,
        c: i / dims.s,
        s: i % dims.s,
    })
}

/// One sequence, left-to-right. `a`, `b` are `[T, C, S]`, `cs` is `[T, S]`,
/// `x` is `[T, C]`; writes `y: [T, C]` and optionally every state.
#[allow(clippy::too_many_arguments)]
fn lane_sequential<T: Scalar>(
    a: &[T],
    b: &[T],
    cs: &[T],
    x: &[T],
    d: &[T],
    dims: LaneDims,
    lane: usize,
    y: &mut [T],
    mut states: Option<&mut [T]>,
) -> Result<()> {
    let w = dims.c * dims.s;
    let mut h = vec![T::zero(); w];
    for t in 0..dims.t {
        let (at, bt) = (&a[t * w..(t + 1) * w], &b[t * w..(t + 1) * w]);
        for i in 0..w {
            h[i] = at[i] * h[i] + bt[i];
        }
        if let Some(e) = first_bad(&h, dims, t, lane) {
            return Err(e);
        }
        let ct = &cs[t * dims.s..(t + 1) * dims.s];
        for c in 0..dims.c {
            let mut acc = T::zero();
            for s in 0..dims.s {
                acc += ct[s] * h[c * dims.s + s];
            }
            y[t * dims.c + c] = acc + d[c] * x[t * dims.c + c];
        }
        if let Some(st) = states.as_deref_mut() {
            st[t * w..(t + 1) * w].copy_from_slice(&h);
        }
    }
    Ok(())
}

/// One sequence via an up-sweep/down-sweep exclusive prefix scan over
/// `(a, b)` pairs, padded to a power of two with the identity `(1, 0)`.
#[allow(clippy::too_many_arguments)]
fn lane_parallel<T: Scalar>(
    a: &[T],
    b: &[T],
    cs: &[T],
    x: &[T],
    d: &[T],
    dims: LaneDims,
    lane: usize,
    y: &mut [T],
) -> Result<()> {
    let full = dims.c * dims.s;
    let p = dims.t.next_power_of_two();
    let group = (PAR_COLUMNS / dims.s).clamp(1, dims.c);
    let mut ea = vec![T::one(); p * group * dims.s];
    let mut eb = vec![T::zero(); p * group * dims.s];
    let mut bad: Option<(usize, usize)> = None;

    for c0 in (0..dims.c).step_by(group) {
        let gc = group.min(dims.c - c0);
        let w = gc * dims.s;
        let col = c0 * dims.s;
        ea.fill(T::one());
        eb.fill(T::zero());
        for t in 0..dims.t {
            ea[t * w..(t + 1) * w].copy_from_slice(&a[t * full + col..t * full + col + w]);
            eb[t * w..(t + 1) * w].copy_from_slice(&b[t * full + col..t * full + col + w]);
        }

        let mut stride = 1;
        while stride < p {
            let mut i = 2 * stride - 1;
            while i < p {
                let j = i - stride;
                for k in 0..w {
                    let (na, nb) = combine((ea[j * w + k], eb[j * w + k]), (ea[i * w + k], eb[i * w + k]));
                    ea[i * w + k] = na;
                    eb[i * w + k] = nb;
                }
                i += 2 * stride;
            }
            stride *= 2;
        }
        for k in 0..w {
            ea[(p - 1) * w + k] = T::one();
            eb[(p - 1) * w + k] = T::zero();
        }
        stride = p / 2;
        while stride >= 1 {
            let mut i = 2 * stride - 1;
            while i < p {
                let j = i - stride;
                for k in 0..w {
                    let left = (ea[j * w + k], eb[j * w + k]);
                    let prefix = (ea[i * w + k], eb[i * w + k]);
                    ea[j * w + k] = prefix.0;
                    eb[j * w + k] = prefix.1;
                    let (na, nb) = combine(prefix, left);
                    ea[i * w + k] = na;
                    eb[i * w + k] = nb;
                }
                i += 2 * stride;
            }
            stride /= 2;
        }

        // eb[t] now holds h_{t-1}
        let mut h = vec![T::zero(); w];
        for t in 0..dims.t {
            for k in 0..w {
                h[k] = a[t * full + col + k] * eb[t * w + k] + b[t * full + col + k];
            }
            if let Some(i) = h.iter().position(|v| !v.is_finite()) {
                let at = (t, col + i);
                if bad.is_none_or(|cur| at < cur) {
                    bad = Some(at);
                }
                break;
            }
            let ct = &cs[t * dims.s..(t + 1) * dims.s];
            for g in 0..gc {
                let c = c0 + g;
                let mut acc = T::zero();
                for s in 0..dims.s {
                    acc += ct[s] * h[g * dims.s + s];
                }
                y[t * dims.c + c] = acc + d[c] * x[t * dims.c + c];
            }
        }
    }
    match bad {
        Some((t, i)) => Err(KinoError::ScanNumeric {
            lane,
            t,
            c: i / dims.s,
            s: i % dims.s,
        }),
        None => Ok(()),
    }
}

fn run_scan<T: Scalar>(inputs: &ScanInputs<T>, d: &Tensor<T>, mode: ScanMode) -> Result<Tensor<T>> {
    inputs.check(d)?;
    let (l, t, c, s) = inputs.dims();
    let dims = LaneDims { t, c, s };
    let (ab, bx, cs, x) = (inputs.a_bar.data(), inputs.bx.data(), inputs.c_seq.data(), inputs.x.data());
    let mut y = vec![T::zero(); l * t * c];
    let per = t * c * s;
    y.par_chunks_mut(t * c)
        .enumerate()
        .map(|(lane, yl)| {
            let a = &ab[lane * per..(lane + 1) * per];
            let b = &bx[lane * per..(lane + 1) * per];
            let cl = &cs[lane * t * s..(lane + 1) * t * s];
            let xl = &x[lane * t * c..(lane + 1) * t * c];
            match mode {
                ScanMode::Sequential => lane_sequential(a, b, cl, xl, d.data(), dims, lane, yl, None),
                ScanMode::Parallel => lane_parallel(a, b, cl, xl, d.data(), dims, lane, yl),
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<()>>>()?;
    Ok(Tensor::from_raw(vec![l, t, c], y))
}

/// Exact left-to-right recurrence from `h_0 = 0`.
pub fn scan_sequential<T: Scalar>(inputs: &ScanInputs<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    run_scan(inputs, d, ScanMode::Sequential)
}

/// Same recurrence through a prefix scan of affine maps.
pub fn scan_parallel<T: Scalar>(inputs: &ScanInputs<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    run_scan(inputs, d, ScanMode::Parallel)
}

/// Every hidden state of a sequential scan, `[L, T, C_inner, d_s]`.
pub fn scan_states<T: Scalar>(inputs: &ScanInputs<T>, d: &Tensor<T>) -> Result<Vec<ScanState<T>>> {
    inputs.check(d)?;
    let (l, t, c, s) = inputs.dims();
    let dims = LaneDims { t, c, s };
    let per = t * c * s;
    let mut all = vec![T::zero(); l * per];
    let mut y = vec![T::zero(); t * c];
    for lane in 0..l {
        lane_sequential(
            &inputs.a_bar.data()[lane * per..(lane + 1) * per],
            &inputs.bx.data()[lane * per..(lane + 1) * per],
            &inputs.c_seq.data()[lane * t * s..(lane + 1) * t * s],
            &inputs.x.data()[lane * t * c..(lane + 1) * t * c],
            d.data(),
            dims,
            lane,
            &mut y,
            Some(&mut all[lane * per..(lane + 1) * per]),
        )?;
    }
    let w = c * s;
    Ok((0..t)
        .map(|step| {
            let mut h = Vec::with_capacity(l * w);
            for lane in 0..l {
                h.extend_from_slice(&all[lane * per + step * w..lane * per + (step + 1) * w]);
            }
            ScanState {
                h: Tensor::from_raw(vec![l, c, s], h),
            }
        })
        .collect())
}

/// `Ā = exp(ΔA)`, `B̄x = Δ·B·x` for one sequence into `[T, C, S]` buffers.
fn lane_discretize<T: Scalar>(delta: &[T], a: &[T], bs: &[T], x: &[T], dims: LaneDims, ab: &mut [T], bx: &mut [T]) {
    for t in 0..dims.t {
        for c in 0..dims.c {
            let dl = delta[t * dims.c + c];
            let dx = dl * x[t * dims.c + c];
            let row = (t * dims.c + c) * dims.s;
            let (ar, br) = (&mut ab[row..row + dims.s], &mut bx[row..row + dims.s]);
            for s in 0..dims.s {
                ar[s] = dl * a[c * dims.s + s];
                br[s] = dx * bs[t * dims.s + s];
            }
        }
    }
    T::exp_in_place(ab);
}

/// `B̄x` only, for a lane whose `Ā` is already known.
fn lane_bx<T: Scalar>(delta: &[T], bs: &[T], x: &[T], dims: LaneDims, bx: &mut [T]) {
    for t in 0..dims.t {
        for c in 0..dims.c {
            let dx = delta[t * dims.c + c] * x[t * dims.c + c];
            let row = (t * dims.c + c) * dims.s;
            for s in 0..dims.s {
                bx[row + s] = dx * bs[t * dims.s + s];
            }
        }
    }
}

/// Discretizes already-softplussed step sizes `Δ: [L, T, C]`.
pub fn discretize_steps<T: Scalar>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b_seq: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ds = delta.shape();
    if ds.len() != 3 || x.shape() != ds || a.rank() != 2 || a.shape()[0] != ds[2] {
        return Err(KinoError::shape("discretize", ds, a.shape()));
    }
    let s = a.shape()[1];
    if b_seq.shape() != [ds[0], ds[1], s] {
        return Err(KinoError::shape("discretize", &[ds[0], ds[1], s], b_seq.shape()));
    }
    let (l, t, c) = (ds[0], ds[1], ds[2]);
    let dims = LaneDims { t, c, s };
    let mut ab = vec![T::zero(); l * t * c * s];
    let mut bx = vec![T::zero(); l * t * c * s];
    for lane in 0..l {
        let r = lane * t * c * s..(lane + 1) * t * c * s;
        lane_discretize(
            &delta.data()[lane * t * c..(lane + 1) * t * c],
            a.data(),
            &b_seq.data()[lane * t * s..(lane + 1) * t * s],
            &x.data()[lane * t * c..(lane + 1) * t * c],
            dims,
            &mut ab[r.clone()],
            &mut bx[r],
        );
    }
    let shape = vec![l, t, c, s];
    Ok((Tensor::from_raw(shape.clone(), ab), Tensor::from_raw(shape, bx)))
}

const LANE_BLOCK: usize = 8;

struct BlockGrads<T> {
    delta: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    x: Vec<T>,
    a: Vec<T>,
    d: Vec<T>,
}

/// Fused differentiable recurrence: inputs are `Δ: [L,T,C]`, `A: [C,S]`,
/// `B, C: [L,T,S]`, `x: [L,T,C]`, `D: [C]`. The discretized transitions are
/// kept for the backward pass, which recomputes states lane by lane and runs
/// the adjoint recurrence in reverse time. Gradients that sum over lanes are
/// reduced in fixed-size lane blocks in block order, independent of the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<'t, T: Scalar>(
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b_seq: Var<'t, T>,
    c_seq: Var<'t, T>,
    x: Var<'t, T>,
    d: Var<'t, T>,
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    let (dv, av, bv, cv, xv, dd) = (delta.value(), a.value(), b_seq.value(), c_seq.value(), x.value(), d.value());
    let ds = dv.shape().to_vec();
    if ds.len() != 3 || xv.shape() != ds.as_slice() {
        return Err(KinoError::shape("selective_scan", &ds, xv.shape()));
    }
    let (l, t, c) = (ds[0], ds[1], ds[2]);
    if av.rank() != 2 || av.shape()[0] != c {
        return Err(KinoError::shape("selective_scan", &[c, 0], av.shape()));
    }
    let s = av.shape()[1];
    if bv.shape() != [l, t, s] || cv.shape() != [l, t, s] {
        return Err(KinoError::shape("selective_scan", &[l, t, s], bv.shape()));
    }
    if dd.shape() != [c] {
        return Err(KinoError::shape("selective_scan", &[c], dd.shape()));
    }
    let dims = LaneDims { t, c, s };
    let per = t * c * s;

    let mut y = vec![T::zero(); l * t * c];
    let mut ab_all = vec![T::zero(); l * per];
    y.par_chunks_mut(t * c)
        .zip(ab_all.par_chunks_mut(per))
        .enumerate()
        .map(|(lane, (yl, ab))| {
            let mut bx = vec![T::zero(); per];
            let xl = &xv.data()[lane * t * c..(lane + 1) * t * c];
            let bl = &bv.data()[lane * t * s..(lane + 1) * t * s];
            let cl = &cv.data()[lane * t * s..(lane + 1) * t * s];
            lane_discretize(&dv.data()[lane * t * c..(lane + 1) * t * c], av.data(), bl, xl, dims, ab, &mut bx);
            match mode {
                ScanMode::Sequential => lane_sequential(ab, &bx, cl, xl, dd.data(), dims, lane, yl, None),
                ScanMode::Parallel => lane_parallel(ab, &bx, cl, xl, dd.data(), dims, lane, yl),
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<()>>>()?;

    let out = Tensor::from_raw(vec![l, t, c], y);
    delta.tape().push_op(
        "selective_scan",
        out,
        &[delta, a, b_seq, c_seq, x, d],
        Box::new(move |g, _| {
            let gy = g.data();
            let blocks: Vec<BlockGrads<T>> = (0..l.div_ceil(LANE_BLOCK))
                .into_par_iter()
                .map(|blk| {
                    let lanes = blk * LANE_BLOCK..((blk + 1) * LANE_BLOCK).min(l);
                    let n = lanes.len();
                    let mut bg = BlockGrads {
                        delta: vec![T::zero(); n * t * c],
                        b: vec![T::zero(); n * t * s],
                        c: vec![T::zero(); n * t * s],
                        x: vec![T::zero(); n * t * c],
                        a: vec![T::zero(); c * s],
                        d: vec![T::zero(); c],
                    };
                    let mut bx = vec![T::zero(); per];
                    let mut hs = vec![T::zero(); per];
                    let mut ys = vec![T::zero(); t * c];
                    let mut gh = vec![T::zero(); c * s];
                    let alpha = av.data();
                    for (k, lane) in lanes.enumerate() {
                        let xl = &xv.data()[lane * t * c..(lane + 1) * t * c];
                        let dl = &dv.data()[lane * t * c..(lane + 1) * t * c];
                        let bl = &bv.data()[lane * t * s..(lane + 1) * t * s];
                        let cl = &cv.data()[lane * t * s..(lane + 1) * t * s];
                        let gl = &gy[lane * t * c..(lane + 1) * t * c];
                        let ab = &ab_all[lane * per..(lane + 1) * per];
                        lane_bx(dl, bl, xl, dims, &mut bx);
                        lane_sequential(ab, &bx, cl, xl, dd.data(), dims, lane, &mut ys, Some(&mut hs))?;
                        let gdl = &mut bg.delta[k * t * c..(k + 1) * t * c];
                        let gbl = &mut bg.b[k * t * s..(k + 1) * t * s];
                        let gcl = &mut bg.c[k * t * s..(k + 1) * t * s];
                        let gxl = &mut bg.x[k * t * c..(k + 1) * t * c];
                        gh.iter_mut().for_each(|v| *v = T::zero());
                        for tt in (0..t).rev() {
                            let ct = &cl[tt * s..(tt + 1) * s];
                            let bt = &bl[tt * s..(tt + 1) * s];
                            for ci in 0..c {
                                let gyt = gl[tt * c + ci];
                                let dlt = dl[tt * c + ci];
                                let xt = xl[tt * c + ci];
                                let row = (tt * c + ci) * s;
                                let hrow = &hs[row..row + s];
                                let arow = &ab[row..row + s];
                                let ghr = &mut gh[ci * s..(ci + 1) * s];
                                let gar = &mut bg.a[ci * s..(ci + 1) * s];
                                let alr = &alpha[ci * s..(ci + 1) * s];
                                let (mut g_delta, mut g_x) = (T::zero(), T::zero());
                                for si in 0..s {
                                    let ghv = ghr[si] + gyt * ct[si];
                                    gcl[tt * s + si] += gyt * hrow[si];
                                    let prev = if tt > 0 { hs[row - c * s + si] } else { T::zero() };
                                    let ga = ghv * prev * arow[si];
                                    g_delta += ga * alr[si] + ghv * bt[si] * xt;
                                    gar[si] += ga * dlt;
                                    gbl[tt * s + si] += ghv * dlt * xt;
                                    g_x += ghv * bt[si];
                                    ghr[si] = ghv * arow[si];
                                }
                                gdl[tt * c + ci] += g_delta;
                                gxl[tt * c + ci] += g_x * dlt + gyt * dd.data()[ci];
                                bg.d[ci] += gyt * xt;
                            }
                        }
                    }
                    Ok(bg)
                })
                .collect::<Vec<Result<BlockGrads<T>>>>()
                .into_iter()
                .collect::<Result<Vec<_>>>()?;

            let mut gdelta = Vec::with_capacity(l * t * c);
            let mut gb = Vec::with_capacity(l * t * s);
            let mut gc = Vec::with_capacity(l * t * s);
            let mut gx = Vec::with_capacity(l * t * c);
            let mut ga = vec![T::zero(); c * s];
            let mut gd = vec![T::zero(); c];
            for bg in blocks {
                gdelta.extend(bg.delta);
                gb.extend(bg.b);
                gc.extend(bg.c);
                gx.extend(bg.x);
                for (acc, v) in ga.iter_mut().zip(bg.a) {
                    *acc += v;
                }
                for (acc, v) in gd.iter_mut().zip(bg.d) {
                    *acc += v;
                }
            }
            Ok(vec![
                Some(Tensor::from_raw(vec![l, t, c], gdelta)),
                Some(Tensor::from_raw(vec![c, s], ga)),
                Some(Tensor::from_raw(vec![l, t, s], gb)),
                Some(Tensor::from_raw(vec![l, t, s], gc)),
                Some(Tensor::from_raw(vec![l, t, c], gx)),
                Some(Tensor::from_raw(vec![c], gd)),
            ])
        }),
    )
}

fn check_input(p: &ScannerParams, shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[2] != p.d_model {
        return Err(KinoError::Config(format!(
            "scanner expects [L, T, {}] input, got {shape:?}",
            p.d_model
        )));
    }
    Ok(())
}

/// Normalize and split into content and gate streams, each `[L, T, C_inner]`.
pub fn input_project_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    u: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_input(p, &u.shape())?;
    let xz = p.w_in.forward(tape, store, p.norm.forward(tape, store, u)?)?;
    Ok((xz.narrow(2, 0, p.c_inner)?, xz.narrow(2, p.c_inner, p.c_inner)?))
}

/// Causal depthwise convolution with zero left padding, then silu.
pub fn temporal_mix_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    x_raw: Var<'t, T>,
) -> Result<Var<'t, T>> {
    x_raw
        .depthwise_conv1d(tape.param(store, p.conv_kernel), true, PadMode::Zero)?
        .silu()
}

/// `(δ_raw, B, C)` from the mixed content stream.
pub fn dynamic_params_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    x: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    Ok((
        p.w_delta.forward(tape, store, x)?,
        p.w_b.forward(tape, store, x)?,
        p.w_c.forward(tape, store, x)?,
    ))
}

/// `W_out(y ⊙ silu(g)) + u`
pub fn output_gate_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    y: Var<'t, T>,
    g: Var<'t, T>,
    u: Var<'t, T>,
) -> Result<Var<'t, T>> {
    u.add(p.w_out.forward(tape, store, y.mul(g.silu()?)?)?)
}

/// Residual contribution `W_out(y ⊙ silu(g))` of the scanner.
pub fn ks4_core<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    u: Var<'t, T>,
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    let (x_raw, g) = input_project_var(tape, store, p, u)?;
    let x = temporal_mix_var(tape, store, p, x_raw)?;
    let (delta_raw, b_seq, c_seq) = dynamic_params_var(tape, store, p, x)?;
    let delta = delta_raw.add_broadcast(tape.param(store, p.b_delta))?.softplus()?;
    let a = tape.param(store, p.a_log).exp()?.neg()?;
    let y = selective_scan(delta, a, b_seq, c_seq, x, tape.param(store, p.d), mode)?;
    p.w_out.forward(tape, store, y.mul(g.silu()?)?)
}

/// Full scanner on `u: [L, T, C]` with the residual connection.
pub fn ks4_forward_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ScannerParams,
    u: Var<'t, T>,
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    u.add(ks4_core(tape, store, p, u, mode)?)
}

pub fn input_project<T: Scalar>(
    store: &ParamStore<T>,
    p: &ScannerParams,
    u: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let (x, g) = input_project_var(&tape, store, p, tape.constant(u.clone()))?;
    Ok((x.value(), g.value()))
}

pub fn temporal_mix<T: Scalar>(store: &ParamStore<T>, p: &ScannerParams, x_raw: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(temporal_mix_var(&tape, store, p, tape.constant(x_raw.clone()))?.value())
}

pub fn dynamic_params<T: Scalar>(
    store: &ParamStore<T>,
    p: &ScannerParams,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let (d, b, c) = dynamic_params_var(&tape, store, p, tape.constant(x.clone()))?;
    Ok((d.value(), b.value(), c.value()))
}

/// `(Δ, Ā, B̄x)` where `Δ = softplus(δ_raw + b_δ)`.
pub fn discretize<T: Scalar>(
    store: &ParamStore<T>,
    p: &ScannerParams,
    delta_raw: &Tensor<T>,
    b_seq: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let delta = tape
        .constant(delta_raw.clone())
        .add_broadcast(tape.constant(store.value(p.b_delta).clone()))?
        .softplus()?
        .value();
    let (ab, bx) = discretize_steps(&delta, &p.transition(store), b_seq, x)?;
    Ok((delta, ab, bx))
}

pub fn output_gate<T: Scalar>(
    store: &ParamStore<T>,
    p: &ScannerParams,
    y: &Tensor<T>,
    g: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let (y, g, u) = (tape.constant(y.clone()), tape.constant(g.clone()), tape.constant(u.clone()));
    Ok(output_gate_var(&tape, store, p, y, g, u)?.value())
}

/// Tensor-level scanner that materializes [`ScanInputs`] and dispatches to
/// [`scan_sequential`] or [`scan_parallel`].
pub fn ks4_forward<T: Scalar>(
    store: &ParamStore<T>,
    p: &ScannerParams,
    u: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    check_input(p, u.shape())?;
    let (x_raw, g) = input_project(store, p, u)?;
    let x = temporal_mix(store, p, &x_raw)?;
    let (delta_raw, b_seq, c_seq) = dynamic_params(store, p, &x)?;
    let (_, a_bar, bx) = discretize(store, p, &delta_raw, &b_seq, &x)?;
    let inputs = ScanInputs { a_bar, bx, c_seq, x };
    let y = match mode {
        ScanMode::Sequential => scan_sequential(&inputs, store.value(p.d))?,
        ScanMode::Parallel => scan_parallel(&inputs, store.value(p.d))?,
    };
    output_gate(store, p, &y, &g, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(l: usize, t: usize, c: usize, s: usize, seed: u64) -> (ScanInputs<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_bar = Tensor::from_fn([l, t, c, s], |_| rng.random_range(0.05..0.99)).unwrap();
        let bx = Tensor::randn([l, t, c, s], 1.0, &mut rng).unwrap();
        let c_seq = Tensor::randn([l, t, s], 1.0, &mut rng).unwrap();
        let x = Tensor::randn([l, t, c], 1.0, &mut rng).unwrap();
        let d = Tensor::randn([c], 1.0, &mut rng).unwrap();
        (ScanInputs { a_bar, bx, c_seq, x }, d)
    }

    #[test]
    fn combine_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let e: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.0..1.0), rng.random_range(-2.0..2.0)))
                .collect();
            let l = combine(combine(e[0], e[1]), e[2]);
            let r = combine(e[0], combine(e[1], e[2]));
            assert!((l.0 - r.0).abs() < 1e-12 && (l.1 - r.1).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_closed_form() {
        let (inp, d) = random_inputs(2, 1, 3, 4, 5);
        for y in [scan_sequential(&inp, &d).unwrap(), scan_parallel(&inp, &d).unwrap()] {
            for l in 0..2 {
                for c in 0..3 {
                    let mut expect = d.at(&[c]) * inp.x.at(&[l, 0, c]);
                    for s in 0..4 {
                        expect += inp.c_seq.at(&[l, 0, s]) * inp.bx.at(&[l, 0, c, s]);
                    }
                    assert!((y.at(&[l, 0, c]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn three_step_unroll() {
        let (inp, d) = random_inputs(1, 3, 2, 3, 8);
        let y = scan_sequential(&inp, &d).unwrap();
        for c in 0..2 {
            let mut expect = d.at(&[c]) * inp.x.at(&[0, 2, c]);
            for s in 0..3 {
                let a = |t| inp.a_bar.at(&[0, t, c, s]);
                let b = |t| inp.bx.at(&[0, t, c, s]);
                let h3 = a(2) * a(1) * b(0) + a(2) * b(1) + b(2);
                expect += inp.c_seq.at(&[0, 2, s]) * h3;
            }
            assert!((y.at(&[0, 2, c]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (mut inp, d) = random_inputs(2, 5, 3, 2, 2);
        inp.bx = Tensor::zeros([2, 5, 3, 2]).unwrap();
        inp.x = Tensor::zeros([2, 5, 3]).unwrap();
        assert_eq!(scan_sequential(&inp, &d).unwrap().max_abs(), 0.0);
        assert_eq!(scan_parallel(&inp, &d).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn parallel_matches_sequential_double() {
        for (seed, t) in [1usize, 2, 3, 7, 64, 256].into_iter().enumerate() {
            let (inp, d) = random_inputs(3, t, 4, 5, seed as u64);
            let a = scan_sequential(&inp, &d).unwrap();
            let b = scan_parallel(&inp, &d).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10, "T={t}");
        }
    }

    #[test]
    fn states_stay_within_geometric_bound() {
        let (inp, d) = random_inputs(4, 100, 3, 4, 11);
        let m = inp.bx.max_abs();
        let rho = inp.a_bar.max_abs();
        let bound = m / (1.0 - rho);
        for st in scan_states(&inp, &d).unwrap() {
            assert!(st.h.max_abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn nan_state_is_located() {
        let (inp, d) = random_inputs(2, 4, 3, 2, 6);
        let mut bx = inp.bx.to_vec();
        // lane 1, t 2, c 1, s 0
        bx[((4 + 2) * 3 + 1) * 2] = f64::INFINITY;
        let inp = ScanInputs {
            bx: Tensor::from_raw(vec![2, 4, 3, 2], bx),
            ..inp
        };
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            match run_scan(&inp, &d, mode) {
                Err(KinoError::ScanNumeric { lane, t, c, s }) => assert_eq!((lane, t, c, s), (1, 2, 1, 0)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn init_contract() {
        let mut store = ParamStore::<f64>::new();
        let cfg = Ks4Config::default();
        let p = ScannerParams::register(&mut store, 3, "ks4", 6, &cfg).unwrap();
        assert_eq!(p.c_inner, 12);
        assert!(p.transition(&store).data().iter().all(|&a| a < 0.0));
        assert_eq!(store.value(p.w_out.weight).max_abs(), 0.0);
        for &b in store.value(p.b_delta).data() {
            let dt = crate::autodiff::softplus_scalar(b);
            assert!((1e-3 * (1.0 - 1e-9)..=1e-1 * (1.0 + 1e-9)).contains(&dt), "{dt}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::randn([3, 7, 6], 1.0, &mut rng).unwrap();
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            assert_eq!(ks4_forward(&store, &p, &u, mode).unwrap(), u);
        }
    }

    #[test]
    fn discretize_at_zero_step_argument() {
        let mut store = ParamStore::<f64>::new();
        let p = ScannerParams::register(&mut store, 3, "ks4", 2, &Ks4Config::default()).unwrap();
        let bd = store.value(p.b_delta).clone();
        let delta_raw = Tensor::from_fn([1, 1, 4], |i| -bd.data()[i]).unwrap();
        let b_seq = Tensor::ones([1, 1, 16]).unwrap();
        let x = Tensor::ones([1, 1, 4]).unwrap();
        let (delta, ab, _) = discretize(&store, &p, &delta_raw, &b_seq, &x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(delta.data().iter().all(|&d| (d - ln2).abs() < 1e-12));
        for c in 0..4 {
            for s in 0..16 {
                let expect = (-ln2 * (s as f64 + 1.0)).exp();
                assert!((ab.at(&[0, 0, c, s]) - expect).abs() < 1e-12);
            }
        }
    }
}
