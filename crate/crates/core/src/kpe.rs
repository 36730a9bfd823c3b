//! Kinematic prior encoder.
//!
//! Patch tokens are compared against their spatio-temporal neighbourhood in
//! two ways: normalized inner products inside a `(2r+1)²` search window of
//! nearby frames (correspondence evidence), and plain feature differences
//! against nearby frames (change evidence). Both are projected back to the
//! model width and the result re-enters the token stream residually:
//!
//! ```text
//! F_corr = F + gelu(psi_corr(S))          S: correlation scores of bottleneck(F)
//! F_var  = gelu(psi_var(concat_tau(diff(F_corr))))
//! out    = Z + phi(F_var)
//! ```
//!
//! Internally all operators work in token layout `[B, T, N, ·]` where the
//! patch index is `n = y·Wp + x`; [`PatchGrid`] is the channel-first spatial
//! view used by the public tensor-level operators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{KinoError, Result};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Patch tokens rearranged to `[B, T, C, Hp, Wp]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Scalar> {
    data: Tensor<T>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 5 {
            return Err(KinoError::InvalidShape {
                shape: data.shape().to_vec(),
                reason: "patch grid must be [B, T, C, Hp, Wp]".into(),
            });
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    /// `(B, T, C, Hp, Wp)`
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

/// Rearranges `[B, T, N, C]` patch tokens into a spatial grid; token `n` lands
/// at row `n / Wp`, column `n % Wp`.
pub fn to_grid<T: Scalar>(patches: &Tensor<T>, hp: usize, wp: usize) -> Result<PatchGrid<T>> {
    let s = patches.shape();
    if s.len() != 4 || s[2] != hp * wp {
        return Err(KinoError::InvalidShape {
            shape: s.to_vec(),
            reason: format!("expected [B, T, {}, C] for a {hp}x{wp} grid", hp * wp),
        });
    }
    let (b, t, c) = (s[0], s[1], s[3]);
    PatchGrid::new(patches.permute(&[0, 1, 3, 2])?.reshape([b, t, c, hp, wp])?)
}

pub fn from_grid<T: Scalar>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let (b, t, c, hp, wp) = grid.dims();
    grid.data.reshape([b, t, c, hp * wp])?.permute(&[0, 1, 3, 2])
}

/// Divides every location's channel vector by `(‖v‖ + eps)`.
pub fn normalize_channels<T: Scalar>(grid: &PatchGrid<T>, eps: f64) -> Result<PatchGrid<T>> {
    let tape = Tape::new();
    let v = tape.constant(grid.data.clone()).l2_normalize(2, eps)?;
    PatchGrid::new(v.value())
}

/// Temporal offsets of a symmetric context of `k` frames:
/// `{-k/2, .., -1, +1, .., +k/2}`.
pub fn context_offsets(context_frames: usize) -> Vec<isize> {
    let h = (context_frames / 2) as isize;
    (-h..0).chain(1..=h).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpeConfig {
    pub context_frames: usize,
    pub window_radius: usize,
    /// Width of the correlation bottleneck; `None` means `C / 4`.
    pub bottleneck_dim: Option<usize>,
    pub enable_corr: bool,
    pub enable_var: bool,
    pub norm_eps: f64,
}

impl Default for KpeConfig {
    fn default() -> Self {
        Self {
            context_frames: 4,
            window_radius: 4,
            bottleneck_dim: None,
            enable_corr: true,
            enable_var: true,
            norm_eps: 1e-6,
        }
    }
}

impl KpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_frames % 2 != 0 {
            return Err(KinoError::Config(format!(
                "context_frames must be even, got {}",
                self.context_frames
            )));
        }
        if self.bottleneck_dim == Some(0) {
            return Err(KinoError::Config("bottleneck_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<isize> {
        context_offsets(self.context_frames)
    }

    pub fn window_side(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn bottleneck(&self, width: usize) -> usize {
        self.bottleneck_dim.unwrap_or((width / 4).max(1))
    }

    pub fn corr_active(&self) -> bool {
        self.enable_corr && self.context_frames > 0
    }

    pub fn var_active(&self) -> bool {
        self.enable_var && self.context_frames > 0
    }
}

/// Scores `S_{t,τ}(p,δ)` laid out as `[B, T, n_τ, (2r+1)², Hp, Wp]`, with the
/// displacement index `(v + r)·(2r+1) + (u + r)` for `δ = (u, v)`
/// (`u` horizontal). Empty when there is no temporal context.
#[derive(Clone, Debug)]
pub struct CorrelationVolume<T: Scalar> {
    pub scores: Option<Tensor<T>>,
    pub offsets: Vec<isize>,
    pub window_radius: usize,
}

impl<T: Scalar> CorrelationVolume<T> {
    pub fn is_empty(&self) -> bool {
        self.scores.is_none()
    }

    /// Score for frame `t`, offset index `k`, location `(y, x)` and
    /// displacement `(u, v)`.
    pub fn score(&self, b: usize, t: usize, k: usize, y: usize, x: usize, u: isize, v: isize) -> T {
        let s = self.scores.as_ref().expect("non-empty volume");
        let side = (2 * self.window_radius + 1) as isize;
        let r = self.window_radius as isize;
        let d = ((v + r) * side + (u + r)) as usize;
        s.at(&[b, t, k, d, y, x])
    }
}

#[derive(Clone, Copy)]
struct Layout {
    b: usize,
    t: usize,
    hp: usize,
    wp: usize,
    c: usize,
}

impl Layout {
    fn n(&self) -> usize {
        self.hp * self.wp
    }
}

fn corr_forward<T: Scalar>(f: &[T], lay: Layout, offsets: &[isize], r: usize) -> Vec<T> {
    let (t_len, n, c) = (lay.t, lay.n(), lay.c);
    let side = 2 * r + 1;
    let feat = side * side * offsets.len();
    let per_b = t_len * n * feat;
    let mut out = vec![T::zero(); lay.b * per_b];
    out.par_chunks_mut(per_b).enumerate().for_each(|(bb, ob)| {
        let fb = &f[bb * t_len * n * c..(bb + 1) * t_len * n * c];
        for t in 0..t_len {
            for (k, &tau) in offsets.iter().enumerate() {
                let t2 = t as isize + tau;
                if t2 < 0 || t2 >= t_len as isize {
                    continue;
                }
                let t2 = t2 as usize;
                for y in 0..lay.hp {
                    for x in 0..lay.wp {
                        let p = y * lay.wp + x;
                        let fp = &fb[(t * n + p) * c..(t * n + p + 1) * c];
                        let o = (t * n + p) * feat + k * side * side;
                        for dv in 0..side {
                            let yy = y as isize + dv as isize - r as isize;
                            if yy < 0 || yy >= lay.hp as isize {
                                continue;
                            }
                            for du in 0..side {
                                let xx = x as isize + du as isize - r as isize;
                                if xx < 0 || xx >= lay.wp as isize {
                                    continue;
                                }
                                let q = yy as usize * lay.wp + xx as usize;
                                let fq = &fb[(t2 * n + q) * c..(t2 * n + q + 1) * c];
                                let mut s = T::zero();
                                for ch in 0..c {
                                    s += fp[ch] * fq[ch];
                                }
                                ob[o + dv * side + du] = s;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn corr_backward<T: Scalar>(f: &[T], g: &[T], lay: Layout, offsets: &[isize], r: usize) -> Vec<T> {
    let (t_len, n, c) = (lay.t, lay.n(), lay.c);
    let side = 2 * r + 1;
    let feat = side * side * offsets.len();
    let per_b = t_len * n * c;
    let mut gf = vec![T::zero(); f.len()];
    gf.par_chunks_mut(per_b).enumerate().for_each(|(bb, gb)| {
        let fb = &f[bb * per_b..(bb + 1) * per_b];
        let go = &g[bb * t_len * n * feat..(bb + 1) * t_len * n * feat];
        for t in 0..t_len {
            for (k, &tau) in offsets.iter().enumerate() {
                let t2 = t as isize + tau;
                if t2 < 0 || t2 >= t_len as isize {
                    continue;
                }
                let t2 = t2 as usize;
                for y in 0..lay.hp {
                    for x in 0..lay.wp {
                        let p = y * lay.wp + x;
                        let o = (t * n + p) * feat + k * side * side;
                        for dv in 0..side {
                            let yy = y as isize + dv as isize - r as isize;
                            if yy < 0 || yy >= lay.hp as isize {
                                continue;
                            }
                            for du in 0..side {
                                let xx = x as isize + du as isize - r as isize;
                                if xx < 0 || xx >= lay.wp as isize {
                                    continue;
                                }
                                let gs = go[o + dv * side + du];
                                if gs == T::zero() {
                                    continue;
                                }
                                let q = yy as usize * lay.wp + xx as usize;
                                let (ip, iq) = ((t * n + p) * c, (t2 * n + q) * c);
                                for ch in 0..c {
                                    gb[ip + ch] += gs * fb[iq + ch];
                                    gb[iq + ch] += gs * fb[ip + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gf
}

fn clamp_time(t: usize, tau: isize, t_len: usize) -> usize {
    (t as isize + tau).clamp(0, t_len as isize - 1) as usize
}

fn var_forward<T: Scalar>(f: &[T], lay: Layout, offsets: &[isize]) -> Vec<T> {
    let (t_len, n, c) = (lay.t, lay.n(), lay.c);
    let kk = offsets.len();
    let mut out = vec![T::zero(); lay.b * t_len * n * kk * c];
    for bb in 0..lay.b {
        for t in 0..t_len {
            for p in 0..n {
                let cur = ((bb * t_len + t) * n + p) * c;
                for (k, &tau) in offsets.iter().enumerate() {
                    let t2 = clamp_time(t, tau, t_len);
                    let other = ((bb * t_len + t2) * n + p) * c;
                    let o = (((bb * t_len + t) * n + p) * kk + k) * c;
                    for ch in 0..c {
                        out[o + ch] = f[other + ch] - f[cur + ch];
                    }
                }
            }
        }
    }
    out
}

fn var_backward<T: Scalar>(g: &[T], lay: Layout, offsets: &[isize]) -> Vec<T> {
    let (t_len, n, c) = (lay.t, lay.n(), lay.c);
    let kk = offsets.len();
    let mut gf = vec![T::zero(); lay.b * t_len * n * c];
    for bb in 0..lay.b {
        for t in 0..t_len {
            for p in 0..n {
                let cur = ((bb * t_len + t) * n + p) * c;
                for (k, &tau) in offsets.iter().enumerate() {
                    let t2 = clamp_time(t, tau, t_len);
                    let other = ((bb * t_len + t2) * n + p) * c;
                    let o = (((bb * t_len + t) * n + p) * kk + k) * c;
                    for ch in 0..c {
                        gf[other + ch] += g[o + ch];
                        gf[cur + ch] -= g[o + ch];
                    }
                }
            }
        }
    }
    gf
}

fn token_layout(shape: &[usize], hp: usize, wp: usize, op: &'static str) -> Result<Layout> {
    if shape.len() != 4 || shape[2] != hp * wp {
        return Err(KinoError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op}: expected [B, T, {}, C]", hp * wp),
        });
    }
    Ok(Layout {
        b: shape[0],
        t: shape[1],
        hp,
        wp,
        c: shape[3],
    })
}

/// Differentiable correlation over token-layout features `[B, T, N, C]`.
/// Output is `[B, T, N, n_τ·(2r+1)²]` (offset-major, then displacement).
pub fn correlation_tokens<'t, T: Scalar>(
    feats: Var<'t, T>,
    hp: usize,
    wp: usize,
    offsets: &[isize],
    radius: usize,
) -> Result<Var<'t, T>> {
    if offsets.is_empty() {
        return Err(KinoError::Argument("correlation needs at least one temporal offset".into()));
    }
    let f = feats.value();
    let lay = token_layout(f.shape(), hp, wp, "correlation")?;
    let side = 2 * radius + 1;
    let feat = offsets.len() * side * side;
    let out = corr_forward(f.data(), lay, offsets, radius);
    let offsets = offsets.to_vec();
    feats.tape().push_op(
        "correlation",
        Tensor::from_raw(vec![lay.b, lay.t, lay.n(), feat], out),
        &[feats],
        Box::new(move |g, _| {
            let gf = corr_backward(f.data(), g.data(), lay, &offsets, radius);
            Ok(vec![Some(Tensor::from_raw(f.shape().to_vec(), gf))])
        }),
    )
}

/// Differentiable variation signals over `[B, T, N, C]`, output
/// `[B, T, N, n_τ·C]` (offset-major). Out-of-range frames replicate the clip
/// boundary, so their differences are zero.
pub fn variation_tokens<'t, T: Scalar>(
    feats: Var<'t, T>,
    hp: usize,
    wp: usize,
    offsets: &[isize],
) -> Result<Var<'t, T>> {
    if offsets.is_empty() {
        return Err(KinoError::Argument("variation needs at least one temporal offset".into()));
    }
    let f = feats.value();
    let lay = token_layout(f.shape(), hp, wp, "variation")?;
    let out = var_forward(f.data(), lay, offsets);
    let offsets = offsets.to_vec();
    let in_shape = f.shape().to_vec();
    feats.tape().push_op(
        "variation",
        Tensor::from_raw(vec![lay.b, lay.t, lay.n(), offsets.len() * lay.c], out),
        &[feats],
        Box::new(move |g, _| {
            Ok(vec![Some(Tensor::from_raw(in_shape.clone(), var_backward(g.data(), lay, &offsets)))])
        }),
    )
}

/// Correlation volume of an already projected and normalized grid.
pub fn correlation_scores<T: Scalar>(grid: &PatchGrid<T>, cfg: &KpeConfig) -> Result<CorrelationVolume<T>> {
    cfg.validate()?;
    let offsets = cfg.offsets();
    let r = cfg.window_radius;
    if offsets.is_empty() {
        return Ok(CorrelationVolume {
            scores: None,
            offsets,
            window_radius: r,
        });
    }
    let (b, t, _, hp, wp) = grid.dims();
    let tokens = from_grid(grid)?;
    let tape = Tape::new();
    let flat = correlation_tokens(tape.constant(tokens), hp, wp, &offsets, r)?.value();
    let side = 2 * r + 1;
    let scores = flat
        .reshape([b, t, hp * wp, offsets.len(), side * side])?
        .permute(&[0, 1, 3, 4, 2])?
        .reshape([b, t, offsets.len(), side * side, hp, wp])?;
    Ok(CorrelationVolume {
        scores: Some(scores),
        offsets,
        window_radius: r,
    })
}

/// Difference responses `[B, T, n_τ, C, Hp, Wp]`; `None` without context.
pub fn variation_signals<T: Scalar>(grid: &PatchGrid<T>, cfg: &KpeConfig) -> Result<Option<Tensor<T>>> {
    cfg.validate()?;
    let offsets = cfg.offsets();
    if offsets.is_empty() {
        return Ok(None);
    }
    let (b, t, c, hp, wp) = grid.dims();
    let tape = Tape::new();
    let flat = variation_tokens(tape.constant(from_grid(grid)?), hp, wp, &offsets)?.value();
    Ok(Some(
        flat.reshape([b, t, hp * wp, offsets.len(), c])?
            .permute(&[0, 1, 3, 4, 2])?
            .reshape([b, t, offsets.len(), c, hp, wp])?,
    ))
}

/// Learnable maps of the encoder. Projections that the configuration does not
/// use are not allocated.
#[derive(Clone, Copy, Debug)]
pub struct KpeParams {
    pub bottleneck: Option<Linear>,
    pub psi_corr: Option<Linear>,
    pub psi_var: Option<Linear>,
    pub phi: Linear,
}

impl KpeParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        width: usize,
        cfg: &KpeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_tau = cfg.offsets().len();
        let side = cfg.window_side();
        let (bottleneck, psi_corr) = if cfg.corr_active() {
            let cr = cfg.bottleneck(width);
            (
                Some(Linear::register(store, seed, &format!("{prefix}.bottleneck"), width, cr, true, Init::FanIn)?),
                Some(Linear::register(
                    store,
                    seed,
                    &format!("{prefix}.psi_corr"),
                    n_tau * side * side,
                    width,
                    false,
                    Init::FanIn,
                )?),
            )
        } else {
            (None, None)
        };
        let psi_var = if cfg.var_active() {
            Some(Linear::register(
                store,
                seed,
                &format!("{prefix}.psi_var"),
                n_tau * width,
                width,
                false,
                Init::FanIn,
            )?)
        } else {
            None
        };
        let phi = Linear::register(store, seed, &format!("{prefix}.phi"), width, width, false, Init::Zero)?;
        Ok(Self {
            bottleneck,
            psi_corr,
            psi_var,
            phi,
        })
    }

    pub fn param_count(&self) -> usize {
        [self.bottleneck, self.psi_corr, self.psi_var, Some(self.phi)]
            .iter()
            .flatten()
            .map(Linear::param_count)
            .sum()
    }
}

/// `gelu(psi_corr(scores))`, the correlation residual in token layout.
pub fn project_correlation<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    psi_corr: &Linear,
    scores: Var<'t, T>,
) -> Result<Var<'t, T>> {
    psi_corr.forward(tape, store, scores)?.gelu()
}

/// `gelu(psi_var(diffs))`, i.e. `F_var` in token layout.
pub fn project_variation<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    psi_var: &Linear,
    diffs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    psi_var.forward(tape, store, diffs)?.gelu()
}

/// Full encoder on patch tokens `[B, T, N, C]`; output has the same shape.
pub fn kpe_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    params: &KpeParams,
    cfg: &KpeConfig,
    patches: Var<'t, T>,
    hp: usize,
    wp: usize,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    token_layout(&patches.shape(), hp, wp, "kpe_forward")?;
    let offsets = cfg.offsets();

    let corr_residual = match (params.bottleneck, params.psi_corr) {
        (Some(bneck), Some(psi)) if cfg.corr_active() => {
            let reduced = bneck.forward(tape, store, patches)?.l2_normalize(3, cfg.norm_eps)?;
            let scores = correlation_tokens(reduced, hp, wp, &offsets, cfg.window_radius)?;
            Some(project_correlation(tape, store, &psi, scores)?)
        }
        _ => None,
    };
    let f_corr = match corr_residual {
        Some(res) => patches.add(res)?,
        None => patches,
    };
    let f_var = match params.psi_var {
        Some(psi) if cfg.var_active() => {
            let diffs = variation_tokens(f_corr, hp, wp, &offsets)?;
            Some(project_variation(tape, store, &psi, diffs)?)
        }
        // correlation-only pipeline: hand the correlation residual to phi
        _ => corr_residual,
    };
    match f_var {
        Some(fv) => patches.add(params.phi.forward(tape, store, fv)?),
        None => Ok(patches),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn offsets_are_symmetric() {
        assert_eq!(context_offsets(0), Vec::<isize>::new());
        assert_eq!(context_offsets(4), vec![-2, -1, 1, 2]);
        assert!(KpeConfig { context_frames: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn grid_uses_row_major_token_order() {
        let patches = Tensor::<f64>::from_fn([1, 1, 4, 2], |i| i as f64).unwrap();
        let grid = to_grid(&patches, 2, 2).unwrap();
        for n in 0..4 {
            for c in 0..2 {
                assert_eq!(grid.data().at(&[0, 0, c, n / 2, n % 2]), patches.at(&[0, 0, n, c]));
            }
        }
        assert_eq!(from_grid(&grid).unwrap(), patches);
        assert!(to_grid(&patches, 3, 2).is_err());
        let single = Tensor::<f64>::ones([1, 2, 1, 3]).unwrap();
        assert_eq!(to_grid(&single, 1, 1).unwrap().dims(), (1, 2, 3, 1, 1));
    }

    #[test]
    fn empty_context_yields_empty_volume_and_no_signals() {
        let grid = PatchGrid::new(Tensor::<f64>::ones([1, 3, 2, 2, 2]).unwrap()).unwrap();
        let cfg = KpeConfig { context_frames: 0, ..Default::default() };
        assert!(correlation_scores(&grid, &cfg).unwrap().is_empty());
        assert!(variation_signals(&grid, &cfg).unwrap().is_none());
    }

    #[test]
    fn variation_boundary_rule() {
        // T = 2, single offset +1
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = Tensor::<f64>::randn([1, 2, 1, 3], 1.0, &mut rng).unwrap();
        let grid = to_grid(&patches, 1, 1).unwrap();
        let cfg = KpeConfig { context_frames: 2, ..Default::default() };
        let sig = variation_signals(&grid, &cfg).unwrap().unwrap();
        // offsets are [-1, +1]; index 1 is +1
        for c in 0..3 {
            let expect = patches.at(&[0, 1, 0, c]) - patches.at(&[0, 0, 0, c]);
            assert!((sig.at(&[0, 0, 1, c, 0, 0]) - expect).abs() < 1e-15);
            assert_eq!(sig.at(&[0, 1, 1, c, 0, 0]), 0.0);
        }
    }

    #[test]
    fn constant_video_scores_one_in_interior() {
        let grid = PatchGrid::new(Tensor::<f64>::full([1, 3, 4, 5, 5], 0.7).unwrap()).unwrap();
        let grid = normalize_channels(&grid, 1e-6).unwrap();
        let cfg = KpeConfig { context_frames: 2, window_radius: 1, ..Default::default() };
        let vol = correlation_scores(&grid, &cfg).unwrap();
        for u in -1..=1 {
            for v in -1..=1 {
                let s = vol.score(0, 1, 0, 2, 2, u, v);
                assert!((s - 1.0).abs() < 1e-5, "{s}");
            }
        }
        // spatial and temporal out-of-range references score zero
        assert_eq!(vol.score(0, 1, 0, 0, 0, -1, 0), 0.0);
        assert_eq!(vol.score(0, 0, 0, 2, 2, 0, 0), 0.0);
    }

    #[test]
    fn zero_phi_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let cfg = KpeConfig { window_radius: 1, ..Default::default() };
        let params = KpeParams::register(&mut store, 1, "kpe", 8, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([1, 5, 4, 8], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let y = kpe_forward(&tape, &store, &params, &cfg, tape.constant(x.clone()), 2, 2).unwrap();
        assert_eq!(y.value(), x);
    }
}
