//! Insertion block: splits a frame-token stream into its CLS and patch parts,
//! runs the motion-prior encoder and the selective scanner along each patch
//! position's trajectory, routes the CLS tokens through a short temporal
//! convolution, and reassembles the stream in its original layout.
//!
//! ```text
//! Ẑ_p = KPE(Z_p)
//! Z̃_p = Z_p + Reassemble(ScanCore(Trajectories(Ẑ_p)))
//! z̃_cls = DWConv1d_k3(z_cls)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{KinoError, Result};
use crate::kpe::{kpe_forward, KpeConfig, KpeParams};
use crate::ks4::{ks4_core, Ks4Config, ScanMode, ScannerParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const CLS_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pks4Config {
    pub kpe_enabled: bool,
    pub scan_enabled: bool,
    pub cls_route: bool,
    pub kpe: KpeConfig,
    pub ks4: Ks4Config,
}

impl Default for Pks4Config {
    fn default() -> Self {
        Self {
            kpe_enabled: true,
            scan_enabled: true,
            cls_route: true,
            kpe: KpeConfig::default(),
            ks4: Ks4Config::default(),
        }
    }
}

impl Pks4Config {
    pub fn validate(&self) -> Result<()> {
        self.kpe.validate()?;
        self.ks4.validate()
    }
}

/// Split view of a `[B, T, N+1, C]` frame-token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T: Scalar> {
    /// `[B, T, C]`
    pub cls: Tensor<T>,
    /// `[B, T, N, C]`
    pub patches: Tensor<T>,
    pub grid_dims: (usize, usize),
}

impl<T: Scalar> TokenBatch<T> {
    pub fn concat(&self) -> Result<Tensor<T>> {
        let s = self.cls.shape();
        let cls = self.cls.reshape([s[0], s[1], 1, s[2]])?;
        Tensor::concat(&[&cls, &self.patches], 2)
    }
}

fn check_stream(shape: &[usize], hp: usize, wp: usize) -> Result<()> {
    if shape.len() != 4 || shape[2] < 2 {
        return Err(KinoError::InvalidShape {
            shape: shape.to_vec(),
            reason: "token stream must be [B, T, N+1, C] with at least one patch".into(),
        });
    }
    if shape[2] - 1 != hp * wp {
        return Err(KinoError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{} patch tokens do not form a {hp}x{wp} grid", shape[2] - 1),
        });
    }
    Ok(())
}

pub fn split_tokens<T: Scalar>(z: &Tensor<T>, hp: usize, wp: usize) -> Result<TokenBatch<T>> {
    check_stream(z.shape(), hp, wp)?;
    let s = z.shape();
    Ok(TokenBatch {
        cls: z.narrow(2, 0, 1)?.reshape([s[0], s[1], s[3]])?,
        patches: z.narrow(2, 1, s[2] - 1)?,
        grid_dims: (hp, wp),
    })
}

/// `[B, T, N, C] → [B·N, T, C]`; row `b·N + n` holds position `n` of item `b`.
pub fn make_trajectories<T: Scalar>(patches: &Tensor<T>) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 4 {
        return Err(KinoError::InvalidShape {
            shape: s.to_vec(),
            reason: "patches must be [B, T, N, C]".into(),
        });
    }
    patches.permute(&[0, 2, 1, 3])?.reshape([s[0] * s[2], s[1], s[3]])
}

/// Inverse of [`make_trajectories`] for a batch of size `b`.
pub fn reassemble_perm<T: Scalar>(scanned: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let s = scanned.shape();
    if s.len() != 3 || b == 0 || s[0] % b != 0 {
        return Err(KinoError::InvalidShape {
            shape: s.to_vec(),
            reason: format!("cannot split {} trajectories over a batch of {b}", s.first().unwrap_or(&0)),
        });
    }
    scanned.reshape([b, s[0] / b, s[1], s[2]])?.permute(&[0, 2, 1, 3])
}

/// Un-permutes the scanned trajectories and adds the pre-encoder patches.
pub fn reassemble<T: Scalar>(scanned: &Tensor<T>, pre_kpe_patches: &Tensor<T>) -> Result<Tensor<T>> {
    let back = reassemble_perm(scanned, pre_kpe_patches.shape().first().copied().unwrap_or(0))?;
    back.zip_map(pre_kpe_patches, |a, b| a + b)
}

/// Depthwise `[C, 3]` kernel for the CLS route.
#[derive(Clone, Copy, Debug)]
pub struct ClsRouteParams {
    pub kernel: ParamId,
    pub channels: usize,
}

/// Shift-style kernel: the first quarter of channels reads the previous
/// frame, the second quarter the next frame, the rest the current frame.
pub fn shift_kernel<T: Scalar>(channels: usize) -> Result<Tensor<T>> {
    let q = channels / 4;
    Tensor::from_fn([channels, CLS_KERNEL], |i| {
        let (c, j) = (i / CLS_KERNEL, i % CLS_KERNEL);
        let tap = if c < q {
            0
        } else if c < 2 * q {
            2
        } else {
            1
        };
        if j == tap {
            T::one()
        } else {
            T::zero()
        }
    })
}

pub fn identity_kernel<T: Scalar>(channels: usize) -> Result<Tensor<T>> {
    Tensor::from_fn([channels, CLS_KERNEL], |i| if i % CLS_KERNEL == 1 { T::one() } else { T::zero() })
}

impl ClsRouteParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            kernel: store.register(format!("{prefix}.weight"), shift_kernel(channels)?)?,
            channels,
        })
    }
}

pub fn cls_temporal_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &ClsRouteParams,
    cls: Var<'t, T>,
) -> Result<Var<'t, T>> {
    cls.depthwise_conv1d(tape.param(store, p.kernel), false, PadMode::Zero)
}

pub fn cls_temporal<T: Scalar>(store: &ParamStore<T>, p: &ClsRouteParams, cls: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(cls_temporal_var(&tape, store, p, tape.constant(cls.clone()))?.value())
}

#[derive(Clone, Copy, Debug)]
pub struct Pks4Params {
    pub kpe: Option<KpeParams>,
    pub scanner: Option<ScannerParams>,
    pub cls: Option<ClsRouteParams>,
    pub width: usize,
}

impl Pks4Params {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        width: usize,
        cfg: &Pks4Config,
    ) -> Result<Self> {
        cfg.validate()?;
        let kpe = if cfg.kpe_enabled {
            Some(KpeParams::register(store, seed, &format!("{prefix}.kpe"), width, &cfg.kpe)?)
        } else {
            None
        };
        let scanner = if cfg.scan_enabled {
            Some(ScannerParams::register(store, seed, &format!("{prefix}.ks4"), width, &cfg.ks4)?)
        } else {
            None
        };
        let cls = if cfg.cls_route {
            Some(ClsRouteParams::register(store, &format!("{prefix}.cls_route"), width)?)
        } else {
            None
        };
        Ok(Self {
            kpe,
            scanner,
            cls,
            width,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kpe.map_or(0, |k| k.param_count())
            + self.scanner.map_or(0, |s| s.param_count())
            + self.cls.map_or(0, |c| c.channels * CLS_KERNEL)
    }
}

/// Full block on `z: [B, T, N+1, C]`; the output has the same shape.
///
/// Without a scanner the encoder output replaces the patch tokens directly.
#[allow(clippy::too_many_arguments)]
pub fn pks4_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    params: &Pks4Params,
    cfg: &Pks4Config,
    z: Var<'t, T>,
    hp: usize,
    wp: usize,
    mode: ScanMode,
) -> Result<Var<'t, T>> {
    let s = z.shape();
    check_stream(&s, hp, wp)?;
    if s[3] != params.width {
        return Err(KinoError::shape("pks4_forward", &s, &[params.width]));
    }
    let (b, t, n, c) = (s[0], s[1], s[2] - 1, s[3]);
    let cls = z.narrow(2, 0, 1)?.reshape([b, t, c])?;
    let patches = z.narrow(2, 1, n)?;

    let encoded = match &params.kpe {
        Some(k) => kpe_forward(tape, store, k, &cfg.kpe, patches, hp, wp)?,
        None => patches,
    };
    let new_patches = match &params.scanner {
        Some(sp) => {
            let traj = encoded.permute(&[0, 2, 1, 3])?.reshape([b * n, t, c])?;
            let core = ks4_core(tape, store, sp, traj, mode)?;
            patches.add(core.reshape([b, n, t, c])?.permute(&[0, 2, 1, 3])?)?
        }
        None => encoded,
    };
    let new_cls = match &params.cls {
        Some(cp) => cls_temporal_var(tape, store, cp, cls)?,
        None => cls,
    };
    Var::concat(&[new_cls.reshape([b, t, 1, c])?, new_patches], 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn([2, 3, 5, 4], 1.0, &mut rng).unwrap();
        let tb = split_tokens(&z, 2, 2).unwrap();
        assert_eq!(tb.cls.shape(), &[2, 3, 4]);
        assert_eq!(tb.patches.shape(), &[2, 3, 4, 4]);
        assert_eq!(tb.concat().unwrap(), z);
        assert!(split_tokens(&z, 3, 1).is_err());
        assert!(split_tokens(&Tensor::<f64>::ones([1, 1, 1, 2]).unwrap(), 1, 1).is_err());
    }

    #[test]
    fn vit_b_stream_shapes() {
        let z = Tensor::<f32>::zeros([2, 8, 197, 512]).unwrap();
        let tb = split_tokens(&z, 14, 14).unwrap();
        assert_eq!(tb.cls.shape(), &[2, 8, 512]);
        assert_eq!(tb.patches.shape(), &[2, 8, 196, 512]);
    }

    #[test]
    fn trajectory_index_map() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 1], |i| i as f64).unwrap();
        let tr = make_trajectories(&x).unwrap();
        for n in 0..2 {
            for t in 0..2 {
                assert_eq!(tr.at(&[n, t, 0]), x.at(&[0, t, n, 0]));
            }
        }
        assert_eq!(reassemble_perm(&tr, 1).unwrap(), x);
        let zeros = Tensor::zeros([2, 2, 1]).unwrap();
        assert_eq!(reassemble(&zeros, &x).unwrap(), x);
    }

    #[test]
    fn cls_route_shift_boundaries() {
        let mut store = ParamStore::<f64>::new();
        let p = ClsRouteParams::register(&mut store, "cls", 8).unwrap();
        let one = Tensor::from_fn([1, 1, 8], |i| i as f64 + 1.0).unwrap();
        let out = cls_temporal(&store, &p, &one).unwrap();
        for c in 0..8 {
            let expect = if c < 4 { 0.0 } else { c as f64 + 1.0 };
            assert_eq!(out.at(&[0, 0, c]), expect);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = Tensor::randn([2, 5, 8], 1.0, &mut rng).unwrap();
        let out = cls_temporal(&store, &p, &seq).unwrap();
        for t in 0..5 {
            for c in 0..8 {
                let expect = match c {
                    0 | 1 => if t > 0 { seq.at(&[1, t - 1, c]) } else { 0.0 },
                    2 | 3 => if t < 4 { seq.at(&[1, t + 1, c]) } else { 0.0 },
                    _ => seq.at(&[1, t, c]),
                };
                assert_eq!(out.at(&[1, t, c]), expect);
            }
        }
        store.set_value(p.kernel, identity_kernel(8).unwrap()).unwrap();
        assert_eq!(cls_temporal(&store, &p, &seq).unwrap(), seq);
    }
}
