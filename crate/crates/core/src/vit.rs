//! Minimal ViT host: patch embedding, pre-norm attention/MLP blocks applied
//! per frame, an optional insertion block between two backbone layers, CLS
//! readout, temporal average pooling and a linear classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{KinoError, Result};
use crate::nn::{param_rng, Init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::pks4::{pks4_forward, Pks4Config, Pks4Params};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub frames: usize,
    /// 1-based index of the backbone block after which the insertion runs.
    pub insert_after: usize,
    pub pks4_enabled: bool,
    pub pks4: Pks4Config,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 4,
            heads: 4,
            width: 64,
            mlp_ratio: 4,
            num_classes: 4,
            frames: 8,
            insert_after: 2,
            pks4_enabled: true,
            pks4: Pks4Config::default(),
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(KinoError::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(KinoError::Config(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.depth < 2 || self.insert_after == 0 || self.insert_after >= self.depth {
            return Err(KinoError::Config(format!(
                "insert_after must lie in 1..{} (depth {})",
                self.depth.saturating_sub(1),
                self.depth
            )));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 || self.channels == 0 || self.frames == 0 {
            return Err(KinoError::Config("num_classes, mlp_ratio, channels and frames must be positive".into()));
        }
        self.pks4.validate()
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl BlockParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        let hidden = width * mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::register(store, &n("ln1"), width)?,
            qkv: Linear::register(store, seed, &n("attn.qkv"), width, 3 * width, true, Init::FanIn)?,
            proj: Linear::register(store, seed, &n("attn.proj"), width, width, true, Init::FanIn)?,
            ln2: LayerNorm::register(store, &n("ln2"), width)?,
            fc1: Linear::register(store, seed, &n("mlp.fc1"), width, hidden, true, Init::FanIn)?,
            fc2: Linear::register(store, seed, &n("mlp.fc2"), hidden, width, true, Init::FanIn)?,
            heads,
        })
    }
}

/// Linear classifier on the pooled feature.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub linear: Linear,
}

impl ClassifierParams {
    pub fn num_classes(&self) -> usize {
        self.linear.out_dim
    }
}

/// Multi-head self-attention over `x: [F, S, C]`, independently per frame.
/// Returns the output and the attention weights `[F·H, S, S]`.
pub fn attention<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    bp: &BlockParams,
    x: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = x.shape();
    let (f, n, c) = (s[0], s[1], s[2]);
    let h = bp.heads;
    let dh = c / h;
    let qkv = bp
        .qkv
        .forward(tape, store, x)?
        .reshape([f, n, 3, h, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.narrow(0, i, 1)?.reshape([f * h, n, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let weights = q.scale(1.0 / (dh as f64).sqrt())?.matmul_nt(k)?.softmax()?;
    let mixed = weights
        .matmul(v)?
        .reshape([f, h, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape([f, n, c])?;
    Ok((bp.proj.forward(tape, store, mixed)?, weights))
}

/// `Z' = Z + MSA(LN(Z))`, `Z'' = Z' + MLP(LN(Z'))` on `[F, S, C]`.
pub fn vit_block<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    bp: &BlockParams,
    z: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (att, _) = attention(tape, store, bp, bp.ln1.forward(tape, store, z)?)?;
    let z = z.add(att)?;
    let hidden = bp.fc1.forward(tape, store, bp.ln2.forward(tape, store, z)?)?.gelu()?;
    z.add(bp.fc2.forward(tape, store, hidden)?)
}

/// Non-overlapping patches of `[F, ch, H, W]` frames as rows
/// `[F, N, ch·p·p]`, patch index row-major, column order `(ch, dy, dx)`.
pub fn im2col<T: Scalar>(frames: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(KinoError::InvalidShape {
            shape: s.to_vec(),
            reason: "frames must be [F, channels, H, W]".into(),
        });
    }
    let (f, ch, hh, ww) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || hh % patch != 0 || ww % patch != 0 {
        return Err(KinoError::Config(format!(
            "frame size {hh}x{ww} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (hh / patch, ww / patch);
    let cols = ch * patch * patch;
    let src = frames.data();
    let mut out = vec![T::zero(); f * gh * gw * cols];
    for fi in 0..f {
        for py in 0..gh {
            for px in 0..gw {
                let row = ((fi * gh + py) * gw + px) * cols;
                for c in 0..ch {
                    for dy in 0..patch {
                        let sr = ((fi * ch + c) * hh + py * patch + dy) * ww + px * patch;
                        let dr = row + (c * patch + dy) * patch;
                        out[dr..dr + patch].copy_from_slice(&src[sr..sr + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![f, gh * gw, cols], out))
}

pub struct VitModel {
    pub cfg: VitConfig,
    pub patch: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNorm,
    pub head: ClassifierParams,
    pub pks4: Option<Pks4Params>,
}

impl VitModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let p = cfg.patch_size;
        let patch = Linear::register(store, seed, "patch_embed", cfg.channels * p * p, c, true, Init::FanIn)?;
        let cls_token = store.register("cls_token", Tensor::randn([c], 0.02, &mut param_rng(seed, "cls_token"))?)?;
        let tokens = cfg.num_patches() + 1;
        let pos_embed = store.register(
            "pos_embed",
            Tensor::randn([tokens, c], 0.02, &mut param_rng(seed, "pos_embed"))?,
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut pks4 = None;
        for i in 0..cfg.depth {
            blocks.push(BlockParams::register(
                store,
                seed,
                &format!("blocks.{i}"),
                c,
                cfg.heads,
                cfg.mlp_ratio,
            )?);
            if cfg.pks4_enabled && i + 1 == cfg.insert_after {
                pks4 = Some(Pks4Params::register(store, seed, "pks4", c, &cfg.pks4)?);
            }
        }
        let norm = LayerNorm::register(store, "norm", c)?;
        let head = ClassifierParams {
            linear: Linear::register(store, seed, "head", c, cfg.num_classes, true, Init::FanIn)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            pks4,
        })
    }

    /// Frames `[F, ch, H, W]` to tokens `[F, N+1, C]`.
    pub fn patch_embed<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        frames: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(KinoError::Config(format!(
                "expected [F, {}, {}, {}] frames, got {s:?}",
                self.cfg.channels, self.cfg.image_size, self.cfg.image_size
            )));
        }
        let f = s[0];
        let cols = tape.constant(im2col(frames, self.cfg.patch_size)?);
        let patches = self.patch.forward(tape, store, cols)?;
        let cls = tape
            .param(store, self.cls_token)
            .reshape([1, self.cfg.width])?
            .expand_leading(&[f])?;
        Var::concat(&[cls, patches], 1)?.add_broadcast(tape.param(store, self.pos_embed))
    }

    /// Logits `[B, num_classes]` for a clip batch `[B, T, ch, H, W]`.
    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, video: &Tensor<T>) -> Result<Var<'t, T>> {
        let s = video.shape();
        if s.len() != 5 {
            return Err(KinoError::InvalidShape {
                shape: s.to_vec(),
                reason: "video must be [B, T, channels, H, W]".into(),
            });
        }
        let (b, t) = (s[0], s[1]);
        let frames = video.reshape([b * t, s[2], s[3], s[4]])?;
        let mut z = self.patch_embed(tape, store, &frames)?;
        let tokens = self.cfg.num_patches() + 1;
        let c = self.cfg.width;
        let (hp, wp) = self.cfg.grid();
        for (i, bp) in self.blocks.iter().enumerate() {
            z = vit_block(tape, store, bp, z)?;
            if i + 1 == self.cfg.insert_after {
                if let Some(pp) = &self.pks4 {
                    let stream = z.reshape([b, t, tokens, c])?;
                    z = pks4_forward(tape, store, pp, &self.cfg.pks4, stream, hp, wp, self.cfg.pks4.ks4.mode)?
                        .reshape([b * t, tokens, c])?;
                }
            }
        }
        let cls = self.norm.forward(tape, store, z.narrow(1, 0, 1)?)?;
        let pooled = cls.reshape([b, t, c])?.mean_axis(1)?;
        self.head.linear.forward(tape, store, pooled)
    }

    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, video: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, store, video)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            heads: 2,
            width: 8,
            mlp_ratio: 2,
            frames: 3,
            insert_after: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_rules() {
        assert!(VitConfig { patch_size: 5, ..Default::default() }.validate().is_err());
        assert!(VitConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(VitConfig { insert_after: 4, ..Default::default() }.validate().is_err());
        let b16 = VitConfig { image_size: 224, patch_size: 16, ..Default::default() };
        assert_eq!(b16.num_patches() + 1, 197);
        assert_eq!(VitConfig::default().num_patches() + 1, 65);
    }

    #[test]
    fn im2col_layout() {
        let frames = Tensor::<f64>::from_fn([1, 2, 4, 4], |i| i as f64).unwrap();
        let cols = im2col(&frames, 2).unwrap();
        assert_eq!(cols.shape(), &[1, 4, 8]);
        // patch (py=1, px=0), channel 1, dy=1, dx=1
        assert_eq!(cols.at(&[0, 2, 4 + 2 + 1]), frames.at(&[0, 1, 3, 1]));
    }

    #[test]
    fn zero_image_zero_projection_gives_positions() {
        let mut store = ParamStore::<f64>::new();
        let cfg = tiny();
        let m = VitModel::new(&mut store, &cfg, 1).unwrap();
        store.set_value(m.patch.weight, Tensor::zeros([48, 8]).unwrap()).unwrap();
        let tape = Tape::new();
        let z = m.patch_embed(&tape, &store, &Tensor::zeros([2, 3, 8, 8]).unwrap()).unwrap().value();
        let pos = store.value(m.pos_embed);
        for f in 0..2 {
            for n in 1..5 {
                for c in 0..8 {
                    assert_eq!(z.at(&[f, n, c]), pos.at(&[n, c]));
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let bp = BlockParams::register(&mut store, 2, "b", 8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn([3, 5, 8], 1.0, &mut rng).unwrap());
        let (_, w) = attention(&tape, &store, &bp, x).unwrap();
        for row in w.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut store = ParamStore::<f64>::new();
        let bp = BlockParams::register(&mut store, 2, "b", 8, 2, 2).unwrap();
        store.set_value(bp.proj.weight, Tensor::zeros([8, 8]).unwrap()).unwrap();
        store.set_value(bp.fc2.weight, Tensor::zeros([16, 8]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([3, 5, 8], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        assert_eq!(vit_block(&tape, &store, &bp, tape.constant(x.clone())).unwrap().value(), x);
    }

    #[test]
    fn identical_frames_pool_to_single_frame_logits() {
        let mut store = ParamStore::<f64>::new();
        let cfg = VitConfig { pks4_enabled: false, ..tiny() };
        let m = VitModel::new(&mut store, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = Tensor::randn([1, 1, 3, 8, 8], 1.0, &mut rng).unwrap();
        let clip = Tensor::concat(&[&frame, &frame, &frame], 1).unwrap();
        let a = m.logits(&store, &frame).unwrap();
        let b = m.logits(&store, &clip).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        assert_eq!(b.shape(), &[1, 4]);
    }

    #[test]
    fn frame_order_is_ignored_without_scanner() {
        let mut store = ParamStore::<f64>::new();
        let cfg = VitConfig { pks4_enabled: false, ..tiny() };
        let m = VitModel::new(&mut store, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = Tensor::randn([2, 3, 3, 8, 8], 1.0, &mut rng).unwrap();
        let f: Vec<Tensor<f64>> = (0..3).map(|t| clip.narrow(1, t, 1).unwrap()).collect();
        let flipped = Tensor::concat(&[&f[2], &f[0], &f[1]], 1).unwrap();
        let a = m.logits(&store, &clip).unwrap();
        let b = m.logits(&store, &flipped).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
