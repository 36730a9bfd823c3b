//! Self-checks shared by the test suites and the `check` command: brute-force
//! references for the motion-prior signals, scan mode equivalence, gradient
//! checks of every learnable module and the identity-at-initialization
//! contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{KinoError, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::kpe::{correlation_scores, kpe_forward, normalize_channels, variation_signals, KpeConfig, KpeParams, PatchGrid};
use crate::ks4::{discretize_steps, ks4_forward_var, scan_parallel, scan_sequential, Ks4Config, ScanInputs, ScanMode, ScannerParams};
use crate::params::ParamStore;
use crate::pks4::{identity_kernel, pks4_forward, split_tokens, Pks4Config, Pks4Params};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{VitConfig, VitModel};

/// Six nested loops over `[B, T, n_τ, (2r+1)², Hp, Wp]` with zero padding.
pub fn reference_correlation<T: Scalar>(grid: &PatchGrid<T>, offsets: &[isize], r: usize) -> Result<Tensor<T>> {
    let (b, t, c, hp, wp) = grid.dims();
    let side = 2 * r + 1;
    let g = grid.data();
    let ri = r as isize;
    let mut out = Tensor::zeros([b, t, offsets.len(), side * side, hp, wp])?;
    let o = out.make_mut();
    let mut idx = 0;
    for bb in 0..b {
        for tt in 0..t {
            for &tau in offsets {
                for v in -ri..=ri {
                    for u in -ri..=ri {
                        for y in 0..hp {
                            for x in 0..wp {
                                let t2 = tt as isize + tau;
                                let (y2, x2) = (y as isize + v, x as isize + u);
                                let inside = (0..t as isize).contains(&t2)
                                    && (0..hp as isize).contains(&y2)
                                    && (0..wp as isize).contains(&x2);
                                if inside {
                                    let mut acc = T::zero();
                                    for ch in 0..c {
                                        acc += g.at(&[bb, tt, ch, y, x])
                                            * g.at(&[bb, t2 as usize, ch, y2 as usize, x2 as usize]);
                                    }
                                    o[idx] = acc;
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `f_{t+τ}(p) - f_t(p)` with the time index clamped into range.
pub fn reference_variation<T: Scalar>(grid: &PatchGrid<T>, offsets: &[isize]) -> Result<Tensor<T>> {
    let (b, t, c, hp, wp) = grid.dims();
    let g = grid.data();
    Tensor::from_fn([b, t, offsets.len(), c, hp, wp], |i| {
        let x = i % wp;
        let y = (i / wp) % hp;
        let ch = (i / (wp * hp)) % c;
        let k = (i / (wp * hp * c)) % offsets.len();
        let tt = (i / (wp * hp * c * offsets.len())) % t;
        let bb = i / (wp * hp * c * offsets.len() * t);
        let t2 = (tt as isize + offsets[k]).clamp(0, t as isize - 1) as usize;
        g.at(&[bb, t2, ch, y, x]) - g.at(&[bb, tt, ch, y, x])
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub cases: usize,
    pub corr_max_abs_diff: f64,
    pub var_max_abs_diff: f64,
}

/// Compares the fast correlation and variation kernels with the references on
/// `cases` random single-precision instances.
pub fn kpe_oracle(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport {
        cases,
        corr_max_abs_diff: 0.0,
        var_max_abs_diff: 0.0,
    };
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(case as u64);
        let b = rng.random_range(1..=2);
        let t = rng.random_range(1..=5);
        let c = rng.random_range(1..=6);
        let hp = rng.random_range(1..=5);
        let wp = rng.random_range(1..=5);
        let cfg = KpeConfig {
            context_frames: 2 * rng.random_range(1..=2),
            window_radius: rng.random_range(0..=2),
            ..KpeConfig::default()
        };
        let raw = PatchGrid::new(Tensor::<f32>::uniform([b, t, c, hp, wp], 1.0, &mut rng)?)?;
        let grid = normalize_channels(&raw, cfg.norm_eps)?;
        let offsets = cfg.offsets();
        let vol = correlation_scores(&grid, &cfg)?;
        let fast = vol.scores.ok_or_else(|| KinoError::Oracle("empty volume with context".into()))?;
        let want = reference_correlation(&grid, &offsets, cfg.window_radius)?;
        report.corr_max_abs_diff = report.corr_max_abs_diff.max(fast.max_abs_diff(&want)?);
        let fast = variation_signals(&raw, &cfg)?.ok_or_else(|| KinoError::Oracle("no variation signals".into()))?;
        let want = reference_variation(&raw, &offsets)?;
        report.var_max_abs_diff = report.var_max_abs_diff.max(fast.max_abs_diff(&want)?);
    }
    Ok(report)
}

/// Scan inputs drawn the way the scanner produces them: step sizes in
/// `[1e-3, 1e-1]`, `A = -(1..=d_s)`, unit-range `B`, `C`, `x`.
pub fn random_scan_inputs<T: Scalar>(
    lanes: usize,
    t: usize,
    c: usize,
    s: usize,
    rng: &mut impl Rng,
) -> Result<(ScanInputs<T>, Tensor<T>)> {
    let delta = Tensor::from_fn([lanes, t, c], |_| T::lit(rng.random_range(1e-3..1e-1)))?;
    let a = Tensor::from_fn([c, s], |i| T::lit(-(((i % s) + 1) as f64)))?;
    let b_seq = Tensor::uniform([lanes, t, s], 1.0, rng)?;
    let c_seq = Tensor::uniform([lanes, t, s], 1.0, rng)?;
    let x = Tensor::uniform([lanes, t, c], 1.0, rng)?;
    let d = Tensor::uniform([c], 1.0, rng)?;
    let (a_bar, bx) = discretize_steps(&delta, &a, &b_seq, &x)?;
    Ok((ScanInputs { a_bar, bx, c_seq, x }, d))
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanEquivReport {
    pub t_list: Vec<usize>,
    pub seeds: usize,
    pub max_abs_diff: f64,
    /// Worst `(T, seed)`.
    pub worst: (usize, u64),
}

/// Single-precision sequential vs. prefix scan over every `T` and seed.
pub fn scan_equivalence(t_list: &[usize], seeds: usize) -> Result<ScanEquivReport> {
    let mut report = ScanEquivReport {
        t_list: t_list.to_vec(),
        seeds,
        max_abs_diff: 0.0,
        worst: (t_list.first().copied().unwrap_or(0), 0),
    };
    for &t in t_list {
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let (inputs, d) = random_scan_inputs::<f32>(3, t, 8, 16, &mut rng)?;
            let diff = scan_sequential(&inputs, &d)?.max_abs_diff(&scan_parallel(&inputs, &d)?)?;
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
                report.worst = (t, seed);
            }
        }
    }
    Ok(report)
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`; step-size
/// biases and log-transitions keep values in their usable range.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.value(id).shape().to_vec();
        let value = if name.ends_with("a_log") {
            Tensor::from_fn(shape, |_| rng.random_range(-0.5..1.0))?
        } else if name.ends_with("b_delta") {
            Tensor::from_fn(shape, |_| rng.random_range(-0.5..1.0))?
        } else if name.ends_with(".gamma") {
            Tensor::from_fn(shape, |_| rng.random_range(0.5..1.5))?
        } else {
            Tensor::uniform(shape, scale, &mut rng)?
        };
        store.set_value(id, value)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleGradReport {
    pub module: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl ModuleGradReport {
    fn from_report(module: &str, r: GradCheckReport) -> Self {
        Self {
            module: module.into(),
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            coordinates: r.coordinates,
        }
    }
}

const GRAD_STEP: f64 = 1e-4;

fn weighted_sum<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    y.mul(tape.constant(w.clone()))?.sum()
}

fn probe_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Tiny block configuration used by the gradient checks.
pub fn tiny_pks4_config() -> Pks4Config {
    Pks4Config {
        kpe: KpeConfig {
            context_frames: 2,
            window_radius: 1,
            bottleneck_dim: Some(2),
            ..KpeConfig::default()
        },
        ks4: Ks4Config {
            expand: 2,
            d_state: 3,
            conv_kernel: 2,
            ..Ks4Config::default()
        },
        ..Pks4Config::default()
    }
}

/// Gradient check of the full block on `[1, 4, 1 + 3·3, 4]`, input included.
pub fn grad_check_pks4(seed: u64, mode: ScanMode) -> Result<GradCheckReport> {
    grad_check_pks4_step(seed, mode, GRAD_STEP)
}

#[doc(hidden)]
pub fn grad_check_pks4_step(seed: u64, mode: ScanMode, step: f64) -> Result<GradCheckReport> {
    let (b, t, hp, wp, c) = (1, 4, 3, 3, 4);
    let cfg = tiny_pks4_config();
    let mut store = ParamStore::<f64>::new();
    let params = Pks4Params::register(&mut store, seed, "pks4", c, &cfg)?;
    let z = store.register("input", Tensor::zeros([b, t, hp * wp + 1, c])?)?;
    randomize(&mut store, seed, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = probe_weights(&[b, t, hp * wp + 1, c], &mut rng)?;
    finite_diff_check(&store, step, |tape, s| {
        let y = pks4_forward(tape, s, &params, &cfg, tape.param(s, z), hp, wp, mode)?;
        weighted_sum(tape, y, &w)
    })
}

/// Gradient check of every learnable module on tiny double-precision shapes.
pub fn grad_checks(seed: u64) -> Result<Vec<ModuleGradReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);

    {
        let (b, t, hp, wp, c) = (1, 4, 3, 3, 4);
        let cfg = tiny_pks4_config().kpe;
        let mut store = ParamStore::<f64>::new();
        let params = KpeParams::register(&mut store, seed, "kpe", c, &cfg)?;
        let x = store.register("input", Tensor::zeros([b, t, hp * wp, c])?)?;
        randomize(&mut store, seed, 0.5)?;
        let w = probe_weights(&[b, t, hp * wp, c], &mut rng)?;
        let r = finite_diff_check(&store, GRAD_STEP, |tape, s| {
            let y = kpe_forward(tape, s, &params, &cfg, tape.param(s, x), hp, wp)?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(ModuleGradReport::from_report("kpe", r));
    }

    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let (l, t, c) = (3, 5, 4);
        let cfg = tiny_pks4_config().ks4;
        let mut store = ParamStore::<f64>::new();
        let params = ScannerParams::register(&mut store, seed, "ks4", c, &cfg)?;
        let u = store.register("input", Tensor::zeros([l, t, c])?)?;
        randomize(&mut store, seed, 0.5)?;
        let w = probe_weights(&[l, t, c], &mut rng)?;
        let r = finite_diff_check(&store, GRAD_STEP, |tape, s| {
            let y = ks4_forward_var(tape, s, &params, tape.param(s, u), mode)?;
            weighted_sum(tape, y, &w)
        })?;
        let name = match mode {
            ScanMode::Sequential => "ks4 (sequential)",
            ScanMode::Parallel => "ks4 (parallel)",
        };
        out.push(ModuleGradReport::from_report(name, r));
    }

    out.push(ModuleGradReport::from_report("pks4", grad_check_pks4(seed, ScanMode::Sequential)?));

    {
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            heads: 2,
            width: 4,
            mlp_ratio: 2,
            num_classes: 3,
            frames: 4,
            insert_after: 1,
            pks4: tiny_pks4_config(),
            ..VitConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let model = VitModel::new(&mut store, &cfg, seed)?;
        randomize(&mut store, seed, 0.5)?;
        let video = Tensor::uniform([1, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng)?;
        let w = probe_weights(&[1, cfg.num_classes], &mut rng)?;
        let r = finite_diff_check(&store, GRAD_STEP, |tape, s| {
            let y = model.forward(tape, s, &video)?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(ModuleGradReport::from_report("vit", r));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    /// Patch tokens unchanged bit for bit at initialization.
    pub patches_identical: bool,
    /// Whole stream unchanged once the temporal kernels are set to identity.
    pub block_identical: bool,
}

fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs a freshly initialized block on a random stream.
pub fn identity_init(seed: u64, cfg: &Pks4Config, dims: [usize; 5]) -> Result<IdentityReport> {
    let [b, t, hp, wp, c] = dims;
    let mut store = ParamStore::<f32>::new();
    let params = Pks4Params::register(&mut store, seed, "pks4", c, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::<f32>::uniform([b, t, hp * wp + 1, c], 1.0, &mut rng)?;
    let run = |store: &ParamStore<f32>| -> Result<Tensor<f32>> {
        let tape = Tape::new();
        Ok(pks4_forward(&tape, store, &params, cfg, tape.constant(z.clone()), hp, wp, cfg.ks4.mode)?.value())
    };
    let y = run(&store)?;
    let split_in = split_tokens(&z, hp, wp)?;
    let split_out = split_tokens(&y, hp, wp)?;
    let patches_identical = bits_equal(&split_in.patches, &split_out.patches);
    if let Some(cp) = params.cls {
        store.set_value(cp.kernel, identity_kernel(c)?)?;
    }
    let block_identical = bits_equal(&z, &run(&store)?);
    Ok(IdentityReport {
        patches_identical,
        block_identical,
    })
}
