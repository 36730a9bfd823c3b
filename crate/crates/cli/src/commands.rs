use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use kino_core::checks::{grad_checks, identity_init, kpe_oracle, scan_equivalence};
use kino_core::cost::{complexity_probe, flops_forward, probe_csv, training_compute, ArchSpec, ProbeKernel, ViewSpec};
use kino_core::ks4::ScanMode;
use kino_core::pks4::Pks4Config;
use kino_core::synth::{generate_dataset, load_dataset, save_dataset, SyntheticVideoSpec, TaskMode};
use kino_core::train::{evaluate, train as train_loop, LAST_CHECKPOINT};
use kino_core::vit::VitModel;
use kino_core::ParamStore;
use serde_json::json;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::{OutArg, Outcome};

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PROBE_FILE: &str = "probe.csv";

pub const GRAD_TOL: f64 = 1e-4;
pub const SCAN_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-5;
pub const SCAN_EXPONENT: (f64, f64) = (0.8, 1.3);
pub const MIN_R2: f64 = 0.98;
pub const ATTENTION_EXPONENT: f64 = 1.7;

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Label the clips by motion direction or by object shape.
    #[arg(long, default_value = "motion")]
    mode: TaskMode,
    /// Number of clips; must be a multiple of the class count.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    /// Square canvas side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Dataset directory (manifest plus pixel blob).
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let mut spec = SyntheticVideoSpec { seed: a.seed, ..Default::default() };
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(n) = a.noise {
        spec.noise_std = n;
    }
    let ds = generate_dataset(&spec, a.mode, a.n)?;
    save_dataset(&ds, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    let mut per_class = vec![0usize; ds.num_classes()];
    for s in &ds.samples {
        per_class[s.label] += 1;
    }
    let text = format!(
        "wrote {} {} clips ({} per class) to {}\n",
        ds.len(),
        json!(a.mode).as_str().unwrap_or_default(),
        per_class[0],
        a.out.display()
    );
    Ok(Outcome {
        passed: true,
        text,
        summary: json!({
            "command": "gen-data",
            "passed": true,
            "mode": a.mode,
            "n": ds.len(),
            "per_class": per_class,
            "spec": spec,
        }),
        out: Some(a.out),
    })
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds initialization, shuffling and (for generated data) the dataset.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop early once validation top-1 reaches this; the run fails if it never does.
    #[arg(long)]
    target_top1: Option<f64>,
    #[arg(long)]
    mode: Option<TaskMode>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    /// Enable or disable the inserted temporal block.
    #[arg(long)]
    pks4: Option<bool>,
    #[arg(long)]
    context_frames: Option<usize>,
    #[arg(long)]
    scan_mode: Option<ScanMode>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.data.spec.seed = s;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.base_lr = v;
        }
        if let Some(v) = self.target_top1 {
            cfg.train.target_top1 = Some(v);
        }
        if let Some(v) = self.mode {
            cfg.data.mode = v;
        }
        if let Some(v) = self.n_train {
            cfg.data.n_train = v;
        }
        if let Some(v) = self.n_val {
            cfg.data.n_val = v;
        }
        if let Some(v) = self.pks4 {
            cfg.model.pks4_enabled = v;
        }
        if let Some(v) = self.context_frames {
            cfg.model.context_frames = v;
        }
        if let Some(v) = self.scan_mode {
            cfg.model.scan_mode = v;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        let Some(out) = cfg.out.clone() else {
            bail!("no output directory: pass --out or set \"out\" in the config");
        };
        cfg.train.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
        Ok((cfg, out))
    }
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let (cfg, out) = a.resolve()?;
    cfg.train.validate()?;
    let (train_set, val_set) = cfg.data.load()?;
    let vit = cfg.model.vit_config(&train_set.spec, train_set.num_classes())?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_json())?;

    let mut store = ParamStore::<f32>::new();
    let model = VitModel::new(&mut store, &vit, cfg.train.seed)?;
    let params = store.total_elements();
    let report = train_loop(&model, &mut store, &train_set, &val_set, &cfg.train, |h| {
        if let [tr, va] = &h[h.len() - 2..] {
            eprintln!(
                "epoch {:>3}  train loss {:.4} top1 {:.4}  val loss {:.4} top1 {:.4}  lr {:.3e}",
                tr.epoch, tr.loss, tr.top1, va.loss, va.top1, tr.lr
            );
        }
    })?;
    std::fs::write(out.join(HISTORY_FILE), report.csv())?;

    let passed = cfg.train.target_top1.is_none_or(|t| report.best_val_top1 >= t);
    let mut text = format!(
        "trained {} parameters for {} epochs: best val top-1 {:.4}, final {:.4}\n",
        params, report.epochs_run, report.best_val_top1, report.final_val_top1
    );
    if let Some(t) = cfg.train.target_top1 {
        let _ = writeln!(text, "[{}] val top-1 >= {t}", mark(passed));
    }
    let _ = writeln!(text, "history: {}", out.join(HISTORY_FILE).display());
    Ok(Outcome {
        passed,
        text,
        summary: json!({
            "command": "train",
            "passed": passed,
            "params": params,
            "epochs_run": report.epochs_run,
            "best_val_top1": report.best_val_top1,
            "final_val_top1": report.final_val_top1,
            "target_top1": cfg.train.target_top1,
            "history": HISTORY_FILE,
            "checkpoint": format!("{CHECKPOINT_DIR}/{LAST_CHECKPOINT}"),
        }),
        out: Some(out),
    })
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of the run's last one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; defaults to the run's validation split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Fail unless top-1 reaches this value.
    #[arg(long)]
    min_top1: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    let cfg = RunConfig::from_file(&a.run.join(RESOLVED_CONFIG))?;
    let ds = match &a.data {
        Some(d) => load_dataset(d).with_context(|| format!("loading {}", d.display()))?,
        None => cfg.data.load()?.1,
    };
    let vit = cfg.model.vit_config(&ds.spec, ds.num_classes())?;
    let mut store = ParamStore::<f32>::new();
    let model = VitModel::new(&mut store, &vit, cfg.train.seed)?;
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.run.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT));
    let saved = ParamStore::<f32>::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    store.load_values_from(&saved)?;
    let r = evaluate(&model, &store, &ds, a.k, cfg.train.batch_size, cfg.train.label_smoothing)?;
    let passed = a.min_top1.is_none_or(|t| r.top1 >= t);
    let mut text = format!(
        "{} clips: loss {:.4}  top-1 {:.4}  top-{} {:.4}\n",
        r.samples, r.loss, r.top1, r.k, r.topk
    );
    if let Some(t) = a.min_top1 {
        let _ = writeln!(text, "[{}] top-1 >= {t}", mark(passed));
    }
    Ok(Outcome {
        passed,
        text,
        summary: json!({
            "command": "eval",
            "passed": passed,
            "checkpoint": ckpt,
            "result": r,
            "min_top1": a.min_top1,
        }),
        out: a.out.out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    Grads,
    ScanEquiv,
    KpeOracle,
    IdentityInit,
    All,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    kind: CheckKind,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Sequence lengths for `scan-equiv`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,7,64,256,512")]
    t: Vec<usize>,
    /// Random draws per length for `scan-equiv`.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Random cases for `kpe-oracle`.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[command(flatten)]
    out: OutArg,
}

pub fn check(a: CheckArgs) -> Result<Outcome> {
    let run = |k: CheckKind| a.kind == k || a.kind == CheckKind::All;
    let mut text = String::new();
    let mut results = serde_json::Map::new();
    let mut passed = true;

    if run(CheckKind::Grads) {
        let reports = grad_checks(a.seed)?;
        for r in &reports {
            let ok = r.max_rel_error < GRAD_TOL;
            passed &= ok;
            let _ = writeln!(
                text,
                "[{}] grads {:<18} max rel error {:.3e} over {} coordinates",
                mark(ok),
                r.module,
                r.max_rel_error,
                r.coordinates
            );
        }
        results.insert("grads".into(), json!({ "tolerance": GRAD_TOL, "modules": reports }));
    }
    if run(CheckKind::ScanEquiv) {
        let r = scan_equivalence(&a.t, a.seeds)?;
        let ok = r.max_abs_diff < SCAN_TOL;
        passed &= ok;
        let _ = writeln!(
            text,
            "[{}] scan-equiv T={:?} x {} seeds: max abs diff {:.3e}",
            mark(ok),
            r.t_list,
            r.seeds,
            r.max_abs_diff
        );
        results.insert("scan_equiv".into(), json!({ "tolerance": SCAN_TOL, "passed": ok, "report": r }));
    }
    if run(CheckKind::KpeOracle) {
        let r = kpe_oracle(a.cases, a.seed)?;
        let ok = r.corr_max_abs_diff < ORACLE_TOL && r.var_max_abs_diff < ORACLE_TOL;
        passed &= ok;
        let _ = writeln!(
            text,
            "[{}] kpe-oracle {} cases: correlation {:.3e}, variation {:.3e}",
            mark(ok),
            r.cases,
            r.corr_max_abs_diff,
            r.var_max_abs_diff
        );
        results.insert("kpe_oracle".into(), json!({ "tolerance": ORACLE_TOL, "passed": ok, "report": r }));
    }
    if run(CheckKind::IdentityInit) {
        let r = identity_init(a.seed, &Pks4Config::default(), [2, 8, 4, 4, 16])?;
        let ok = r.patches_identical && r.block_identical;
        passed &= ok;
        let _ = writeln!(
            text,
            "[{}] identity-init: patches identical {}, whole block identical {}",
            mark(ok),
            r.patches_identical,
            r.block_identical
        );
        results.insert("identity_init".into(), json!({ "passed": ok, "report": r }));
    }
    results.insert("command".into(), json!("check"));
    results.insert("passed".into(), json!(passed));
    Ok(Outcome {
        passed,
        text,
        summary: results.into(),
        out: a.out.out,
    })
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `scan` (sequential), `scan-parallel`, `attention` or `constant`.
    #[arg(long, default_value = "scan")]
    kernel: String,
    /// Sequence lengths, strictly increasing, at least four.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    t: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[command(flatten)]
    out: OutArg,
}

fn parse_kernel(name: &str) -> Result<ProbeKernel> {
    Ok(match name {
        "scan" => ProbeKernel::ScanSequential,
        other => other.parse()?,
    })
}

pub fn bench(a: BenchArgs) -> Result<Outcome> {
    let kernel = parse_kernel(&a.kernel)?;
    let r = complexity_probe(kernel, &a.t, a.reps)?;
    let e = r.exponent();
    let (ok, rule) = match kernel {
        ProbeKernel::ScanSequential | ProbeKernel::ScanParallel => (
            (SCAN_EXPONENT.0..=SCAN_EXPONENT.1).contains(&e) && r.loglog.r2 >= MIN_R2,
            format!("exponent in [{}, {}] with R^2 >= {MIN_R2}", SCAN_EXPONENT.0, SCAN_EXPONENT.1),
        ),
        ProbeKernel::AttentionRef => (e >= ATTENTION_EXPONENT, format!("exponent >= {ATTENTION_EXPONENT}")),
        ProbeKernel::Constant => (true, "none".into()),
    };
    let mut text = String::new();
    for (t, s) in &r.medians {
        let _ = writeln!(text, "{:<16} T={t:<6} median {:.4e} s", kernel.name(), s);
    }
    let _ = writeln!(
        text,
        "[{}] {}: log-log exponent {:.3} (R^2 {:.4}), last doubling ratio {:.2}{}; rule: {rule}",
        mark(ok),
        kernel.name(),
        e,
        r.loglog.r2,
        r.doubling_ratio,
        if r.noisy { ", noisy timings" } else { "" }
    );
    if let Some(dir) = &a.out.out {
        write_file(dir, PROBE_FILE, &probe_csv(std::slice::from_ref(&r)))?;
    }
    Ok(Outcome {
        passed: ok,
        text,
        summary: json!({
            "command": "bench",
            "passed": ok,
            "kernel": kernel.name(),
            "exponent": e,
            "r2": r.loglog.r2,
            "rule": rule,
            "medians": r.medians,
            "doubling_ratio": r.doubling_ratio,
            "noisy": r.noisy,
        }),
        out: a.out.out,
    })
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// `vit-b16`, `vit-l14` or `tiny`.
    #[arg(long, default_value = "vit-b16")]
    arch: String,
    /// Frames x temporal clips x spatial crops.
    #[arg(long, default_value = "8x2x3")]
    views: ViewSpec,
    /// Report total training compute instead of per-inference cost.
    #[arg(long)]
    budget: bool,
    #[arg(long, requires = "budget")]
    epochs: Option<u64>,
    #[arg(long, requires = "budget")]
    ntrain: Option<u64>,
    /// Forward GFLOPs per training clip; defaults to the analytic total for `--arch`/`--views`.
    #[arg(long, requires = "budget")]
    gflops: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

pub fn cost(a: CostArgs) -> Result<Outcome> {
    if a.budget {
        let (Some(epochs), Some(n)) = (a.epochs, a.ntrain) else {
            bail!("--budget needs --epochs and --ntrain");
        };
        let g = match a.gflops {
            Some(g) => g,
            None => flops_forward(&ArchSpec::by_name(&a.arch)?, &a.views)?.total_gflops,
        };
        if !(g > 0.0 && g.is_finite()) {
            bail!("--gflops must be positive");
        }
        let e = training_compute(epochs, n, g);
        let text = format!("training compute {e:.4} EFLOPs ({epochs} epochs x {n} clips x {g} GFLOPs)\n");
        return Ok(Outcome {
            passed: true,
            text,
            summary: json!({
                "command": "cost",
                "passed": true,
                "epochs": epochs,
                "n_train": n,
                "gflops": g,
                "eflops": e,
            }),
            out: a.out.out,
        });
    }
    let report = flops_forward(&ArchSpec::by_name(&a.arch)?, &a.views)?;
    let mut summary = serde_json::to_value(&report)?;
    if let Some(m) = summary.as_object_mut() {
        m.insert("command".into(), json!("cost"));
        m.insert("passed".into(), json!(true));
    }
    Ok(Outcome {
        passed: true,
        text: report.table(),
        summary,
        out: a.out.out,
    })
}
