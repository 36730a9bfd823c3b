//! Analytic FLOP and parameter accounting, plus wall-clock complexity probes.
//!
//! One multiply-accumulate counts as one FLOP unit. Elementwise work
//! (norms, activations, softmax) is not counted.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KinoError, Result};
use crate::ks4::{scan_parallel, scan_sequential, ScanInputs};
use crate::pks4::CLS_KERNEL;
use crate::tensor::Tensor;
use crate::vit::VitConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub vit: VitConfig,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, vit: VitConfig) -> Self {
        Self { name: name.into(), vit }
    }

    pub fn vit_b16() -> Self {
        let vit = VitConfig {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            heads: 12,
            width: 768,
            num_classes: 174,
            insert_after: 8,
            ..VitConfig::default()
        };
        Self::new("vit-b16", vit)
    }

    pub fn vit_l14() -> Self {
        let vit = VitConfig {
            image_size: 224,
            patch_size: 14,
            depth: 24,
            heads: 16,
            width: 1024,
            num_classes: 174,
            insert_after: 16,
            ..VitConfig::default()
        };
        Self::new("vit-l14", vit)
    }

    /// Recognizes `vit-b16`, `vit-l14` and `tiny` (the desk-scale default).
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace(['/', '_'], "-").as_str() {
            "vit-b16" | "vit-b-16" => Ok(Self::vit_b16()),
            "vit-l14" | "vit-l-14" => Ok(Self::vit_l14()),
            "tiny" => Ok(Self::new("tiny", VitConfig::default())),
            other => Err(KinoError::Config(format!(
                "unknown architecture '{other}' (expected vit-b16, vit-l14 or tiny)"
            ))),
        }
    }
}

/// `frames × temporal clips × spatial crops`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub frames: usize,
    pub clips: usize,
    pub crops: usize,
}

impl ViewSpec {
    pub fn new(frames: usize, clips: usize, crops: usize) -> Result<Self> {
        let v = Self { frames, clips, crops };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.clips == 0 || self.crops == 0 {
            return Err(KinoError::Config(format!("view counts must be positive, got {self}")));
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.clips * self.crops
    }

    pub fn frame_views(&self) -> usize {
        self.frames * self.views()
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.clips, self.crops)
    }
}

impl FromStr for ViewSpec {
    type Err = KinoError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', '×']).collect();
        let bad = || KinoError::Config(format!("views '{s}' must look like FRAMESxCLIPSxCROPS"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        Self::new(n[0], n[1], n[2])
    }
}

/// Per-component amounts, used for both FLOPs and parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub patch_embed: f64,
    pub msa: f64,
    pub mlp: f64,
    pub kpe_corr: f64,
    pub kpe_var: f64,
    pub scan: f64,
    pub cls_route: f64,
    pub head: f64,
}

impl Components {
    pub const NAMES: [&'static str; 8] =
        ["patch_embed", "msa", "mlp", "kpe_corr", "kpe_var", "scan", "cls_route", "head"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.patch_embed,
            self.msa,
            self.mlp,
            self.kpe_corr,
            self.kpe_var,
            self.scan,
            self.cls_route,
            self.head,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            patch_embed: self.patch_embed * k,
            msa: self.msa * k,
            mlp: self.mlp * k,
            kpe_corr: self.kpe_corr * k,
            kpe_var: self.kpe_var * k,
            scan: self.scan * k,
            cls_route: self.cls_route * k,
            head: self.head * k,
        }
    }

    pub fn pks4(&self) -> f64 {
        self.kpe_corr + self.kpe_var + self.scan + self.cls_route
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub views: ViewSpec,
    /// GFLOPs of one clip.
    pub per_clip_gflops: f64,
    /// GFLOPs over the full view set, split by component.
    pub gflops: Components,
    pub total_gflops: f64,
    pub params: Components,
    pub total_params: f64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!("arch {}  views {}  ({} clips)\n", self.arch, self.views, self.views.views());
        s += &format!("{:<12} {:>14} {:>14}\n", "component", "GFLOPs", "params");
        for ((name, g), p) in Components::NAMES.iter().zip(self.gflops.values()).zip(self.params.values()) {
            s += &format!("{name:<12} {g:>14.3} {p:>14.0}\n");
        }
        s += &format!("{:<12} {:>14.3} {:>14.0}\n", "total", self.total_gflops, self.total_params);
        s += &format!("{:<12} {:>14.3}\n", "per clip", self.per_clip_gflops);
        s
    }
}

struct Dims {
    c: f64,
    n: f64,
    s: f64,
    mlp: f64,
    patch_in: f64,
    n_tau: f64,
    win: f64,
    cr: f64,
    ci: f64,
    ds: f64,
    k_conv: f64,
}

fn dims(vit: &VitConfig) -> Dims {
    let c = vit.width;
    let p = &vit.pks4;
    let side = p.kpe.window_side();
    Dims {
        c: c as f64,
        n: vit.num_patches() as f64,
        s: (vit.num_patches() + 1) as f64,
        mlp: (vit.mlp_ratio * c) as f64,
        patch_in: (vit.channels * vit.patch_size * vit.patch_size) as f64,
        n_tau: p.kpe.offsets().len() as f64,
        win: (side * side) as f64,
        cr: p.kpe.bottleneck(c) as f64,
        ci: (p.ks4.expand * c) as f64,
        ds: p.ks4.d_state as f64,
        k_conv: p.ks4.conv_kernel as f64,
    }
}

/// FLOP units of one clip of `frames` frames.
pub fn clip_flops(vit: &VitConfig, frames: usize) -> Components {
    let d = dims(vit);
    let t = frames as f64;
    let depth = vit.depth as f64;
    let mut out = Components {
        patch_embed: t * d.n * d.patch_in * d.c,
        msa: depth * t * (4.0 * d.s * d.c * d.c + 2.0 * d.s * d.s * d.c),
        mlp: depth * t * 2.0 * d.s * d.c * d.mlp,
        head: d.c * vit.num_classes as f64,
        ..Components::default()
    };
    if !vit.pks4_enabled {
        return out;
    }
    let p = &vit.pks4;
    let tn = t * d.n;
    if p.kpe_enabled {
        if p.kpe.corr_active() {
            out.kpe_corr = tn * (d.c * d.cr + d.n_tau * d.win * d.cr + d.n_tau * d.win * d.c);
        }
        if p.kpe.var_active() {
            out.kpe_var = tn * (d.n_tau * d.c + d.n_tau * d.c * d.c);
        }
        out.kpe_var += tn * d.c * d.c;
    }
    if p.scan_enabled {
        let per_step = d.c * 2.0 * d.ci
            + d.ci * d.k_conv
            + d.ci * d.ci
            + 2.0 * d.ci * d.ds
            + 3.0 * d.ci * d.ds
            + d.ci * d.ds
            + 2.0 * d.ci
            + d.ci * d.c;
        out.scan = tn * per_step;
    }
    if p.cls_route {
        out.cls_route = t * d.c * CLS_KERNEL as f64;
    }
    out
}

/// Parameter counts matching the shapes registered by the model.
pub fn param_count(vit: &VitConfig) -> Components {
    let d = dims(vit);
    let c = d.c;
    let block = 2.0 * c + (c * 3.0 * c + 3.0 * c) + (c * c + c) + 2.0 * c + (c * d.mlp + d.mlp) + (d.mlp * c + c);
    let mut out = Components {
        patch_embed: d.patch_in * c + c + c + d.s * c,
        msa: 0.0,
        mlp: 0.0,
        head: 2.0 * c + c * vit.num_classes as f64 + vit.num_classes as f64,
        ..Components::default()
    };
    let attn = 2.0 * c + c * 3.0 * c + 3.0 * c + c * c + c;
    out.msa = vit.depth as f64 * attn;
    out.mlp = vit.depth as f64 * (block - attn);
    if !vit.pks4_enabled {
        return out;
    }
    let p = &vit.pks4;
    if p.kpe_enabled {
        if p.kpe.corr_active() {
            out.kpe_corr = c * d.cr + d.cr + d.n_tau * d.win * c;
        }
        if p.kpe.var_active() {
            out.kpe_var = d.n_tau * c * c;
        }
        out.kpe_var += c * c;
    }
    if p.scan_enabled {
        out.scan = 2.0 * c
            + (c * 2.0 * d.ci + 2.0 * d.ci)
            + d.ci * d.k_conv
            + (d.ci * d.ci + d.ci)
            + d.ci
            + 2.0 * d.ci * d.ds
            + d.ci * d.ds
            + d.ci
            + (d.ci * c + c);
    }
    if p.cls_route {
        out.cls_route = c * CLS_KERNEL as f64;
    }
    out
}

/// Forward cost of evaluating every view, in GFLOPs.
pub fn flops_forward(arch: &ArchSpec, views: &ViewSpec) -> Result<CostReport> {
    views.validate()?;
    let clip = clip_flops(&arch.vit, views.frames).scaled(1e-9);
    let gflops = clip.scaled(views.views() as f64);
    let params = param_count(&arch.vit);
    Ok(CostReport {
        arch: arch.name.clone(),
        views: *views,
        per_clip_gflops: clip.total(),
        total_gflops: gflops.total(),
        gflops,
        total_params: params.total(),
        params,
    })
}

/// `epochs · n_train · per_clip_gflops` in EFLOPs.
pub fn training_compute(epochs: u64, n_train: u64, per_clip_gflops: f64) -> f64 {
    epochs as f64 * n_train as f64 * per_clip_gflops * 1e9 / 1e18
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKernel {
    ScanSequential,
    ScanParallel,
    AttentionRef,
    /// Fixed work regardless of `T`.
    Constant,
}

impl ProbeKernel {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKernel::ScanSequential => "scan_sequential",
            ProbeKernel::ScanParallel => "scan_parallel",
            ProbeKernel::AttentionRef => "attention_ref",
            ProbeKernel::Constant => "constant",
        }
    }
}

impl FromStr for ProbeKernel {
    type Err = KinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan_sequential" | "scan-sequential" => Ok(ProbeKernel::ScanSequential),
            "scan_parallel" | "scan-parallel" => Ok(ProbeKernel::ScanParallel),
            "attention_ref" | "attention-ref" | "attention" => Ok(ProbeKernel::AttentionRef),
            "constant" => Ok(ProbeKernel::Constant),
            other => Err(KinoError::Config(format!("unknown probe kernel '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeSample {
    pub t: usize,
    pub rep: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    LineFit { slope, intercept, r2 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kernel: ProbeKernel,
    pub samples: Vec<ProbeSample>,
    /// `(T, median seconds)`
    pub medians: Vec<(usize, f64)>,
    /// Fit of `ln(time)` against `ln(T)`.
    pub loglog: LineFit,
    /// Fit of `time` against `T`.
    pub linear: LineFit,
    /// `time(T_max) / time(T_prev)` for the last pair.
    pub doubling_ratio: f64,
    /// Some point had IQR / median above 0.5.
    pub noisy: bool,
}

impl ProbeReport {
    pub fn exponent(&self) -> f64 {
        self.loglog.slope
    }
}

pub const PROBE_CSV_HEADER: &str = "kernel,T,rep,seconds";

pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut s = String::from(PROBE_CSV_HEADER);
    s.push('\n');
    for r in reports {
        for p in &r.samples {
            s += &format!("{},{},{},{:.9e}\n", r.kernel.name(), p.t, p.rep, p.seconds);
        }
    }
    s
}

const PROBE_LANES: usize = 64;
const PROBE_MIN_SECONDS: f64 = 0.03;
const PROBE_INNER: usize = 4;
const PROBE_STATE: usize = 16;
const PROBE_DIM: usize = 32;

fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn scan_case(t: usize, rng: &mut ChaCha8Rng) -> (ScanInputs<f32>, Tensor<f32>) {
    let (l, c, s) = (PROBE_LANES, PROBE_INNER, PROBE_STATE);
    let inputs = ScanInputs {
        a_bar: random_tensor(&[l, t, c, s], 0.5, 1.0, rng),
        bx: random_tensor(&[l, t, c, s], -1.0, 1.0, rng),
        c_seq: random_tensor(&[l, t, s], -1.0, 1.0, rng),
        x: random_tensor(&[l, t, c], -1.0, 1.0, rng),
    };
    (inputs, random_tensor(&[c], -1.0, 1.0, rng))
}

/// Single-head softmax attention over `t` tokens, written as plain loops.
pub fn attention_reference(q: &[f32], k: &[f32], v: &[f32], t: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; t * d];
    let mut row = vec![0.0f32; t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let mut mx = f32::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            mx = mx.max(*r);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - mx).exp();
            z += *r;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &w) in row.iter().enumerate() {
            let vj = &v[j * d..(j + 1) * d];
            for (o, &x) in oi.iter_mut().zip(vj) {
                *o += w / z * x;
            }
        }
    }
    out
}

fn constant_work(data: &[f32]) -> f32 {
    data.iter().fold(0.0f32, |acc, &x| acc.mul_add(0.999, x))
}

/// Repeats `f` until at least `PROBE_MIN_SECONDS` have elapsed and returns
/// the mean seconds per call.
fn time_calls<R>(mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        std::hint::black_box(f()?);
        calls += 1;
        let el = start.elapsed().as_secs_f64();
        if el >= PROBE_MIN_SECONDS {
            return Ok(el / calls as f64);
        }
    }
}

enum ProbeCase {
    Scan(ScanInputs<f32>, Tensor<f32>),
    Dense(Tensor<f32>),
}

fn make_case(kernel: ProbeKernel, t: usize, rng: &mut ChaCha8Rng) -> ProbeCase {
    match kernel {
        ProbeKernel::ScanSequential | ProbeKernel::ScanParallel => {
            let (inputs, d) = scan_case(t, rng);
            ProbeCase::Scan(inputs, d)
        }
        ProbeKernel::AttentionRef => ProbeCase::Dense(random_tensor(&[3, t, PROBE_DIM], -1.0, 1.0, rng)),
        ProbeKernel::Constant => ProbeCase::Dense(random_tensor(&[1 << 16], -1.0, 1.0, rng)),
    }
}

fn time_case(kernel: ProbeKernel, t: usize, case: &ProbeCase) -> Result<f64> {
    match (kernel, case) {
        (ProbeKernel::ScanSequential, ProbeCase::Scan(inputs, d)) => time_calls(|| scan_sequential(inputs, d)),
        (ProbeKernel::ScanParallel, ProbeCase::Scan(inputs, d)) => time_calls(|| scan_parallel(inputs, d)),
        (ProbeKernel::AttentionRef, ProbeCase::Dense(m)) => {
            let (q, rest) = m.data().split_at(t * PROBE_DIM);
            let (k, v) = rest.split_at(t * PROBE_DIM);
            time_calls(|| Ok(attention_reference(q, k, v, t, PROBE_DIM)))
        }
        (ProbeKernel::Constant, ProbeCase::Dense(m)) => time_calls(|| Ok(constant_work(m.data()))),
        _ => unreachable!("probe case built for another kernel"),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `kernel` at each `T` on a single worker and fits its scaling.
pub fn complexity_probe(kernel: ProbeKernel, t_list: &[usize], reps: usize) -> Result<ProbeReport> {
    if t_list.len() < 4 || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(KinoError::Config("T list must be positive, strictly increasing and have at least 4 points".into()));
    }
    if reps == 0 {
        return Err(KinoError::Config("reps must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| KinoError::Config(format!("worker pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    pool.install(|| {
        let cases: Vec<ProbeCase> = t_list.iter().map(|&t| make_case(kernel, t, &mut rng)).collect();
        time_case(kernel, t_list[0], &cases[0])?;
        // interleave sizes so slow stretches of the host hit every T alike
        let mut times = vec![Vec::with_capacity(reps); t_list.len()];
        let mut samples = Vec::new();
        for rep in 0..reps {
            for (i, &t) in t_list.iter().enumerate() {
                let s = time_case(kernel, t, &cases[i])?;
                samples.push(ProbeSample { t, rep, seconds: s });
                times[i].push(s);
            }
        }
        let mut medians = Vec::new();
        let mut noisy = false;
        for (&t, ts) in t_list.iter().zip(times.iter_mut()) {
            ts.sort_by(f64::total_cmp);
            let med = quantile(ts, 0.5);
            if med > 0.0 && (quantile(ts, 0.75) - quantile(ts, 0.25)) / med > 0.5 {
                noisy = true;
            }
            medians.push((t, med));
        }
        let xs: Vec<f64> = medians.iter().map(|m| m.0 as f64).collect();
        let ys: Vec<f64> = medians.iter().map(|m| m.1).collect();
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.max(1e-12).ln()).collect();
        let n = ys.len();
        Ok(ProbeReport {
            kernel,
            samples,
            loglog: fit_line(&lx, &ly),
            linear: fit_line(&xs, &ys),
            doubling_ratio: ys[n - 1] / ys[n - 2],
            medians,
            noisy,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::vit::VitModel;

    fn within(actual: f64, expected: f64, rel: f64) -> bool {
        ((actual - expected) / expected).abs() <= rel
    }

    #[test]
    fn backbone_frame_cost_near_reference() {
        let mut vit = ArchSpec::vit_b16().vit;
        vit.pks4_enabled = false;
        let per_frame = clip_flops(&vit, 1).total() * 1e-9;
        assert!(within(per_frame, 17.6, 0.02), "{per_frame}");
    }

    #[test]
    fn table_rows() {
        let b = ArchSpec::vit_b16();
        let l = ArchSpec::vit_l14();
        let rows = [
            (&b, ViewSpec::new(8, 2, 3).unwrap(), 874.0),
            (&b, ViewSpec::new(32, 1, 3).unwrap(), 1745.0),
            (&l, ViewSpec::new(16, 1, 3).unwrap(), 3857.4),
            (&l, ViewSpec::new(32, 1, 3).unwrap(), 7713.6),
        ];
        for (arch, v, want) in rows {
            let r = flops_forward(arch, &v).unwrap();
            assert!(within(r.total_gflops, want, 0.10), "{} {v}: {}", arch.name, r.total_gflops);
            assert!((r.total_gflops - r.gflops.total()).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_rows() {
        assert!(within(training_compute(20, 168_913, 874.0), 2.9521, 1e-3));
        assert!(within(training_compute(15, 168_913, 3857.4), 9.7810, 2e-3));
        assert_eq!(training_compute(0, 10, 5.0), 0.0);
    }

    #[test]
    fn scan_flops_linear_and_msa_quadratic() {
        let vit = ArchSpec::vit_b16().vit;
        let a = clip_flops(&vit, 8);
        let b = clip_flops(&vit, 16);
        assert_eq!(b.scan, 2.0 * a.scan);
        let mut small = vit.clone();
        small.image_size = 112;
        let s = clip_flops(&small, 8);
        let attn = |c: &Components, v: &VitConfig| {
            let n = (v.num_patches() + 1) as f64;
            let lin = v.depth as f64 * 8.0 * 4.0 * n * v.width as f64 * v.width as f64;
            (c.msa - lin, n)
        };
        let (qa, na) = attn(&a, &vit);
        let (qs, ns) = attn(&s, &small);
        assert!(((qa / qs) - (na / ns).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn exact_view_scaling() {
        let b = ArchSpec::vit_b16();
        let r1 = flops_forward(&b, &"8x2x3".parse().unwrap()).unwrap();
        let r2 = flops_forward(&b, &"8x1x3".parse().unwrap()).unwrap();
        assert!((r1.total_gflops / r2.total_gflops - 2.0).abs() < 1e-12);
    }

    #[test]
    fn param_counts_match_registered_model() {
        let mut cfgs = vec![VitConfig::default()];
        let mut off = VitConfig::default();
        off.pks4_enabled = false;
        cfgs.push(off);
        let mut var_only = VitConfig::default();
        var_only.pks4.kpe.enable_corr = false;
        cfgs.push(var_only);
        for cfg in cfgs {
            let mut store = ParamStore::<f32>::new();
            VitModel::new(&mut store, &cfg, 0).unwrap();
            assert_eq!(param_count(&cfg).total() as usize, store.total_elements());
        }
    }

    #[test]
    fn reference_param_counts() {
        let mut b = ArchSpec::vit_b16().vit;
        b.pks4_enabled = false;
        assert!(within(param_count(&b).total(), 86.34e6, 0.03));
        let mut c512 = ArchSpec::vit_b16().vit;
        c512.width = 512;
        c512.heads = 8;
        let delta = param_count(&c512).pks4();
        assert!((1e6..10e6).contains(&delta), "{delta}");
        let head = param_count(&b).head - 2.0 * b.width as f64;
        assert_eq!(head, (b.width * b.num_classes + b.num_classes) as f64);
    }

    #[test]
    fn views_parse() {
        assert_eq!("8x2x3".parse::<ViewSpec>().unwrap(), ViewSpec { frames: 8, clips: 2, crops: 3 });
        assert!("8x0x3".parse::<ViewSpec>().is_err());
        assert!("8x2".parse::<ViewSpec>().is_err());
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        let f = fit_line(&x, &y);
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_short_lists() {
        assert!(complexity_probe(ProbeKernel::Constant, &[1, 2, 3], 1).is_err());
        assert!(complexity_probe(ProbeKernel::Constant, &[1, 2, 2, 3], 1).is_err());
    }

    #[test]
    fn attention_reference_uniform_keys() {
        let t = 3;
        let q = vec![1.0; t * 2];
        let k = vec![0.5; t * 2];
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let o = attention_reference(&q, &k, &v, t, 2);
        assert!((o[0] - 3.0).abs() < 1e-6 && (o[1] - 4.0).abs() < 1e-6);
    }
}
