//! Loss, optimizer, schedules and the train/eval loops.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{KinoError, Result};
use crate::params::ParamStore;
use crate::synth::VideoDataset;
use crate::tensor::{Scalar, Tensor};
use crate::vit::VitModel;

/// Label-smoothed targets for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedTargets {
    pub q: Vec<f64>,
    pub smoothing: f64,
}

impl SmoothedTargets {
    pub fn new(label: usize, num_classes: usize, smoothing: f64) -> Result<Self> {
        if label >= num_classes {
            return Err(KinoError::Argument(format!("label {label} out of range for {num_classes} classes")));
        }
        let off = smoothing / num_classes as f64;
        let mut q = vec![off; num_classes];
        q[label] += 1.0 - smoothing;
        Ok(Self { q, smoothing })
    }
}

/// Mean over the batch of `-Σ_c q_c log softmax(logits)_c`.
pub fn cross_entropy_smoothed<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize], smoothing: f64) -> Result<Var<'t, T>> {
    let x = logits.value();
    let s = x.shape().to_vec();
    if s.len() != 2 || s[1] < 2 || s[0] != labels.len() {
        return Err(KinoError::Argument(format!(
            "logits {s:?} do not match {} labels with at least two classes",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(KinoError::Argument(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let (b, k) = (s[0], s[1]);
    let mut q = Vec::with_capacity(b * k);
    for &l in labels {
        q.extend(SmoothedTargets::new(l, k, smoothing)?.q.into_iter().map(T::lit));
    }
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for r in 0..b {
        let row = &x.data()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln() + m;
        for c in 0..k {
            probs[r * k + c] = (row[c] - lz).exp();
            total -= q[r * k + c] * (row[c] - lz);
        }
    }
    let inv_b = T::lit(1.0 / b as f64);
    logits.tape().push_op(
        "cross_entropy_smoothed",
        Tensor::scalar(total * inv_b),
        &[logits],
        Box::new(move |g, _| {
            let go = g.data()[0] * inv_b;
            let gx = probs.iter().zip(&q).map(|(&p, &t)| (p - t) * go).collect();
            Ok(vec![Some(Tensor::from_raw(vec![b, k], gx))])
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Whether weight decay applies to a parameter of this name.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("b_delta")
        || name.ends_with("a_log"))
}

/// Decoupled-weight-decay Adam with per-parameter state.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay_mask: Vec<bool>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Result<Self> {
        let mut m = Vec::with_capacity(store.len());
        let mut decay_mask = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            m.push(Tensor::zeros(p.value.shape().to_vec())?);
            decay_mask.push(decays(&p.name));
        }
        Ok(Self {
            cfg,
            v: m.clone(),
            m,
            decay_mask,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients held in `store`. `lr_scale[i]` multiplies
    /// the learning rate of the `i`-th parameter in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, lr_scale: &[f64]) -> Result<()> {
        if lr_scale.len() != store.len() || self.m.len() != store.len() {
            return Err(KinoError::Contract("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr_i = lr * lr_scale[i];
            let step = T::lit(lr_i / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(c.eps);
            let decay = if self.decay_mask[i] { T::lit(1.0 - lr_i * c.weight_decay) } else { T::one() };
            let g = store.grad(id).clone();
            let m = self.m[i].make_mut();
            let v = self.v[i].make_mut();
            let p = store.value_mut(id).make_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
            if let Some(k) = p.iter().position(|x| !x.is_finite()) {
                return Err(KinoError::NonFinite { op: "adamw", index: k });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub layer_decay: f64,
}

impl Schedule {
    pub fn from_epochs(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize, layer_decay: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: total_epochs * steps_per_epoch,
            layer_decay,
        }
    }

    /// Learning rate for optimizer step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        let span = self.total_steps.saturating_sub(w);
        if span == 0 {
            return self.base_lr;
        }
        let p = ((step - w) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// `decay^(depth - layer)` for backbone layer `layer` (0 = embedding).
pub fn layer_multiplier(decay: f64, layer: usize, depth: usize) -> f64 {
    decay.powi(depth.saturating_sub(layer) as i32)
}

/// Learning-rate multiplier for a parameter of the host model. Inserted and
/// classifier parameters are exempt from layer decay.
pub fn param_multiplier(name: &str, decay: f64, depth: usize) -> f64 {
    if name.starts_with("pks4.") || name.starts_with("head.") {
        return 1.0;
    }
    if let Some(rest) = name.strip_prefix("blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return layer_multiplier(decay, i + 1, depth);
        }
    }
    if name.starts_with("patch_embed") || name == "cls_token" || name == "pos_embed" {
        return layer_multiplier(decay, 0, depth);
    }
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop after the first epoch whose validation top-1 reaches this value.
    pub target_top1: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 2,
            layer_decay: 0.75,
            label_smoothing: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            target_top1: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(KinoError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(KinoError::Config("base_lr must be positive and label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,split,loss,top1,lr";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:.8},{:.6},{:.8e}", r.epoch, r.split, r.loss, r.top1, r.lr);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub samples: usize,
}

fn topk_hits(logits: &[f32], k_classes: usize, labels: &[usize], k: usize) -> (usize, usize) {
    let mut top1 = 0;
    let mut topk = 0;
    for (row, &l) in logits.chunks(k_classes).zip(labels) {
        let target = row[l];
        // rank = number of strictly larger logits, ties broken toward lower index
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < l))
            .count();
        top1 += usize::from(rank == 0);
        topk += usize::from(rank < k);
    }
    (top1, topk)
}

pub fn evaluate(model: &VitModel, store: &ParamStore<f32>, ds: &VideoDataset, k: usize, batch_size: usize, smoothing: f64) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(KinoError::Argument("cannot evaluate on an empty dataset".into()));
    }
    let kc = model.cfg.num_classes;
    let (mut loss, mut hit1, mut hitk) = (0.0, 0, 0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (clips, labels) = ds.batch(chunk)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, store, &clips)?;
        loss += cross_entropy_smoothed(logits, &labels, smoothing)?.item()? as f64 * chunk.len() as f64;
        let (a, b) = topk_hits(logits.value().data(), kc, &labels, k);
        hit1 += a;
        hitk += b;
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: hit1 as f64 / n,
        topk: hitk as f64 / n,
        k,
        samples: ds.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub best_val_top1: f64,
    pub final_val_top1: f64,
    pub epochs_run: usize,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub const LAST_CHECKPOINT: &str = "last.kino";

/// Runs the training loop. Each epoch visits the training set in a
/// permutation derived from `(seed, epoch)`, then evaluates on `val`.
///
/// A non-finite loss aborts with [`KinoError::Divergence`]; the checkpoint
/// written after the last completed epoch is left untouched.
pub fn train(
    model: &VitModel,
    store: &mut ParamStore<f32>,
    train_set: &VideoDataset,
    val: &VideoDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[HistoryRow]),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(KinoError::Argument("training and validation sets must be non-empty".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::from_epochs(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch, cfg.layer_decay);
    let scales: Vec<f64> = store
        .iter()
        .map(|(_, p)| param_multiplier(&p.name, cfg.layer_decay, model.cfg.depth))
        .collect();
    let mut opt = AdamW::new(store, cfg.optimizer.clone())?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut history = Vec::new();
    let mut best = 0.0f64;
    let mut last_val = 0.0;
    let mut epochs_run = 0;
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        let mut lr = 0.0;
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            global_step += 1;
            let (clips, labels) = train_set.batch(chunk)?;
            store.zero_grad();
            let tape = Tape::new();
            let diverged = || KinoError::Divergence { epoch, step: i + 1 };
            let logits = model.forward(&tape, store, &clips).map_err(|e| match e {
                KinoError::NonFinite { .. } => diverged(),
                other => other,
            })?;
            let logit_vals = logits.value();
            let loss = match cross_entropy_smoothed(logits, &labels, cfg.label_smoothing) {
                Ok(l) => l,
                Err(KinoError::NonFinite { .. }) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let lval = loss.item()? as f64;
            if !lval.is_finite() {
                return Err(diverged());
            }
            tape.backward(loss, store).map_err(|e| match e {
                KinoError::NonFinite { .. } => diverged(),
                other => other,
            })?;
            drop(tape);
            lr = schedule.lr_at(global_step);
            opt.step(store, lr, &scales).map_err(|e| match e {
                KinoError::NonFinite { .. } => diverged(),
                other => other,
            })?;
            loss_sum += lval * chunk.len() as f64;
            hits += topk_hits(logit_vals.data(), model.cfg.num_classes, &labels, 1).0;
        }
        let n = train_set.len() as f64;
        history.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: hits as f64 / n,
            lr,
        });
        let ev = evaluate(model, store, val, 1, cfg.batch_size, cfg.label_smoothing)?;
        history.push(HistoryRow {
            epoch,
            split: "val".into(),
            loss: ev.loss,
            top1: ev.top1,
            lr,
        });
        best = best.max(ev.top1);
        last_val = ev.top1;
        epochs_run = epoch;
        if let Some(dir) = &cfg.checkpoint_dir {
            store.save(dir.join(LAST_CHECKPOINT))?;
        }
        on_epoch(&history);
        if cfg.target_top1.is_some_and(|t| ev.top1 >= t) {
            break;
        }
    }
    Ok(TrainReport {
        history,
        best_val_top1: best,
        final_val_top1: last_val,
        epochs_run,
    })
}
