//! Procedural moving-shape clips.
//!
//! In the motion task the label is the direction of travel; shape, colour,
//! size, start position and speed are drawn independently of it. In the
//! appearance task objects are static and the label is the shape.
//!
//! On disk a split is a directory holding `manifest.json` and `pixels.bin`.
//! The blob is the concatenation of every sample's `[T, 3, H, W]` pixels as
//! little-endian `f32`; each manifest entry records its byte `offset` and
//! element `count`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KinoError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PIXELS_FILE: &str = "pixels.bin";
pub const DATASET_FORMAT: &str = "kino-video-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Disc, Shape::Cross, Shape::Triangle];

    /// Whether offset `(dx, dy)` from the centre is covered at half-size `s`.
    pub fn covers(self, dx: i64, dy: i64, s: i64) -> bool {
        if dx.abs() > s || dy.abs() > s {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Disc => dx * dx + dy * dy <= s * s,
            Shape::Cross => dx.abs() <= 1 || dy.abs() <= 1,
            // apex at the top, base at the bottom
            Shape::Triangle => 2 * dx.abs() <= dy + s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    /// Unit step in image coordinates (y grows downwards).
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Motion,
    Appearance,
}

impl std::str::FromStr for TaskMode {
    type Err = KinoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" => Ok(Self::Motion),
            "appearance" => Ok(Self::Appearance),
            other => Err(KinoError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticVideoSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive range of object half-sizes in pixels.
    pub size_range: (usize, usize),
    /// Inclusive range of speeds in pixels per frame.
    pub speed_range: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            size_range: (3, 4),
            speed_range: (1, 3),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.size_range;
        let (vmin, vmax) = self.speed_range;
        if self.frames == 0 || smin == 0 || smin > smax || vmin == 0 || vmin > vmax {
            return Err(KinoError::Config("frames, size_range and speed_range must be positive and ordered".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(KinoError::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        // largest object moving at top speed must keep a one-pixel margin
        let travel = vmax * (self.frames - 1);
        let need = 2 * (smax + 1) + travel;
        if need >= self.height.min(self.width) {
            return Err(KinoError::Config(format!(
                "canvas {}x{} too small for size {smax} moving {travel} px",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub shape: Shape,
    pub half_size: usize,
    /// Centre `(x, y)` in frame 0.
    pub start: (i64, i64),
    /// Pixels per frame `(vx, vy)`.
    pub velocity: (i64, i64),
    pub color: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct VideoSample {
    /// `[T, 3, H, W]` in `[0, 1]`
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug)]
pub struct VideoDataset {
    pub mode: TaskMode,
    pub spec: SyntheticVideoSpec,
    pub samples: Vec<VideoSample>,
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        4
    }

    /// Stacks the given samples into `[B, T, 3, H, W]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| KinoError::Argument("empty dataset".into()))?;
        let per = first.pixels.numel();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| KinoError::Argument(format!("sample {i} out of range")))?;
            data.extend_from_slice(s.pixels.data());
            labels.push(s.label);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.pixels.shape());
        Ok((Tensor::new(shape, data)?, labels))
    }
}

fn sample_rng(seed: u64, mode: TaskMode, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match mode {
        TaskMode::Motion => 0u64,
        TaskMode::Appearance => 1u64 << 63,
    };
    rng.set_stream(lane | index as u64);
    rng
}

/// Draws a clip without noise or clipping.
pub fn render(spec: &SyntheticVideoSpec, meta: &SampleMeta) -> Vec<f32> {
    let (h, w, t_len) = (spec.height, spec.width, spec.frames);
    let mut px = vec![0f32; t_len * 3 * h * w];
    let s = meta.half_size as i64;
    for t in 0..t_len {
        let cx = meta.start.0 + meta.velocity.0 * t as i64;
        let cy = meta.start.1 + meta.velocity.1 * t as i64;
        for y in (cy - s).max(0)..=(cy + s).min(h as i64 - 1) {
            for x in (cx - s).max(0)..=(cx + s).min(w as i64 - 1) {
                if meta.shape.covers(x - cx, y - cy, s) {
                    for (c, &col) in meta.color.iter().enumerate() {
                        px[((t * 3 + c) * h + y as usize) * w + x as usize] = col;
                    }
                }
            }
        }
    }
    px
}

fn make_sample(spec: &SyntheticVideoSpec, mode: TaskMode, index: usize) -> Result<VideoSample> {
    let mut rng = sample_rng(spec.seed, mode, index);
    let label = index % 4;
    let shape = match mode {
        TaskMode::Motion => Shape::ALL[rng.random_range(0..4)],
        TaskMode::Appearance => Shape::ALL[label],
    };
    let half_size = rng.random_range(spec.size_range.0..=spec.size_range.1);
    let (vx, vy) = match mode {
        TaskMode::Motion => {
            let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1) as i64;
            let (ux, uy) = Direction::ALL[label].unit();
            (ux * speed, uy * speed)
        }
        TaskMode::Appearance => (0, 0),
    };
    let travel = spec.frames as i64 - 1;
    let margin = half_size as i64 + 1;
    let axis_start = |v: i64, extent: usize, rng: &mut ChaCha8Rng| {
        let lo = margin - (v * travel).min(0);
        let hi = extent as i64 - 1 - margin - (v * travel).max(0);
        rng.random_range(lo..=hi)
    };
    let start = (axis_start(vx, spec.width, &mut rng), axis_start(vy, spec.height, &mut rng));
    let color = [
        rng.random_range(0.35f32..1.0),
        rng.random_range(0.35f32..1.0),
        rng.random_range(0.35f32..1.0),
    ];
    let meta = SampleMeta {
        shape,
        half_size,
        start,
        velocity: (vx, vy),
        color,
    };
    let mut px = render(spec, &meta);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| KinoError::Config(e.to_string()))?;
        for v in &mut px {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(VideoSample {
        pixels: Tensor::new([spec.frames, 3, spec.height, spec.width], px)?,
        label,
        meta,
    })
}

pub fn generate_dataset(spec: &SyntheticVideoSpec, mode: TaskMode, n: usize) -> Result<VideoDataset> {
    spec.validate()?;
    if n == 0 || n % 4 != 0 {
        return Err(KinoError::Argument(format!("sample count {n} must be a positive multiple of the class count (4) so classes stay balanced")));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| make_sample(spec, mode, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoDataset {
        mode,
        spec: spec.clone(),
        samples,
    })
}

pub fn generate_motion_dataset(spec: &SyntheticVideoSpec, n: usize) -> Result<VideoDataset> {
    generate_dataset(spec, TaskMode::Motion, n)
}

pub fn generate_appearance_dataset(spec: &SyntheticVideoSpec, n: usize) -> Result<VideoDataset> {
    generate_dataset(spec, TaskMode::Appearance, n)
}

/// Train and validation splits drawn from disjoint seeds.
pub fn generate_splits(
    spec: &SyntheticVideoSpec,
    mode: TaskMode,
    n_train: usize,
    n_val: usize,
) -> Result<(VideoDataset, VideoDataset)> {
    let val_spec = SyntheticVideoSpec {
        seed: spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        ..spec.clone()
    };
    Ok((generate_dataset(spec, mode, n_train)?, generate_dataset(&val_spec, mode, n_val)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    label: usize,
    meta: SampleMeta,
    offset: u64,
    count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    mode: TaskMode,
    dtype: String,
    sample_shape: Vec<usize>,
    spec: SyntheticVideoSpec,
    samples: Vec<ManifestEntry>,
}

pub fn save_dataset(ds: &VideoDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let sample_shape = vec![ds.spec.frames, 3, ds.spec.height, ds.spec.width];
    let mut entries = Vec::with_capacity(ds.len());
    let mut blob = BufWriter::new(fs::File::create(dir.join(PIXELS_FILE))?);
    let mut offset = 0u64;
    for s in &ds.samples {
        for v in s.pixels.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        entries.push(ManifestEntry {
            label: s.label,
            meta: s.meta,
            offset,
            count: s.pixels.numel(),
        });
        offset += 4 * s.pixels.numel() as u64;
    }
    blob.flush()?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        mode: ds.mode,
        dtype: "f32le".into(),
        sample_shape,
        spec: ds.spec.clone(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<VideoDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != DATASET_FORMAT || manifest.dtype != "f32le" {
        return Err(KinoError::Format(format!(
            "unsupported dataset format {:?} / {:?}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(PIXELS_FILE))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let start = e.offset as usize;
        let end = start + 4 * e.count;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| KinoError::Format(format!("sample at byte {start} runs past the pixel blob")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(VideoSample {
            pixels: Tensor::new(manifest.sample_shape.clone(), data)?,
            label: e.label,
            meta: e.meta,
        });
    }
    Ok(VideoDataset {
        mode: manifest.mode,
        spec: manifest.spec,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> SyntheticVideoSpec {
        SyntheticVideoSpec {
            noise_std: 0.0,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticVideoSpec { seed: 3, ..Default::default() };
        let a = generate_motion_dataset(&spec, 40).unwrap();
        let b = generate_motion_dataset(&spec, 40).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.meta, y.meta);
        }
        for c in 0..4 {
            assert_eq!(a.samples.iter().filter(|s| s.label == c).count(), 10);
        }
        assert!(generate_motion_dataset(&spec, 10).is_err());
        assert!(generate_motion_dataset(&spec, 0).is_err());
    }

    #[test]
    fn motion_frames_translate_by_velocity() {
        let ds = generate_motion_dataset(&clean(), 16).unwrap();
        for s in &ds.samples {
            let (vx, vy) = s.meta.velocity;
            assert_eq!((vx, vy), {
                let (ux, uy) = Direction::ALL[s.label].unit();
                let sp = vx.abs().max(vy.abs());
                (ux * sp, uy * sp)
            });
            for t in 0..7 {
                for c in 0..3 {
                    for y in 0..32i64 {
                        for x in 0..32i64 {
                            let (sx, sy) = (x - vx, y - vy);
                            if !(0..32).contains(&sx) || !(0..32).contains(&sy) {
                                continue;
                            }
                            let next = s.pixels.at(&[t + 1, c, y as usize, x as usize]);
                            let prev = s.pixels.at(&[t, c, sy as usize, sx as usize]);
                            assert_eq!(next, prev);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn objects_stay_inside_canvas() {
        let ds = generate_motion_dataset(&clean(), 200).unwrap();
        for s in &ds.samples {
            let h = s.meta.half_size as i64;
            for t in 0..8 {
                let cx = s.meta.start.0 + s.meta.velocity.0 * t;
                let cy = s.meta.start.1 + s.meta.velocity.1 * t;
                assert!(cx - h >= 1 && cx + h <= 30 && cy - h >= 1 && cy + h <= 30);
            }
        }
    }

    #[test]
    fn appearance_frames_are_static() {
        let ds = generate_appearance_dataset(&clean(), 8).unwrap();
        for s in &ds.samples {
            assert_eq!(s.meta.shape, Shape::ALL[s.label]);
            let f0 = s.pixels.narrow(0, 0, 1).unwrap();
            for t in 1..8 {
                assert_eq!(s.pixels.narrow(0, t, 1).unwrap(), f0);
            }
        }
        let noisy = generate_appearance_dataset(&SyntheticVideoSpec::default(), 8).unwrap();
        for s in &noisy.samples {
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn disk_round_trip() {
        let ds = generate_appearance_dataset(&SyntheticVideoSpec::default(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.mode, ds.mode);
        assert_eq!(back.spec, ds.spec);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.label, b.label);
        }
        let (clips, labels) = back.batch(&[3, 1]).unwrap();
        assert_eq!(clips.shape(), &[2, 8, 3, 32, 32]);
        assert_eq!(labels, vec![3, 1]);
    }

    #[test]
    fn cramped_canvas_is_rejected() {
        let spec = SyntheticVideoSpec { height: 16, width: 16, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64], m: usize) {
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut v = a[i * n + j];
                for k in 0..j {
                    v -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = v / d;
            }
        }
        for col in 0..m {
            for i in 0..n {
                let mut v = b[i * m + col];
                for k in 0..i {
                    v -= a[i * n + k] * b[k * m + col];
                }
                b[i * m + col] = v / a[i * n + i];
            }
            for i in (0..n).rev() {
                let mut v = b[i * m + col];
                for k in i + 1..n {
                    v -= a[k * n + i] * b[k * m + col];
                }
                b[i * m + col] = v / a[i * n + i];
            }
        }
    }

    #[test]
    fn appearance_is_linearly_separable_from_one_frame() {
        let spec = SyntheticVideoSpec { seed: 11, ..Default::default() };
        let ds = generate_appearance_dataset(&spec, 512).unwrap();
        let n = ds.len();
        let k = ds.num_classes();
        let feats: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .map(|s| s.pixels.narrow(0, 0, 1).unwrap().data().iter().map(|&v| v as f64).collect())
            .collect();
        // kernel ridge in the dual: (X Xt + lambda I) alpha = Y
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
            gram[i * n + i] += 1e-3;
        }
        let mut alpha = vec![0.0; n * k];
        for (i, s) in ds.samples.iter().enumerate() {
            alpha[i * k + s.label] = 1.0;
        }
        let g = gram.clone();
        cholesky_solve(&mut gram, n, &mut alpha, k);
        let mut correct = 0;
        for (i, s) in ds.samples.iter().enumerate() {
            let scores: Vec<f64> = (0..k).map(|c| (0..n).map(|j| g[i * n + j] * alpha[j * k + c]).sum()).collect();
            let best = (0..k).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            correct += (best == s.label) as usize;
        }
        assert!(correct as f64 / n as f64 > 0.9, "{correct}/{n}");
    }
}
