use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kino_core::ks4::ScanMode;
use kino_core::synth::{generate_splits, load_dataset, SyntheticVideoSpec, TaskMode, VideoDataset};
use kino_core::train::TrainConfig;
use kino_core::vit::VitConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.json";

/// Model section. Input geometry and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub insert_after: usize,
    pub pks4_enabled: bool,
    pub kpe_enabled: bool,
    pub scan_enabled: bool,
    pub cls_route: bool,
    pub enable_corr: bool,
    pub enable_var: bool,
    pub context_frames: usize,
    pub window_radius: usize,
    pub bottleneck_dim: Option<usize>,
    pub expand: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub scan_mode: ScanMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            patch_size: 4,
            depth: 2,
            heads: 2,
            width: 32,
            mlp_ratio: 2,
            insert_after: 1,
            pks4_enabled: true,
            kpe_enabled: true,
            scan_enabled: true,
            cls_route: true,
            enable_corr: true,
            enable_var: true,
            context_frames: 4,
            window_radius: 2,
            bottleneck_dim: None,
            expand: 2,
            d_state: 16,
            conv_kernel: 4,
            scan_mode: ScanMode::Sequential,
        }
    }
}

impl ModelSection {
    pub fn vit_config(&self, spec: &SyntheticVideoSpec, num_classes: usize) -> Result<VitConfig> {
        if spec.height != spec.width {
            bail!("the backbone needs square frames, dataset is {}x{}", spec.height, spec.width);
        }
        let mut cfg = VitConfig {
            image_size: spec.height,
            patch_size: self.patch_size,
            channels: 3,
            depth: self.depth,
            heads: self.heads,
            width: self.width,
            mlp_ratio: self.mlp_ratio,
            num_classes,
            frames: spec.frames,
            insert_after: self.insert_after,
            pks4_enabled: self.pks4_enabled,
            ..VitConfig::default()
        };
        let p = &mut cfg.pks4;
        p.kpe_enabled = self.kpe_enabled;
        p.scan_enabled = self.scan_enabled;
        p.cls_route = self.cls_route;
        p.kpe.enable_corr = self.enable_corr;
        p.kpe.enable_var = self.enable_var;
        p.kpe.context_frames = self.context_frames;
        p.kpe.window_radius = self.window_radius;
        p.kpe.bottleneck_dim = self.bottleneck_dim;
        p.ks4.expand = self.expand;
        p.ks4.d_state = self.d_state;
        p.ks4.conv_kernel = self.conv_kernel;
        p.ks4.mode = self.scan_mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Data section: either both split directories, or a generator description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub mode: TaskMode,
    pub n_train: usize,
    pub n_val: usize,
    pub spec: SyntheticVideoSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            mode: TaskMode::Motion,
            n_train: 2000,
            n_val: 400,
            spec: SyntheticVideoSpec { seed: 7, ..Default::default() },
        }
    }
}

impl DataSection {
    pub fn load(&self) -> Result<(VideoDataset, VideoDataset)> {
        match (&self.train_dir, &self.val_dir) {
            (Some(t), Some(v)) => {
                let tr = load_dataset(t).with_context(|| format!("loading training split {}", t.display()))?;
                let va = load_dataset(v).with_context(|| format!("loading validation split {}", v.display()))?;
                if tr.spec.height != va.spec.height || tr.spec.width != va.spec.width || tr.spec.frames != va.spec.frames {
                    bail!("training and validation splits have different clip geometry");
                }
                Ok((tr, va))
            }
            (None, None) => Ok(generate_splits(&self.spec, self.mode, self.n_train, self.n_val)?),
            _ => bail!("data.train_dir and data.val_dir must be given together"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"widht": 8}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"model": {"width": 16}}"#).unwrap();
        assert_eq!(cfg.model.width, 16);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn default_model_resolves() {
        let d = DataSection::default();
        let vit = ModelSection::default().vit_config(&d.spec, 4).unwrap();
        assert_eq!((vit.image_size, vit.frames, vit.num_classes), (32, 8, 4));
    }
}
