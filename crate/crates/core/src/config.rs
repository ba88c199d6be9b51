//! Run configuration.
//!
//! Configs are TOML documents with one table per section. Every key has a
//! default, so an empty file is a complete configuration; unknown keys are
//! rejected so that a typo cannot silently disable part of an ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub bottleneck_dim: usize,
    /// Number of distillation logits `C`.
    pub out_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            heads: 6,
            depth: 6,
            patch_size: 16,
            mlp_ratio: 4,
            head_hidden: 256,
            bottleneck_dim: 64,
            out_dim: 256,
        }
    }
}

impl BackboneConfig {
    /// ViT-S/16 with a DINO-sized projection head.
    pub fn vit_small() -> Self {
        Self {
            embed_dim: 384,
            heads: 6,
            depth: 12,
            patch_size: 16,
            mlp_ratio: 4,
            head_hidden: 2048,
            bottleneck_dim: 256,
            out_dim: 65536,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    /// Frames per clip.
    pub frames: usize,
    /// Temporal separation between sampled frames, in seconds.
    pub stride_s: f64,
    /// Side of the square window cut from each frame before augmentation.
    pub window: usize,
    /// Model input resolution.
    pub crop_size: usize,
    /// Area fraction of the window kept as the clip region.
    pub global_scale: [f64; 2],
    /// Area fraction of the region kept by each global crop.
    pub multicrop_scale: [f64; 2],
    /// Fraction of student-crop patches occluded.
    pub mask_ratio: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            stride_s: 1.0,
            window: 640,
            crop_size: 96,
            global_scale: [0.4, 1.0],
            multicrop_scale: [0.15, 0.3],
            mask_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoConfig {
    /// Size of the sampled head subset.
    pub k: usize,
    pub tau_w: f64,
    /// 1-based index of the block whose output feeds the depth decoder.
    pub tap_layer_mid: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tau_w: 0.1,
            tap_layer_mid: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub window: usize,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window: 4,
            lambda: 0.8,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// Average the global term over both crop orderings.
    pub symmetrize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            symmetrize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub beta: f64,
    pub lambda_grad: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_sigma0: Option<f64>,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda_grad: 1.0,
            blur_sigma0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_p: f64,
    pub gamma_d: f64,
    pub gamma_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_p: 0.3,
            gamma_d: 1.0,
            gamma_t: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub ema_momentum_start: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            min_lr: 1e-5,
            warmup_epochs: 10.0,
            wd_start: 0.04,
            wd_end: 0.4,
            batch_size: 2,
            epochs: 320,
            iters_per_epoch: 10,
            ema_momentum_start: 0.996,
            clip_grad: 3.0,
        }
    }
}

impl OptimConfig {
    pub fn total_iters(&self) -> u64 {
        (self.epochs * self.iters_per_epoch) as u64
    }

    pub fn warmup_iters(&self) -> u64 {
        (self.warmup_epochs * self.iters_per_epoch as f64).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub enable_d: bool,
    pub enable_p: bool,
    pub enable_t: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enable_d: true,
            enable_p: true,
            enable_t: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `"synthetic"` or a frame-directory path (several separated by `:`).
    pub source: String,
    pub synthetic_videos: usize,
    pub synthetic_frames: usize,
    pub frame_size: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".to_string(),
            synthetic_videos: 8,
            synthetic_frames: 240,
            frame_size: 640,
            max_objects: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub clips: usize,
    pub knn_k: usize,
    pub knn_per_class: usize,
    /// Use the student instead of the teacher for delineation.
    pub use_student: bool,
    /// Record localization IoU every this many iterations (0 = never).
    pub iou_every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clips: 8,
            knn_k: 20,
            knn_per_class: 16,
            use_student: false,
            iou_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub clip: ClipConfig,
    pub proto: ProtoConfig,
    pub temporal: TemporalConfig,
    pub distill: DistillConfig,
    pub depth: DepthConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Parses a TOML document and applies `key=value` overrides on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        canonicalize(&mut table)?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid_config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("backbone.embed_dim", b.embed_dim)?;
        positive("backbone.heads", b.heads)?;
        positive("backbone.depth", b.depth)?;
        positive("backbone.patch_size", b.patch_size)?;
        positive("backbone.mlp_ratio", b.mlp_ratio)?;
        positive("backbone.head_hidden", b.head_hidden)?;
        positive("backbone.bottleneck_dim", b.bottleneck_dim)?;
        positive("backbone.out_dim", b.out_dim)?;
        if !b.embed_dim.is_multiple_of(b.heads) {
            return Err(Error::invalid_config(
                "backbone.heads",
                format!("embed_dim {} not divisible by {} heads", b.embed_dim, b.heads),
            ));
        }

        let c = &self.clip;
        positive("clip.frames", c.frames)?;
        positive("clip.crop_size", c.crop_size)?;
        if !c.crop_size.is_multiple_of(b.patch_size) {
            return Err(Error::invalid_config(
                "clip.crop_size",
                format!("patch size {} does not divide crop size {}", b.patch_size, c.crop_size),
            ));
        }
        if !(c.stride_s > 0.0) {
            return Err(Error::invalid_config("clip.stride_s", "must be positive"));
        }
        positive("clip.window", c.window)?;
        check_scale_range("clip.global_scale", c.global_scale)?;
        check_scale_range("clip.multicrop_scale", c.multicrop_scale)?;
        if !(0.0..1.0).contains(&c.mask_ratio) {
            return Err(Error::invalid_config("clip.mask_ratio", "must lie in [0,1)"));
        }

        let p = &self.proto;
        if p.k == 0 || p.k > b.heads {
            return Err(Error::invalid_config(
                "proto.k",
                format!("K out of range (need 0 < K <= heads = {})", b.heads),
            ));
        }
        check_temperature("proto.tau_w", p.tau_w)?;
        if p.tap_layer_mid == 0 || p.tap_layer_mid > b.depth {
            return Err(Error::invalid_config(
                "proto.tap_layer_mid",
                format!("tap layer must be in 1..={}", b.depth),
            ));
        }

        let t = &self.temporal;
        if !(0.0..=1.0).contains(&t.lambda) {
            return Err(Error::invalid_config(
                "temporal.lambda",
                format!("lambda out of range ({} not in [0,1])", t.lambda),
            ));
        }
        check_temperature("temporal.alpha", t.alpha)?;
        positive("temporal.window", t.window)?;

        check_temperature("distill.tau_s", self.distill.tau_s)?;
        check_temperature("distill.tau_t", self.distill.tau_t)?;
        if !(0.0..=1.0).contains(&self.distill.center_momentum) {
            return Err(Error::invalid_config("distill.center_momentum", "must lie in [0,1]"));
        }

        let d = &self.depth;
        if !(0.0..=1.0).contains(&d.beta) {
            return Err(Error::invalid_config("depth.beta", "must lie in [0,1]"));
        }
        if !(d.lambda_grad >= 0.0) {
            return Err(Error::invalid_config("depth.lambda_grad", "must be non-negative"));
        }
        if let Some(s) = d.blur_sigma0 {
            if !(s >= 0.0) {
                return Err(Error::invalid_config("depth.blur_sigma0", "must be non-negative"));
            }
        }

        let w = &self.weights;
        for (field, v) in [
            ("weights.gamma_p", w.gamma_p),
            ("weights.gamma_d", w.gamma_d),
            ("weights.gamma_t", w.gamma_t),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid_config(field, "weights must be finite and >= 0"));
            }
        }
        if w.gamma_p + w.gamma_d + w.gamma_t <= 0.0 {
            return Err(Error::invalid_config("weights", "at least one weight must be positive"));
        }
        let a = &self.ablation;
        for (field, gamma, enabled) in [
            ("weights.gamma_p", w.gamma_p, a.enable_p),
            ("weights.gamma_d", w.gamma_d, a.enable_d),
            ("weights.gamma_t", w.gamma_t, a.enable_t),
        ] {
            if enabled && gamma == 0.0 {
                log::warn!("{field} is 0 while its component is enabled; the term contributes nothing");
            }
        }

        let o = &self.optim;
        positive("optim.batch_size", o.batch_size)?;
        positive("optim.epochs", o.epochs)?;
        positive("optim.iters_per_epoch", o.iters_per_epoch)?;
        if !(o.base_lr > 0.0) || !(o.min_lr >= 0.0) || o.min_lr > o.base_lr {
            return Err(Error::invalid_config("optim.base_lr", "need 0 <= min_lr <= base_lr, base_lr > 0"));
        }
        if !(o.warmup_epochs >= 0.0) || o.warmup_iters() >= o.total_iters() {
            return Err(Error::invalid_config("optim.warmup_epochs", "warmup must end before training does"));
        }
        if !(0.0..=1.0).contains(&o.ema_momentum_start) {
            return Err(Error::invalid_config("optim.ema_momentum_start", "must lie in [0,1]"));
        }
        if !(o.clip_grad >= 0.0) {
            return Err(Error::invalid_config("optim.clip_grad", "must be non-negative"));
        }

        positive("data.synthetic_videos", self.data.synthetic_videos)?;
        positive("data.synthetic_frames", self.data.synthetic_frames)?;
        positive("data.frame_size", self.data.frame_size)?;
        if self.data.max_objects == 0 || self.data.max_objects > 3 {
            return Err(Error::invalid_config("data.max_objects", "must be in 1..=3"));
        }
        positive("eval.knn_k", self.eval.knn_k)?;
        Ok(())
    }

    /// Hash of every field that determines parameter shapes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let b = &self.backbone;
        let key = format!(
            "embed_dim={};heads={};depth={};patch={};mlp={};hidden={};bottleneck={};out={};crop={}",
            b.embed_dim,
            b.heads,
            b.depth,
            b.patch_size,
            b.mlp_ratio,
            b.head_hidden,
            b.bottleneck_dim,
            b.out_dim,
            self.clip.crop_size
        );
        Sha256::digest(key.as_bytes()).into()
    }
}

fn check_temperature(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid_config(field, "temperature must be positive"))
    }
}

fn check_scale_range(field: &str, r: [f64; 2]) -> Result<()> {
    if r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid_config(field, "need 0 < lo <= hi <= 1"))
    }
}

/// Alternative spellings accepted for a few keys, as `(section, alias,
/// canonical)`.
const KEY_ALIASES: [(&str, &str, &str); 9] = [
    ("clip", "T", "frames"),
    ("proto", "K", "k"),
    ("temporal", "W", "window"),
    ("weights", "gamma_P", "gamma_p"),
    ("weights", "gamma_D", "gamma_d"),
    ("weights", "gamma_T", "gamma_t"),
    ("ablation", "enable_D", "enable_d"),
    ("ablation", "enable_P", "enable_p"),
    ("ablation", "enable_T", "enable_t"),
];

fn canonical_key<'a>(section: &str, key: &'a str) -> &'a str {
    KEY_ALIASES
        .iter()
        .find(|(s, a, _)| *s == section && *a == key)
        .map_or(key, |(_, _, c)| c)
}

fn canonicalize(table: &mut toml::Table) -> Result<()> {
    for (section, alias, canonical) in KEY_ALIASES {
        let Some(toml::Value::Table(t)) = table.get_mut(section) else {
            continue;
        };
        if let Some(v) = t.remove(alias) {
            if t.contains_key(canonical) {
                return Err(Error::ConfigParse(format!(
                    "`{section}.{alias}` and `{section}.{canonical}` name the same field"
                )));
            }
            t.insert(canonical.to_string(), v);
        }
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let mut path: Vec<&str> = key.split('.').collect();
    let leaf = path.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        Error::ConfigParse(format!("override `{item}` has an empty key"))
    })?;
    let leaf = match path.as_slice() {
        [section] => canonical_key(section, leaf),
        _ => leaf,
    };
    let mut cursor = table;
    for part in path {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::ConfigParse(format!("`{part}` in `{key}` is not a section")))?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Reads a config file and applies overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml_str(&text, overrides)
}
