//! Model, optimizer and run configuration, presets, and the flat
//! `key = value` text format with `[section]` headers.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{config_err, Result};

/// How the four stage outputs are fused into one token per patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// `Y_i = Conv_{2,2}(Y_{i−1}) + X_{i+1}`, halving the grid each step.
    Cascade,
    /// `Σ_i Conv_{s_i,s_i}(X_i) + X_4` with `s_i = 2^{4−i}`, each stage
    /// projected straight to the last stage's resolution.
    Parallel,
}

/// Whether the key and value window convolutions of a branch share weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvConv {
    Shared,
    Separate,
}

/// Which endpoints of the kernel-size ladder `p, p/2, …` a multi-window stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowFlags {
    /// Include `k = p` (one descriptor per patch).
    pub include_patch: bool,
    /// Include `k = 1` (plain token-to-token attention).
    pub include_unit: bool,
}

impl Default for WindowFlags {
    fn default() -> Self {
        Self { include_patch: true, include_unit: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    /// Patch side in pixels; `32·2^j`.
    pub patch_size: usize,
    pub image_size: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    /// Fraction of patches removed from the adaptive branch.
    pub mask_ratio: f64,
    pub windows: WindowFlags,
    pub fusion: FusionMode,
    pub kv_conv: KvConv,
    pub mlp_ratio: usize,
}

pub const PRESETS: [&str; 3] = ["dyvit-nano", "dyvit-s", "dyvit-b"];

/// Input image channels.
pub const IN_CHANNELS: usize = 3;
/// Downsampling factor of the convolutional scale layer.
pub const SCALE_FACTOR: usize = 4;
/// Pixels covered by one final-stage token.
pub const TOKEN_PIXELS: usize = 32;

impl ModelConfig {
    pub fn dyvit_s() -> Self {
        Self {
            channels: [96, 192, 384, 768],
            blocks: [1, 2, 11, 2],
            heads: [2, 4, 8, 16],
            patch_size: 32,
            image_size: 224,
            decoder_depth: 8,
            decoder_width: 512,
            decoder_heads: 16,
            mask_ratio: 0.6,
            windows: WindowFlags::default(),
            fusion: FusionMode::Cascade,
            kv_conv: KvConv::Shared,
            mlp_ratio: 4,
        }
    }

    pub fn dyvit_b() -> Self {
        Self {
            channels: [112, 224, 448, 896],
            blocks: [2, 3, 16, 3],
            ..Self::dyvit_s()
        }
    }

    /// Desk-scale configuration: 64×64 images, four 32-pixel patches.
    pub fn dyvit_nano() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            blocks: [1, 1, 2, 1],
            heads: [1, 2, 4, 8],
            image_size: 64,
            decoder_width: 64,
            decoder_heads: 4,
            ..Self::dyvit_s()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dyvit-nano" => Ok(Self::dyvit_nano()),
            "dyvit-s" => Ok(Self::dyvit_s()),
            "dyvit-b" => Ok(Self::dyvit_b()),
            other => Err(config_err!("unknown preset {other:?}; expected one of {PRESETS:?}")),
        }
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Per-patch token grid side at each stage: `(8, 4, 2, 1)` for 32-pixel patches.
    pub fn stage_grid_sides(&self) -> [usize; 4] {
        let p1 = self.patch_size / SCALE_FACTOR;
        [p1, p1 / 2, p1 / 4, p1 / 8]
    }

    /// Tokens per image side after the scale layer.
    pub fn token_side(&self) -> usize {
        self.image_size / SCALE_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.channels[i] == 0 || self.heads[i] == 0 {
                return Err(config_err!("stage {} needs positive channels and heads", i + 1));
            }
            if !self.channels[i].is_multiple_of(self.heads[i]) {
                return Err(config_err!(
                    "stage {} channels {} not divisible by heads {}",
                    i + 1,
                    self.channels[i],
                    self.heads[i]
                ));
            }
        }
        if self.patch_size == 0
            || !self.patch_size.is_multiple_of(TOKEN_PIXELS)
            || !(self.patch_size / TOKEN_PIXELS).is_power_of_two()
        {
            return Err(config_err!(
                "patch size {} must be 32 times a power of two",
                self.patch_size
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(config_err!(
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.n_patches() < 2 {
            return Err(config_err!("need at least two patches per image"));
        }
        if !self.channels[0].is_multiple_of(4) || !self.channels[3].is_multiple_of(4) {
            return Err(config_err!(
                "first and last stage channels must be multiples of 4 for 2-D sinusoidal embeddings"
            ));
        }
        if self.decoder_depth == 0 {
            return Err(config_err!("decoder depth must be at least 1"));
        }
        if self.decoder_width == 0 || self.decoder_heads == 0 || !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return Err(config_err!(
                "decoder width {} not divisible by decoder heads {}",
                self.decoder_width,
                self.decoder_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(config_err!("mask ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err!("mlp ratio must be positive"));
        }
        let sides = self.stage_grid_sides();
        for (stage, &p) in sides.iter().enumerate().take(2) {
            crate::dmmsa::window_set(p, self.windows)
                .map_err(|e| config_err!("stage {} windows: {e}", stage + 1))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which the learning rate decays linearly to
    /// zero; `1.0` keeps it constant.
    pub decay_start: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, decay_start: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return Err(config_err!("decay_start must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if self.decay_start >= 1.0 || total == 0 {
            return self.lr;
        }
        let start = self.decay_start * total as f64;
        let s = (step - 1) as f64;
        if s < start {
            self.lr
        } else {
            self.lr * ((total as f64 - s) / (total as f64 - start)).clamp(0.0, 1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Copy adaptive parameters into the evaluation branch every this many steps.
    pub sync_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { seed: 0, steps: 100, batch_size: 16, sync_every: 1, checkpoint_every: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if self.sync_every == 0 {
            return Err(config_err!("sync_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainOptions,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self { model, optim: OptimConfig::default(), train: TrainOptions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.train.validate()
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let t = &self.train;
        let list = |v: &[usize; 4]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "channels = {}", list(&m.channels));
        let _ = writeln!(s, "blocks = {}", list(&m.blocks));
        let _ = writeln!(s, "heads = {}", list(&m.heads));
        let _ = writeln!(s, "patch_size = {}", m.patch_size);
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "decoder_depth = {}", m.decoder_depth);
        let _ = writeln!(s, "decoder_width = {}", m.decoder_width);
        let _ = writeln!(s, "decoder_heads = {}", m.decoder_heads);
        let _ = writeln!(s, "mask_ratio = {:?}", m.mask_ratio);
        let _ = writeln!(s, "window_include_patch = {}", m.windows.include_patch);
        let _ = writeln!(s, "window_include_unit = {}", m.windows.include_unit);
        let _ = writeln!(s, "fusion_mode = {}", fusion_name(m.fusion));
        let _ = writeln!(s, "kv_conv = {}", kv_name(m.kv_conv));
        let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "lr = {:?}", o.lr);
        let _ = writeln!(s, "beta1 = {:?}", o.beta1);
        let _ = writeln!(s, "beta2 = {:?}", o.beta2);
        let _ = writeln!(s, "eps = {:?}", o.eps);
        let _ = writeln!(s, "weight_decay = {:?}", o.weight_decay);
        let _ = writeln!(s, "decay_start = {:?}", o.decay_start);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "sync_every = {}", t.sync_every);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        s
    }

    /// Parses the text format. A `preset` key in `[model]` is applied first;
    /// other keys override it. Unknown sections or keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let preset = entries
            .iter()
            .find(|e| e.section == "model" && e.key == "preset")
            .map(|e| ModelConfig::preset(&e.value))
            .transpose()?;
        let mut cfg = RunConfig::new(preset.unwrap_or_else(ModelConfig::dyvit_nano));
        for e in &entries {
            cfg.set(&e.section, &e.key, &e.value)
                .map_err(|err| config_err!("line {}: {err}", e.line))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key` from its text value.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let t = &mut self.train;
        match (section, key) {
            ("model", "preset") => {}
            ("model", "channels") => m.channels = parse_list(value)?,
            ("model", "blocks") => m.blocks = parse_list(value)?,
            ("model", "heads") => m.heads = parse_list(value)?,
            ("model", "patch_size") => m.patch_size = parse_num(key, value)?,
            ("model", "image_size") => m.image_size = parse_num(key, value)?,
            ("model", "decoder_depth") => m.decoder_depth = parse_num(key, value)?,
            ("model", "decoder_width") => m.decoder_width = parse_num(key, value)?,
            ("model", "decoder_heads") => m.decoder_heads = parse_num(key, value)?,
            ("model", "mask_ratio") => m.mask_ratio = parse_num(key, value)?,
            ("model", "window_include_patch") => m.windows.include_patch = parse_num(key, value)?,
            ("model", "window_include_unit") => m.windows.include_unit = parse_num(key, value)?,
            ("model", "fusion_mode") => {
                m.fusion = match value {
                    "cascade" => FusionMode::Cascade,
                    "parallel" => FusionMode::Parallel,
                    _ => return Err(config_err!("fusion_mode must be cascade or parallel")),
                }
            }
            ("model", "kv_conv") => {
                m.kv_conv = match value {
                    "shared" => KvConv::Shared,
                    "separate" => KvConv::Separate,
                    _ => return Err(config_err!("kv_conv must be shared or separate")),
                }
            }
            ("model", "mlp_ratio") => m.mlp_ratio = parse_num(key, value)?,
            ("optim", "lr") => o.lr = parse_num(key, value)?,
            ("optim", "beta1") => o.beta1 = parse_num(key, value)?,
            ("optim", "beta2") => o.beta2 = parse_num(key, value)?,
            ("optim", "eps") => o.eps = parse_num(key, value)?,
            ("optim", "weight_decay") => o.weight_decay = parse_num(key, value)?,
            ("optim", "decay_start") => o.decay_start = parse_num(key, value)?,
            ("train", "seed") => t.seed = parse_num(key, value)?,
            ("train", "steps") => t.steps = parse_num(key, value)?,
            ("train", "batch_size") => t.batch_size = parse_num(key, value)?,
            ("train", "sync_every") => t.sync_every = parse_num(key, value)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse_num(key, value)?,
            _ => return Err(config_err!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }
}

pub fn fusion_name(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Cascade => "cascade",
        FusionMode::Parallel => "parallel",
    }
}

fn kv_name(k: KvConv) -> &'static str {
    match k {
        KvConv::Shared => "shared",
        KvConv::Separate => "separate",
    }
}

struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !["model", "optim", "train"].contains(&name) {
                return Err(config_err!("line {}: unknown section [{name}]", i + 1));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected `key = value`", i + 1))?;
        let section = section
            .clone()
            .ok_or_else(|| config_err!("line {}: key outside of a [section]", i + 1))?;
        out.push(Entry {
            line: i + 1,
            section,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| config_err!("bad value {value:?} for {key}"))
}

fn parse_list(value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse_num("list entry", p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| config_err!("expected 4 comma-separated values, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("vit-h").is_err());
    }

    #[test]
    fn table_presets() {
        let s = ModelConfig::dyvit_s();
        assert_eq!(s.channels, [96, 192, 384, 768]);
        assert_eq!(s.blocks, [1, 2, 11, 2]);
        assert_eq!(s.heads, [2, 4, 8, 16]);
        let b = ModelConfig::dyvit_b();
        assert_eq!(b.channels, [112, 224, 448, 896]);
        assert_eq!(b.blocks, [2, 3, 16, 3]);
        assert_eq!(b.heads, [2, 4, 8, 16]);
        assert_eq!(s.decoder_depth, 8);
    }

    #[test]
    fn stage_grids_for_32_pixel_patches() {
        assert_eq!(ModelConfig::dyvit_nano().stage_grid_sides(), [8, 4, 2, 1]);
        let mut c = ModelConfig::dyvit_nano();
        c.patch_size = 64;
        c.image_size = 128;
        assert_eq!(c.stage_grid_sides(), [16, 8, 4, 2]);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::dyvit_nano();
        c.heads[1] = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::dyvit_nano();
        c.patch_size = 48;
        c.image_size = 96;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::dyvit_nano();
        c.image_size = 80;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::dyvit_nano();
        c.image_size = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::new(ModelConfig::dyvit_s());
        cfg.model.fusion = FusionMode::Parallel;
        cfg.optim.lr = 3.3e-4;
        cfg.train.seed = 42;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = RunConfig::parse(
            "# desk run\n[model]\nmask_ratio = 0.75\npreset = dyvit-b\n[train]\nsteps = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.model.channels, [112, 224, 448, 896]);
        assert_eq!(cfg.model.mask_ratio, 0.75);
        assert_eq!(cfg.train.steps, 7);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunConfig::parse("[model]\ndepth = 3\n").is_err());
        assert!(RunConfig::parse("[extra]\n").is_err());
        assert!(RunConfig::parse("lr = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nchannels = 1,2,3\n").is_err());
        assert!(RunConfig::parse("[model]\nmask_ratio = 1.5\n").is_err());
        assert!(RunConfig::parse("[optim]\nlr = fast\n").is_err());
    }

    #[test]
    fn linear_decay_schedule() {
        let o = OptimConfig { decay_start: 0.5, ..OptimConfig::default() };
        assert_eq!(o.lr_at(1, 10), 1e-3);
        assert_eq!(o.lr_at(5, 10), 1e-3);
        assert!((o.lr_at(6, 10) - 1e-3).abs() < 1e-15);
        assert!((o.lr_at(10, 10) - 2e-4).abs() < 1e-15);
        assert_eq!(OptimConfig::default().lr_at(10, 10), 1e-3);
    }
}
