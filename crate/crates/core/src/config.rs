//! Model and training hyper-parameters, presets, and the flat `key=value`
//! configuration format shared by config files, CLI overrides, and
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Which attention branches contribute to `V′` and `U′`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Joint,
    LocalOnly,
    GlobalOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [
        AttentionMode::Joint,
        AttentionMode::LocalOnly,
        AttentionMode::GlobalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Joint => "joint",
            AttentionMode::LocalOnly => "local_only",
            AttentionMode::GlobalOnly => "global_only",
        }
    }

    pub fn uses_local(self) -> bool {
        self != AttentionMode::GlobalOnly
    }

    pub fn uses_global(self) -> bool {
        self != AttentionMode::LocalOnly
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(AttentionMode::Joint),
            "local_only" | "local" => Ok(AttentionMode::LocalOnly),
            "global_only" | "global" => Ok(AttentionMode::GlobalOnly),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural switches for ablation runs. All flags are independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockAblation {
    pub attention_mode: AttentionMode,
    /// Drop the `φ(U⊙V′)` factor so only `U′⊙V` feeds the output module.
    pub single_gate: bool,
    /// Produce `U`, `V` with normalization + linear projection instead of the
    /// convolution module.
    pub dense_uv: bool,
    /// Same replacement for the shared query/key representation.
    pub dense_qk: bool,
}

impl Default for BlockAblation {
    fn default() -> Self {
        Self {
            attention_mode: AttentionMode::Joint,
            single_gate: false,
            dense_uv: false,
            dense_qk: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small,
    Medium,
    Large,
    Tiny,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "S",
            Preset::Medium => "M",
            Preset::Large => "L",
            Preset::Tiny => "tiny",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" | "small" => Ok(Preset::Small),
            "M" | "m" | "medium" => Ok(Preset::Medium),
            "L" | "l" | "large" => Ok(Preset::Large),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// R: number of stacked blocks.
    pub num_blocks: usize,
    /// N: encoder filters / model width.
    pub dim: usize,
    /// K1: encoder and decoder kernel size.
    pub enc_kernel: usize,
    pub enc_stride: usize,
    /// K2: depthwise kernel size inside each convolution module.
    pub dw_kernel: usize,
    /// P: local attention chunk size.
    pub chunk: usize,
    /// D: query/key dimension.
    pub attn_dim: usize,
    /// φ: gate activation.
    pub gate: Activation,
    /// C: number of speakers.
    pub speakers: usize,
    pub dropout: f64,
    pub ablation: BlockAblation,
    /// Share one convolution module between `U` and `V`.
    pub tie_uv: bool,
    pub rope_base: f64,
    /// Optional activation applied to the global-branch queries and keys.
    pub global_qk_act: Option<Activation>,
    pub norm_eps: f64,
    pub sample_rate: u32,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            preset: p,
            num_blocks: 22,
            dim: 256,
            enc_kernel: 8,
            enc_stride: 4,
            dw_kernel: 31,
            chunk: 256,
            attn_dim: 128,
            gate: Activation::Sigmoid,
            speakers: 2,
            dropout: 0.1,
            ablation: BlockAblation::default(),
            tie_uv: false,
            rope_base: 10_000.0,
            global_qk_act: None,
            norm_eps: 1e-5,
            sample_rate: 8000,
        };
        match p {
            Preset::Small => base,
            Preset::Medium => Self {
                num_blocks: 25,
                dim: 384,
                enc_kernel: 16,
                enc_stride: 8,
                dw_kernel: 17,
                ..base
            },
            Preset::Large => Self {
                num_blocks: 24,
                dim: 512,
                enc_kernel: 16,
                enc_stride: 8,
                dw_kernel: 17,
                ..base
            },
            Preset::Tiny => Self {
                num_blocks: 1,
                dim: 16,
                enc_kernel: 8,
                enc_stride: 4,
                dw_kernel: 7,
                chunk: 8,
                attn_dim: 8,
                ..base
            },
        }
    }

    pub fn small() -> Self {
        Self::preset(Preset::Small)
    }

    pub fn medium() -> Self {
        Self::preset(Preset::Medium)
    }

    pub fn large() -> Self {
        Self::preset(Preset::Large)
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.dim == 0 || self.attn_dim == 0 || self.chunk == 0 {
            return fail("blocks, dim, attn_dim and chunk must be positive".into());
        }
        if self.enc_kernel < 2 || !self.enc_kernel.is_multiple_of(2) {
            return fail(format!("encoder kernel {} must be even", self.enc_kernel));
        }
        if self.enc_stride != self.enc_kernel / 2 {
            return fail(format!(
                "encoder stride {} must be half the kernel size {}",
                self.enc_stride, self.enc_kernel
            ));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return fail(format!("depthwise kernel {} must be odd", self.dw_kernel));
        }
        if !self.attn_dim.is_multiple_of(2) {
            return fail(format!(
                "attention dim {} must be even for RoPE",
                self.attn_dim
            ));
        }
        if !self.dim.is_multiple_of(2) {
            return fail(format!(
                "model dim {} must be even for positional encodings",
                self.dim
            ));
        }
        if !(1..=4).contains(&self.speakers) {
            return fail(format!("speaker count {} outside 1..=4", self.speakers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.rope_base <= 0.0 || self.norm_eps <= 0.0 {
            return fail("rope_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Frame count for a (padded) signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        (len - self.enc_kernel) / self.enc_stride + 1
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => {
                // keep ablation switches that were already applied
                let keep = (self.ablation, self.speakers);
                *self = Self::preset(value.parse()?);
                (self.ablation, self.speakers) = keep;
            }
            "blocks" => self.num_blocks = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "enc_kernel" => self.enc_kernel = parse(key, value)?,
            "enc_stride" => self.enc_stride = parse(key, value)?,
            "dw_kernel" => self.dw_kernel = parse(key, value)?,
            "chunk" => self.chunk = parse(key, value)?,
            "attn_dim" => self.attn_dim = parse(key, value)?,
            "gate" => self.gate = value.parse()?,
            "speakers" => self.speakers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "attention_mode" => self.ablation.attention_mode = value.parse()?,
            "single_gate" => self.ablation.single_gate = parse(key, value)?,
            "dense_uv" => self.ablation.dense_uv = parse(key, value)?,
            "dense_qk" => self.ablation.dense_qk = parse(key, value)?,
            "tie_uv" => self.tie_uv = parse(key, value)?,
            "rope_base" => self.rope_base = parse(key, value)?,
            "global_qk_act" => {
                self.global_qk_act = match value {
                    "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "norm_eps" => self.norm_eps = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Lossless `key=value` lines; parsing them back yields an equal config.
    pub fn to_kv(&self) -> String {
        let a = &self.ablation;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("preset", self.preset.name().into());
        put("blocks", self.num_blocks.to_string());
        put("dim", self.dim.to_string());
        put("enc_kernel", self.enc_kernel.to_string());
        put("enc_stride", self.enc_stride.to_string());
        put("dw_kernel", self.dw_kernel.to_string());
        put("chunk", self.chunk.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("gate", self.gate.name().into());
        put("speakers", self.speakers.to_string());
        put("dropout", self.dropout.to_string());
        put("attention_mode", a.attention_mode.name().into());
        put("single_gate", a.single_gate.to_string());
        put("dense_uv", a.dense_uv.to_string());
        put("dense_qk", a.dense_qk.to_string());
        put("tie_uv", self.tie_uv.to_string());
        put("rope_base", self.rope_base.to_string());
        put(
            "global_qk_act",
            self.global_qk_act
                .map_or("none".into(), |a| a.name().into()),
        );
        put("norm_eps", self.norm_eps.to_string());
        put("sample_rate", self.sample_rate.to_string());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = match map.get("preset") {
            Some(p) => Self::preset(p.parse()?),
            None => Self::tiny(),
        };
        for (k, v) in &map {
            if k != "preset" && !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer, schedule, and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs during which the learning rate is held constant.
    pub hold_epochs: usize,
    pub lr_decay: f64,
    /// Epochs without validation improvement before the rate is decayed.
    pub patience: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 15e-5,
            max_epochs: 200,
            hold_epochs: 85,
            lr_decay: 0.5,
            patience: 2,
            clip_norm: 5.0,
            batch_size: 1,
            seed: 0,
            max_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "hold_epochs" => self.hold_epochs = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Parses `key=value` lines. Blank lines and `#` comments are ignored; later
/// keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

/// Builds both configs from an optional `key=value` file and `key=value`
/// overrides applied after it. A `preset` key resets the model config before
/// any other key is applied; unknown keys are errors.
pub fn resolve_configs(
    base: ModelConfig,
    file: Option<&str>,
    overrides: &[String],
) -> Result<(ModelConfig, TrainConfig)> {
    let mut pairs: Vec<(String, String)> = match file {
        Some(text) => parse_kv(text)?.into_iter().collect(),
        None => Vec::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        pairs.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    let mut model = base;
    let mut train = TrainConfig::default();
    if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
        model = ModelConfig::preset(v.parse()?);
    }
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        if !model.apply(k, v)? && !train.apply(k, v)? {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_hyperparameter_table() {
        let s = ModelConfig::small();
        assert_eq!(
            (
                s.num_blocks,
                s.dim,
                s.enc_kernel,
                s.enc_stride,
                s.dw_kernel,
                s.chunk,
                s.attn_dim
            ),
            (22, 256, 8, 4, 31, 256, 128)
        );
        assert_eq!(s.gate, Activation::Sigmoid);
        let m = ModelConfig::medium();
        assert_eq!(
            (
                m.num_blocks,
                m.dim,
                m.enc_kernel,
                m.enc_stride,
                m.dw_kernel,
                m.chunk,
                m.attn_dim
            ),
            (25, 384, 16, 8, 17, 256, 128)
        );
        let l = ModelConfig::large();
        assert_eq!(
            (
                l.num_blocks,
                l.dim,
                l.enc_kernel,
                l.enc_stride,
                l.dw_kernel,
                l.chunk,
                l.attn_dim
            ),
            (24, 512, 16, 8, 17, 256, 128)
        );
        let t = ModelConfig::tiny();
        assert_eq!(
            (
                t.num_blocks,
                t.dim,
                t.enc_kernel,
                t.enc_stride,
                t.dw_kernel,
                t.chunk,
                t.attn_dim
            ),
            (1, 16, 8, 4, 7, 8, 8)
        );
        for c in [s, m, l, t] {
            c.validate().unwrap();
            assert_eq!(c.dropout, 0.1);
            assert_eq!(c.sample_rate, 8000);
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::medium();
        cfg.ablation.dense_qk = true;
        cfg.ablation.attention_mode = AttentionMode::GlobalOnly;
        cfg.global_qk_act = Some(Activation::Relu);
        cfg.dropout = 0.125;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig::from_kv("preset=tiny\ndw_kernel=6").is_err());
        assert!(ModelConfig::from_kv("preset=tiny\nenc_stride=3").is_err());
        assert!(ModelConfig::from_kv("preset=tiny\nbogus=1").is_err());
        assert!(parse_kv("no equals sign").is_err());
        let t = TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn train_defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.lr, 15e-5);
        assert_eq!((t.hold_epochs, t.patience, t.batch_size), (85, 2, 1));
        assert_eq!((t.lr_decay, t.clip_norm), (0.5, 5.0));
    }

    #[test]
    fn resolve_applies_preset_first_and_overrides_last() {
        let file = "lr = 0.01\nchunk=4\npreset=tiny\n# comment\n";
        let (m, t) = resolve_configs(
            ModelConfig::small(),
            Some(file),
            &["chunk=6".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(m.preset, Preset::Tiny);
        assert_eq!(m.chunk, 6);
        assert_eq!((t.lr, t.seed), (0.01, 9));
        assert!(matches!(
            resolve_configs(ModelConfig::tiny(), None, &["nonsense=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_configs(ModelConfig::tiny(), None, &["lr".into()]),
            Err(Error::Config(_))
        ));
        assert!(resolve_configs(ModelConfig::tiny(), None, &["lr=-1".into()]).is_err());
    }
}
