//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys, repeated keys
//! and out-of-domain values are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scan::ScanMode;

/// Threshold rule used when segmenting volumes for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentRule {
    Otsu,
    Fixed(f32),
}

impl FromStr for SegmentRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "otsu" => Ok(Self::Otsu),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|v| v.parse().ok())
                .map(Self::Fixed)
                .ok_or_else(|| format!("expected `otsu` or `fixed:<value>`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for SegmentRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Otsu => f.write_str("otsu"),
            Self::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<ScanMode, String> {
    match s {
        "tree" => Ok(ScanMode::Tree),
        "identity" => Ok(ScanMode::Identity),
        _ => Err(format!("expected `tree` or `identity`, got `{s}`")),
    }
}

fn mode_name(m: &ScanMode) -> &'static str {
    match m {
        ScanMode::Tree => "tree",
        ScanMode::Identity => "identity",
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, SegmentRule);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn format_value(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for ScanMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_mode(s)
    }
    fn format_value(&self) -> String {
        mode_name(self).into()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr,)*) => {
        /// Every path and hyperparameter of a run.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// One `key = value` line per field, in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($field), self.$field.format_value()).unwrap();)*
                out
            }
        }
    };
}

run_config! {
    data_dir: PathBuf = PathBuf::from("data"),
    checkpoint_dir: PathBuf = PathBuf::from("checkpoints"),
    report_path: PathBuf = PathBuf::from("report.json"),
    seed: u64 = 0,

    /// Phantom pairs generated; the last `holdout_pairs` are not trained on.
    n_pairs: usize = 10,
    holdout_pairs: usize = 2,
    volume_size: usize = 32,
    branch_count: usize = 6,
    radius_min: f64 = 1.5,
    radius_max: f64 = 3.0,
    tortuosity: f64 = 0.3,
    contrast_angio: f64 = 0.7,
    contrast_non_angio: f64 = 0.15,
    background: f64 = 0.2,
    noise_sigma: f64 = 0.02,

    patch: usize = 4,
    channels: usize = 4,
    codec_epochs: usize = 100,
    codec_lr: f64 = 0.05,
    codec_ema_decay: f64 = 0.9,

    /// Must equal `channels`.
    embed_channels: usize = 4,
    embedder_epochs: usize = 150,
    embedder_lr: f64 = 3e-3,
    tau: f64 = 0.07,
    embedder_ema_decay: f64 = 0.9,
    mask_loss_weight: f64 = 1.0,

    /// Must equal `channels`.
    state_channels: usize = 4,
    lambda: f64 = 1.0,
    attn_mask_weight: f64 = 1.0,
    attn_radius: usize = 2,
    scan_mode: ScanMode = ScanMode::Tree,
    diffusion_steps: usize = 10,
    alpha_start: f64 = 0.999,
    alpha_end: f64 = 0.01,
    blocks: usize = 4,
    weight_info: f64 = 1.0,
    weight_diff: f64 = 1.0,
    weight_scan: f64 = 0.01,
    diffusion_lr: f64 = 1e-2,
    train_steps: usize = 6000,

    data_range: f64 = 1.0,
    segment: SegmentRule = SegmentRule::Otsu,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("radius_min", self.radius_min),
            ("contrast_angio", self.contrast_angio),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("data_range", self.data_range),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{k} must be > 0, got {v}"));
            }
        }
        let non_negative = [
            ("tortuosity", self.tortuosity),
            ("contrast_non_angio", self.contrast_non_angio),
            ("background", self.background),
            ("noise_sigma", self.noise_sigma),
            ("codec_lr", self.codec_lr),
            ("embedder_lr", self.embedder_lr),
            ("diffusion_lr", self.diffusion_lr),
            ("mask_loss_weight", self.mask_loss_weight),
            ("attn_mask_weight", self.attn_mask_weight),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{k} must be >= 0, got {v}"));
            }
        }
        for (k, v) in [("codec_ema_decay", self.codec_ema_decay), ("embedder_ema_decay", self.embedder_ema_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.radius_max < self.radius_min {
            return fail("radius_max < radius_min".into());
        }
        let counts = [
            ("n_pairs", self.n_pairs),
            ("volume_size", self.volume_size),
            ("patch", self.patch),
            ("channels", self.channels),
            ("attn_radius", self.attn_radius),
            ("diffusion_steps", self.diffusion_steps),
            ("blocks", self.blocks),
        ];
        for (k, v) in counts {
            if v == 0 {
                return fail(format!("{k} must be >= 1"));
            }
        }
        if self.holdout_pairs >= self.n_pairs {
            return fail("holdout_pairs must leave at least one training pair".into());
        }
        if self.n_pairs - self.holdout_pairs < 2 {
            return fail("contrastive training needs at least 2 training pairs".into());
        }
        if !self.volume_size.is_multiple_of(self.patch) {
            return fail(format!("volume_size {} not divisible by patch {}", self.volume_size, self.patch));
        }
        if self.embed_channels != self.channels || self.state_channels != self.channels {
            return fail("embed_channels and state_channels must equal channels".into());
        }
        if !(1.0 > self.alpha_start && self.alpha_start > self.alpha_end && self.alpha_end > 0.0) {
            return fail("need 1 > alpha_start > alpha_end > 0".into());
        }
        crate::diffusion::LossWeights::new(self.weight_info, self.weight_diff, self.weight_scan)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.phantom_spec(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Phantom spec for pair `index`.
    pub fn phantom_spec(&self, index: usize) -> crate::phantom::PhantomSpec {
        let n = self.volume_size;
        crate::phantom::PhantomSpec {
            dims: [n, n, n],
            spacing: [1.0; 3],
            branch_count: self.branch_count,
            radius_range: (self.radius_min, self.radius_max),
            tortuosity: self.tortuosity,
            vessel_contrast_angio: self.contrast_angio,
            vessel_contrast_nonangio: self.contrast_non_angio,
            background: self.background,
            noise_sigma: self.noise_sigma,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
        }
    }

    pub fn train_pairs(&self) -> std::ops::Range<usize> {
        0..self.n_pairs - self.holdout_pairs
    }

    pub fn holdout(&self) -> std::ops::Range<usize> {
        self.n_pairs - self.holdout_pairs..self.n_pairs
    }
}
