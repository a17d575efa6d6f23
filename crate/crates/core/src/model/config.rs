//! Architecture configuration.

use crate::error::{Error, Result};
use crate::signal::{RankPolicy, SignalVariant, StackMode};

/// Which weight-sharing scheme the stack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Distinct block per level.
    Vanilla,
    /// One shared block, static sinusoidal (position, level) transitions.
    Universal,
    /// Distinct attention per level, one feedforward shared model-wide.
    Owf,
    /// One shared block with per-level low-rank signals and norms.
    Ringformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Vanilla => "vanilla",
            Arch::Universal => "universal",
            Arch::Owf => "owf",
            Arch::Ringformer => "ringformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => Arch::Vanilla,
            "universal" => Arch::Universal,
            "owf" => Arch::Owf,
            "ringformer" => Arch::Ringformer,
            other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// ViT-style: patch embedding, class token, classification head.
    EncoderOnly,
    /// Translation-style: token embeddings, causal decoder, vocabulary head.
    EncoderDecoder,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::EncoderOnly => "encoder_only",
            Mode::EncoderDecoder => "encoder_decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "encoder_only" => Mode::EncoderOnly,
            "encoder_decoder" => Mode::EncoderDecoder,
            other => return Err(Error::Config(format!("unknown mode '{other}'"))),
        })
    }

    pub fn stack_mode(self) -> StackMode {
        match self {
            Mode::EncoderOnly => StackMode::EncoderOnly,
            Mode::EncoderDecoder => StackMode::EncoderDecoder,
        }
    }
}

/// Residual-norm placement. Encoder-decoder mode defaults to post-norm
/// (the original arrangement); encoder-only mode defaults to pre-norm (the
/// ViT arrangement, with a final norm before the head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    Pre,
    Post,
}

impl NormPlacement {
    pub fn name(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pre" => NormPlacement::Pre,
            "post" => NormPlacement::Post,
            other => return Err(Error::Config(format!("unknown norm placement '{other}'"))),
        })
    }
}

/// Image-input geometry for encoder-only mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub classes: usize,
}

impl VisionConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patch count plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub mode: Mode,
    pub hidden: usize,
    pub ff: usize,
    pub levels: usize,
    pub heads: usize,
    #[serde(default)]
    pub rank_policy: RankPolicy,
    pub signal_variant: SignalVariant,
    pub norm_placement: NormPlacement,
    /// Embedding rows for encoder-decoder mode (task vocabulary plus the
    /// BOS/EOS specials the harness appends).
    pub vocab: Option<usize>,
    pub vision: Option<VisionConfig>,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Translation-style config with the usual defaults (post-norm,
    /// full signals, rank H/16).
    pub fn translation(arch: Arch, hidden: usize, ff: usize, levels: usize, heads: usize, vocab: usize) -> Self {
        ModelConfig {
            arch,
            mode: Mode::EncoderDecoder,
            hidden,
            ff,
            levels,
            heads,
            rank_policy: RankPolicy::default(),
            signal_variant: SignalVariant::Full,
            norm_placement: NormPlacement::Post,
            vocab: Some(vocab),
            vision: None,
            dropout: 0.1,
            max_seq_len: 50,
        }
    }

    /// ViT-style config (pre-norm, full signals, rank H/16).
    pub fn vision(arch: Arch, hidden: usize, ff: usize, levels: usize, heads: usize, vis: VisionConfig) -> Self {
        ModelConfig {
            arch,
            mode: Mode::EncoderOnly,
            hidden,
            ff,
            levels,
            heads,
            rank_policy: RankPolicy::default(),
            signal_variant: SignalVariant::Full,
            norm_placement: NormPlacement::Pre,
            vocab: None,
            vision: Some(vis),
            dropout: 0.1,
            max_seq_len: vis.n_tokens(),
        }
    }

    /// Whether this architecture/variant combination carries low-rank
    /// signal pairs.
    pub fn has_signal_pairs(&self) -> bool {
        self.arch == Arch::Ringformer && self.signal_variant != SignalVariant::StaticSinusoidal
    }

    /// Whether levels receive a static sinusoidal (position, level)
    /// transition before the shared block.
    pub fn has_static_transition(&self) -> bool {
        self.arch == Arch::Universal
            || (self.arch == Arch::Ringformer
                && self.signal_variant == SignalVariant::StaticSinusoidal)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ff == 0 || self.levels == 0 {
            return Err(Error::Config(format!(
                "hidden, ff and levels must be positive (got {}, {}, {})",
                self.hidden, self.ff, self.levels
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden dimension {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        match self.mode {
            Mode::EncoderDecoder => {
                if self.vocab.is_none() {
                    return Err(Error::Config(
                        "encoder_decoder mode needs a vocabulary size".into(),
                    ));
                }
                if self.vision.is_some() {
                    return Err(Error::Config(
                        "encoder_decoder mode does not take an image configuration".into(),
                    ));
                }
                if self.max_seq_len == 0 {
                    return Err(Error::Config("max_seq_len must be positive".into()));
                }
            }
            Mode::EncoderOnly => {
                let vis = self.vision.ok_or_else(|| {
                    Error::Config("encoder_only mode needs an image configuration".into())
                })?;
                if vis.patch_size == 0
                    || vis.image_size == 0
                    || vis.image_size % vis.patch_size != 0
                {
                    return Err(Error::Config(format!(
                        "image size {} is not divisible by patch size {}",
                        vis.image_size, vis.patch_size
                    )));
                }
                if vis.channels == 0 || vis.classes == 0 {
                    return Err(Error::Config(
                        "channels and classes must be positive".into(),
                    ));
                }
            }
        }
        if self.has_signal_pairs() {
            self.rank_policy.resolve(self.hidden)?;
        }
        if self.has_static_transition() && !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(
                "static sinusoidal transitions need an even hidden dimension".into(),
            ));
        }
        Ok(())
    }
}
