//! Exact parameter and FLOP accounting.
//!
//! Parameter counts run over the same wiring walk that builds models, so a
//! count is always a literal enumeration of the parameters a constructed
//! model would hold. FLOPs follow the 1 multiply-accumulate = 1 FLOP
//! convention over every matrix product in a forward pass (projections,
//! attention scores and mixing, feedforward, signal products, patch
//! embedding, head); elementwise work (norms, activations, softmax) is not
//! counted.

use crate::error::Result;
use crate::params::{ParamGroup, ParamRole};
use crate::signal::SignalVariant;

use super::build::enumerate_params;
use super::config::{Mode, ModelConfig};

/// Which parameters enter a count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountConvention {
    /// Weights and layer-norm gains/shifts; linear biases omitted. This is
    /// the convention behind the translation-table block-parameter figures.
    WeightsOnly,
    WithBiases,
}

impl CountConvention {
    pub fn name(self) -> &'static str {
        match self {
            CountConvention::WeightsOnly => "weights_only",
            CountConvention::WithBiases => "with_biases",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountExclusion {
    None,
    /// Drop embedding-side parameters (token/patch/position/class) and the
    /// output head.
    EmbeddingsAndHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCountOptions {
    pub convention: CountConvention,
    pub exclusion: CountExclusion,
}

impl ParamCountOptions {
    /// The convention that reproduces the published block-parameter table:
    /// weights only, embeddings and head excluded.
    pub fn table_convention() -> Self {
        ParamCountOptions {
            convention: CountConvention::WeightsOnly,
            exclusion: CountExclusion::EmbeddingsAndHead,
        }
    }

    pub fn everything() -> Self {
        ParamCountOptions {
            convention: CountConvention::WithBiases,
            exclusion: CountExclusion::None,
        }
    }

    fn admits(&self, role: ParamRole, group: ParamGroup) -> bool {
        if self.convention == CountConvention::WeightsOnly && role == ParamRole::Bias {
            return false;
        }
        if self.exclusion == CountExclusion::EmbeddingsAndHead
            && matches!(group, ParamGroup::Embedding | ParamGroup::Head)
        {
            return false;
        }
        true
    }
}

/// Per-group and total parameter counts.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamCountReport {
    pub total: u64,
    pub by_group: Vec<(String, u64)>,
}

/// Count parameters by enumerating the model's construction walk.
pub fn count_params(cfg: &ModelConfig, opts: ParamCountOptions) -> Result<ParamCountReport> {
    let specs = enumerate_params(cfg)?;
    let mut by_group: Vec<(ParamGroup, u64)> = ParamGroup::all().iter().map(|&g| (g, 0)).collect();
    let mut total = 0u64;
    for spec in &specs {
        if !opts.admits(spec.role, spec.group) {
            continue;
        }
        let n = spec.numel();
        total += n;
        for entry in by_group.iter_mut() {
            if entry.0 == spec.group {
                entry.1 += n;
            }
        }
    }
    Ok(ParamCountReport {
        total,
        by_group: by_group
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(g, n)| (g.name().to_string(), n))
            .collect(),
    })
}

/// Multiply-accumulate counts per forward-pass component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct FlopReport {
    pub projections: u64,
    /// Attention score (`Q K^T`) and mixing (`probs V`) products.
    pub attention_scores: u64,
    pub ffn: u64,
    pub signals: u64,
    pub embedding: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.projections
            + self.attention_scores
            + self.ffn
            + self.signals
            + self.embedding
            + self.head
    }

    pub fn components(&self) -> [(&'static str, u64); 6] {
        [
            ("projections", self.projections),
            ("attention_scores", self.attention_scores),
            ("ffn", self.ffn),
            ("signals", self.signals),
            ("embedding", self.embedding),
            ("head", self.head),
        ]
    }
}

/// MAC count for one forward pass over `n_tokens` tokens (per stack in
/// encoder-decoder mode, where both stacks see `n_tokens`).
pub fn count_flops(cfg: &ModelConfig, n_tokens: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let n = n_tokens as u64;
    let h = cfg.hidden as u64;
    let ff = cfg.ff as u64;
    let levels = cfg.levels as u64;

    let mut projections = 0u64;
    let mut attention_scores = 0u64;
    let mut ffn = 0u64;
    let mut signals = 0u64;

    // encoder stack
    projections += levels * 4 * n * h * h;
    attention_scores += levels * 2 * n * n * h;
    ffn += levels * 2 * n * h * ff;

    if cfg.mode == Mode::EncoderDecoder {
        // decoder self-attention
        projections += levels * 4 * n * h * h;
        attention_scores += levels * 2 * n * n * h;
        // cross attention: q/o over decoder tokens, k/v over encoder tokens
        projections += levels * 4 * n * h * h;
        attention_scores += levels * 2 * n * n * h;
        ffn += levels * 2 * n * h * ff;
    }

    if cfg.has_signal_pairs() {
        let r = cfg.rank_policy.resolve(cfg.hidden)? as u64;
        let attn_part = if cfg.signal_variant.has_attn_pairs() {
            3 * 2 * n * h * r
        } else {
            0
        };
        let ffn_part = if cfg.signal_variant.has_ffn_pair() {
            if cfg.signal_variant == SignalVariant::InterFfn {
                n * r * (h + ff)
            } else {
                2 * n * h * r
            }
        } else {
            0
        };
        let stacks = match cfg.mode {
            Mode::EncoderOnly => 1,
            Mode::EncoderDecoder => 2,
        };
        signals = stacks * levels * (attn_part + ffn_part);
    }

    let (embedding, head) = match cfg.mode {
        Mode::EncoderOnly => {
            let vis = cfg.vision.unwrap();
            let embed = (vis.n_patches() as u64) * (vis.patch_dim() as u64) * h;
            let head = h * vis.classes as u64; // class token only
            (embed, head)
        }
        Mode::EncoderDecoder => {
            // lookups are free under the MAC convention
            let head = n * h * cfg.vocab.unwrap() as u64;
            (0, head)
        }
    };

    Ok(FlopReport {
        projections,
        attention_scores,
        ffn,
        signals,
        embedding,
        head,
    })
}
