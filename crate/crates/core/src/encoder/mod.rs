//! Fusion encoders for two frame-rate-mismatched streams.
//!
//! Both streams are linearly projected into a shared `d_model` space and then
//! fused by one of six strategies:
//!
//! | variant  | layer 1            | layer 2            |
//! |----------|--------------------|--------------------|
//! | `Concat` | pool each stream, concatenate           ||
//! | `IsaIsa` | intra-modal self   | intra-modal self   |
//! | `IcaIca` | inter-modal cross  | inter-modal cross  |
//! | `IsaIca` | intra-modal self   | inter-modal cross  |
//! | `IcaIsa` | inter-modal cross  | intra-modal self   |
//! | `MsaMsa` | multimodal self    | multimodal self    |
//!
//! Intra- and inter-modal layers keep one block per stream (two towers);
//! multimodal self-attention runs one shared block over the concatenated
//! `[audio; video]` sequence. Token states are mean-pooled over both streams
//! and classified by a linear head.

mod checkpoint;
mod layers;
mod model;
mod params;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{AttentionTrace, ForwardCtx};
pub use model::{classification_loss, FusionModel, ModelOutput, PaddedSample, EMBED_NORM_EPS};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::posenc::{Modality, PosEncKind, RateSpec, DEFAULT_THETA_BASE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionVariant {
    Concat,
    IsaIsa,
    IcaIca,
    IsaIca,
    IcaIsa,
    MsaMsa,
}

/// One fusion layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Isa,
    Ica,
    Msa,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::Concat,
        FusionVariant::IsaIsa,
        FusionVariant::IcaIca,
        FusionVariant::IsaIca,
        FusionVariant::IcaIsa,
        FusionVariant::MsaMsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Concat => "concat",
            FusionVariant::IsaIsa => "isa+isa",
            FusionVariant::IcaIca => "ica+ica",
            FusionVariant::IsaIca => "isa+ica",
            FusionVariant::IcaIsa => "ica+isa",
            FusionVariant::MsaMsa => "msa+msa",
        }
    }

    /// Layer sequence for `n_blocks` layers; the two-name variants alternate
    /// their pair when more than two layers are requested.
    pub fn layers(self, n_blocks: usize) -> Vec<LayerKind> {
        let pair = match self {
            FusionVariant::Concat => return Vec::new(),
            FusionVariant::IsaIsa => [LayerKind::Isa, LayerKind::Isa],
            FusionVariant::IcaIca => [LayerKind::Ica, LayerKind::Ica],
            FusionVariant::IsaIca => [LayerKind::Isa, LayerKind::Ica],
            FusionVariant::IcaIsa => [LayerKind::Ica, LayerKind::Isa],
            FusionVariant::MsaMsa => [LayerKind::Msa, LayerKind::Msa],
        };
        (0..n_blocks).map(|i| pair[i % 2]).collect()
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphabetic()).collect();
        match key.as_str() {
            "concat" => Ok(FusionVariant::Concat),
            "isaisa" | "isa" => Ok(FusionVariant::IsaIsa),
            "icaica" | "ica" => Ok(FusionVariant::IcaIca),
            "isaica" => Ok(FusionVariant::IsaIca),
            "icaisa" => Ok(FusionVariant::IcaIsa),
            "msamsa" | "msa" => Ok(FusionVariant::MsaMsa),
            _ => Err(Error::Config(format!("unknown fusion variant '{s}'"))),
        }
    }
}

/// Which features feed the matching-loss projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtmTap {
    /// Shared-space features right after the input projections.
    Shared,
    /// Raw per-stream input features.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub fusion: FusionVariant,
    pub posenc: PosEncKind,
    pub n_classes: usize,
    pub d_in_audio: usize,
    pub d_in_video: usize,
    pub dropout: f64,
    pub theta_base: f64,
    pub rates: RateSpec,
    /// Rows of the learnable/sinusoidal position table.
    pub max_tokens: usize,
    /// Width of the matching-loss embedding space.
    pub d_emb: usize,
    pub ctm_tap: CtmTap,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_blocks: 2,
            fusion: FusionVariant::MsaMsa,
            posenc: PosEncKind::TaRope,
            n_classes: 6,
            d_in_audio: 1024,
            d_in_video: 35,
            dropout: 0.1,
            theta_base: DEFAULT_THETA_BASE,
            rates: RateSpec::default(),
            max_tokens: 1024,
            d_emb: 128,
            ctm_tap: CtmTap::Shared,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even", self.head_dim()));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.d_in_audio == 0 || self.d_in_video == 0 || self.d_ff == 0 || self.d_emb == 0 {
            return bad("feature, feed-forward and embedding widths must be positive".into());
        }
        if self.fusion != FusionVariant::Concat && self.n_blocks == 0 {
            return bad("attention fusion needs at least one block".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.posenc.is_additive() && self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        RateSpec::new(self.rates.eta_a, self.rates.eta_v)?;
        Ok(())
    }
}

/// Frame-major features of one stream: `frames` is `T × d`, frame `i` sits at
/// `i / fps` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub fps: f64,
    pub modality: Modality,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, fps: f64, modality: Modality) -> Result<Self> {
        frames.require_matrix("feature sequence")?;
        if frames.rows() == 0 {
            return Err(Error::Empty(format!("{modality} sequence has no frames")));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(FeatureSequence { frames, fps, modality })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn timestamps(&self) -> Vec<f64> {
        timestamps(self.len(), self.fps)
    }
}

/// `i / fps` for `i in 0..n`.
pub fn timestamps(n: usize, fps: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 / fps).collect()
}
