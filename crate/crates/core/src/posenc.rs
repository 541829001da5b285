//! Positional encodings: sinusoidal, learnable, rotary, and time-aligned rotary.
//!
//! Rotary variants act on query/key projections. Time-aligned rotary places
//! every token on the audio frame clock: video frame `m` sits at position
//! `m * eta_a / eta_v`, which is the same as rotating video tokens with
//! frequencies scaled by `eta_a / eta_v`. Cross-modal attention logits then
//! depend on the physical time offset between two frames rather than their
//! index offset.
//!
//! Sinusoidal and learnable encodings are additive and are applied to token
//! embeddings before the first fusion block, indexed over the concatenated
//! `[audio; video]` sequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{kernels, Tape, Tensor, Var};

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Video => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// Frame rates of the two streams, in frames per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub eta_a: f64,
    pub eta_v: f64,
}

impl RateSpec {
    pub fn new(eta_a: f64, eta_v: f64) -> Result<Self> {
        if !(eta_a > 0.0 && eta_v > 0.0 && eta_a.is_finite() && eta_v.is_finite()) {
            return Err(Error::Config(format!("frame rates must be positive, got {eta_a}/{eta_v}")));
        }
        Ok(RateSpec { eta_a, eta_v })
    }

    /// Ratio applied to video positions (and equivalently video frequencies).
    pub fn video_scale(&self) -> f64 {
        self.eta_a / self.eta_v
    }
}

impl Default for RateSpec {
    fn default() -> Self {
        RateSpec { eta_a: 50.0, eta_v: 30.0 }
    }
}

/// Per-pair rotary frequencies `theta_base^(-2k/head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryBank {
    head_dim: usize,
    theta_base: f64,
    freqs: Vec<f64>,
}

impl RotaryBank {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary head_dim must be even and positive, got {head_dim}")));
        }
        if !(theta_base > 1.0) {
            return Err(Error::Config(format!("theta_base must exceed 1, got {theta_base}")));
        }
        let freqs = (0..head_dim / 2)
            .map(|k| theta_base.powf(-2.0 * k as f64 / head_dim as f64))
            .collect();
        Ok(RotaryBank { head_dim, theta_base, freqs })
    }

    /// Bank with explicit frequencies, for tests and custom schedules.
    pub fn with_freqs(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Config("empty frequency bank".into()));
        }
        Ok(RotaryBank { head_dim: 2 * freqs.len(), theta_base: f64::NAN, freqs })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

/// Rotates each consecutive pair `(x[2k], x[2k+1])` of row `t` by
/// `positions[t] * freq[k]`. `x` may hold several heads side by side.
pub fn rope_rotate(x: &Tensor, positions: &[f64], bank: &RotaryBank) -> Result<Tensor> {
    let (r, c) = x.require_matrix("rope_rotate")?;
    if c % bank.head_dim != 0 {
        return Err(Error::Config(format!("width {c} is not a multiple of head_dim {}", bank.head_dim)));
    }
    if positions.len() != r {
        return Err(Error::shape("rope_rotate", format!("{} positions for {r} rows", positions.len())));
    }
    let mut out = x.data().to_vec();
    kernels::rotate_pairs(&mut out, c, bank.head_dim, positions, &bank.freqs, 1.0);
    Tensor::new(vec![r, c], out)
}

/// Tape version of [`rope_rotate`].
pub fn rope_on_tape(tape: &mut Tape, x: Var, positions: &[f64], bank: &RotaryBank) -> Result<Var> {
    tape.rope(x, positions, &bank.freqs, bank.head_dim)
}

/// Positions on the audio frame clock: audio `n -> n`, video `m -> m * eta_a / eta_v`.
pub fn tarope_positions(modality: Modality, indices: &[usize], rates: RateSpec) -> Vec<f64> {
    match modality {
        Modality::Audio => indices.iter().map(|&n| n as f64).collect(),
        Modality::Video => {
            let s = rates.video_scale();
            indices.iter().map(|&m| m as f64 * s).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncKind {
    Sinusoidal,
    Learnable,
    Rope,
    TaRope,
}

impl PosEncKind {
    pub const ALL: [PosEncKind; 4] =
        [PosEncKind::Sinusoidal, PosEncKind::Learnable, PosEncKind::Rope, PosEncKind::TaRope];

    pub fn name(self) -> &'static str {
        match self {
            PosEncKind::Sinusoidal => "sinusoidal",
            PosEncKind::Learnable => "learnable",
            PosEncKind::Rope => "rope",
            PosEncKind::TaRope => "tarope",
        }
    }

    pub fn is_rotary(self) -> bool {
        matches!(self, PosEncKind::Rope | PosEncKind::TaRope)
    }

    pub fn is_additive(self) -> bool {
        !self.is_rotary()
    }
}

impl fmt::Display for PosEncKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosEncKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinusoidal" | "sin" => Ok(PosEncKind::Sinusoidal),
            "learnable" | "learned" => Ok(PosEncKind::Learnable),
            "rope" => Ok(PosEncKind::Rope),
            "tarope" | "ta-rope" => Ok(PosEncKind::TaRope),
            other => Err(Error::Config(format!("unknown positional encoding '{other}'"))),
        }
    }
}

/// Where a token sits: its stream, its frame index within the stream, and its
/// index in the concatenated `[audio; video]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub modality: Modality,
    pub index: usize,
    pub seq_index: usize,
}

impl TokenMeta {
    /// Layout of a concatenated sequence with `audio_len` audio tokens first.
    pub fn layout(audio_len: usize, video_len: usize) -> Vec<TokenMeta> {
        let audio = (0..audio_len).map(|i| TokenMeta { modality: Modality::Audio, index: i, seq_index: i });
        let video = (0..video_len).map(|j| TokenMeta {
            modality: Modality::Video,
            index: j,
            seq_index: audio_len + j,
        });
        audio.chain(video).collect()
    }
}

/// Rotary positions for each token, or `None` for additive variants.
pub fn rotary_positions(kind: PosEncKind, tokens: &[TokenMeta], rates: RateSpec) -> Option<Vec<f64>> {
    match kind {
        PosEncKind::Rope => Some(tokens.iter().map(|t| t.seq_index as f64).collect()),
        PosEncKind::TaRope => {
            let s = rates.video_scale();
            Some(
                tokens
                    .iter()
                    .map(|t| match t.modality {
                        Modality::Audio => t.index as f64,
                        Modality::Video => t.index as f64 * s,
                    })
                    .collect(),
            )
        }
        PosEncKind::Sinusoidal | PosEncKind::Learnable => None,
    }
}

/// Applies the attention-time part of a positional encoding to queries and
/// keys that share one token layout. Additive variants return `q`, `k` unchanged.
pub fn apply_posenc(
    kind: PosEncKind,
    q: &Tensor,
    k: &Tensor,
    tokens: &[TokenMeta],
    rates: RateSpec,
    bank: &RotaryBank,
) -> Result<(Tensor, Tensor)> {
    if q.rows() != tokens.len() || k.rows() != tokens.len() {
        return Err(Error::shape("apply_posenc", "token metadata length differs from sequence"));
    }
    match rotary_positions(kind, tokens, rates) {
        Some(pos) => Ok((rope_rotate(q, &pos, bank)?, rope_rotate(k, &pos, bank)?)),
        None => Ok((q.clone(), k.clone())),
    }
}

/// Pre-softmax logits `rot(q_i) · rot(k_j)` for explicit query/key positions.
pub fn rotary_logits(q: &Tensor, q_pos: &[f64], k: &Tensor, k_pos: &[f64], bank: &RotaryBank) -> Result<Tensor> {
    let qr = rope_rotate(q, q_pos, bank)?;
    let kr = rope_rotate(k, k_pos, bank)?;
    qr.matmul(&kr.transpose()?)
}

/// Standard sinusoidal table: `sin(p / 10000^(2i/d))` on even columns, `cos` on odd.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = p as f64 / DEFAULT_THETA_BASE.powf(2.0 * pair / d as f64);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data)
}
