use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{AttnLayout, Block, ForwardCtx, Linear};
use super::params::{small_normal, ParamId, ParamStore};
use super::{CtmTap, EncoderConfig, FeatureSequence, FusionVariant, LayerKind};
use crate::error::{Error, Result};
use crate::numkernel::{Axis, Tape, Tensor, Var};
use crate::posenc::{rotary_positions, sinusoidal_table, Modality, PosEncKind, RotaryBank, TokenMeta};

/// Guard for L2 normalization of matching-loss embeddings.
pub const EMBED_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum FusionLayer {
    Msa(Block),
    Isa { audio: Block, video: Block },
    Ica { audio: Block, video: Block },
}

/// One sample with both streams right-padded to batch lengths.
///
/// Rows at or beyond `audio_len` / `video_len` are padding: they are never
/// attended to, pooled, or matched.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSample {
    pub audio: Tensor,
    pub video: Tensor,
    pub audio_len: usize,
    pub video_len: usize,
}

impl PaddedSample {
    pub fn new(audio: &FeatureSequence, video: &FeatureSequence, pad_audio: usize, pad_video: usize) -> Result<Self> {
        Ok(PaddedSample {
            audio: pad_rows(&audio.frames, pad_audio)?,
            video: pad_rows(&video.frames, pad_video)?,
            audio_len: audio.len(),
            video_len: video.len(),
        })
    }

    pub fn unpadded(audio: &FeatureSequence, video: &FeatureSequence) -> Self {
        PaddedSample {
            audio: audio.frames.clone(),
            video: video.frames.clone(),
            audio_len: audio.len(),
            video_len: video.len(),
        }
    }

    /// Raw tensors without fps metadata; lengths are the full row counts.
    pub fn from_tensors(audio: Tensor, video: Tensor) -> Self {
        let (audio_len, video_len) = (audio.rows(), video.rows());
        PaddedSample { audio, video, audio_len, video_len }
    }

    fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        let a = (0..self.audio.rows()).map(|i| i < self.audio_len).collect();
        let v = (0..self.video.rows()).map(|j| j < self.video_len).collect();
        (a, v)
    }
}

fn pad_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    if rows < t.rows() {
        return Err(Error::shape("pad_rows", format!("cannot pad {} rows down to {rows}", t.rows())));
    }
    let mut data = t.data().to_vec();
    data.resize(rows * t.cols(), 0.0);
    Tensor::new(vec![rows, t.cols()], data)
}

/// Tape handles produced by [`FusionModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `1 × n_classes`
    pub logits: Var,
    /// Unit-norm matching embeddings of the valid audio/video frames.
    pub embed_audio: Var,
    pub embed_video: Var,
    /// The same embeddings before normalization.
    pub embed_audio_raw: Var,
    pub embed_video_raw: Var,
    /// Shared-space projections of the valid frames.
    pub shared_audio: Var,
    pub shared_video: Var,
}

/// Projection, fusion, pooling and classification, plus the matching-loss head.
#[derive(Clone, Debug)]
pub struct FusionModel {
    cfg: EncoderConfig,
    store: ParamStore,
    bank: RotaryBank,
    proj_audio: Linear,
    proj_video: Linear,
    pos_table: Option<ParamId>,
    layers: Vec<FusionLayer>,
    ctm_audio: Linear,
    ctm_video: Linear,
    head: Linear,
}

impl FusionModel {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let proj_audio = Linear::new(&mut store, &mut rng, "proj.audio", cfg.d_in_audio, d);
        let proj_video = Linear::new(&mut store, &mut rng, "proj.video", cfg.d_in_video, d);
        let pos_table = (cfg.posenc == PosEncKind::Learnable)
            .then(|| store.add("pos.table", small_normal(&mut rng, cfg.max_tokens, d, 0.02)));

        let mut layers = Vec::new();
        for (i, kind) in cfg.fusion.layers(cfg.n_blocks).into_iter().enumerate() {
            let mut block = |stream: &str| {
                Block::new(&mut store, &mut rng, &format!("fusion.{i}.{stream}"), d, cfg.d_ff, cfg.n_heads)
            };
            layers.push(match kind {
                LayerKind::Msa => FusionLayer::Msa(block("shared")),
                LayerKind::Isa => FusionLayer::Isa { audio: block("audio"), video: block("video") },
                LayerKind::Ica => FusionLayer::Ica { audio: block("audio"), video: block("video") },
            });
        }

        let (tap_a, tap_v) = match cfg.ctm_tap {
            CtmTap::Shared => (d, d),
            CtmTap::Raw => (cfg.d_in_audio, cfg.d_in_video),
        };
        let ctm_audio = Linear::new(&mut store, &mut rng, "ctm.audio", tap_a, cfg.d_emb);
        let ctm_video = Linear::new(&mut store, &mut rng, "ctm.video", tap_v, cfg.d_emb);
        let pooled = if cfg.fusion == FusionVariant::Concat { 2 * d } else { d };
        let head = Linear::new(&mut store, &mut rng, "head", pooled, cfg.n_classes);
        let bank = RotaryBank::new(cfg.head_dim(), cfg.theta_base)?;

        Ok(FusionModel { cfg, store, bank, proj_audio, proj_video, pos_table, layers, ctm_audio, ctm_video, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Learnable scalars on the fusion path: the two input projections plus
    /// every fusion block. Excludes the classifier, the matching-loss head
    /// and any learnable position table.
    pub fn count_parameters(&self) -> usize {
        self.store.count_with_prefix(&["proj.", "fusion."])
    }

    /// Learnable scalars in the fusion blocks alone.
    pub fn count_fusion_block_parameters(&self) -> usize {
        self.store.count_with_prefix(&["fusion."])
    }

    pub fn count_all_parameters(&self) -> usize {
        self.store.count()
    }

    /// Runs the model on one (possibly padded) sample.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, s: &PaddedSample) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        if s.audio.cols() != cfg.d_in_audio || s.video.cols() != cfg.d_in_video {
            return Err(Error::Config(format!(
                "input widths {}/{} do not match configured {}/{}",
                s.audio.cols(),
                s.video.cols(),
                cfg.d_in_audio,
                cfg.d_in_video
            )));
        }
        if s.audio_len > s.audio.rows() || s.video_len > s.video.rows() {
            return Err(Error::shape("forward", "valid length exceeds padded length"));
        }
        let (pa, pv) = (s.audio.rows(), s.video.rows());
        let (mask_a, mask_v) = s.masks();

        let xa = ctx.tape.constant(s.audio.clone());
        let xv = ctx.tape.constant(s.video.clone());
        let fa = self.proj_audio.forward(ctx, xa)?;
        let fv = self.proj_video.forward(ctx, xv)?;

        let shared_audio = ctx.tape.slice_rows(fa, 0, s.audio_len)?;
        let shared_video = ctx.tape.slice_rows(fv, 0, s.video_len)?;
        let (tap_a, tap_v) = match cfg.ctm_tap {
            CtmTap::Shared => (shared_audio, shared_video),
            CtmTap::Raw => (ctx.tape.slice_rows(xa, 0, s.audio_len)?, ctx.tape.slice_rows(xv, 0, s.video_len)?),
        };
        let embed_audio_raw = self.ctm_audio.forward(ctx, tap_a)?;
        let embed_video_raw = self.ctm_video.forward(ctx, tap_v)?;
        let embed_audio = ctx.tape.l2_normalize_rows(embed_audio_raw, EMBED_NORM_EPS)?;
        let embed_video = ctx.tape.l2_normalize_rows(embed_video_raw, EMBED_NORM_EPS)?;

        let (mut ha, mut hv) = self.add_positions(ctx, fa, fv, s.audio_len)?;

        let tokens_a = TokenMeta::layout(pa, 0);
        let tokens_v: Vec<TokenMeta> = (0..pv)
            .map(|j| TokenMeta { modality: Modality::Video, index: j, seq_index: s.audio_len + j })
            .collect();
        let pos_a = rotary_positions(cfg.posenc, &tokens_a, cfg.rates);
        let pos_v = rotary_positions(cfg.posenc, &tokens_v, cfg.rates);
        let full = |rows: usize, keys: &[bool]| -> Vec<bool> { (0..rows).flat_map(|_| keys.iter().copied()).collect() };

        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                FusionLayer::Msa(block) => {
                    let (first, second) = if ctx.video_first { ((hv, pv), (ha, pa)) } else { ((ha, pa), (hv, pv)) };
                    let (first_mask, second_mask) =
                        if ctx.video_first { (&mask_v, &mask_a) } else { (&mask_a, &mask_v) };
                    let x = ctx.tape.concat_rows(&[first.0, second.0])?;
                    let n = first.1 + second.1;
                    let keys: Vec<bool> = first_mask.iter().chain(second_mask.iter()).copied().collect();
                    let mut mask = full(n, &keys);
                    if ctx.block_cross_modal {
                        for i in 0..n {
                            for j in 0..n {
                                if (i < first.1) != (j < first.1) {
                                    mask[i * n + j] = false;
                                }
                            }
                        }
                    }
                    let pos: Option<Vec<f64>> = match (&pos_a, &pos_v) {
                        (Some(a), Some(v)) if ctx.video_first => Some(v.iter().chain(a).copied().collect()),
                        (Some(a), Some(v)) => Some(a.iter().chain(v).copied().collect()),
                        _ => None,
                    };
                    let lay = AttnLayout {
                        q_pos: pos.as_deref(),
                        k_pos: pos.as_deref(),
                        mask: &mask,
                        bank: &self.bank,
                        layer: li,
                        stream: "shared",
                    };
                    let y = block.forward(ctx, x, None, &lay)?;
                    let a = ctx.tape.slice_rows(y, 0, first.1)?;
                    let b = ctx.tape.slice_rows(y, first.1, second.1)?;
                    (ha, hv) = if ctx.video_first { (b, a) } else { (a, b) };
                }
                FusionLayer::Isa { audio, video } => {
                    let ma = full(pa, &mask_a);
                    let lay = AttnLayout {
                        q_pos: pos_a.as_deref(),
                        k_pos: pos_a.as_deref(),
                        mask: &ma,
                        bank: &self.bank,
                        layer: li,
                        stream: "audio",
                    };
                    let na = audio.forward(ctx, ha, None, &lay)?;
                    let mv = full(pv, &mask_v);
                    let lay = AttnLayout {
                        q_pos: pos_v.as_deref(),
                        k_pos: pos_v.as_deref(),
                        mask: &mv,
                        bank: &self.bank,
                        layer: li,
                        stream: "video",
                    };
                    let nv = video.forward(ctx, hv, None, &lay)?;
                    (ha, hv) = (na, nv);
                }
                FusionLayer::Ica { audio, video } => {
                    let ma = full(pa, &mask_v);
                    let lay = AttnLayout {
                        q_pos: pos_a.as_deref(),
                        k_pos: pos_v.as_deref(),
                        mask: &ma,
                        bank: &self.bank,
                        layer: li,
                        stream: "audio",
                    };
                    let na = audio.forward(ctx, ha, Some(hv), &lay)?;
                    let mv = full(pv, &mask_a);
                    let lay = AttnLayout {
                        q_pos: pos_v.as_deref(),
                        k_pos: pos_a.as_deref(),
                        mask: &mv,
                        bank: &self.bank,
                        layer: li,
                        stream: "video",
                    };
                    let nv = video.forward(ctx, hv, Some(ha), &lay)?;
                    (ha, hv) = (na, nv);
                }
            }
        }

        let pooled = if cfg.fusion == FusionVariant::Concat {
            let a = ctx.tape.masked_mean_rows(ha, &mask_a)?;
            let v = ctx.tape.masked_mean_rows(hv, &mask_v)?;
            ctx.tape.concat_cols(&[a, v])?
        } else {
            let all = ctx.tape.concat_rows(&[ha, hv])?;
            let mask: Vec<bool> = mask_a.iter().chain(&mask_v).copied().collect();
            ctx.tape.masked_mean_rows(all, &mask)?
        };
        let logits = self.head.forward(ctx, pooled)?;
        Ok(ModelOutput {
            logits,
            embed_audio,
            embed_video,
            embed_audio_raw,
            embed_video_raw,
            shared_audio,
            shared_video,
        })
    }

    /// Adds sinusoidal or learnable position rows over the concatenated
    /// sequence: audio frame `i` takes row `i`, video frame `j` takes row
    /// `audio_len + j`.
    fn add_positions(&self, ctx: &mut ForwardCtx<'_>, fa: Var, fv: Var, audio_len: usize) -> Result<(Var, Var)> {
        let (pa, d) = ctx.tape.shape(fa);
        let pv = ctx.tape.shape(fv).0;
        let need = pa.max(audio_len + pv);
        match self.cfg.posenc {
            PosEncKind::Sinusoidal => {
                let table = sinusoidal_table(need, d);
                let ta = ctx.tape.constant(table.slice_rows(0, pa)?);
                let tv = ctx.tape.constant(table.slice_rows(audio_len, pv)?);
                Ok((ctx.tape.add(fa, ta)?, ctx.tape.add(fv, tv)?))
            }
            PosEncKind::Learnable => {
                if need > self.cfg.max_tokens {
                    return Err(Error::Config(format!(
                        "sequence needs {need} position rows, table has {}",
                        self.cfg.max_tokens
                    )));
                }
                let table = ctx.param(self.pos_table.expect("learnable table"));
                let ta = ctx.tape.slice_rows(table, 0, pa)?;
                let tv = ctx.tape.slice_rows(table, audio_len, pv)?;
                Ok((ctx.tape.add(fa, ta)?, ctx.tape.add(fv, tv)?))
            }
            PosEncKind::Rope | PosEncKind::TaRope => Ok((fa, fv)),
        }
    }

    /// Class logits in evaluation mode (no dropout, no gradient).
    pub fn predict(&self, s: &PaddedSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, false);
        let out = self.forward(&mut ctx, s)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Pre-normalization matching embeddings of the valid frames, in evaluation mode.
    pub fn raw_embeddings(&self, s: &PaddedSample) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, false);
        let out = self.forward(&mut ctx, s)?;
        Ok((tape.value(out.embed_audio_raw).clone(), tape.value(out.embed_video_raw).clone()))
    }

    /// Shared-space projections of the valid frames, in evaluation mode.
    pub fn shared_features(&self, s: &PaddedSample) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &self.store, false);
        let out = self.forward(&mut ctx, s)?;
        Ok((tape.value(out.shared_audio).clone(), tape.value(out.shared_video).clone()))
    }
}

/// Categorical cross-entropy of `1 × C` logits against a class index.
pub fn classification_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.shape(logits).1;
    if label >= c {
        return Err(Error::Config(format!("label {label} outside {c} classes")));
    }
    let lp = tape.log_softmax(logits, Axis::Row)?;
    let mut w = vec![0.0; c];
    w[label] = -1.0;
    tape.weighted_sum(lp, w)
}
