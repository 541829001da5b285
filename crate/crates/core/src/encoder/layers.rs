use rand_chacha::ChaCha8Rng;

use super::params::{dropout_mask, fan_in_uniform, ParamId, ParamStore};
use crate::error::Result;
use crate::numkernel::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::posenc::{rope_on_tape, RotaryBank};

/// Attention probabilities captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    pub stream: &'static str,
    pub head: usize,
    pub probs: Tensor,
}

/// Per-pass state: the tape, bound parameters, and optional dropout RNG.
pub struct ForwardCtx<'t> {
    pub tape: &'t mut Tape,
    params: Vec<Var>,
    rng: Option<&'t mut ChaCha8Rng>,
    dropout: f64,
    /// When set, attention probabilities of every head are recorded here.
    pub trace: Option<Vec<AttentionTrace>>,
    /// Masks audio↔video pairs inside multimodal self-attention (diagnostic).
    pub block_cross_modal: bool,
    /// Places video tokens before audio tokens in multimodal self-attention.
    pub video_first: bool,
}

impl<'t> ForwardCtx<'t> {
    /// Evaluation context: parameters enter the tape as constants unless
    /// `differentiable` is set.
    pub fn new(tape: &'t mut Tape, store: &ParamStore, differentiable: bool) -> Self {
        let params = store
            .iter()
            .map(|(_, t)| if differentiable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ForwardCtx {
            tape,
            params,
            rng: None,
            dropout: 0.0,
            trace: None,
            block_cross_modal: false,
            video_first: false,
        }
    }

    /// Evaluation context over already-bound parameter handles, one per
    /// store entry in store order.
    pub fn from_vars(tape: &'t mut Tape, params: Vec<Var>) -> Self {
        ForwardCtx {
            tape,
            params,
            rng: None,
            dropout: 0.0,
            trace: None,
            block_cross_modal: false,
            video_first: false,
        }
    }

    /// Training context with dropout drawn from `rng`.
    pub fn training(tape: &'t mut Tape, store: &ParamStore, rng: &'t mut ChaCha8Rng, dropout: f64) -> Self {
        let mut ctx = Self::new(tape, store, true);
        ctx.rng = Some(rng);
        ctx.dropout = dropout;
        ctx
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub(crate) fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let n = self.tape.value(x).len();
                let mask = dropout_mask(rng, n, p);
                self.tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out));
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::matrix(1, d, vec![1.0; d]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, d));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gain), ctx.param(self.bias));
        ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Query/key/value/output projections of multi-head attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

/// Positions and key validity for one attention call.
pub(crate) struct AttnLayout<'a> {
    pub q_pos: Option<&'a [f64]>,
    pub k_pos: Option<&'a [f64]>,
    /// Row-major `Tq × Tk` mask of allowed query/key pairs.
    pub mask: &'a [bool],
    pub bank: &'a RotaryBank,
    pub layer: usize,
    pub stream: &'static str,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, n_heads: usize) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            n_heads,
        }
    }

    pub(crate) fn forward(&self, ctx: &mut ForwardCtx<'_>, xq: Var, xkv: Var, lay: &AttnLayout<'_>) -> Result<Var> {
        let mut q = self.q.forward(ctx, xq)?;
        let mut k = self.k.forward(ctx, xkv)?;
        let v = self.v.forward(ctx, xkv)?;
        if let (Some(qp), Some(kp)) = (lay.q_pos, lay.k_pos) {
            q = rope_on_tape(ctx.tape, q, qp, lay.bank)?;
            k = rope_on_tape(ctx.tape, k, kp, lay.bank)?;
        }
        let d = ctx.tape.shape(q).1;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = ctx.tape.slice_cols(q, h * dh, dh)?;
            let kh = ctx.tape.slice_cols(k, h * dh, dh)?;
            let vh = ctx.tape.slice_cols(v, h * dh, dh)?;
            let s = ctx.tape.matmul_nt(qh, kh)?;
            let s = ctx.tape.scale(s, scale)?;
            let p = ctx.tape.masked_softmax(s, lay.mask)?;
            if let Some(tr) = ctx.trace.as_mut() {
                tr.push(AttentionTrace {
                    layer: lay.layer,
                    stream: lay.stream,
                    head: h,
                    probs: ctx.tape.value(p).clone(),
                });
            }
            let p = ctx.dropout(p)?;
            heads.push(ctx.tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? };
        self.o.forward(ctx, cat)
    }
}

/// Pre-norm Transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
///
/// In cross-attention use, `ln1` normalizes both the query stream and the
/// key/value stream.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, d_ff: usize, n_heads: usize) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, n_heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, d_ff),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d_ff, d),
        }
    }

    /// `kv = None` means self-attention over `x`.
    pub(crate) fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var, kv: Option<Var>, lay: &AttnLayout<'_>) -> Result<Var> {
        let xn = self.ln1.forward(ctx, x)?;
        let kvn = match kv {
            Some(other) => self.ln1.forward(ctx, other)?,
            None => xn,
        };
        let a = self.attn.forward(ctx, xn, kvn, lay)?;
        let h = ctx.tape.add(x, a)?;
        let hn = self.ln2.forward(ctx, h)?;
        let f = self.ff1.forward(ctx, hn)?;
        let f = ctx.tape.gelu(f)?;
        let f = self.ff2.forward(ctx, f)?;
        let f = ctx.dropout(f)?;
        ctx.tape.add(h, f)
    }
}
