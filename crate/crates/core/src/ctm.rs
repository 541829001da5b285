//! Cross-temporal matching loss.
//!
//! Audio and video frames are embedded into a unit sphere. Their cosine
//! similarities, softmaxed with temperature `tau` along each direction, are
//! pulled toward targets built from a Gaussian kernel on the frames' physical
//! timestamps:
//!
//! ```text
//! g[i][j]   = exp(-(t_a[i] - t_v[j])² / 2σ²)
//! q_a2v[i]  = g[i][·] / Σ_j g[i][j]        p_a2v[i] = softmax_j(s[i][·] / τ)
//! q_v2a[·j] = g[·][j] / Σ_i g[i][j]        p_v2a[·j] = softmax_i(s[·][j] / τ)
//! L = ½ (mean_i CE(q_a2v[i], p_a2v[i]) + mean_j CE(q_v2a[·j], p_v2a[·j]))
//! ```

use serde::{Deserialize, Serialize};

use crate::encoder::EMBED_NORM_EPS;
use crate::error::{Error, Result};
use crate::numkernel::{Axis, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtmConfig {
    /// Gaussian bandwidth in seconds.
    pub sigma: f64,
    pub tau: f64,
    pub lambda_ctm: f64,
    pub d_emb: usize,
}

impl Default for CtmConfig {
    fn default() -> Self {
        CtmConfig { sigma: 0.5, tau: 0.07, lambda_ctm: 0.5, d_emb: 128 }
    }
}

impl CtmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_ctm >= 0.0 && self.lambda_ctm.is_finite()) {
            return Err(Error::Config(format!("lambda_ctm must be non-negative, got {}", self.lambda_ctm)));
        }
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be at least 1".into()));
        }
        Ok(())
    }
}

/// Temporal affinities and both target distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    /// `T_a × T_v`, entries in `(0, 1]`.
    pub g: Tensor,
    /// Rows sum to one.
    pub q_a2v: Tensor,
    /// Columns sum to one.
    pub q_v2a: Tensor,
}

impl AffinityMatrix {
    pub fn audio_len(&self) -> usize {
        self.g.rows()
    }

    pub fn video_len(&self) -> usize {
        self.g.cols()
    }

    /// `½ (mean row entropy of q_a2v + mean column entropy of q_v2a)`: the
    /// smallest value the loss can take, reached iff `p == q`.
    pub fn entropy_floor(&self) -> f64 {
        let (ta, tv) = (self.audio_len(), self.video_len());
        if ta == 0 || tv == 0 {
            return 0.0;
        }
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        let rows: f64 = self.q_a2v.data().iter().map(|&p| h(p)).sum::<f64>() / ta as f64;
        let cols: f64 = self.q_v2a.data().iter().map(|&p| h(p)).sum::<f64>() / tv as f64;
        0.5 * (rows + cols)
    }
}

/// Gaussian affinity between every audio and video timestamp.
///
/// Exact underflow of `g` to zero (offsets beyond ~38σ) is clamped to the
/// smallest positive normal so every target stays a proper distribution.
pub fn gaussian_affinity(t_a: &[f64], t_v: &[f64], sigma: f64) -> Result<AffinityMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (ta, tv) = (t_a.len(), t_v.len());
    let two_s2 = 2.0 * sigma * sigma;
    let mut g = vec![0.0; ta * tv];
    for (i, &a) in t_a.iter().enumerate() {
        for (j, &v) in t_v.iter().enumerate() {
            g[i * tv + j] = (-(a - v) * (a - v) / two_s2).exp().max(f64::MIN_POSITIVE);
        }
    }
    let mut q_a2v = g.clone();
    for row in q_a2v.chunks_exact_mut(tv.max(1)) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut q_v2a = g.clone();
    for j in 0..tv {
        let s: f64 = (0..ta).map(|i| g[i * tv + j]).sum();
        for i in 0..ta {
            q_v2a[i * tv + j] /= s;
        }
    }
    Ok(AffinityMatrix {
        g: Tensor::new(vec![ta, tv], g)?,
        q_a2v: Tensor::new(vec![ta, tv], q_a2v)?,
        q_v2a: Tensor::new(vec![ta, tv], q_v2a)?,
    })
}

/// Linear projection followed by per-row L2 normalization; returns
/// `(raw, unit)` embeddings.
pub fn embed_for_ctm(tape: &mut Tape, features: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let raw = tape.matmul(features, weight)?;
    let raw = tape.add_row(raw, bias)?;
    let unit = tape.l2_normalize_rows(raw, EMBED_NORM_EPS)?;
    Ok((raw, unit))
}

/// Bidirectional matching loss between unit embeddings `e_a` (`T_a × d`) and
/// `e_v` (`T_v × d`). An empty stream contributes zero.
pub fn ctm_loss(tape: &mut Tape, e_a: Var, e_v: Var, aff: &AffinityMatrix, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (ta, da) = tape.shape(e_a);
    let (tv, dv) = tape.shape(e_v);
    if da != dv {
        return Err(Error::shape("ctm_loss", format!("embedding widths {da} vs {dv}")));
    }
    if (ta, tv) != (aff.audio_len(), aff.video_len()) {
        return Err(Error::shape(
            "ctm_loss",
            format!("embeddings {ta}x{tv} vs affinity {}x{}", aff.audio_len(), aff.video_len()),
        ));
    }
    if ta == 0 || tv == 0 {
        log::warn!("matching loss skipped: empty stream ({ta} audio, {tv} video frames)");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let s = tape.matmul_nt(e_a, e_v)?;
    let logits = tape.scale(s, 1.0 / tau)?;
    let lp_rows = tape.log_softmax(logits, Axis::Row)?;
    let lp_cols = tape.log_softmax(logits, Axis::Col)?;
    let w_rows: Vec<f64> = aff.q_a2v.data().iter().map(|q| -q / ta as f64).collect();
    let w_cols: Vec<f64> = aff.q_v2a.data().iter().map(|q| -q / tv as f64).collect();
    let l_a2v = tape.weighted_sum(lp_rows, w_rows)?;
    let l_v2a = tape.weighted_sum(lp_cols, w_cols)?;
    let both = tape.add(l_a2v, l_v2a)?;
    tape.scale(both, 0.5)
}

/// `cls + lambda_ctm · ctm`
pub fn total_loss(tape: &mut Tape, cls: Var, ctm: Var, lambda_ctm: f64) -> Result<Var> {
    if lambda_ctm == 0.0 {
        return Ok(cls);
    }
    let weighted = tape.scale(ctm, lambda_ctm)?;
    tape.add(cls, weighted)
}
