//! Training and evaluation loops.

mod optim;
mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{linear_lr, AdamW};
pub use report::{write_metrics_csv, write_train_log, METRICS_HEADER};

use crate::ctm::{ctm_loss, gaussian_affinity, CtmConfig};
use crate::data::Sample;
use crate::encoder::{classification_loss, timestamps, ForwardCtx, FusionModel, PaddedSample, ParamStore};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Var};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr_init: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if !(self.lr_init >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("lr_init and weight_decay must be non-negative, eps positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub cls_loss: f64,
    /// Monitored even when its weight is zero; 0 when matching is off.
    pub ctm_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub cls_loss: f64,
    pub ctm_loss: f64,
    pub total: f64,
    pub accuracy: Option<f64>,
}

/// History of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epoch (1-based) with the highest evaluation accuracy; ties keep the earlier one.
    pub best_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
    pub best_params: Option<ParamStore>,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Pads every sample to the longest streams in `batch`.
pub fn pad_batch(batch: &[&Sample]) -> Result<Vec<PaddedSample>> {
    let pa = batch.iter().map(|s| s.audio.len()).max().unwrap_or(0);
    let pv = batch.iter().map(|s| s.video.len()).max().unwrap_or(0);
    batch.iter().map(|s| s.padded(pa, pv)).collect()
}

/// Loss components of one padded sample, added to `ctx.tape`.
pub struct SampleLoss {
    pub cls: Var,
    pub ctm: Option<Var>,
    pub total: Var,
}

/// `cls + λ·ctm` for one sample. The matching loss is built whenever `ctm`
/// is given, but joins the objective only when `λ > 0`.
pub fn sample_loss(
    model: &FusionModel,
    ctx: &mut ForwardCtx<'_>,
    s: &PaddedSample,
    label: usize,
    ctm: Option<&CtmConfig>,
) -> Result<SampleLoss> {
    let out = model.forward(ctx, s)?;
    let cls = classification_loss(ctx.tape, out.logits, label)?;
    let Some(cc) = ctm else {
        return Ok(SampleLoss { cls, ctm: None, total: cls });
    };
    let rates = model.config().rates;
    let aff = gaussian_affinity(&timestamps(s.audio_len, rates.eta_a), &timestamps(s.video_len, rates.eta_v), cc.sigma)?;
    let l = ctm_loss(ctx.tape, out.embed_audio, out.embed_video, &aff, cc.tau)?;
    let total = crate::ctm::total_loss(ctx.tape, cls, l, cc.lambda_ctm)?;
    Ok(SampleLoss { cls, ctm: Some(l), total })
}

/// Runs `cfg.epochs` epochs of AdamW over `train`, evaluating on `eval`.
///
/// `on_epoch` sees each record as soon as it is complete.
pub fn train(
    model: &mut FusionModel,
    train: &[Sample],
    eval: Option<&[Sample]>,
    cfg: &TrainConfig,
    ctm: Option<&CtmConfig>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    if let Some(c) = ctm {
        c.validate()?;
    }
    if train.is_empty() {
        return Err(Error::Empty("training split has no samples".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let dropout = model.config().dropout;

    let mut run = TrainRun {
        seed: cfg.seed,
        epochs: Vec::new(),
        steps: Vec::new(),
        best_epoch: None,
        best_accuracy: None,
        best_params: None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let (mut sum_cls, mut sum_ctm, mut sum_total) = (0.0, 0.0, 0.0);
        let mut lr = cfg.lr_init;
        for chunk in order.chunks(cfg.batch_size) {
            let step = run.steps.len() + 1;
            lr = linear_lr(cfg.lr_init, step, total_steps);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let rec = train_step(model, &batch, ctm, &mut opt, &mut dropout_rng, dropout, lr, step)?;
            sum_cls += rec.cls_loss;
            sum_ctm += rec.ctm_loss;
            sum_total += rec.total;
            run.steps.push(rec);
        }
        let n = per_epoch as f64;
        let accuracy = match eval {
            Some(ev) if epoch % cfg.eval_every == 0 || epoch == cfg.epochs => Some(evaluate(model, ev, cfg.batch_size)?.accuracy),
            _ => None,
        };
        if let Some(acc) = accuracy {
            if run.best_accuracy.is_none_or(|b| acc > b) {
                run.best_accuracy = Some(acc);
                run.best_epoch = Some(epoch);
                run.best_params = Some(model.params().clone());
            }
        }
        let rec = EpochRecord { epoch, lr, cls_loss: sum_cls / n, ctm_loss: sum_ctm / n, total: sum_total / n, accuracy };
        on_epoch(&rec);
        run.epochs.push(rec);
    }
    Ok(run)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut FusionModel,
    batch: &[&Sample],
    ctm: Option<&CtmConfig>,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
    dropout: f64,
    lr: f64,
    step: usize,
) -> Result<StepRecord> {
    let ids = || batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let diverged = |cls: f64, ctm: f64, total: f64| Error::Diverged { step, sample_ids: ids(), cls, ctm, total };
    let padded = pad_batch(batch)?;
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::training(&mut tape, model.params(), rng, dropout);
    let (mut cls, mut ctm_sum, mut totals) = (Vec::new(), Vec::new(), Vec::new());
    for (s, p) in batch.iter().zip(&padded) {
        let l = match sample_loss(model, &mut ctx, p, s.label, ctm) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, f64::NAN, f64::NAN)),
            Err(e) => return Err(e),
        };
        cls.push(l.cls);
        ctm_sum.extend(l.ctm);
        totals.push(l.total);
    }
    let param_vars = ctx.param_vars().to_vec();
    let mean = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
        let joined = tape.concat_cols(vs)?;
        tape.mean(joined)
    };
    let loss = mean(&mut tape, &totals).map_err(|_| diverged(f64::NAN, f64::NAN, f64::NAN))?;
    let cls_mean = cls.iter().map(|&v| tape.value(v).item()).sum::<f64>() / cls.len() as f64;
    let ctm_mean = if ctm_sum.is_empty() {
        0.0
    } else {
        ctm_sum.iter().map(|&v| tape.value(v).item()).sum::<f64>() / ctm_sum.len() as f64
    };
    let total = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g: Vec<Vec<f64>> = param_vars
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    if g.iter().flatten().any(|x| !x.is_finite()) {
        return Err(diverged(cls_mean, ctm_mean, total));
    }
    opt.step(model.params_mut(), &g, lr).map_err(|_| diverged(cls_mean, ctm_mean, total))?;
    Ok(StepRecord { step, lr, cls_loss: cls_mean, ctm_loss: ctm_mean, total })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}

/// Index of the largest logit; ties resolve to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and confusion matrix with dropout off, batches of `batch_size`
/// padded to their longest member.
pub fn evaluate(model: &FusionModel, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split has no samples".into()));
    }
    let c = model.config().n_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (s, p) in chunk.iter().zip(pad_batch(&refs)?) {
            if s.label >= c {
                return Err(Error::Config(format!("sample '{}': label {} outside {c} classes", s.id, s.label)));
            }
            let pred = argmax(&model.predict(&p)?);
            confusion[s.label][pred] += 1;
            correct += usize::from(pred == s.label);
        }
    }
    Ok(EvalReport { accuracy: correct as f64 / samples.len() as f64, confusion, n: samples.len() })
}

#[cfg(test)]
mod tests;
