//! Synthetic two-stream clips whose label is only decodable from cross-modal
//! temporal coincidence.
//!
//! Each clip carries `K` audio event types and `K` video event types. Every
//! audio type fires once, at a distinct time, together with one video type
//! at the same physical time; the label indexes the permutation that pairs
//! them. Distractor bumps of random types fire in one stream only, away from
//! every bump of the other stream, so the pairing cannot be read off the
//! temporal order inside either stream alone. A smooth latent signal shared
//! by both streams and white noise complete the picture.
//!
//! Channel layout of a stream of width `d`: the first `d - LATENT_CHANNELS`
//! channels carry events (type `k` drives channels `c` with `c % K == k`),
//! the last `LATENT_CHANNELS` carry the shared latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::posenc::Modality;

pub const LATENT_CHANNELS: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_samples: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub eta_a: f64,
    pub eta_v: f64,
    pub d_in_audio: usize,
    pub d_in_video: usize,
    pub noise_std: f64,
    /// Distractors stay farther than this from every bump of the other stream.
    pub coincidence_window: f64,
    pub seed: u64,
    /// Gaussian bump standard deviation, seconds.
    pub bump_width: f64,
    pub event_amplitude: f64,
    pub latent_amplitude: f64,
    /// Unpaired bumps per stream.
    pub distractors: usize,
    /// Minimum spacing between bumps inside one stream, seconds.
    pub min_separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 6,
            n_samples: 600,
            duration_min: 1.5,
            duration_max: 2.5,
            eta_a: 50.0,
            eta_v: 30.0,
            d_in_audio: 1024,
            d_in_video: 35,
            noise_std: 0.1,
            coincidence_window: 0.1,
            seed: 0,
            bump_width: 0.06,
            event_amplitude: 1.0,
            latent_amplitude: 0.5,
            distractors: 1,
            min_separation: 0.15,
        }
    }
}

impl SyntheticSpec {
    /// Event types per stream: the smallest `K` with `K! >= n_classes`.
    pub fn event_types(&self) -> usize {
        let mut k = 2;
        while factorial(k) < self.n_classes {
            k += 1;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if !(self.duration_min > 0.0 && self.duration_max >= self.duration_min && self.duration_max.is_finite()) {
            return bad(format!("invalid duration range [{}, {}]", self.duration_min, self.duration_max));
        }
        if !(self.coincidence_window >= 0.0 && self.coincidence_window < self.duration_min) {
            return bad(format!(
                "coincidence_window {} must be below the shortest duration {}",
                self.coincidence_window, self.duration_min
            ));
        }
        if !(self.eta_a > 0.0 && self.eta_v > 0.0) {
            return bad("frame rates must be positive".into());
        }
        let k = self.event_types();
        for (name, d) in [("audio", self.d_in_audio), ("video", self.d_in_video)] {
            if d < k + LATENT_CHANNELS {
                return bad(format!("{name} width {d} too small for {k} event types plus {LATENT_CHANNELS} latent channels"));
            }
        }
        if !(self.noise_std >= 0.0 && self.bump_width > 0.0 && self.min_separation >= 0.0) {
            return bad("noise_std, bump_width and min_separation must be non-negative (width positive)".into());
        }
        let bumps = (k + self.distractors) as f64;
        if self.duration_min < (bumps - 1.0) * self.min_separation + 4.0 * self.bump_width {
            return bad(format!(
                "shortest clip {} s cannot hold {bumps} bumps {} s apart",
                self.duration_min, self.min_separation
            ));
        }
        Ok(())
    }
}

/// One bump placed in a stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub kind: usize,
    /// Seconds; always an exact frame time of its stream.
    pub time: f64,
}

/// Where the events and distractors of one clip were placed.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLayout {
    /// `(audio, video)` pairs defining the label.
    pub pairs: Vec<(Bump, Bump)>,
    pub audio_distractors: Vec<Bump>,
    pub video_distractors: Vec<Bump>,
    /// Shared latent as `(amplitude, frequency Hz, phase)` components.
    pub latent: Vec<(f64, f64, f64)>,
}

impl EventLayout {
    pub fn latent_at(&self, t: f64) -> f64 {
        self.latent.iter().map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub layout: EventLayout,
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Pairing `audio type -> video type` encoded by `label`.
pub fn class_pairing(spec: &SyntheticSpec, label: usize) -> Vec<usize> {
    permutations(spec.event_types())[label].clone()
}

/// Label whose pairing equals `pairing`, if any.
pub fn label_of_pairing(spec: &SyntheticSpec, pairing: &[usize]) -> Option<usize> {
    permutations(spec.event_types()).iter().take(spec.n_classes).position(|p| p == pairing)
}

fn factorial(k: usize) -> usize {
    (1..=k).product()
}

/// Generates `spec.n_samples` clips with ids `s00000, s00001, …`; label of
/// clip `i` is `i % n_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    generate_with_prefix(spec, "s")
}

/// Like [`generate_synthetic`] with a custom id prefix.
pub fn generate_with_prefix(spec: &SyntheticSpec, prefix: &str) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    (0..spec.n_samples).map(|i| generate_one(spec, i, format!("{prefix}{i:05}"))).collect()
}

fn generate_one(spec: &SyntheticSpec, index: usize, id: String) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let label = index % spec.n_classes;
    let k = spec.event_types();
    let pairing = class_pairing(spec, label);

    let duration = if spec.duration_max > spec.duration_min {
        rng.random_range(spec.duration_min..spec.duration_max)
    } else {
        spec.duration_min
    };
    let t_a = ((duration * spec.eta_a).round() as usize).max(1);
    let t_v = ((duration * spec.eta_v).round() as usize).max(1);

    let layout = place(spec, &mut rng, k, &pairing, t_a, t_v)
        .ok_or_else(|| Error::Config(format!("could not place events in clip '{id}' of {duration:.3} s")))?;

    let normal = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let audio_bumps: Vec<Bump> = layout.pairs.iter().map(|p| p.0).chain(layout.audio_distractors.iter().copied()).collect();
    let video_bumps: Vec<Bump> = layout.pairs.iter().map(|p| p.1).chain(layout.video_distractors.iter().copied()).collect();
    let audio = render(spec, &mut rng, &normal, &layout, &audio_bumps, t_a, spec.eta_a, spec.d_in_audio, k);
    let video = render(spec, &mut rng, &normal, &layout, &video_bumps, t_v, spec.eta_v, spec.d_in_video, k);

    Ok(SyntheticSample {
        sample: Sample {
            id,
            audio: FeatureSequence::new(audio, spec.eta_a, Modality::Audio)?,
            video: FeatureSequence::new(video, spec.eta_v, Modality::Video)?,
            label,
        },
        layout,
    })
}

fn place(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    k: usize,
    pairing: &[usize],
    t_a: usize,
    t_v: usize,
) -> Option<EventLayout> {
    let margin = 2.0 * spec.bump_width;
    let a_frames: Vec<usize> = (0..t_a).filter(|&i| fits(i as f64 / spec.eta_a, margin, t_a, spec.eta_a)).collect();
    let v_frames: Vec<usize> = (0..t_v).filter(|&j| fits(j as f64 / spec.eta_v, margin, t_v, spec.eta_v)).collect();
    if a_frames.is_empty() || v_frames.is_empty() {
        return None;
    }
    let spaced = |ts: &[f64], t: f64| ts.iter().all(|&u| (u - t).abs() >= spec.min_separation);
    let far = |ts: &[f64], t: f64| ts.iter().all(|&u| (u - t).abs() > spec.coincidence_window);

    let pick = |rng: &mut ChaCha8Rng, c: &[f64]| (!c.is_empty()).then(|| c[rng.random_range(0..c.len())]);
    let a_grid: Vec<f64> = a_frames.iter().map(|&i| i as f64 / spec.eta_a).collect();
    let v_grid: Vec<f64> = v_frames.iter().map(|&j| j as f64 / spec.eta_v).collect();
    let video_partner = |ta: f64| ((ta * spec.eta_v).round() as usize).min(t_v - 1) as f64 / spec.eta_v;

    'attempt: for _ in 0..PLACEMENT_ATTEMPTS {
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut a_times: Vec<f64> = Vec::new();
        let mut v_times: Vec<f64> = Vec::new();
        let mut pairs = Vec::with_capacity(k);
        for &a_type in &order {
            let cands: Vec<f64> = a_grid
                .iter()
                .copied()
                .filter(|&ta| {
                    let tv = video_partner(ta);
                    spaced(&a_times, ta) && spaced(&v_times, tv) && fits(tv, margin, t_v, spec.eta_v)
                })
                .collect();
            let Some(ta) = pick(rng, &cands) else { continue 'attempt };
            let tv = video_partner(ta);
            a_times.push(ta);
            v_times.push(tv);
            pairs.push((Bump { kind: a_type, time: ta }, Bump { kind: pairing[a_type], time: tv }));
        }
        let mut audio_distractors = Vec::new();
        let mut video_distractors = Vec::new();
        for _ in 0..spec.distractors {
            let cands: Vec<f64> = a_grid.iter().copied().filter(|&t| spaced(&a_times, t) && far(&v_times, t)).collect();
            let Some(ta) = pick(rng, &cands) else { continue 'attempt };
            a_times.push(ta);
            audio_distractors.push(Bump { kind: rng.random_range(0..k), time: ta });
            let cands: Vec<f64> = v_grid.iter().copied().filter(|&t| spaced(&v_times, t) && far(&a_times, t)).collect();
            let Some(tv) = pick(rng, &cands) else { continue 'attempt };
            v_times.push(tv);
            video_distractors.push(Bump { kind: rng.random_range(0..k), time: tv });
        }
        let latent = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..1.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        return Some(EventLayout { pairs, audio_distractors, video_distractors, latent });
    }
    None
}

fn fits(t: f64, margin: f64, frames: usize, fps: f64) -> bool {
    t >= margin && t <= (frames - 1) as f64 / fps - margin
}

#[allow(clippy::too_many_arguments)]
fn render(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
    layout: &EventLayout,
    bumps: &[Bump],
    frames: usize,
    fps: f64,
    d: usize,
    k: usize,
) -> Tensor {
    let n_event = d - LATENT_CHANNELS;
    let two_w2 = 2.0 * spec.bump_width * spec.bump_width;
    let mut data = vec![0.0; frames * d];
    for i in 0..frames {
        let t = i as f64 / fps;
        let row = &mut data[i * d..(i + 1) * d];
        for b in bumps {
            let h = spec.event_amplitude * (-(t - b.time).powi(2) / two_w2).exp();
            for c in (b.kind..n_event).step_by(k) {
                row[c] += h;
            }
        }
        let z = spec.latent_amplitude * layout.latent_at(t);
        for v in &mut row[n_event..] {
            *v += z;
        }
        if spec.noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        // Stored precision: in-memory clips equal their file round trip.
        for v in row.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    Tensor::matrix(frames, d, data)
}
