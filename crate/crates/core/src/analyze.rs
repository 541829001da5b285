//! Feature-dynamics probes: per-frame magnitude trajectories and how often
//! the audio and video trajectories move in the same direction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{timestamps, FusionModel};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const DEFAULT_BINS: usize = 10;

/// Which per-frame features are probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisTap {
    /// Matching-loss embeddings before L2 normalization.
    Ctm,
    /// Shared-space projections.
    Shared,
}

impl FromStr for AnalysisTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctm" => Ok(AnalysisTap::Ctm),
            "shared" => Ok(AnalysisTap::Shared),
            _ => Err(Error::Config(format!("unknown analysis tap '{s}' (expected ctm or shared)"))),
        }
    }
}

/// Min–max normalized series on its own timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Maps `x` onto `[0, 1]`; a constant series maps to all zeros.
pub fn minmax_normalize(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / span).collect()
}

/// Per-row L2 norms of `e`, min–max normalized, stamped at `i / fps`.
pub fn magnitude_trajectory(e: &Tensor, fps: f64) -> Result<Trajectory> {
    e.require_matrix("magnitude_trajectory")?;
    if e.rows() == 0 {
        return Err(Error::Empty("trajectory of an empty sequence".into()));
    }
    let norms: Vec<f64> = (0..e.rows()).map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(Trajectory { times: timestamps(e.rows(), fps), values: minmax_normalize(&norms) })
}

/// For every target time, the sample of `values` at the nearest of `times`
/// (earlier sample on ties). `times` must be sorted.
pub fn nearest_resample(values: &[f64], times: &[f64], targets: &[f64]) -> Vec<f64> {
    let mut j = 0;
    targets
        .iter()
        .map(|&t| {
            while j + 1 < times.len() && (times[j + 1] - t).abs() < (times[j] - t).abs() {
                j += 1;
            }
            values[j]
        })
        .collect()
}

/// Fraction of aligned steps whose first differences share a sign.
///
/// The series with the finer timeline is resampled onto the coarser one by
/// nearest timestamp. A zero difference agrees only with another zero.
pub fn sign_agreement(a: &[f64], t_a: &[f64], v: &[f64], t_v: &[f64]) -> Result<f64> {
    if a.len() < 2 || v.len() < 2 {
        return Err(Error::Empty(format!("sign agreement needs two samples per series, got {} and {}", a.len(), v.len())));
    }
    if a.len() != t_a.len() || v.len() != t_v.len() {
        return Err(Error::shape("sign_agreement", "series and timestamp lengths differ"));
    }
    let spacing = |t: &[f64]| (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    let (coarse, fine) = if spacing(t_a) < spacing(t_v) {
        (v.to_vec(), nearest_resample(a, t_a, t_v))
    } else if spacing(t_v) < spacing(t_a) {
        (a.to_vec(), nearest_resample(v, t_v, t_a))
    } else {
        let n = a.len().min(v.len());
        (a[..n].to_vec(), v[..n].to_vec())
    };
    let steps = coarse.len() - 1;
    let agree = (0..steps)
        .filter(|&i| sign(coarse[i + 1] - coarse[i]) == sign(fine[i + 1] - fine[i]))
        .count();
    Ok(agree as f64 / steps as f64)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub mass: f64,
}

/// Equal-width histogram of fractions over `[0, 1]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &x in values {
        let b = ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| HistogramBin { low: i as f64 / bins as f64, high: (i + 1) as f64 / bins as f64, mass: c as f64 / n })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementDistribution {
    pub per_sample: Vec<(String, f64)>,
    pub histogram: Vec<HistogramBin>,
    pub mean: f64,
    pub median: f64,
}

impl AgreementDistribution {
    pub fn from_values(per_sample: Vec<(String, f64)>, bins: usize) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Empty("no samples to summarize".into()));
        }
        let vals: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
        Ok(AgreementDistribution { histogram: histogram(&vals, bins), per_sample, mean, median })
    }
}

/// Probed features of one clip: `(audio, video)`.
pub fn probe_features(model: &FusionModel, s: &Sample, tap: AnalysisTap) -> Result<(Tensor, Tensor)> {
    let p = s.unpadded();
    match tap {
        AnalysisTap::Ctm => model.raw_embeddings(&p),
        AnalysisTap::Shared => model.shared_features(&p),
    }
}

/// Audio and video magnitude trajectories of one clip.
pub fn sample_trajectories(model: &FusionModel, s: &Sample, tap: AnalysisTap) -> Result<(Trajectory, Trajectory)> {
    let (a, v) = probe_features(model, s, tap)?;
    Ok((magnitude_trajectory(&a, s.audio.fps)?, magnitude_trajectory(&v, s.video.fps)?))
}

/// Per-clip sign agreement of the magnitude trajectories across `samples`.
pub fn agreement_distribution(model: &FusionModel, samples: &[Sample], tap: AnalysisTap, bins: usize) -> Result<AgreementDistribution> {
    if samples.is_empty() {
        return Err(Error::Empty("analysis dataset has no samples".into()));
    }
    let per_sample = samples
        .iter()
        .map(|s| {
            let (a, v) = sample_trajectories(model, s, tap)?;
            Ok((s.id.clone(), sign_agreement(&a.values, &a.times, &v.values, &v.times)?))
        })
        .collect::<Result<Vec<_>>>()?;
    AgreementDistribution::from_values(per_sample, bins)
}

/// Agreement distributions of two models over the same clips.
pub fn dataset_agreement_report(
    a: &FusionModel,
    b: &FusionModel,
    samples: &[Sample],
    tap: AnalysisTap,
    bins: usize,
) -> Result<(AgreementDistribution, AgreementDistribution)> {
    Ok((agreement_distribution(a, samples, tap, bins)?, agreement_distribution(b, samples, tap, bins)?))
}

/// `t,audio_mag,video_mag` over the union of both timelines; a cell is
/// empty where its stream has no frame at that time.
pub fn trajectory_csv(audio: &Trajectory, video: &Trajectory) -> String {
    let mut rows: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    rows.extend(audio.times.iter().zip(&audio.values).map(|(&t, &v)| (t, Some(v), None)));
    rows.extend(video.times.iter().zip(&video.values).map(|(&t, &v)| (t, None, Some(v))));
    rows.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    for r in rows {
        match merged.last_mut() {
            Some(last) if last.0 == r.0 => {
                last.1 = last.1.or(r.1);
                last.2 = last.2.or(r.2);
            }
            _ => merged.push(r),
        }
    }
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("t,audio_mag,video_mag\n");
    for (t, a, v) in merged {
        let _ = writeln!(out, "{t},{},{}", cell(a), cell(v));
    }
    out
}

pub fn histogram_csv(d: &AgreementDistribution) -> String {
    let mut out = String::from("bin_low,bin_high,mass\n");
    for b in &d.histogram {
        let _ = writeln!(out, "{},{},{}", b.low, b.high, b.mass);
    }
    out
}

pub fn summary_csv(rows: &[(&str, &AgreementDistribution)]) -> String {
    let mut out = String::from("model,mean,median,n\n");
    for (name, d) in rows {
        let _ = writeln!(out, "{name},{},{},{}", d.mean, d.median, d.per_sample.len());
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(minmax_normalize(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
        let ramp: Vec<f64> = (0..5).map(|i| 2.0 + 3.0 * i as f64).collect();
        assert_eq!(minmax_normalize(&ramp), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn trajectory_uses_row_norms() {
        let e = Tensor::matrix(3, 2, vec![1.0, 0.0, 3.0, 0.0, 0.0, 2.0]);
        let t = magnitude_trajectory(&e, 50.0).unwrap();
        assert_eq!(t.values, vec![0.0, 1.0, 0.5]);
        assert_eq!(t.times, vec![0.0, 0.02, 0.04]);
        let flat = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(magnitude_trajectory(&flat, 30.0).unwrap().values, vec![0.0, 0.0]);
    }

    #[test]
    fn agreement_extremes() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 / 30.0).collect();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(sign_agreement(&x, &t, &x, &t).unwrap(), 1.0);
        let mono: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mono_neg: Vec<f64> = mono.iter().map(|v| -v).collect();
        assert_eq!(sign_agreement(&mono, &t, &mono_neg, &t).unwrap(), 0.0);
        assert!(sign_agreement(&x, &t, &neg, &t).unwrap() < 0.2);
    }

    #[test]
    fn sines_at_native_rates_mostly_agree() {
        let ta = timestamps(100, 50.0);
        let tv = timestamps(60, 30.0);
        let a: Vec<f64> = ta.iter().map(|t| (TAU * t).sin()).collect();
        let v: Vec<f64> = tv.iter().map(|t| (TAU * t).sin()).collect();
        let g = sign_agreement(&a, &ta, &v, &tv).unwrap();
        assert!(g >= 0.9, "{g}");
    }

    #[test]
    fn too_short_series_are_errors() {
        assert!(sign_agreement(&[1.0], &[0.0], &[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn resampling_only_returns_existing_samples() {
        let tf = timestamps(100, 50.0);
        let f: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = nearest_resample(&f, &tf, &timestamps(60, 30.0));
        assert!(r.iter().all(|v| f.contains(v)));
        assert_eq!(r[3], 5.0);
    }

    #[test]
    fn histogram_mass_is_one() {
        let vals = [0.0, 0.05, 0.5, 0.99, 1.0, 1.0, 0.73];
        let h = histogram(&vals, 10);
        assert!((h.iter().map(|b| b.mass).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h[9].mass, 3.0 / 7.0);
        let d = AgreementDistribution::from_values(vals.iter().map(|&v| (String::new(), v)).collect(), 10).unwrap();
        assert_eq!(d.median, 0.73);
    }

    #[test]
    fn union_timeline_csv() {
        let a = Trajectory { times: vec![0.0, 0.02], values: vec![0.0, 1.0] };
        let v = Trajectory { times: vec![0.0, 1.0 / 30.0], values: vec![1.0, 0.0] };
        let csv = trajectory_csv(&a, &v);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,audio_mag,video_mag");
        assert_eq!(lines[1], "0,0,1");
        assert_eq!(lines[2], "0.02,1,");
        assert!(lines[3].ends_with(",,0"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn agreement_symmetric_on_shared_timeline(a in proptest::collection::vec(-5.0f64..5.0, 2..30), seed in 0u64..100) {
                let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * ((i as u64 + seed) % 3) as f64 - 1.0).collect();
                let t = timestamps(a.len(), 30.0);
                let x = sign_agreement(&a, &t, &b, &t).unwrap();
                prop_assert_eq!(x, sign_agreement(&b, &t, &a, &t).unwrap());
                prop_assert!((0.0..=1.0).contains(&x));
            }

            #[test]
            fn minmax_ignores_positive_affine_maps(x in proptest::collection::vec(-5.0f64..5.0, 1..30), s in 0.1f64..10.0, c in -10.0f64..10.0) {
                let y: Vec<f64> = x.iter().map(|v| s * v + c).collect();
                let (nx, ny) = (minmax_normalize(&x), minmax_normalize(&y));
                for (p, q) in nx.iter().zip(&ny) {
                    prop_assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }
}
