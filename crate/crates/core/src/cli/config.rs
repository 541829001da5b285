//! Flat `key = value` configuration.
//!
//! A file holds one assignment per line. `[section]` headers prefix the keys
//! that follow them with `section.`, so `[train]` + `epochs = 5` is the same
//! as `train.epochs = 5`. Lines starting with `#` and blank lines are
//! ignored. Resolution order, later wins: built-in defaults, the config
//! file, `--set key=value` flags, then the dedicated command flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::ctm::CtmConfig;
use crate::data::SyntheticSpec;
use crate::encoder::{CtmTap, EncoderConfig, FusionVariant};
use crate::error::{Error, Result};
use crate::posenc::{PosEncKind, RateSpec};
use crate::train::TrainConfig;

/// Everything a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub ctm: CtmConfig,
    pub train: TrainConfig,
    /// Clip shape of generated data; `n_samples` is unused, see `n_train`.
    pub data: SyntheticSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Dataset directory read by `train`, `eval`, `ablate` and `analyze`.
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: EncoderConfig::default(),
            ctm: CtmConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            n_train: 600,
            n_test: 200,
            dataset: None,
        }
    }
}

/// Ordered `(key, value)` pairs as written by the user.
pub type Assignments = Vec<(String, String)>;

/// Parses config text into assignments. Repeating a key within one file is
/// an error.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Assignments> {
    let mut out: Assignments = Vec::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let at = |detail: String| Error::format(origin, format!("line {}: {detail}", n + 1));
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or_else(|| at(format!("unterminated section header '{line}'")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(at("empty key".into()));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(at(format!("duplicate key '{key}'")));
        }
        out.push((key, v.to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Assignments> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path)
}

/// Splits a `--set` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_tap(key: &str, v: &str) -> Result<CtmTap> {
    match v {
        "shared" => Ok(CtmTap::Shared),
        "raw" => Ok(CtmTap::Raw),
        _ => Err(Error::Config(format!("{key}: expected shared or raw, got '{v}'"))),
    }
}

/// Every recognized key, in echo order.
pub const KNOWN_KEYS: &[&str] = &[
    "features.n_classes",
    "features.d_audio",
    "features.d_video",
    "features.eta_a",
    "features.eta_v",
    "model.d_model",
    "model.n_heads",
    "model.d_ff",
    "model.n_blocks",
    "model.fusion",
    "model.posenc",
    "model.dropout",
    "model.theta_base",
    "model.max_tokens",
    "model.ctm_tap",
    "ctm.lambda",
    "ctm.sigma",
    "ctm.tau",
    "ctm.d_emb",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.eval_every",
    "data.n_train",
    "data.n_test",
    "data.seed",
    "data.duration_min",
    "data.duration_max",
    "data.noise_std",
    "data.coincidence_window",
    "data.bump_width",
    "data.event_amplitude",
    "data.latent_amplitude",
    "data.distractors",
    "data.min_separation",
    "paths.data",
];

impl RunConfig {
    /// Applies one assignment. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "features.n_classes" => {
                m.n_classes = parse(key, v)?;
                d.n_classes = m.n_classes;
            }
            "features.d_audio" => {
                m.d_in_audio = parse(key, v)?;
                d.d_in_audio = m.d_in_audio;
            }
            "features.d_video" => {
                m.d_in_video = parse(key, v)?;
                d.d_in_video = m.d_in_video;
            }
            "features.eta_a" => {
                d.eta_a = parse(key, v)?;
                m.rates.eta_a = d.eta_a;
            }
            "features.eta_v" => {
                d.eta_v = parse(key, v)?;
                m.rates.eta_v = d.eta_v;
            }
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.d_ff" => m.d_ff = parse(key, v)?,
            "model.n_blocks" => m.n_blocks = parse(key, v)?,
            "model.fusion" => m.fusion = v.parse::<FusionVariant>()?,
            "model.posenc" => m.posenc = v.parse::<PosEncKind>()?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.theta_base" => m.theta_base = parse(key, v)?,
            "model.max_tokens" => m.max_tokens = parse(key, v)?,
            "model.ctm_tap" => m.ctm_tap = parse_tap(key, v)?,
            "ctm.lambda" => self.ctm.lambda_ctm = parse(key, v)?,
            "ctm.sigma" => self.ctm.sigma = parse(key, v)?,
            "ctm.tau" => self.ctm.tau = parse(key, v)?,
            "ctm.d_emb" => {
                self.ctm.d_emb = parse(key, v)?;
                m.d_emb = self.ctm.d_emb;
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr_init = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "data.n_train" => self.n_train = parse(key, v)?,
            "data.n_test" => self.n_test = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.duration_min" => d.duration_min = parse(key, v)?,
            "data.duration_max" => d.duration_max = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.coincidence_window" => d.coincidence_window = parse(key, v)?,
            "data.bump_width" => d.bump_width = parse(key, v)?,
            "data.event_amplitude" => d.event_amplitude = parse(key, v)?,
            "data.latent_amplitude" => d.latent_amplitude = parse(key, v)?,
            "data.distractors" => d.distractors = parse(key, v)?,
            "data.min_separation" => d.min_separation = parse(key, v)?,
            "paths.data" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies every layer in order. All unknown keys are reported together,
    /// before any value is checked for consistency.
    pub fn resolve(layers: &[Assignments]) -> Result<RunConfig> {
        let unknown: Vec<&str> = layers
            .iter()
            .flatten()
            .map(|(k, _)| k.as_str())
            .filter(|k| !KNOWN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut cfg = RunConfig::default();
        for (k, v) in layers.iter().flatten() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ctm.validate()?;
        self.train.validate()?;
        RateSpec::new(self.data.eta_a, self.data.eta_v)?;
        Ok(())
    }

    /// Matching-loss settings handed to the trainer; a zero weight turns the
    /// loss off entirely.
    pub fn ctm_for_training(&self) -> Option<&CtmConfig> {
        (self.ctm.lambda_ctm > 0.0).then_some(&self.ctm)
    }

    /// Clip spec with the sample count of one split.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { n_samples: self.n_train, ..self.data.clone() }
    }

    fn value_of(&self, key: &str) -> String {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        match key {
            "features.n_classes" => m.n_classes.to_string(),
            "features.d_audio" => m.d_in_audio.to_string(),
            "features.d_video" => m.d_in_video.to_string(),
            "features.eta_a" => m.rates.eta_a.to_string(),
            "features.eta_v" => m.rates.eta_v.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.n_heads" => m.n_heads.to_string(),
            "model.d_ff" => m.d_ff.to_string(),
            "model.n_blocks" => m.n_blocks.to_string(),
            "model.fusion" => m.fusion.to_string(),
            "model.posenc" => m.posenc.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.theta_base" => m.theta_base.to_string(),
            "model.max_tokens" => m.max_tokens.to_string(),
            "model.ctm_tap" => match m.ctm_tap {
                CtmTap::Shared => "shared".into(),
                CtmTap::Raw => "raw".into(),
            },
            "ctm.lambda" => self.ctm.lambda_ctm.to_string(),
            "ctm.sigma" => self.ctm.sigma.to_string(),
            "ctm.tau" => self.ctm.tau.to_string(),
            "ctm.d_emb" => self.ctm.d_emb.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr_init.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "data.n_train" => self.n_train.to_string(),
            "data.n_test" => self.n_test.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.duration_min" => d.duration_min.to_string(),
            "data.duration_max" => d.duration_max.to_string(),
            "data.noise_std" => d.noise_std.to_string(),
            "data.coincidence_window" => d.coincidence_window.to_string(),
            "data.bump_width" => d.bump_width.to_string(),
            "data.event_amplitude" => d.event_amplitude.to_string(),
            "data.latent_amplitude" => d.latent_amplitude.to_string(),
            "data.distractors" => d.distractors.to_string(),
            "data.min_separation" => d.min_separation.to_string(),
            "paths.data" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => unreachable!("value_of called with unknown key {key}"),
        }
    }

    /// Every key with its resolved value, grouped by section. Parsing the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KNOWN_KEYS {
            let (sec, name) = key.split_once('.').expect("keys are dotted");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.value_of(key));
        }
        out
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assign(pairs: &[(&str, &str)]) -> Assignments {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sections_prefix_keys() {
        let text = "# desk\nfeatures.d_audio = 16\n[train]\nepochs = 3\n\n[model]\nfusion = concat\n";
        let a = parse_config_text(text, Path::new("x.conf")).unwrap();
        assert_eq!(a, assign(&[("features.d_audio", "16"), ("train.epochs", "3"), ("model.fusion", "concat")]));
    }

    #[test]
    fn malformed_lines_cite_their_number() {
        let err = parse_config_text("[train]\nepochs 3\n", Path::new("x.conf")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_config_text("a = 1\na = 2\n", Path::new("x")).is_err());
        assert!(parse_config_text("[train\n", Path::new("x")).is_err());
    }

    #[test]
    fn unknown_keys_are_listed_together() {
        let err = RunConfig::resolve(&[assign(&[("train.epoch", "3"), ("model.width", "8"), ("train.lr", "1")])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epoch") && msg.contains("model.width"), "{msg}");
        assert!(!msg.contains("train.lr"));
    }

    #[test]
    fn later_layers_win() {
        let file = assign(&[("train.epochs", "3"), ("ctm.lambda", "0.25")]);
        let flags = assign(&[("train.epochs", "7")]);
        let cfg = RunConfig::resolve(&[file, flags]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.ctm.lambda_ctm, 0.25);
    }

    #[test]
    fn shared_keys_reach_model_and_data() {
        let cfg = RunConfig::resolve(&[assign(&[("features.d_audio", "16"), ("features.eta_v", "25")])]).unwrap();
        assert_eq!((cfg.model.d_in_audio, cfg.data.d_in_audio), (16, 16));
        assert_eq!((cfg.model.rates.eta_v, cfg.data.eta_v), (25.0, 25.0));
    }

    #[test]
    fn defaults_use_fifty_and_thirty_fps() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.data.eta_a, cfg.data.eta_v), (50.0, 30.0));
        assert_eq!(cfg.model.rates, RateSpec::new(50.0, 30.0).unwrap());
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::resolve(&[assign(&[
            ("model.fusion", "ica+isa"),
            ("model.posenc", "rope"),
            ("model.ctm_tap", "raw"),
            ("train.lr", "0.001"),
            ("data.noise_std", "0.3"),
            ("paths.data", "some/dir"),
        ])])
        .unwrap();
        let again = RunConfig::resolve(&[parse_config_text(&cfg.to_text(), Path::new("echo")).unwrap()]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn digest_tracks_seed() {
        let a = RunConfig::default();
        let b = RunConfig::resolve(&[assign(&[("train.seed", "1")])]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn zero_weight_disables_matching() {
        let cfg = RunConfig::resolve(&[assign(&[("ctm.lambda", "0")])]).unwrap();
        assert!(cfg.ctm_for_training().is_none());
        assert!(RunConfig::default().ctm_for_training().is_some());
    }

    #[test]
    fn bad_values_are_rejected() {
        for (k, v) in [("train.epochs", "many"), ("model.posenc", "alibi"), ("model.n_heads", "3"), ("ctm.tau", "0")] {
            assert!(RunConfig::resolve(&[assign(&[(k, v)])]).is_err(), "{k}={v}");
        }
    }
}
