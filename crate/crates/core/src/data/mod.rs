//! Datasets: synthetic clip generation, feature files and manifests.

mod features;
mod manifest;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use features::{
    decode_features, encode_features, load_features, load_features_expecting, save_features, FEATURE_HEADER_LEN,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{Manifest, ManifestRecord};
pub use synthetic::{
    class_pairing, generate_synthetic, generate_with_prefix, label_of_pairing, permutations, Bump, EventLayout,
    SyntheticSample, SyntheticSpec, LATENT_CHANNELS,
};

use crate::encoder::{FeatureSequence, PaddedSample};
use crate::error::{Error, Result};

/// One labelled audio/video clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
    pub label: usize,
}

impl Sample {
    pub fn padded(&self, pad_audio: usize, pad_video: usize) -> Result<PaddedSample> {
        PaddedSample::new(&self.audio, &self.video, pad_audio, pad_video)
    }

    pub fn unpadded(&self) -> PaddedSample {
        PaddedSample::unpadded(&self.audio, &self.video)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// Seed of the held-out split derived from the training seed.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_7E57_0000_0001
}

/// Train and test clips from one spec; test clips use [`test_seed`].
pub fn generate_splits(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate_with_prefix(&SyntheticSpec { n_samples: n_train, ..spec.clone() }, "train-")?;
    let test = generate_with_prefix(&SyntheticSpec { n_samples: n_test, seed: test_seed(spec.seed), ..spec.clone() }, "test-")?;
    Ok((train.into_iter().map(|s| s.sample).collect(), test.into_iter().map(|s| s.sample).collect()))
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes feature files plus `manifest.tsv` into `out`, which must not exist
/// or be empty. Everything is staged in a sibling directory and renamed into
/// place, so a failure leaves no partial dataset.
pub fn write_dataset(out: &Path, splits: &[(Split, &[Sample])]) -> Result<Manifest> {
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", out.display())));
    }
    let name = out.file_name().ok_or_else(|| Error::Config(format!("bad output path {}", out.display())))?;
    let staging = out.with_file_name(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    let result = stage(&staging, splits);
    match result {
        Ok(manifest) => {
            if out.exists() {
                fs::remove_dir(out).map_err(|e| Error::io(out, e))?;
            }
            fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn stage(dir: &Path, splits: &[(Split, &[Sample])]) -> Result<Manifest> {
    let feat = dir.join("features");
    fs::create_dir_all(&feat).map_err(|e| Error::io(&feat, e))?;
    let mut manifest = Manifest::default();
    for (split, samples) in splits {
        for s in samples.iter() {
            let audio = PathBuf::from("features").join(format!("{}.audio.avf", s.id));
            let video = PathBuf::from("features").join(format!("{}.video.avf", s.id));
            save_features(&dir.join(&audio), &s.audio)?;
            save_features(&dir.join(&video), &s.video)?;
            manifest.records.push(ManifestRecord { id: s.id.clone(), audio, video, label: s.label, split: *split });
        }
    }
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
