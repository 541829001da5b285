//! Text manifests: one tab-separated record per line,
//!
//! ```text
//! id<TAB>audio_path<TAB>video_path<TAB>label<TAB>split
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against a data root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::features::load_features_expecting;
use super::{Sample, Split};
use crate::error::{Error, Result};
use crate::posenc::Modality;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio: PathBuf,
    pub video: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::format(origin, format!("line {}: {m}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", f.len())));
            }
            if f[0].is_empty() {
                return Err(bad("empty sample id".into()));
            }
            let label = f[3].parse().map_err(|_| bad(format!("bad label '{}'", f[3])))?;
            let split = f[4].parse().map_err(|_| bad(format!("bad split '{}'", f[4])))?;
            records.push(ManifestRecord {
                id: f[0].to_string(),
                audio: PathBuf::from(f[1]),
                video: PathBuf::from(f[2]),
                label,
                split,
            });
        }
        Ok(Manifest { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# id\taudio\tvideo\tlabel\tsplit\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.id, r.audio.display(), r.video.display(), r.label, r.split);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Checks labels and that every referenced file exists under `root`.
    pub fn validate(&self, root: &Path, n_classes: usize) -> Result<()> {
        for r in &self.records {
            if r.label >= n_classes {
                return Err(Error::Config(format!("sample '{}': label {} outside {n_classes} classes", r.id, r.label)));
            }
            for p in [&r.audio, &r.video] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(Error::io(&full, std::io::Error::new(std::io::ErrorKind::NotFound, "missing feature file")));
                }
            }
        }
        Ok(())
    }

    /// Loads every record of `split`, checking modality and widths.
    pub fn load_split(&self, root: &Path, split: Split, n_classes: usize, d_audio: usize, d_video: usize) -> Result<Vec<Sample>> {
        self.validate(root, n_classes)?;
        self.split(split)
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    audio: load_features_expecting(&root.join(&r.audio), Modality::Audio, d_audio)?,
                    video: load_features_expecting(&root.join(&r.video), Modality::Video, d_video)?,
                    label: r.label,
                })
            })
            .collect()
    }
}
