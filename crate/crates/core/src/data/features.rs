//! Binary feature files.
//!
//! Little-endian layout, 28-byte header followed by the frames:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVFS"
//! 4       4     u32 version = 1
//! 8       1     modality tag (0 = audio, 1 = video)
//! 9       3     zero padding
//! 12      8     f64 frames per second
//! 20      4     u32 frame count T
//! 24      4     u32 feature width d
//! 28      4·T·d f32 values, row-major (frame after frame)
//! ```

use std::fs;
use std::path::Path;

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::posenc::Modality;

pub const FEATURE_MAGIC: &[u8; 4] = b"AVFS";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 28;

/// Serializes `seq`. Values are stored as f32; non-finite values, or values
/// that overflow f32, are rejected.
pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let (t, d) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&[seq.modality.tag(), 0, 0, 0]);
    out.extend_from_slice(&seq.fps.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in seq.frames.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite { op: "encode_features" });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<FeatureSequence> {
    let bad = |m: String| Error::format(origin, m);
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(bad(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let modality = Modality::from_tag(bytes[8]).ok_or_else(|| bad(format!("unknown modality tag {}", bytes[8])))?;
    if bytes[9..12] != [0, 0, 0] {
        return Err(bad("nonzero header padding".into()));
    }
    let fps = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(bad(format!("invalid fps {fps}")));
    }
    let (t, d) = (u32_at(20) as usize, u32_at(24) as usize);
    if t == 0 || d == 0 {
        return Err(bad(format!("empty feature matrix {t}x{d}")));
    }
    let expected = FEATURE_HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {t}x{d} frames, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, c) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad(format!("non-finite value at frame {}, dim {}", i / d, i % d)));
        }
        data.push(v as f64);
    }
    FeatureSequence::new(Tensor::matrix(t, d, data), fps, modality).map_err(|e| bad(e.to_string()))
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_features(seq).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Loads and checks modality and width against expectations.
pub fn load_features_expecting(path: &Path, modality: Modality, dim: usize) -> Result<FeatureSequence> {
    let seq = load_features(path)?;
    if seq.modality != modality {
        return Err(Error::format(path, format!("expected {modality} features, file declares {}", seq.modality)));
    }
    if seq.dim() != dim {
        return Err(Error::format(path, format!("expected width {dim}, file has {}", seq.dim())));
    }
    Ok(seq)
}
