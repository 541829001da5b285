//! Rate-aligned rotary positions: audio and video frames that happen at the
//! same moment get the same rotation, so cross-modal attention scores depend
//! only on the time between frames.
//!
//! Usage: `cargo run --example tarope_invariance`

use avalign::numkernel::Tensor;
use avalign::posenc::{rotary_logits, tarope_positions, Modality, RateSpec, RotaryBank};

fn main() -> avalign::Result<()> {
    let rates = RateSpec::new(50.0, 30.0)?;
    let bank = RotaryBank::new(8, 10_000.0)?;
    let audio: Vec<usize> = (0..6).collect();
    let video: Vec<usize> = (0..4).collect();
    let pa = tarope_positions(Modality::Audio, &audio, rates);
    let pv = tarope_positions(Modality::Video, &video, rates);
    println!("audio clock positions: {pa:?}");
    println!("video clock positions: {pv:?}");

    // one query and one key, repeated on every frame
    let q = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.2, 0.7]; 6])?;
    let k = Tensor::from_rows(&vec![vec![0.6, 0.1, -0.3, 0.8, 0.2, -0.4, 0.5, 0.1]; 4])?;
    let base = rotary_logits(&q, &pa, &k, &pv, &bank)?;

    // 5 audio frames and 3 video frames are both 0.1 s
    let shift = |idx: &[usize], by| idx.iter().map(|i| i + by).collect::<Vec<_>>();
    let pa2 = tarope_positions(Modality::Audio, &shift(&audio, 5), rates);
    let pv2 = tarope_positions(Modality::Video, &shift(&video, 3), rates);
    let moved = rotary_logits(&q, &pa2, &k, &pv2, &bank)?;
    let err = base.data().iter().zip(moved.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max logit change after shifting both streams by 0.1 s: {err:.2e}");

    // audio frame 5 (0.1 s) and video frame 3 (0.1 s) coincide
    println!("logit(audio 0, video 0) = {:.6}", base.get(0, 0));
    println!("logit(audio 5, video 3) = {:.6}", base.get(5, 3));
    Ok(())
}
