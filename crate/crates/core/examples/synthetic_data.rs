//! The synthetic alignment task: the label is which audio event type lines up
//! in time with which video event type. Prints one clip's layout and writes a
//! small dataset.
//!
//! Usage: `cargo run --example synthetic_data -- [out_dir]`

use std::path::PathBuf;

use avalign::data::{class_pairing, generate_splits, generate_synthetic, write_dataset, Split, SyntheticSpec};

fn main() -> avalign::Result<()> {
    let spec = SyntheticSpec { n_samples: 3, d_in_audio: 16, d_in_video: 12, ..SyntheticSpec::default() };
    println!("{} classes over {} event types", spec.n_classes, spec.event_types());
    for s in generate_synthetic(&spec)? {
        let l = &s.layout;
        println!(
            "{} label {} pairing {:?}: {} audio frames, {} video frames",
            s.sample.id,
            s.sample.label,
            class_pairing(&spec, s.sample.label),
            s.sample.audio.len(),
            s.sample.video.len()
        );
        for (a, v) in &l.pairs {
            println!("  audio type {} at {:.3}s  <->  video type {} at {:.3}s", a.kind, a.time, v.kind, v.time);
        }
        for b in l.audio_distractors.iter().chain(&l.video_distractors) {
            println!("  distractor type {} at {:.3}s", b.kind, b.time);
        }
    }

    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("avalign-synthetic"));
    if out.exists() {
        println!("{} exists; not overwriting", out.display());
        return Ok(());
    }
    let (train, test) = generate_splits(&spec, 60, 20)?;
    let manifest = write_dataset(&out, &[(Split::Train, &train), (Split::Test, &test)])?;
    println!("wrote {} clips to {}", manifest.records.len(), out.display());
    Ok(())
}
