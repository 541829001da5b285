//! Feature-dynamics probe: trains the same model with and without the
//! matching loss, then compares how often the audio and video embedding
//! magnitudes rise and fall together.
//!
//! Usage: `cargo run --release --example alignment_analysis -- [epochs]`

use avalign::analyze::{agreement_distribution, histogram_csv, sample_trajectories, sign_agreement, AnalysisTap};
use avalign::ctm::CtmConfig;
use avalign::data::{generate_splits, SyntheticSpec};
use avalign::encoder::{EncoderConfig, FusionModel};
use avalign::train::{train, TrainConfig};

fn main() -> avalign::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let spec = SyntheticSpec { d_in_audio: 16, d_in_video: 12, duration_min: 1.0, duration_max: 1.4, ..SyntheticSpec::default() };
    let (train_set, test_set) = generate_splits(&spec, 300, 100)?;
    let cfg = EncoderConfig { d_model: 32, n_heads: 2, d_ff: 64, d_in_audio: 16, d_in_video: 12, d_emb: 16, ..EncoderConfig::default() };
    let tc = TrainConfig { epochs, lr_init: 1e-3, ..TrainConfig::default() };
    let ctm = CtmConfig { d_emb: 16, ..CtmConfig::default() };

    for (name, loss) in [("without matching loss", None), ("with matching loss", Some(&ctm))] {
        let mut model = FusionModel::new(cfg.clone(), 0)?;
        train(&mut model, &train_set, None, &tc, loss, &mut |_| {})?;
        let d = agreement_distribution(&model, &test_set, AnalysisTap::Ctm, 5)?;
        println!("{name}: mean agreement {:.4}, median {:.4}", d.mean, d.median);
        print!("{}", histogram_csv(&d));

        let (a, v) = sample_trajectories(&model, &test_set[0], AnalysisTap::Ctm)?;
        let one = sign_agreement(&a.values, &a.times, &v.values, &v.times)?;
        println!("clip {}: {} audio / {} video points, agreement {one:.3}\n", test_set[0].id, a.values.len(), v.values.len());
    }
    Ok(())
}
