//! Trains one configuration on a freshly generated synthetic task.
//!
//! Usage: `cargo run --release --example train_synthetic -- [posenc] [lambda] [epochs] [seed]`

use std::time::Instant;

use avalign::ctm::CtmConfig;
use avalign::data::{generate_splits, SyntheticSpec};
use avalign::encoder::{EncoderConfig, FusionModel, FusionVariant};
use avalign::posenc::PosEncKind;
use avalign::train::{train, TrainConfig};

fn main() -> avalign::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let posenc: PosEncKind = args.first().map_or(Ok(PosEncKind::TaRope), |s| s.parse())?;
    let lambda: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n_train: usize = std::env::var("N_TRAIN").ok().and_then(|s| s.parse().ok()).unwrap_or(600);
    let noise: f64 = std::env::var("NOISE").ok().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = SyntheticSpec {
        d_in_audio: 16,
        d_in_video: 12,
        duration_min: 1.0,
        duration_max: 1.4,
        noise_std: noise,
        seed,
        ..SyntheticSpec::default()
    };
    let (train_set, test_set) = generate_splits(&spec, n_train, 200)?;
    let cfg = EncoderConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        d_in_audio: 16,
        d_in_video: 12,
        d_emb: 16,
        fusion: FusionVariant::MsaMsa,
        posenc,
        ..EncoderConfig::default()
    };
    let mut model = FusionModel::new(cfg, seed)?;
    let tc = TrainConfig { epochs, lr_init: lr, seed, ..TrainConfig::default() };
    let ctm = CtmConfig { lambda_ctm: lambda, d_emb: 16, ..CtmConfig::default() };
    let start = Instant::now();
    let run = train(&mut model, &train_set, Some(&test_set), &tc, (lambda > 0.0).then_some(&ctm), &mut |e| {
        println!(
            "epoch {:3}  cls {:.4}  ctm {:.4}  acc {:.3}  ({:.1}s)",
            e.epoch,
            e.cls_loss,
            e.ctm_loss,
            e.accuracy.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("{posenc} lambda={lambda}: final {:.3} best {:.3}", run.final_accuracy().unwrap(), run.best_accuracy.unwrap());
    Ok(())
}
