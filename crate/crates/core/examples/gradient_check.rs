//! Checks every parameter gradient of the full objective (classification
//! plus matching loss) against central finite differences, for each fusion
//! strategy with the rate-aligned rotary encoding.
//!
//! Usage: `cargo run --release --example gradient_check`

use avalign::ctm::CtmConfig;
use avalign::encoder::{ForwardCtx, EncoderConfig, FusionModel, FusionVariant, PaddedSample};
use avalign::numkernel::gradcheck::check_gradients;
use avalign::numkernel::Tensor;
use avalign::train::sample_loss;

fn main() -> avalign::Result<()> {
    let ctm = CtmConfig { d_emb: 6, ..CtmConfig::default() };
    let wave = |r: usize, c: usize, k: f64| Tensor::matrix(r, c, (0..r * c).map(|i| (i as f64 * k).sin()).collect());
    let sample = PaddedSample::from_tensors(wave(4, 5, 0.7), wave(3, 4, 1.3));
    for fusion in FusionVariant::ALL {
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            fusion,
            n_classes: 3,
            d_in_audio: 5,
            d_in_video: 4,
            dropout: 0.0,
            d_emb: 6,
            ..EncoderConfig::default()
        };
        let model = FusionModel::new(cfg, 1)?;
        let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let rep = check_gradients(&inputs, 1e-5, |t, vars| {
            let mut ctx = ForwardCtx::from_vars(t, vars.to_vec());
            Ok(sample_loss(&model, &mut ctx, &sample, 0, Some(&ctm))?.total)
        })?;
        println!("{:<8} {:>4} tensors, max relative error {:.2e}", fusion.name(), inputs.len(), rep.max_rel_error());
    }
    Ok(())
}
