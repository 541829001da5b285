//! Parameter counts of every fusion strategy at full width (d_model 512,
//! d_ff 2048, two blocks). Counted: input projections and fusion blocks.
//!
//! Usage: `cargo run --release --example parameter_counts`

use avalign::encoder::{EncoderConfig, FusionModel, FusionVariant};

fn main() -> avalign::Result<()> {
    let mut stacked = 0;
    for fusion in FusionVariant::ALL {
        let m = FusionModel::new(EncoderConfig { fusion, ..EncoderConfig::default() }, 0)?;
        let n = m.count_parameters();
        if fusion == FusionVariant::IsaIsa {
            stacked = n;
        }
        println!("{:<8} {:>10} ({:.2}M), fusion blocks {:>10}, all tensors {:>10}", fusion.name(), n, n as f64 / 1e6, m.count_fusion_block_parameters(), m.count_all_parameters());
    }
    let msa = FusionModel::new(EncoderConfig::default(), 0)?.count_parameters();
    println!("joint / stacked = {:.4}", msa as f64 / stacked as f64);
    Ok(())
}
