//! A reduced positional-encoding ablation run in-process: every encoding with
//! and without the matching loss, two seeds, laptop-scale widths.
//!
//! Usage: `cargo run --release --example ablation -- [epochs]`

use avalign::cli::ablate::{results_csv, table_csv};
use avalign::cli::{run_matrix, Matrix, RunConfig};
use avalign::data::generate_splits;

fn main() -> avalign::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let desk = [
        ("features.d_audio", "16"),
        ("features.d_video", "12"),
        ("model.d_model", "32"),
        ("model.n_heads", "2"),
        ("model.d_ff", "64"),
        ("ctm.d_emb", "16"),
        ("train.lr", "0.001"),
        ("data.duration_min", "1.0"),
        ("data.duration_max", "1.4"),
    ];
    let mut layer: Vec<(String, String)> = desk.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    layer.push(("train.epochs".into(), epochs.to_string()));
    let cfg = RunConfig::resolve(&[layer])?;
    let (train, test) = generate_splits(&cfg.synthetic_spec(), 300, 100)?;

    let report = run_matrix(&cfg, &Matrix::posenc_table(), 2, &train, &test, &mut |o, _| {
        println!("{:<28} seed {} accuracy {:?}", o.cell.label(), o.seed, o.accuracy);
    })?;
    println!("\n{}", results_csv(&report));
    println!("{}", table_csv(&report));
    Ok(())
}
