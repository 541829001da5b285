//! The cross-temporal matching loss on a toy pair of streams: targets come
//! from a Gaussian over frame-time differences, and the loss bottoms out at
//! the target entropy once similarities reproduce them.
//!
//! Usage: `cargo run --example ctm_loss`

use avalign::ctm::{ctm_loss, gaussian_affinity, CtmConfig};
use avalign::encoder::{timestamps, EMBED_NORM_EPS};
use avalign::numkernel::{Tape, Tensor};
use avalign::train::AdamW;

fn main() -> avalign::Result<()> {
    let (ta, tv, d) = (5, 3, 8);
    let cfg = CtmConfig { sigma: 0.02, ..CtmConfig::default() };
    let aff = gaussian_affinity(&timestamps(ta, 50.0), &timestamps(tv, 30.0), cfg.sigma)?;
    println!("audio-to-video targets (rows sum to 1):");
    for i in 0..ta {
        let row: Vec<String> = aff.q_a2v.row(i).iter().map(|q| format!("{q:.3}")).collect();
        println!("  audio {i}: {}", row.join(" "));
    }
    println!("entropy floor: {:.6}", aff.entropy_floor());

    let mut ea: Vec<f64> = (0..ta * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let mut ev: Vec<f64> = (0..tv * d).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
    let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.0);
    for step in 0..=2000 {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(ta, d, ea.clone()));
        let v = tape.param(Tensor::matrix(tv, d, ev.clone()));
        let ua = tape.l2_normalize_rows(a, EMBED_NORM_EPS)?;
        let uv = tape.l2_normalize_rows(v, EMBED_NORM_EPS)?;
        let loss = ctm_loss(&mut tape, ua, uv, &aff, cfg.tau)?;
        if step % 400 == 0 {
            println!("step {step:4}: loss {:.6}", tape.value(loss).item());
        }
        let g = tape.backward(loss)?;
        let (ga, gv) = (g.get(a).unwrap_or_default().to_vec(), g.get(v).unwrap_or_default().to_vec());
        opt.step_slices(&mut [&mut ea, &mut ev], &[&ga, &gv], 0.02);
    }
    Ok(())
}
