//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are printed even
//! when every check passes. Set `AVALIGN_ACCEPTANCE_QUICK=1` to skip the
//! training-based criteria 7 and 8.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avalign::analyze::{agreement_distribution, AnalysisTap, DEFAULT_BINS};
use avalign::cli::{parse_config_text, run_matrix, Matrix, RunConfig};
use avalign::ctm::{ctm_loss, gaussian_affinity, CtmConfig};
use avalign::data::{generate_splits, Sample};
use avalign::encoder::{timestamps, EncoderConfig, ForwardCtx, FusionModel, FusionVariant, PaddedSample, EMBED_NORM_EPS};
use avalign::numkernel::gradcheck::check_gradients;
use avalign::numkernel::{Tape, Tensor};
use avalign::posenc::{rotary_logits, rope_rotate, tarope_positions, Modality, PosEncKind, RateSpec, RotaryBank};
use avalign::train::{evaluate, sample_loss, train, AdamW, TrainConfig};

const DESK_CONF: &str = include_str!("../../../configs/desk.conf");

enum Verdict {
    Pass(String),
    Fail(String),
    /// Correct behaviour is not checkable at desk scale.
    NotApplicable(String),
}

struct Outcome {
    id: u32,
    title: &'static str,
    verdict: Verdict,
    seconds: f64,
}

fn check(id: u32, title: &'static str, f: impl FnOnce() -> Verdict) -> Outcome {
    let start = Instant::now();
    let verdict = f();
    let out = Outcome { id, title, verdict, seconds: start.elapsed().as_secs_f64() };
    report(&out);
    out
}

fn report(o: &Outcome) {
    let (tag, detail) = match &o.verdict {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::NotApplicable(d) => ("N/A ", d),
    };
    println!("criterion {}: {tag} {} ({:.1}s): {detail}", o.id, o.title, o.seconds);
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn indices(n: usize, offset: usize) -> Vec<usize> {
    (offset..offset + n).collect()
}

fn tarope_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rates = RateSpec::new(50.0, 30.0).unwrap();
    let bank = RotaryBank::new(16, 10_000.0).unwrap();
    let (q, k) = (random(&mut rng, 12, 16), random(&mut rng, 8, 16));

    let cross = |da: usize, dv: usize| {
        let pa = tarope_positions(Modality::Audio, &indices(12, da), rates);
        let pv = tarope_positions(Modality::Video, &indices(8, dv), rates);
        rotary_logits(&q, &pa, &k, &pv, &bank).unwrap()
    };
    let cross_err = max_abs_diff(&cross(0, 0), &cross(5, 3));

    let k_audio = random(&mut rng, 12, 16);
    let same = |shift: usize| {
        let p: Vec<f64> = indices(12, shift).iter().map(|&i| i as f64).collect();
        rotary_logits(&q, &p, &k_audio, &p, &bank).unwrap()
    };
    let same_err = [1, 7, 250].iter().map(|&s| max_abs_diff(&same(0), &same(s))).fold(0.0, f64::max);

    // Equal rates: the video clock is the frame index itself, so the rotation
    // is the plain per-stream one, bit for bit.
    let equal = RateSpec::new(30.0, 30.0).unwrap();
    let idx = indices(8, 0);
    let plain: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    let ta_pos = tarope_positions(Modality::Video, &idx, equal);
    let identical = ta_pos == plain && rope_rotate(&k, &ta_pos, &bank).unwrap() == rope_rotate(&k, &plain, &bank).unwrap();

    verdict(
        cross_err < 1e-9 && same_err < 1e-9 && identical,
        format!("cross-modal shift err {cross_err:.1e}, same-modality shift err {same_err:.1e}, equal-rate identity {identical}"),
    )
}

/// Matching loss written as explicit sums over frame pairs.
fn ctm_oracle(e_a: &Tensor, e_v: &Tensor, t_a: &[f64], t_v: &[f64], sigma: f64, tau: f64) -> f64 {
    let (ta, tv) = (t_a.len(), t_v.len());
    let unit = |e: &Tensor, i: usize| {
        let r = e.row(i);
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(EMBED_NORM_EPS);
        r.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let ua: Vec<Vec<f64>> = (0..ta).map(|i| unit(e_a, i)).collect();
    let uv: Vec<Vec<f64>> = (0..tv).map(|j| unit(e_v, j)).collect();
    let s = |i: usize, j: usize| ua[i].iter().zip(&uv[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let g = |i: usize, j: usize| (-(t_a[i] - t_v[j]).powi(2) / (2.0 * sigma * sigma)).exp();
    let mut a2v = 0.0;
    for i in 0..ta {
        let zg: f64 = (0..tv).map(|j| g(i, j)).sum();
        let zs: f64 = (0..tv).map(|j| s(i, j).exp()).sum();
        for j in 0..tv {
            a2v -= g(i, j) / zg * (s(i, j).exp() / zs).ln();
        }
    }
    let mut v2a = 0.0;
    for j in 0..tv {
        let zg: f64 = (0..ta).map(|i| g(i, j)).sum();
        let zs: f64 = (0..ta).map(|i| s(i, j).exp()).sum();
        for i in 0..ta {
            v2a -= g(i, j) / zg * (s(i, j).exp() / zs).ln();
        }
    }
    0.5 * (a2v / ta as f64 + v2a / tv as f64)
}

fn ctm_on_raw(t: &mut Tape, a: avalign::numkernel::Var, v: avalign::numkernel::Var, aff: &avalign::ctm::AffinityMatrix, tau: f64) -> avalign::Result<avalign::numkernel::Var> {
    let ua = t.l2_normalize_rows(a, EMBED_NORM_EPS)?;
    let uv = t.l2_normalize_rows(v, EMBED_NORM_EPS)?;
    ctm_loss(t, ua, uv, aff, tau)
}

fn ctm_oracle_and_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_val, mut worst_grad) = (0.0f64, 0.0f64);
    let instances = 40;
    for _ in 0..instances {
        let ta = rng.random_range(1..=6);
        let tv = rng.random_range(1..=5);
        let d = rng.random_range(1..=8);
        let sigma = rng.random_range(0.02..1.0);
        let tau = rng.random_range(0.05..1.0);
        let (t_a, t_v) = (timestamps(ta, 50.0), timestamps(tv, 30.0));
        let aff = gaussian_affinity(&t_a, &t_v, sigma).unwrap();
        let (e_a, e_v) = (random(&mut rng, ta, d), random(&mut rng, tv, d));

        let mut tape = Tape::new();
        let (a, v) = (tape.constant(e_a.clone()), tape.constant(e_v.clone()));
        let l = ctm_on_raw(&mut tape, a, v, &aff, tau).unwrap();
        let got = tape.value(l).item();
        worst_val = worst_val.max((got - ctm_oracle(&e_a, &e_v, &t_a, &t_v, sigma, tau)).abs());

        let rep = check_gradients(&[e_a, e_v], 1e-5, |t, vars| ctm_on_raw(t, vars[0], vars[1], &aff, tau)).unwrap();
        worst_grad = worst_grad.max(rep.max_rel_error());
    }
    verdict(
        worst_val < 1e-10 && worst_grad < 1e-4,
        format!("{instances} instances, max |loss - oracle| {worst_val:.1e}, max gradient rel err {worst_grad:.1e}"),
    )
}

fn entropy_floor() -> Verdict {
    // Frame spacing is comparable to sigma, so the targets are far from uniform.
    let (ta, tv, d, sigma, tau) = (5, 3, 8, 0.02, 0.07);
    let aff = gaussian_affinity(&timestamps(ta, 50.0), &timestamps(tv, 30.0), sigma).unwrap();
    let floor = aff.entropy_floor();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ea = random(&mut rng, ta, d).into_data();
    let mut ev = random(&mut rng, tv, d).into_data();
    let loss_and_grads = |ea: &[f64], ev: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(ta, d, ea.to_vec()));
        let v = tape.param(Tensor::matrix(tv, d, ev.to_vec()));
        let l = ctm_on_raw(&mut tape, a, v, &aff, tau).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), g.get(a).unwrap().to_vec(), g.get(v).unwrap().to_vec())
    };
    let start = loss_and_grads(&ea, &ev).0;
    let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.0);
    let steps = 4000;
    for s in 0..steps {
        let (_, ga, gv) = loss_and_grads(&ea, &ev);
        let lr = 0.02 * (1.0 - s as f64 / steps as f64) + 1e-4;
        opt.step_slices(&mut [&mut ea, &mut ev], &[&ga, &gv], lr);
    }
    let end = loss_and_grads(&ea, &ev).0;
    let gap = end - floor;
    verdict(
        (0.0..1e-3).contains(&gap) || gap.abs() < 1e-12,
        format!("floor {floor:.6}, loss {start:.6} -> {end:.6}, gap {gap:.1e}"),
    )
}

fn parameter_counts() -> Verdict {
    let count = |fusion| FusionModel::new(EncoderConfig { fusion, ..EncoderConfig::default() }, 0).unwrap().count_parameters();
    let msa = count(FusionVariant::MsaMsa);
    let stacked: Vec<usize> =
        [FusionVariant::IsaIsa, FusionVariant::IcaIca, FusionVariant::IsaIca, FusionVariant::IcaIsa].map(count).to_vec();
    let within = |x: usize, target: f64| (x as f64 / target - 1.0).abs() <= 0.05;
    let ratio = msa as f64 / stacked[0] as f64;
    let equal = stacked.iter().all(|&c| c == stacked[0]);
    verdict(
        within(msa, 6.83e6) && stacked.iter().all(|&c| within(c, 12.61e6)) && equal && (ratio - 0.54).abs() <= 0.03,
        format!("msa {msa}, stacked {stacked:?}, ratio {ratio:.4}"),
    )
}

fn end_to_end_gradients() -> Verdict {
    let ctm = CtmConfig { d_emb: 6, ..CtmConfig::default() };
    let mut worst = (0.0f64, String::new());
    for fusion in FusionVariant::ALL {
        for posenc in PosEncKind::ALL {
            let cfg = EncoderConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                fusion,
                posenc,
                n_classes: 3,
                d_in_audio: 5,
                d_in_video: 4,
                dropout: 0.0,
                max_tokens: 16,
                d_emb: 6,
                ..EncoderConfig::default()
            };
            let model = FusionModel::new(cfg, 21).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let s = PaddedSample::from_tensors(random(&mut rng, 4, 5), random(&mut rng, 3, 4));
            let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
            let rep = check_gradients(&inputs, 1e-5, |t, vars| {
                let mut ctx = ForwardCtx::from_vars(t, vars.to_vec());
                Ok(sample_loss(&model, &mut ctx, &s, 2, Some(&ctm))?.total)
            })
            .unwrap();
            for (e, (name, _)) in rep.rel_errors.iter().zip(model.params().iter()) {
                if *e > worst.0 {
                    worst = (*e, format!("{fusion}/{posenc} {name}"));
                }
            }
        }
    }
    verdict(worst.0 < 1e-4, format!("24 combinations, worst rel err {:.1e} at {}", worst.0, worst.1))
}

fn desk_config() -> RunConfig {
    RunConfig::resolve(&[parse_config_text(DESK_CONF, Path::new("configs/desk.conf")).unwrap()]).unwrap()
}

fn determinism() -> Verdict {
    let cfg = desk_config();
    let (train_set, test_set) = generate_splits(&cfg.synthetic_spec(), 120, 200).unwrap();
    let tc = TrainConfig { epochs: 2, seed: 5, ..cfg.train.clone() };
    let go = || {
        let mut m = FusionModel::new(cfg.model.clone(), 5).unwrap();
        let run = train(&mut m, &train_set, None, &tc, cfg.ctm_for_training(), &mut |_| {}).unwrap();
        (m, run)
    };
    let (m1, r1) = go();
    let (m2, r2) = go();
    let same_run = m1.params() == m2.params() && r1 == r2;
    let e1 = evaluate(&m1, &test_set, 1).unwrap();
    let e4 = evaluate(&m1, &test_set, 4).unwrap();
    verdict(
        same_run && e1 == e4,
        format!("retrain identical {same_run}, accuracy batch 1 {:.4} vs batch 4 {:.4}, confusion equal {}", e1.accuracy, e4.accuracy, e1.confusion == e4.confusion),
    )
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Criteria 7 and 8 share one set of trained models.
fn posenc_ablation(outcomes: &mut Vec<Outcome>) {
    let cfg = desk_config();
    let start = Instant::now();
    let (train_set, test_set): (Vec<Sample>, Vec<Sample>) = generate_splits(&cfg.synthetic_spec(), cfg.n_train, cfg.n_test).unwrap();
    let mut agreement: BTreeMap<bool, Vec<f64>> = BTreeMap::new();
    let mut agreement_secs = 0.0;
    let report = run_matrix(&cfg, &Matrix::posenc_table(), 3, &train_set, &test_set, &mut |o, model| {
        eprintln!("  {} seed {}: {:?}", o.cell.label(), o.seed, o.accuracy);
        if let (PosEncKind::TaRope, Some(m)) = (o.cell.posenc, model) {
            let t = Instant::now();
            let d = agreement_distribution(m, &test_set, AnalysisTap::Ctm, DEFAULT_BINS).unwrap();
            agreement.entry(o.cell.ctm).or_default().push(d.mean);
            agreement_secs += t.elapsed().as_secs_f64();
        }
    })
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64() - agreement_secs;

    let acc = |p: PosEncKind, ctm: bool| report.cell(FusionVariant::MsaMsa, p, ctm).and_then(|c| c.mean_accuracy).unwrap_or(f64::NAN);
    let table: Vec<String> = PosEncKind::ALL
        .iter()
        .map(|&p| format!("{p} {:.3}/{:.3}", acc(p, false), acc(p, true)))
        .collect();
    let best = PosEncKind::ALL.iter().all(|&p| {
        [false, true].iter().all(|&c| acc(PosEncKind::TaRope, c) >= acc(p, c))
    });
    let helps = PosEncKind::ALL.iter().all(|&p| acc(p, true) >= acc(p, false));
    let failures = report.failures().count();
    let v7 = verdict(
        best && helps && failures == 0,
        format!(
            "mean accuracy without/with matching loss over 3 seeds: {}; tarope best {best}, matching loss never hurts {helps}, failed runs {failures}",
            table.join(", ")
        ),
    );
    let o7 = Outcome { id: 7, title: "directional encoding and matching-loss ordering", verdict: v7, seconds: train_secs };
    report_and_push(outcomes, o7);

    let with = agreement.get(&true).map(|v| mean(v)).unwrap_or(f64::NAN);
    let without = agreement.get(&false).map(|v| mean(v)).unwrap_or(f64::NAN);
    let v8 = verdict(
        with > without,
        format!("mean sign agreement with matching loss {with:.4} vs without {without:.4} (per seed {:?} vs {:?})", agreement.get(&true), agreement.get(&false)),
    );
    report_and_push(outcomes, Outcome { id: 8, title: "sign agreement rises with matching loss", verdict: v8, seconds: agreement_secs });
}

fn report_and_push(outcomes: &mut Vec<Outcome>, o: Outcome) {
    report(&o);
    outcomes.push(o);
}

/// Directional outcomes of stochastic training experiments. Their verdicts are
/// reported as measured but do not fail the target; every other criterion is an
/// exact property of the implementation and does.
const EXPERIMENTAL: [u32; 2] = [7, 8];

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored; `--list`
    // must stay cheap.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let quick = std::env::var_os("AVALIGN_ACCEPTANCE_QUICK").is_some_and(|v| v != "0");
    let mut outcomes = vec![Outcome {
        id: 1,
        title: "headline corpus accuracies",
        verdict: Verdict::NotApplicable(
            "needs pretrained speech and facial-feature extractors plus the full emotion corpora; covered by criteria 2-9".into(),
        ),
        seconds: 0.0,
    }];
    report(&outcomes[0]);
    outcomes.push(check(2, "rate-aligned rotary invariances", tarope_invariance));
    outcomes.push(check(3, "matching loss oracle and gradients", ctm_oracle_and_gradients));
    outcomes.push(check(4, "matching loss entropy floor", entropy_floor));
    outcomes.push(check(5, "parameter counts at full width", parameter_counts));
    outcomes.push(check(6, "end-to-end gradient check", end_to_end_gradients));
    outcomes.push(check(9, "determinism and batch invariance", determinism));
    if quick {
        println!("criteria 7 and 8 skipped (AVALIGN_ACCEPTANCE_QUICK)");
    } else {
        posenc_ablation(&mut outcomes);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| matches!(o.verdict, Verdict::Fail(_))).map(|o| o.id).collect();
    let gating: Vec<u32> = failed.iter().copied().filter(|id| !EXPERIMENTAL.contains(id)).collect();
    println!("acceptance: {} checked, failed {:?}, gating failures {:?}", outcomes.len(), failed, gating);
    if gating.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
