use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numkernel::gradcheck::check_gradients;
use crate::numkernel::Tape;
use crate::posenc::RateSpec;

fn tiny(fusion: FusionVariant, posenc: PosEncKind) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        fusion,
        posenc,
        n_classes: 3,
        d_in_audio: 5,
        d_in_video: 4,
        dropout: 0.0,
        max_tokens: 32,
        d_emb: 6,
        ..EncoderConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn sample(seed: u64, cfg: &EncoderConfig, ta: usize, tv: usize) -> PaddedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PaddedSample::from_tensors(random(&mut rng, ta, cfg.d_in_audio), random(&mut rng, tv, cfg.d_in_video))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn traces(model: &FusionModel, s: &PaddedSample) -> Vec<AttentionTrace> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, model.params(), false);
    ctx.trace = Some(Vec::new());
    model.forward(&mut ctx, s).unwrap();
    ctx.trace.take().unwrap()
}

fn paper_model(fusion: FusionVariant) -> FusionModel {
    FusionModel::new(EncoderConfig { fusion, ..EncoderConfig::default() }, 0).unwrap()
}

#[test]
fn two_second_clip_projects_to_shared_width() {
    let cfg = EncoderConfig { fusion: FusionVariant::Concat, ..EncoderConfig::default() };
    let model = FusionModel::new(cfg.clone(), 1).unwrap();
    let s = sample(0, &cfg, 100, 60);
    let (fa, fv) = model.shared_features(&s).unwrap();
    assert_eq!((fa.rows(), fa.cols()), (100, 512));
    assert_eq!((fv.rows(), fv.cols()), (60, 512));
    assert_eq!(model.predict(&s).unwrap().len(), 6);
}

#[test]
fn zero_frames_project_to_bias() {
    let cfg = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    let mut model = FusionModel::new(cfg.clone(), 2).unwrap();
    let id = model.params().find("proj.audio.bias").unwrap();
    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    model.params_mut().get_mut(id).assign(&bias).unwrap();
    let s = PaddedSample::from_tensors(Tensor::zeros(3, 5), Tensor::zeros(2, 4));
    let (fa, _) = model.shared_features(&s).unwrap();
    for i in 0..3 {
        assert_eq!(fa.row(i), &bias[..]);
    }
}

#[test]
fn input_width_mismatch_is_config_error() {
    let cfg = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    let model = FusionModel::new(cfg, 0).unwrap();
    let s = PaddedSample::from_tensors(Tensor::zeros(3, 7), Tensor::zeros(2, 4));
    assert!(matches!(model.predict(&s), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_rejected() {
    let base = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    assert!(EncoderConfig { n_heads: 3, ..base.clone() }.validate().is_err());
    assert!(EncoderConfig { n_heads: 8, ..base.clone() }.validate().is_err());
    assert!(EncoderConfig { n_classes: 1, ..base.clone() }.validate().is_err());
    assert!(EncoderConfig { dropout: 1.0, ..base }.validate().is_err());
}

#[test]
fn single_token_attends_to_itself() {
    for fusion in [FusionVariant::MsaMsa, FusionVariant::IsaIsa] {
        let cfg = tiny(fusion, PosEncKind::TaRope);
        let model = FusionModel::new(cfg.clone(), 3).unwrap();
        let s = sample(1, &cfg, 1, 1);
        let s = if fusion == FusionVariant::MsaMsa {
            PaddedSample::from_tensors(s.audio, Tensor::zeros(0, 4))
        } else {
            s
        };
        let tr = traces(&model, &s);
        assert!(!tr.is_empty());
        for t in tr {
            assert_eq!(t.probs.data(), &[1.0]);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    for fusion in [FusionVariant::MsaMsa, FusionVariant::IcaIsa, FusionVariant::IsaIca] {
        let cfg = tiny(fusion, PosEncKind::TaRope);
        let model = FusionModel::new(cfg.clone(), 4).unwrap();
        let tr = traces(&model, &sample(2, &cfg, 7, 5));
        assert_eq!(tr.len(), if fusion == FusionVariant::MsaMsa { 4 } else { 8 });
        for t in tr {
            for r in 0..t.probs.rows() {
                assert!((t.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_modal_paths_are_live() {
    let cfg = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    let model = FusionModel::new(cfg.clone(), 5).unwrap();
    let s = sample(3, &cfg, 6, 4);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, model.params(), false);
    ctx.block_cross_modal = true;
    let out = model.forward(&mut ctx, &s).unwrap();
    let blocked = tape.value(out.logits).data().to_vec();
    assert!(max_diff(&blocked, &model.predict(&s).unwrap()) > 1e-6);
}

#[test]
fn layer_order_matters() {
    let a = FusionModel::new(tiny(FusionVariant::IcaIsa, PosEncKind::TaRope), 6).unwrap();
    let mut b = FusionModel::new(tiny(FusionVariant::IsaIca, PosEncKind::TaRope), 6).unwrap();
    // Same initial tensors: only the layer semantics differ.
    b.params_mut().load_from(a.params()).unwrap();
    let s = sample(4, a.config(), 5, 3);
    assert!(max_diff(&a.predict(&s).unwrap(), &b.predict(&s).unwrap()) > 1e-6);
}

#[test]
fn paper_scale_parameter_counts() {
    let msa = paper_model(FusionVariant::MsaMsa).count_parameters() as f64;
    assert!((msa - 6.83e6).abs() <= 0.05 * 6.83e6, "{msa}");
    let stacked: Vec<usize> = [FusionVariant::IsaIsa, FusionVariant::IcaIca, FusionVariant::IsaIca, FusionVariant::IcaIsa]
        .into_iter()
        .map(|f| paper_model(f).count_parameters())
        .collect();
    assert!(stacked.iter().all(|&c| c == stacked[0]));
    let isa = stacked[0] as f64;
    assert!((isa - 12.61e6).abs() <= 0.05 * 12.61e6, "{isa}");
    assert!((msa / isa - 0.54).abs() <= 0.03, "{}", msa / isa);
}

#[test]
fn block_counts_follow_closed_form() {
    let d = 512;
    let ff = 2048;
    let block = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
    assert_eq!(block, 3_152_384);
    let proj = 1024 * d + d + 35 * d + d;
    assert_eq!(paper_model(FusionVariant::MsaMsa).count_fusion_block_parameters(), 2 * block);
    assert_eq!(paper_model(FusionVariant::MsaMsa).count_parameters(), proj + 2 * block);
    assert_eq!(paper_model(FusionVariant::IsaIsa).count_parameters(), proj + 4 * block);
}

#[test]
fn concat_is_smaller_than_msa() {
    let c = FusionModel::new(tiny(FusionVariant::Concat, PosEncKind::TaRope), 0).unwrap();
    let m = FusionModel::new(tiny(FusionVariant::MsaMsa, PosEncKind::TaRope), 0).unwrap();
    assert!(c.count_parameters() < m.count_parameters());
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    Tensor::matrix(t.rows(), t.cols(), order.iter().flat_map(|&i| t.row(i).to_vec()).collect())
}

#[test]
fn concat_ignores_frame_order() {
    let cfg = tiny(FusionVariant::Concat, PosEncKind::TaRope);
    let model = FusionModel::new(cfg.clone(), 7).unwrap();
    let s = sample(5, &cfg, 5, 3);
    let shuffled = PaddedSample::from_tensors(permute_rows(&s.audio, &[3, 0, 4, 2, 1]), permute_rows(&s.video, &[2, 0, 1]));
    assert!(max_diff(&model.predict(&s).unwrap(), &model.predict(&shuffled).unwrap()) < 1e-12);
}

#[test]
fn concat_pools_constant_streams() {
    // Identity projections make the pooled vector visible through a
    // readout head that copies it into the logits.
    let cfg = EncoderConfig { d_in_audio: 8, d_in_video: 8, n_classes: 16, ..tiny(FusionVariant::Concat, PosEncKind::TaRope) };
    let mut model = FusionModel::new(cfg, 0).unwrap();
    let eye = Tensor::identity(8);
    let eye16 = Tensor::identity(16);
    for name in ["proj.audio.weight", "proj.video.weight"] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).assign(eye.data()).unwrap();
    }
    let id = model.params().find("head.weight").unwrap();
    model.params_mut().get_mut(id).assign(eye16.data()).unwrap();
    let c: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let stream = |n: usize| Tensor::matrix(n, 8, (0..n).flat_map(|_| c.clone()).collect());
    let logits = model.predict(&PaddedSample::from_tensors(stream(4), stream(2))).unwrap();
    assert_eq!(&logits[..8], &c[..]);
    assert_eq!(&logits[8..], &c[..]);
}

#[test]
fn repeated_token_matches_single() {
    for fusion in [FusionVariant::Concat, FusionVariant::IsaIsa] {
        let cfg = tiny(fusion, PosEncKind::TaRope);
        let model = FusionModel::new(cfg.clone(), 8).unwrap();
        let one = sample(6, &cfg, 1, 1);
        let rep = |t: &Tensor, n: usize| Tensor::matrix(n, t.cols(), (0..n).flat_map(|_| t.row(0).to_vec()).collect());
        let many = PaddedSample::from_tensors(rep(&one.audio, 5), rep(&one.video, 5));
        assert!(max_diff(&model.predict(&one).unwrap(), &model.predict(&many).unwrap()) < 1e-12);
    }
}

#[test]
fn concatenation_order_is_irrelevant_at_equal_rates() {
    let cfg = EncoderConfig {
        d_in_video: 5,
        rates: RateSpec::new(30.0, 30.0).unwrap(),
        ..tiny(FusionVariant::MsaMsa, PosEncKind::TaRope)
    };
    let mut model = FusionModel::new(cfg.clone(), 9).unwrap();
    for part in ["weight", "bias"] {
        let a = model.params().find(&format!("proj.audio.{part}")).unwrap();
        let v = model.params().find(&format!("proj.video.{part}")).unwrap();
        let data = model.params().get(a).data().to_vec();
        model.params_mut().get_mut(v).assign(&data).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, 4, 5);
    let s = PaddedSample::from_tensors(x.clone(), x);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, model.params(), false);
    ctx.video_first = true;
    let out = model.forward(&mut ctx, &s).unwrap();
    let swapped = tape.value(out.logits).data().to_vec();
    assert!(max_diff(&swapped, &model.predict(&s).unwrap()) < 1e-12);
}

#[test]
fn padding_does_not_change_logits() {
    for posenc in PosEncKind::ALL {
        for fusion in FusionVariant::ALL {
            let cfg = tiny(fusion, posenc);
            let model = FusionModel::new(cfg.clone(), 10).unwrap();
            let s = sample(8, &cfg, 5, 3);
            let pad = |t: &Tensor, n: usize| {
                let mut d = t.data().to_vec();
                d.resize(n * t.cols(), 0.0);
                Tensor::matrix(n, t.cols(), d)
            };
            let padded = PaddedSample { audio: pad(&s.audio, 8), video: pad(&s.video, 6), audio_len: 5, video_len: 3 };
            assert_eq!(model.predict(&s).unwrap(), model.predict(&padded).unwrap(), "{fusion} {posenc}");
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (fusion, posenc) in [
        (FusionVariant::MsaMsa, PosEncKind::TaRope),
        (FusionVariant::IcaIsa, PosEncKind::Rope),
        (FusionVariant::IsaIca, PosEncKind::Learnable),
        (FusionVariant::Concat, PosEncKind::Sinusoidal),
    ] {
        let cfg = tiny(fusion, posenc);
        let model = FusionModel::new(cfg.clone(), 11).unwrap();
        let s = sample(9, &cfg, 4, 3);
        let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let rep = check_gradients(&inputs, 1e-5, |t, vars| {
            let mut ctx = ForwardCtx::from_vars(t, vars.to_vec());
            let out = model.forward(&mut ctx, &s)?;
            classification_loss(ctx.tape, out.logits, 1)
        })
        .unwrap();
        let (worst, name) = rep
            .rel_errors
            .iter()
            .zip(model.params().iter())
            .map(|(e, (n, _))| (*e, n))
            .fold((0.0, ""), |acc, x| if x.0 > acc.0 { x } else { acc });
        assert!(worst < 1e-4, "{fusion} {posenc}: {name} rel err {worst}");
    }
}

#[test]
fn projection_gradients_match_finite_differences() {
    let cfg = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    let model = FusionModel::new(cfg.clone(), 12).unwrap();
    let s = sample(10, &cfg, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let rep = check_gradients(&inputs, 1e-6, |t, vars| {
        let mut ctx = ForwardCtx::from_vars(t, vars.to_vec());
        let out = model.forward(&mut ctx, &s)?;
        ctx.tape.weighted_sum(out.shared_audio, probe.clone())
    })
    .unwrap();
    for name in ["proj.audio.weight", "proj.audio.bias"] {
        let id = model.params().find(name).unwrap();
        assert!(rep.rel_errors[id.0] < 1e-5, "{name}: {}", rep.rel_errors[id.0]);
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny(FusionVariant::IsaIca, PosEncKind::Learnable);
    let model = FusionModel::new(cfg.clone(), 13).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes();
    let origin = std::path::Path::new("mem");
    let back = Checkpoint::from_bytes(&bytes, origin).unwrap().into_model().unwrap();
    let s = sample(11, &cfg, 4, 3);
    assert_eq!(model.predict(&s).unwrap(), back.predict(&s).unwrap());

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, origin).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, origin).is_err());
}

#[test]
fn variant_tags_parse() {
    for v in FusionVariant::ALL {
        assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
    }
    assert!("msa+isa".parse::<FusionVariant>().is_err());
    assert_eq!(FusionVariant::IcaIsa.layers(2), vec![LayerKind::Ica, LayerKind::Isa]);
}

#[test]
fn same_seed_same_model() {
    let cfg = tiny(FusionVariant::MsaMsa, PosEncKind::TaRope);
    let a = FusionModel::new(cfg.clone(), 14).unwrap();
    let b = FusionModel::new(cfg, 14).unwrap();
    assert_eq!(a.params(), b.params());
}
