use super::*;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::encoder::{EncoderConfig, FusionVariant};
use crate::posenc::PosEncKind;

fn data(n: usize, seed: u64) -> Vec<Sample> {
    let spec = SyntheticSpec {
        n_samples: n,
        d_in_audio: 6,
        d_in_video: 5,
        duration_min: 0.8,
        duration_max: 1.0,
        distractors: 0,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().into_iter().map(|s| s.sample).collect()
}

fn model(seed: u64) -> FusionModel {
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        d_in_audio: 6,
        d_in_video: 5,
        d_emb: 4,
        fusion: FusionVariant::MsaMsa,
        posenc: PosEncKind::TaRope,
        dropout: 0.1,
        ..EncoderConfig::default()
    };
    FusionModel::new(cfg, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr_init: 1e-3, ..TrainConfig::default() }
}

#[test]
fn zero_weight_matches_disabled_matching_bit_for_bit() {
    let train_set = data(8, 1);
    let mut a = model(3);
    let mut b = model(3);
    let off = train(&mut a, &train_set, None, &quick(2), None, &mut |_| {}).unwrap();
    let zero = CtmConfig { lambda_ctm: 0.0, ..CtmConfig::default() };
    let monitored = train(&mut b, &train_set, None, &quick(2), Some(&zero), &mut |_| {}).unwrap();
    assert_eq!(a.params(), b.params());
    for (x, y) in off.steps.iter().zip(&monitored.steps) {
        assert_eq!((x.cls_loss, x.total), (y.cls_loss, y.total));
        assert!(y.ctm_loss > 0.0);
    }
}

#[test]
fn recorded_total_decomposes() {
    let ctm = CtmConfig::default();
    let mut m = model(4);
    let run = train(&mut m, &data(8, 2), None, &quick(2), Some(&ctm), &mut |_| {}).unwrap();
    for s in &run.steps {
        assert!((s.total - (s.cls_loss + ctm.lambda_ctm * s.ctm_loss)).abs() < 1e-12);
    }
}

#[test]
fn schedule_is_followed_step_by_step() {
    let cfg = quick(3);
    let mut m = model(5);
    let run = train(&mut m, &data(6, 3), None, &cfg, None, &mut |_| {}).unwrap();
    let total = run.steps.len();
    assert_eq!(total, 3 * 2);
    for s in &run.steps {
        assert!((s.lr - cfg.lr_init * (1.0 - s.step as f64 / total as f64)).abs() < 1e-12);
    }
    assert!(run.steps.last().unwrap().lr < cfg.lr_init / total as f64);
}

#[test]
fn single_sample_is_memorized() {
    let one = data(1, 4);
    let mut m = model(6);
    let cfg = TrainConfig { epochs: 200, batch_size: 1, lr_init: 1e-3, ..TrainConfig::default() };
    train(&mut m, &one, None, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(evaluate(&m, &one, 1).unwrap().accuracy, 1.0);
}

#[test]
fn same_seed_same_run() {
    let train_set = data(8, 5);
    let eval_set = data(6, 6);
    let ctm = CtmConfig::default();
    let go = || {
        let mut m = model(7);
        let run = train(&mut m, &train_set, Some(&eval_set), &quick(2), Some(&ctm), &mut |_| {}).unwrap();
        (run, m)
    };
    let (r1, m1) = go();
    let (r2, m2) = go();
    assert_eq!(r1, r2);
    assert_eq!(m1.params(), m2.params());
}

#[test]
fn best_epoch_prefers_earlier_ties() {
    let train_set = data(6, 7);
    let mut m = model(8);
    let cfg = TrainConfig { epochs: 3, lr_init: 0.0, ..TrainConfig::default() };
    let run = train(&mut m, &train_set, Some(&train_set), &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(run.best_epoch, Some(1));
    assert!(run.epochs.iter().all(|e| e.accuracy == run.best_accuracy));
}

#[test]
fn constant_predictor_scores_one_in_six() {
    let mut m = model(9);
    for (name, values) in [("head.weight", None), ("head.bias", Some(2))] {
        let id = m.params().find(name).unwrap();
        let n = m.params().get(id).len();
        let v: Vec<f64> = (0..n).map(|i| if Some(i) == values { 1.0 } else { 0.0 }).collect();
        m.params_mut().get_mut(id).assign(&v).unwrap();
    }
    let split = data(12, 8);
    let rep = evaluate(&m, &split, 4).unwrap();
    assert!((rep.accuracy - 1.0 / 6.0).abs() < 1e-15);
    assert_eq!(rep.confusion.iter().flatten().sum::<usize>(), 12);
    assert!(rep.confusion.iter().all(|row| row[2] == 2));
}

#[test]
fn evaluation_ignores_batch_partitioning() {
    let m = model(10);
    let split = data(13, 9);
    assert_eq!(evaluate(&m, &split, 1).unwrap(), evaluate(&m, &split, 4).unwrap());
}

#[test]
fn empty_inputs_are_errors() {
    let mut m = model(11);
    assert!(matches!(evaluate(&m, &[], 4), Err(Error::Empty(_))));
    assert!(matches!(train(&mut m, &[], None, &quick(1), None, &mut |_| {}), Err(Error::Empty(_))));
}

#[test]
fn overflow_aborts_with_diagnostics() {
    let mut m = model(12);
    let id = m.params().find("head.weight").unwrap();
    let n = m.params().get(id).len();
    m.params_mut().get_mut(id).assign(&vec![1e308; n]).unwrap();
    let err = train(&mut m, &data(4, 10), None, &quick(1), None, &mut |_| {}).unwrap_err();
    match err {
        Error::Diverged { step, sample_ids, .. } => {
            assert_eq!(step, 1);
            assert_eq!(sample_ids.len(), 4);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn logs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(13);
    let set = data(4, 11);
    let run = train(&mut m, &set, Some(&set), &quick(2), None, &mut |_| {}).unwrap();
    write_metrics_csv(&dir.path().join("m.csv"), &run).unwrap();
    write_train_log(&dir.path().join("l.jsonl"), &run).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 3);
    let log = std::fs::read_to_string(dir.path().join("l.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"] == "step" || v["kind"] == "epoch");
    }
}
