mod common;

use common::*;
use pldr::config::{PredefinedGKind, Variant};
use pldr::training::{
    evaluate, gradients, lr_schedule, pack_tokens, train_step, write_csv, AdamW, Batch, TrainConfig, Trainer,
};
use pldr::{Error, ModelConfig, PldrModel};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn batch_of(windows: &[Vec<usize>], n: usize) -> Batch {
    Batch::from_windows(&windows[..n].iter().map(Vec::as_slice).collect::<Vec<_>>())
}

#[test]
fn first_step_loss_is_near_uniform_entropy() {
    let cfg = desk(Variant::Trainable, None, 0);
    let windows = corpus_windows(cfg.context_length);
    let mut m = PldrModel::new(cfg).unwrap();
    let mut opt = AdamW::new(&m);
    let r = train_step(&mut m, &batch_of(&windows, 4), &mut opt, &TrainConfig::default(), 1).unwrap();
    assert!((r.cross_entropy - 258f64.ln()).abs() < 0.1, "{}", r.cross_entropy);
    assert_eq!(r.total, r.cross_entropy);
}

#[test]
fn evaluate_matches_the_pre_update_training_loss() {
    let cfg = small_config(Variant::Trainable, 1);
    let windows = corpus_windows(cfg.context_length);
    let batch = batch_of(&windows, 2);
    let tc = TrainConfig {
        dag_coefficients: [0.05; 3],
        ..TrainConfig::default()
    };
    let mut m = PldrModel::new(cfg).unwrap();
    let e1 = evaluate(&m, &[batch.clone()], tc.dag_coefficients).unwrap();
    let e2 = evaluate(&m, &[batch.clone()], tc.dag_coefficients).unwrap();
    assert_eq!(e1, e2);
    let mut opt = AdamW::new(&m);
    let r = train_step(&mut m, &batch, &mut opt, &tc, 3).unwrap();
    assert_eq!(r.cross_entropy, e1.cross_entropy);
    assert_eq!(r.dag_losses, e1.dag_losses);
    let weighted: f64 = r.dag_losses.iter().map(|d| 0.05 * d).sum();
    assert!((r.total - (r.cross_entropy + weighted)).abs() < 1e-9 * r.total.abs().max(1.0));
}

#[test]
fn random_tokens_are_incompressible() {
    let mut rng = StdRng::seed_from_u64(2);
    let (model, _) = train_desk(30, [0.0; 3], 2);
    let stream: Vec<usize> = (0..8 * 129).map(|_| rng.gen_range(0..258)).collect();
    let windows = pack_tokens(&stream, 128).unwrap();
    let batches: Vec<Batch> = windows.chunks(2).map(|c| batch_of(c, c.len())).collect();
    let r = evaluate(&model, &batches, [0.0; 3]).unwrap();
    assert!(r.cross_entropy > 258f64.ln() - 0.5, "{}", r.cross_entropy);
}

#[test]
fn dag_terms_send_gradient_into_every_plga_group() {
    let cfg = small_config(Variant::Trainable, 3);
    let windows = corpus_windows(cfg.context_length);
    let m = PldrModel::new(cfg).unwrap();
    let grads = gradients(&m, &batch_of(&windows, 2), [0.05; 3]).unwrap();
    for (name, g) in grads.iter().filter(|(n, _)| n.contains(".plga.")) {
        let norm: f32 = g.data().iter().map(|x| x * x).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn identity_predefined_step_matches_the_reference_decoder_loss() {
    let cfg = desk(Variant::PredefinedG, Some(PredefinedGKind::Identity), 4);
    let windows = corpus_windows(cfg.context_length);
    let m = PldrModel::new(cfg).unwrap();
    let batch = batch_of(&windows, 1);
    let r = evaluate(&m, &[batch.clone()], [0.0; 3]).unwrap();
    let logits = sdpa_reference(&m, &batch.input_ids[0]);
    let ce: f64 = logits
        .iter()
        .zip(&batch.target_ids[0])
        .map(|(row, &t)| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            lse - row[t]
        })
        .sum::<f64>()
        / logits.len() as f64;
    assert!((r.cross_entropy - ce).abs() < 1e-6, "{} vs {ce}", r.cross_entropy);
}

#[test]
fn constant_g_models_train_without_touching_g() {
    let cfg = ModelConfig {
        predefined_g_kind: Some(PredefinedGKind::RandomNormal),
        ..small_config(Variant::PredefinedG, 5)
    };
    let windows = corpus_windows(cfg.context_length);
    let m = PldrModel::new(cfg).unwrap();
    let g_before = m.probe_g().unwrap();
    let mut t = Trainer::new(
        m,
        TrainConfig {
            total_steps: 3,
            warmup_steps: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let reports = t.fit(&windows, |_| {}).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(t.model.probe_g().unwrap(), g_before);
    assert_eq!(reports[0].dag_losses, [0.0; 3]);
}

#[test]
fn smoke_training_reduces_loss() {
    let (_, reports) = train_desk(200, [0.0; 3], 7);
    let first = reports[0].cross_entropy;
    let last = reports.last().unwrap().cross_entropy;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn config_and_csv() {
    let bad = TrainConfig {
        warmup_steps: 20,
        total_steps: 10,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(PldrModel::new(small_config(Variant::Trainable, 0)).unwrap(), bad).is_err());
    assert_eq!(lr_schedule(0, &TrainConfig::default()), 0.0);

    let (_, reports) = train_desk(2, [0.0; 3], 1);
    let mut out = Vec::new();
    write_csv(&mut out, &reports).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,ce,dag_alm,dag_ap,dag_glm,total,acc,lr");
    assert_eq!(lines.count(), 2);
    assert!(matches!(pack_tokens(&[], 4), Err(Error::EmptyCorpus)));
}
