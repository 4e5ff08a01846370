use super::*;
use crate::dataset::{generate_synthetic, SyntheticSpec};
use crate::model::ModelConfig;
use crate::netcore::Activation;

fn bundle(n: usize, seed: u64) -> DatasetBundle {
    separated(n, seed, 4.0)
}

fn separated(n: usize, seed: u64, class_separation: f64) -> DatasetBundle {
    generate_synthetic(&SyntheticSpec {
        num_sources: 3,
        num_classes: 4,
        dim: 8,
        samples_per_class: n,
        class_separation,
        noise_sigma: 1.0,
        seed,
        shifts: Vec::new(),
        class_priors: None,
    })
    .unwrap()
}

fn net(seed: u64) -> DaNet {
    DaNet::new(ModelConfig {
        input_dim: 8,
        encoder_widths: vec![16],
        disentangler_width: 8,
        adaptor_width: 8,
        num_classes: 4,
        num_sources: 3,
        activation: Activation::Relu,
        dropout: 0.2,
        init_seed: seed,
    })
    .unwrap()
}

fn cfg(ablation: Ablation, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        ablation,
        lr_encoder: 0.1,
        lr_heads: 0.1,
        gamma: 0.01,
        log_target_metrics: false,
        ..TrainConfig::default()
    }
}

fn bits(net: &DaNet, pred: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    net.params()
        .into_iter()
        .filter(|p| pred(&p.id))
        .map(|p| (p.id.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn full_ce(net: &DaNet, sets: &[Vec<Sample>]) -> f64 {
    let batches: Vec<Batch> = sets.iter().map(|s| Batch::from_samples(s.iter()).unwrap()).collect();
    loss_ce(net, &batches, ForwardMode::Eval).unwrap().value
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { tau: 0.0, ..TrainConfig::default() },
        TrainConfig { eta: -1.0, ..TrainConfig::default() },
        TrainConfig { gamma: 0.0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { lr_heads: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { pseudo_confidence_threshold: Some(2.0), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn ablation_names_round_trip() {
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, format!("\"{}\"", a.name()));
    }
    assert!("nope".parse::<Ablation>().is_err());
}

#[test]
fn split_is_disjoint_and_seeded() {
    let b = bundle(20, 1);
    let (train, val) = split_sources(&b.sources, 0.25, 3).unwrap();
    for i in 0..3 {
        assert_eq!(val[i].len(), 20);
        assert_eq!(train[i].len(), 60);
        for v in &val[i] {
            assert!(!train[i].contains(v));
        }
    }
    assert_eq!(split_sources(&b.sources, 0.25, 3).unwrap(), (train, val));
    let (t0, v0) = split_sources(&b.sources, 0.0, 3).unwrap();
    assert_eq!(t0, b.sources);
    assert_eq!(v0, b.sources);
}

#[test]
fn schedule_cycles_shorter_sources() {
    let mut b = bundle(20, 1);
    b.sources[1].truncate(30);
    let s = source_schedule(&b.sources, 16, 0, 0).unwrap();
    assert_eq!(s.len(), 5);
    assert!(s.iter().all(|step| step.len() == 3));
    assert_eq!(s[0][1], s[2][1]);
}

#[test]
fn warmup_separates_sources_and_copies_momentum() {
    // prototypes 10 noise widths apart: linearly separable in practice
    let b = separated(100, 2, 10.0);
    let c = TrainConfig {
        lr_encoder: 0.5,
        lr_heads: 0.5,
        ..cfg(Ablation::Full, 1)
    };
    let mut t = Trainer::new(net(2), &b, c).unwrap();
    let rec = t.warmup_epoch().unwrap();
    assert!(rec.warmup);
    for (i, acc) in rec.source_accuracy.iter().enumerate() {
        assert!(*acc > 0.9, "source {i}: {acc}");
    }
    let mom = t.momentum.as_ref().unwrap();
    assert_eq!(bits(&mom.net, |_| true), bits(&t.net, |_| true));
    assert_eq!(t.stats.len(), 3);
    assert_eq!(t.momentum_stats, t.stats);
    assert_eq!(t.log.momentum_updates, 0);
}

#[test]
fn warmup_lowers_the_loss() {
    for seed in 0..5 {
        let b = bundle(30, seed);
        let mut t = Trainer::new(net(seed), &b, cfg(Ablation::Full, 1)).unwrap();
        let before = full_ce(&t.net, &t.train_sources);
        t.warmup_epoch().unwrap();
        let after = full_ce(&t.net, &t.train_sources);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

fn warmed(ablation: Ablation) -> (Trainer, Vec<Batch>, Batch) {
    let b = bundle(30, 4);
    let mut t = Trainer::new(net(4), &b, cfg(ablation, 3)).unwrap();
    t.warmup_epoch().unwrap();
    t.refresh_alpha().unwrap();
    let batches = source_schedule(&t.train_sources, 16, 0, 1).unwrap().remove(0);
    let target = Batch::from_samples(b.target_train[..16].iter()).unwrap();
    (t, batches, target)
}

#[test]
fn fcd_step_moves_only_disentanglers() {
    let (mut t, batches, _) = warmed(Ablation::Full);
    let frozen_before = bits(&t.net, |id| !is_disentangler(id));
    let phi_before = bits(&t.net, is_disentangler);
    let mom_before = t.momentum.clone();
    let rec = t.fcd_step(&batches, 0).unwrap();
    assert!(rec.frozen_verified && rec.loss > 0.0);
    assert_eq!(bits(&t.net, |id| !is_disentangler(id)), frozen_before);
    assert_ne!(bits(&t.net, is_disentangler), phi_before);
    assert_eq!(t.momentum, mom_before);
}

#[test]
fn no_fcd_step_is_a_no_op() {
    let (mut t, batches, _) = warmed(Ablation::NoFcd);
    let before = t.net.clone();
    let rec = t.fcd_step(&batches, 0).unwrap();
    assert_eq!(rec.loss, 0.0);
    assert!(rec.terms.is_empty());
    assert_eq!(t.net, before);
}

#[test]
fn fcd_descends_on_fixed_batches() {
    let (mut t, batches, _) = warmed(Ablation::Full);
    t.cfg.lr_heads = 0.01;
    let losses: Vec<f64> = (0..50).map(|_| t.fcd_step(&batches, 0).unwrap().loss).collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 45, "{down} of 49: {losses:?}");
}

#[test]
fn adapt_step_freezes_disentanglers_and_updates_momentum_once() {
    let (mut t, batches, target) = warmed(Ablation::Full);
    let phi = bits(&t.net, is_disentangler);
    let live_before = t.net.clone();
    let mom_before = t.momentum.clone().unwrap();
    let rec = t.adapt_step(&batches, &target, 0).unwrap();
    assert!(rec.frozen_verified && rec.momentum_updated);
    assert_eq!(bits(&t.net, is_disentangler), phi);
    assert_ne!(t.net, live_before);
    assert_eq!(t.log.momentum_updates, 1);
    assert!(rec.terms.contains_key("class_aware"));
    // one update: mom = g * live + (1 - g) * mom_before
    let g = t.cfg.gamma;
    let mom = t.momentum.as_ref().unwrap();
    for ((a, b), c) in mom.net.params().iter().zip(mom_before.net.params()).zip(t.net.params()) {
        for ((x, y), z) in a.value.data().iter().zip(b.value.data()).zip(c.value.data()) {
            assert_eq!(*x, g * z + (1.0 - g) * y);
        }
    }
}

#[test]
fn eta_zero_is_a_ce_step() {
    let (mut t, batches, target) = warmed(Ablation::Full);
    t.cfg.eta = 0.0;
    let mut reference = t.net.clone();
    let rec = t.adapt_step(&batches, &target, 3).unwrap();
    assert_eq!(rec.terms.keys().collect::<Vec<_>>(), vec!["ce"]);
    assert_eq!(rec.pseudo_kept, None);
    let ce = loss_ce(&reference, &batches, step_mode(t.cfg.seed, StepKind::Adapt, 1, 3)).unwrap();
    assert_eq!(ce.value, rec.loss);
    for p in reference.params_mut() {
        if !is_disentangler(&p.id) {
            let lr = if is_encoder(&p.id) { t.cfg.lr_encoder } else { t.cfg.lr_heads };
            for (v, gv) in p.value.data_mut().iter_mut().zip(ce.grads[&p.id].data()) {
                *v -= lr * gv;
            }
        }
    }
    for (a, b) in reference.params().iter().zip(t.net.params()) {
        assert!(a.value.max_abs_diff(&b.value) <= 1e-12, "{}", a.id);
    }
}

#[test]
fn variants_are_dispatched_by_ablation() {
    for (ablation, term) in [
        (Ablation::Full, Some("class_aware")),
        (Ablation::NoFcd, Some("class_aware")),
        (Ablation::CpaLanguageMmd, Some("language_mmd")),
        (Ablation::CpaScl, Some("supervised_contrastive")),
        (Ablation::NoCpa, None),
        (Ablation::Erm, None),
    ] {
        let (mut t, batches, target) = warmed(ablation);
        let rec = t.adapt_step(&batches, &target, 0).unwrap();
        let mut want = vec!["ce"];
        want.extend(term);
        want.sort_unstable();
        assert_eq!(rec.terms.keys().map(String::as_str).collect::<Vec<_>>(), want, "{ablation}");
    }
}

#[test]
fn confidence_threshold_filters_pseudo_labels() {
    let (mut t, batches, target) = warmed(Ablation::Full);
    t.cfg.pseudo_confidence_threshold = Some(1.0);
    let rec = t.adapt_step(&batches, &target, 0).unwrap();
    assert!(rec.pseudo_kept.unwrap() < target.len());
    t.cfg.pseudo_confidence_threshold = Some(0.0);
    let rec = t.adapt_step(&batches, &target, 1).unwrap();
    assert_eq!(rec.pseudo_kept, Some(target.len()));
}

#[test]
fn steps_require_state() {
    let b = bundle(20, 1);
    let mut t = Trainer::new(net(1), &b, cfg(Ablation::Full, 2)).unwrap();
    let batches = source_schedule(&t.train_sources, 16, 0, 0).unwrap().remove(0);
    assert!(matches!(t.fcd_step(&batches, 0), Err(Error::State(_))));
    assert!(matches!(t.adapt_step(&batches, &batches[0], 0), Err(Error::State(_))));
    assert!(matches!(t.run_epoch(), Err(Error::State(_))));
}

#[test]
fn fit_is_deterministic() {
    let b = bundle(20, 6);
    let mut c = cfg(Ablation::Full, 3);
    c.log_target_metrics = true;
    let a = fit(net(6), &b, &c).unwrap();
    let z = fit(net(6), &b, &c).unwrap();
    assert_eq!(a.log, z.log);
    assert_eq!(bits(&a.net, |_| true), bits(&z.net, |_| true));
    assert_eq!(a.log.epochs.len(), 3);
    assert!(a.log.steps.iter().all(|s| s.loss.is_finite()));
    let adapt = a.log.steps.iter().filter(|s| s.kind == StepKind::Adapt).count();
    assert_eq!(a.log.momentum_updates, adapt);
    assert_eq!(a.log.freeze_checks, 2 * adapt);
    assert_eq!(serde_json::from_str::<TrainLog>(&serde_json::to_string(&a.log).unwrap()).unwrap(), a.log);
}

#[test]
fn erm_matches_plain_ce_loop() {
    let b = bundle(20, 7);
    let c = cfg(Ablation::Erm, 3);
    let out = fit(net(7), &b, &c).unwrap();

    let mut reference = net(7);
    let (train, _) = split_sources(&b.sources, c.validation_fraction, c.seed).unwrap();
    for epoch in 0..c.epochs {
        let kind = if epoch == 0 { StepKind::Warmup } else { StepKind::Adapt };
        for (step, batches) in source_schedule(&train, c.batch_size, c.seed, epoch).unwrap().iter().enumerate() {
            let loss = loss_ce(&reference, batches, step_mode(c.seed, kind, epoch, step)).unwrap();
            for p in reference.params_mut() {
                if epoch > 0 && is_disentangler(&p.id) {
                    continue;
                }
                let lr = if is_encoder(&p.id) { c.lr_encoder } else { c.lr_heads };
                for (v, g) in p.value.data_mut().iter_mut().zip(loss.grads[&p.id].data()) {
                    *v -= lr * g;
                }
            }
        }
    }
    for (a, r) in out.net.params().iter().zip(reference.params()) {
        assert!(a.value.max_abs_diff(&r.value) <= 1e-12, "{}", a.id);
    }
}

#[test]
fn non_finite_loss_names_epoch_and_step() {
    let b = bundle(20, 8);
    let mut n = net(8);
    for p in n.params_mut() {
        if p.id == "branch.0.classifier.bias" {
            p.value.data_mut()[0] = f64::NAN;
        }
    }
    let err = fit(n, &b, &cfg(Ablation::Full, 2)).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("epoch 0") && msg.contains("step 0"), "{msg}"),
        other => panic!("{other}"),
    }
}

#[test]
fn divergence_keeps_finite_parameters() {
    let b = bundle(20, 8);
    let n = net(8);
    let mut c = cfg(Ablation::Full, 2);
    c.lr_encoder = 1e308;
    c.lr_heads = 1e308;
    let mut t = Trainer::new(n, &b, c).unwrap();
    match t.run().unwrap_err() {
        Error::NonFinite(msg) => assert!(msg.contains("warm-up") && msg.contains("epoch 0"), "{msg}"),
        other => panic!("{other}"),
    }
    assert!(t.net.params().iter().all(|p| p.value.is_finite()));
}

#[test]
fn adam_trains() {
    let b = bundle(30, 9);
    let mut c = cfg(Ablation::Full, 2);
    c.optimizer = Optimizer::Adam;
    c.lr_encoder = 0.005;
    c.lr_heads = 0.005;
    let n = net(9);
    let (train, _) = split_sources(&b.sources, c.validation_fraction, c.seed).unwrap();
    let before = full_ce(&n, &train);
    let out = fit(n, &b, &c).unwrap();
    assert!(full_ce(&out.net, &train) < before);
}
