//! Training-loop integration tests on the separable toy task.

mod common;

use common::{toy_task, toy_train_config};
use lfrc_lab::analysis::{robust_accuracy, transfer_eval};
use lfrc_lab::attacks::{fgsm, pgd, AttackConfig, EvalAttack};
use lfrc_lab::lfrc::MetricKind;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::tensor::Graph;
use lfrc_lab::trainer::train;

#[test]
fn toy_training_reaches_high_clean_accuracy() {
    let (train_ds, test_ds, _) = toy_task(3);
    let spec = ModelSpec::mlp(2, vec![16], 2);
    let cfg = toy_train_config(30, 1);
    let out = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();
    let model = out.best.instantiate::<f64>().unwrap();
    let mut rng = SplitMix64::new(0);
    let clean = robust_accuracy(&model, &test_ds, &EvalAttack::Identity, 32, &mut rng).unwrap();
    // the classes are separated by far more than twice the attack radius
    assert!(clean > 0.9, "clean accuracy {clean}");

    // history invariants along the way
    for h in &out.history {
        assert!((0.0..=1.0).contains(&h.val_robust_acc));
        assert!((0.0..=1.0).contains(&h.val_clean_acc));
        if cfg.metric == MetricKind::Exp {
            assert!(h.train_lfrc >= 1.0);
        }
    }
}

#[test]
fn robust_accuracy_not_above_clean_across_seeds() {
    let mut holds = 0;
    let total = 20;
    for seed in 0..total {
        let (train_ds, test_ds, attack) = toy_task(seed);
        let spec = ModelSpec::mlp(2, vec![8], 2);
        let cfg = toy_train_config(8, seed);
        let out = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();
        let model = out.last.instantiate::<f64>().unwrap();
        let mut rng = SplitMix64::new(seed);
        let clean =
            robust_accuracy(&model, &test_ds, &EvalAttack::Identity, 32, &mut rng).unwrap();
        let robust = robust_accuracy(
            &model,
            &test_ds,
            &EvalAttack::Pgd(attack),
            32,
            &mut rng,
        )
        .unwrap();
        if robust <= clean {
            holds += 1;
        }
    }
    assert!(
        holds * 100 >= total * 95,
        "robust <= clean held in only {holds}/{total} runs"
    );
}

#[test]
fn stronger_pgd_attains_higher_cross_entropy_than_fgsm() {
    let (train_ds, test_ds, attack) = toy_task(17);
    let spec = ModelSpec::mlp(2, vec![16], 2);
    let cfg = toy_train_config(15, 4);
    let out = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();
    let model = out.last.instantiate::<f64>().unwrap();

    let pgd_cfg = AttackConfig {
        iterations: 20,
        ..attack.clone()
    };
    let mut wins = 0;
    let batches = 10;
    for i in 0..batches {
        let idx: Vec<usize> = (0..16).map(|j| (i * 16 + j) % test_ds.len()).collect();
        let (x, y) = test_ds.batch(&idx);
        let mut rng = SplitMix64::new(i as u64);
        let adv_pgd = pgd(&model, &x, &y, &pgd_cfg, &mut rng).unwrap();
        let adv_fgsm = fgsm(&model, &x, &y, attack.epsilon, attack.data_range).unwrap();
        let ce = |input| {
            let mut g = Graph::<f64>::new();
            let bound = model.bind(&mut g, false);
            let xv = g.constant(input);
            let logits = model.forward(&mut g, &bound, xv).unwrap();
            let l = g.softmax_cross_entropy(logits, &y).unwrap();
            g.value(l).item().unwrap()
        };
        if ce(adv_pgd) >= ce(adv_fgsm) {
            wins += 1;
        }
    }
    assert!(
        wins * 100 >= batches * 90,
        "PGD20 beat FGSM on only {wins}/{batches} batches"
    );
}

#[test]
fn transfer_attacks_are_weaker_than_white_box() {
    let mut holds = 0;
    let total = 5;
    for seed in 0..total {
        let (train_ds, test_ds, attack) = toy_task(seed + 50);
        let spec = ModelSpec::mlp(2, vec![12], 2);
        let surrogate = train::<f64>(&spec, &toy_train_config(10, seed), &train_ds, &test_ds)
            .unwrap()
            .last
            .instantiate::<f64>()
            .unwrap();
        let target = train::<f64>(&spec, &toy_train_config(10, seed + 100), &train_ds, &test_ds)
            .unwrap()
            .last
            .instantiate::<f64>()
            .unwrap();
        let ev = EvalAttack::Pgd(attack);
        let mut rng = SplitMix64::new(seed);
        let transferred =
            transfer_eval(&surrogate, &target, &test_ds, &ev, 32, &mut rng).unwrap();
        let mut rng = SplitMix64::new(seed);
        let white_box = robust_accuracy(&target, &test_ds, &ev, 32, &mut rng).unwrap();
        if transferred >= white_box {
            holds += 1;
        }
    }
    assert!(
        holds * 2 > total,
        "transfer >= white-box held in only {holds}/{total} runs"
    );
}

#[test]
fn transfer_requires_compatible_models() {
    let (train_ds, test_ds, attack) = toy_task(5);
    let spec_a = ModelSpec::mlp(2, vec![8], 2);
    let spec_b = ModelSpec::mlp(2, vec![8], 3);
    let a = train::<f64>(&spec_a, &toy_train_config(1, 0), &train_ds, &test_ds)
        .unwrap()
        .last
        .instantiate::<f64>()
        .unwrap();
    let b = lfrc_lab::models::init_model::<f64>(&spec_b, 0).unwrap();
    let mut rng = SplitMix64::new(0);
    let err = transfer_eval(&a, &b, &test_ds, &EvalAttack::Pgd(attack), 32, &mut rng).unwrap_err();
    assert!(matches!(err, lfrc_lab::error::Error::InvalidConfig(_)));
}

#[test]
fn training_is_bit_deterministic() {
    let (train_ds, test_ds, _) = toy_task(9);
    let spec = ModelSpec::mlp(2, vec![8], 2);
    let cfg = toy_train_config(4, 2);
    let a = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();
    let b = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();
    assert_eq!(
        a.last.instantiate::<f64>().unwrap().param_hash(),
        b.last.instantiate::<f64>().unwrap().param_hash()
    );
    assert_eq!(
        a.best.instantiate::<f64>().unwrap().param_hash(),
        b.best.instantiate::<f64>().unwrap().param_hash()
    );
    for (ha, hb) in a.history.iter().zip(&b.history) {
        assert_eq!(ha.train_ce.to_bits(), hb.train_ce.to_bits());
        assert_eq!(ha.train_lfrc.to_bits(), hb.train_lfrc.to_bits());
        assert_eq!(ha.val_robust_acc.to_bits(), hb.val_robust_acc.to_bits());
    }
}

#[test]
fn taps_differ_between_natural_and_adversarial_inputs() {
    let (train_ds, test_ds, attack) = toy_task(11);
    let spec = ModelSpec::mlp(2, vec![8], 2);
    let out = train::<f64>(&spec, &toy_train_config(5, 3), &train_ds, &test_ds).unwrap();
    let model = out.last.instantiate::<f64>().unwrap();
    let (x, y) = test_ds.batch(&[0, 1, 2, 3]);
    let mut rng = SplitMix64::new(2);
    let adv = pgd(&model, &x, &y, &attack, &mut rng).unwrap();
    assert_ne!(x.data(), adv.data(), "attack must move the inputs");
    let nat_tap = lfrc_lab::analysis::tap_features(&model, &x, "fc1").unwrap();
    let adv_tap = lfrc_lab::analysis::tap_features(&model, &adv, "fc1").unwrap();
    assert!(nat_tap.max_abs_diff(&adv_tap) > 0.0);
}
