//! Robust accuracy under FGSM, PGD, and the margin attack across budgets.
//!
//!     cargo run --release -p lfrc-lab --example attack_sweep

use lfrc_lab::analysis::robust_accuracy;
use lfrc_lab::attacks::{AttackConfig, EvalAttack, InnerLoss};
use lfrc_lab::data::synthetic_gaussians;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let train_ds = synthetic_gaussians::<f64>(2, 150, 2, 8.0, 1).unwrap();
    let test_ds = synthetic_gaussians::<f64>(2, 60, 2, 8.0, 2).unwrap();

    let train_attack = AttackConfig {
        epsilon: 0.5,
        step_size: 0.2,
        iterations: 5,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let mut cfg = TrainConfig::with_attack(20, 16, 0.05, 3, train_attack.clone());
    cfg.lambda = 1.0;
    let spec = ModelSpec::mlp(2, vec![16], 2);
    let model = train::<f64>(&spec, &cfg, &train_ds, &test_ds)
        .unwrap()
        .best
        .instantiate::<f64>()
        .unwrap();

    let mut rng = SplitMix64::new(0);
    let clean = robust_accuracy(&model, &test_ds, &EvalAttack::Identity, 32, &mut rng).unwrap();
    println!("clean accuracy: {clean:.3}\n");
    println!("eps\tfgsm\tpgd20\tmargin20");
    for eps in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let fgsm = EvalAttack::Fgsm {
            epsilon: eps,
            range: train_attack.data_range,
        };
        let pgd = EvalAttack::Pgd(AttackConfig {
            epsilon: eps,
            step_size: eps / 4.0,
            iterations: 20,
            ..train_attack.clone()
        });
        let margin = EvalAttack::Pgd(AttackConfig {
            epsilon: eps,
            step_size: eps / 4.0,
            iterations: 20,
            inner_loss: InnerLoss::CwMargin,
            ..train_attack.clone()
        });
        let accs: Vec<f64> = [fgsm, pgd, margin]
            .iter()
            .map(|a| {
                let mut rng = SplitMix64::new(1);
                robust_accuracy(&model, &test_ds, a, 32, &mut rng).unwrap()
            })
            .collect();
        println!("{eps}\t{:.3}\t{:.3}\t{:.3}", accs[0], accs[1], accs[2]);
    }
}
