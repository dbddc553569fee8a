//! Black-box transfer: adversarial examples crafted on a surrogate model,
//! evaluated on an independently trained target.
//!
//!     cargo run --release -p lfrc-lab --example transfer_attack

use lfrc_lab::analysis::{robust_accuracy, transfer_eval};
use lfrc_lab::attacks::{AttackConfig, EvalAttack, InnerLoss};
use lfrc_lab::data::synthetic_gaussians;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let train_ds = synthetic_gaussians::<f64>(2, 150, 2, 6.0, 1).unwrap();
    let test_ds = synthetic_gaussians::<f64>(2, 64, 2, 6.0, 2).unwrap();
    let attack = AttackConfig {
        epsilon: 1.0,
        step_size: 0.4,
        iterations: 10,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let spec = ModelSpec::mlp(2, vec![16], 2);
    let mut cfg = TrainConfig::with_attack(15, 16, 0.05, 10, attack.clone());
    cfg.lambda = 1.0;
    let surrogate = train::<f64>(&spec, &cfg, &train_ds, &test_ds)
        .unwrap()
        .best
        .instantiate::<f64>()
        .unwrap();
    cfg.seed = 20; // an independently initialized target
    let target = train::<f64>(&spec, &cfg, &train_ds, &test_ds)
        .unwrap()
        .best
        .instantiate::<f64>()
        .unwrap();

    let eval = EvalAttack::Pgd(attack);
    let mut rng = SplitMix64::new(0);
    let clean = robust_accuracy(&target, &test_ds, &EvalAttack::Identity, 32, &mut rng).unwrap();
    let mut rng = SplitMix64::new(0);
    let white_box = robust_accuracy(&target, &test_ds, &eval, 32, &mut rng).unwrap();
    let mut rng = SplitMix64::new(0);
    let transferred = transfer_eval(&surrogate, &target, &test_ds, &eval, 32, &mut rng).unwrap();

    println!("target clean accuracy:      {clean:.3}");
    println!("white-box robust accuracy:  {white_box:.3}");
    println!("transfer robust accuracy:   {transferred:.3}");
    println!("(transfer is the weaker attack, so its accuracy is usually the higher of the two)");
}
