//! Adversarial training with the relation-consistency loss on a toy task.
//!
//! Two well-separated Gaussian classes in the plane, an MLP, and a small
//! PGD budget: enough to watch the whole pipeline converge in seconds.
//!
//!     cargo run --release -p lfrc-lab --example train_toy

use lfrc_lab::attacks::{AttackConfig, InnerLoss};
use lfrc_lab::data::synthetic_gaussians;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let train_ds = synthetic_gaussians::<f64>(2, 150, 2, 10.0, 1).unwrap();
    let test_ds = synthetic_gaussians::<f64>(2, 60, 2, 10.0, 2).unwrap();

    // tabular data has no natural range, so the budget is explicit
    let attack = AttackConfig {
        epsilon: 0.5,
        step_size: 0.2,
        iterations: 5,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let mut cfg = TrainConfig::with_attack(20, 16, 0.05, 7, attack);
    cfg.lambda = 1.0;

    let spec = ModelSpec::mlp(2, vec![16], 2);
    let out = train::<f64>(&spec, &cfg, &train_ds, &test_ds).unwrap();

    println!("epoch\tlr\ttrain_ce\ttrain_lfrc\tclean\trobust");
    for h in &out.history {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.3}",
            h.epoch, h.lr, h.train_ce, h.train_lfrc, h.val_clean_acc, h.val_robust_acc
        );
    }
    println!(
        "best checkpoint: epoch {} with robust accuracy {:.3}",
        out.best.epoch, out.best.selection_value
    );
}
