//! The diagnostic behind the method: how similarity-matrix drift tracks
//! accuracy loss, batch by batch, with the Pearson correlation of the two.
//!
//!     cargo run --release -p lfrc-lab --example correlation_scatter

use lfrc_lab::analysis::{ds_da_scatter, pearson};
use lfrc_lab::attacks::{AttackConfig, EvalAttack, InnerLoss};
use lfrc_lab::data::synthetic_gaussians;
use lfrc_lab::lfrc::DEFAULT_EPS_NORM;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let train_ds = synthetic_gaussians::<f64>(2, 200, 2, 4.0, 1).unwrap();
    let test_ds = synthetic_gaussians::<f64>(2, 160, 2, 4.0, 2).unwrap();
    let attack = AttackConfig {
        epsilon: 1.0,
        step_size: 0.4,
        iterations: 5,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let mut cfg = TrainConfig::with_attack(10, 16, 0.05, 2, attack.clone());
    cfg.lambda = 1.0;
    let spec = ModelSpec::mlp(2, vec![16], 2);
    let model = train::<f64>(&spec, &cfg, &train_ds, &test_ds)
        .unwrap()
        .last
        .instantiate::<f64>()
        .unwrap();

    // a stronger evaluation attack makes the per-batch damage visible
    let eval = EvalAttack::Pgd(AttackConfig {
        epsilon: 2.0,
        step_size: 0.5,
        iterations: 10,
        ..attack
    });
    let mut rng = SplitMix64::new(9);
    let batches =
        ds_da_scatter(&model, &test_ds, &eval, 32, "fc1", DEFAULT_EPS_NORM, &mut rng).unwrap();

    println!("batch\tds\tda");
    for b in &batches {
        println!("{}\t{:.4}\t{}", b.diagnostic.batch_index, b.diagnostic.ds, b.diagnostic.da);
    }
    let xs: Vec<f64> = batches.iter().map(|b| b.diagnostic.ds).collect();
    let ys: Vec<f64> = batches.iter().map(|b| b.diagnostic.da as f64).collect();
    match pearson(&xs, &ys) {
        Ok(r) => println!("\npearson correlation of ds vs da: {r:.3}"),
        Err(e) => println!("\npearson correlation unavailable: {e}"),
    }
}
