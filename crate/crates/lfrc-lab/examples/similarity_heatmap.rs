//! Export label-grouped similarity heatmaps for a natural batch and its
//! adversarial counterpart.
//!
//! Writes plain-text PGM images plus CSV sidecars under ./heatmaps.
//!
//!     cargo run --release -p lfrc-lab --example similarity_heatmap

use lfrc_lab::analysis::export_heatmap;
use lfrc_lab::attacks::{pgd, AttackConfig, InnerLoss};
use lfrc_lab::data::synthetic_gaussians;
use lfrc_lab::lfrc::{SimilarityMatrix, DEFAULT_EPS_NORM};
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let train_ds = synthetic_gaussians::<f64>(3, 120, 2, 8.0, 1).unwrap();
    let test_ds = synthetic_gaussians::<f64>(3, 40, 2, 8.0, 2).unwrap();
    let attack = AttackConfig {
        epsilon: 0.75,
        step_size: 0.3,
        iterations: 10,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let mut cfg = TrainConfig::with_attack(15, 24, 0.05, 1, attack.clone());
    cfg.lambda = 1.0;
    let spec = ModelSpec::mlp(2, vec![16], 3);
    let model = train::<f64>(&spec, &cfg, &train_ds, &test_ds)
        .unwrap()
        .best
        .instantiate::<f64>()
        .unwrap();

    // one batch, natural and attacked
    let indices: Vec<usize> = (0..48).collect();
    let (x, y) = test_ds.batch(&indices);
    let mut rng = SplitMix64::new(5);
    let x_adv = pgd(&model, &x, &y, &attack, &mut rng).unwrap();

    let tap = "fc1";
    let nat_features = lfrc_lab::analysis::tap_features(&model, &x, tap).unwrap();
    let adv_features = lfrc_lab::analysis::tap_features(&model, &x_adv, tap).unwrap();
    let m_nat = SimilarityMatrix::from_features(&nat_features, &y, tap, DEFAULT_EPS_NORM).unwrap();
    let m_adv = SimilarityMatrix::from_features(&adv_features, &y, tap, DEFAULT_EPS_NORM).unwrap();

    std::fs::create_dir_all("heatmaps").unwrap();
    export_heatmap(&m_nat, std::path::Path::new("heatmaps/natural")).unwrap();
    export_heatmap(&m_adv, std::path::Path::new("heatmaps/adversarial")).unwrap();

    let ds = lfrc_lab::analysis::similarity_difference(&m_nat, &m_adv).unwrap();
    println!("wrote heatmaps/natural.pgm and heatmaps/adversarial.pgm (+ .csv sidecars)");
    println!("mean absolute similarity difference for this batch: {ds:.4}");
    println!("rows/columns are grouped by true label; same-class blocks sit on the diagonal");
}
