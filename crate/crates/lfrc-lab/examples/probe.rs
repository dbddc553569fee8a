use std::time::Instant;

use lfrc_lab::analysis;
use lfrc_lab::attacks::{AttackConfig, EvalAttack};
use lfrc_lab::data::synthetic_gaussian_images_split;
use lfrc_lab::lfrc::DEFAULT_EPS_NORM;
use lfrc_lab::models::ModelSpec;
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::trainer::{train, TrainConfig};

fn main() {
    let (train_ds, test_ds) =
        synthetic_gaussian_images_split::<f32>(4, 500, 125, 1, 28, 28, 0.3, 0.12, 7).unwrap();
    let spec = ModelSpec::mini_resnet([1, 28, 28], 4);

    for &(seed, lambda) in &[(3u64, 100.0f64), (3, 0.0)] {
        let t = Instant::now();
        let mut cfg = TrainConfig::image_defaults(5, 64, 0.0075, seed);
        cfg.lr_milestones = Some(vec![4]);
        cfg.lambda = lambda;
        let out = train::<f32>(&spec, &cfg, &train_ds, &test_ds).unwrap();
        let model = out.last.instantiate::<f32>().unwrap();
        let attack = EvalAttack::Pgd(AttackConfig::pgd_image_default(20));
        let mut rng = SplitMix64::derive(seed, &[0xd5]);
        let batches = analysis::ds_da_scatter(
            &model, &test_ds, &attack, 100, "block4", DEFAULT_EPS_NORM, &mut rng,
        )
        .unwrap();
        let mean_ds: f64 =
            batches.iter().map(|b| b.diagnostic.ds).sum::<f64>() / batches.len() as f64;
        let mut rng2 = SplitMix64::derive(seed, &[0xd6]);
        let robust = analysis::robust_accuracy(&model, &test_ds, &attack, 100, &mut rng2).unwrap();
        print!("seed={seed} lambda={lambda} ({:?}):", t.elapsed());
        for h in &out.history {
            print!(" [e{} cl {:.2} rb {:.2}]", h.epoch, h.val_clean_acc, h.val_robust_acc);
        }
        println!(" | pgd20 {robust:.3} DS {mean_ds:.5}");
    }
}
