//! Helpers shared by the integration suites.

use lfrc_lab::attacks::{AttackConfig, InnerLoss};
use lfrc_lab::data::{synthetic_gaussians, Dataset};
use lfrc_lab::models::{init_model, Model, ModelSpec};
use lfrc_lab::rng::SplitMix64;
use lfrc_lab::tensor::{Element, Tensor};
use lfrc_lab::trainer::TrainConfig;

/// Random tensor with entries uniform in [lo, hi).
pub fn random_tensor<E: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Random tensor bounded away from zero, for checking gradients of
/// operations with a kink at the origin.
pub fn random_tensor_away_from_zero<E: Element>(
    shape: &[usize],
    margin: f64,
    rng: &mut SplitMix64,
) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.uniform(margin, 1.0);
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// A small MLP classifier for attack and training tests.
pub fn toy_mlp(input: usize, hidden: usize, classes: usize, seed: u64) -> Model<f64> {
    init_model(&ModelSpec::mlp(input, vec![hidden], classes), seed).unwrap()
}

/// Separable 2-class tabular task plus a matching attack budget: the
/// class margin is far larger than twice the attack radius.
pub fn toy_task(seed: u64) -> (Dataset<f64>, Dataset<f64>, AttackConfig) {
    let train = synthetic_gaussians(2, 100, 2, 10.0, seed).unwrap();
    let test = synthetic_gaussians(2, 40, 2, 10.0, seed.wrapping_add(1000)).unwrap();
    let attack = AttackConfig {
        epsilon: 0.25,
        step_size: 0.1,
        iterations: 5,
        random_start: true,
        inner_loss: InnerLoss::CrossEntropy,
        data_range: (f64::NEG_INFINITY, f64::INFINITY),
    };
    (train, test, attack)
}

/// Training config for the toy task.
pub fn toy_train_config(epochs: usize, seed: u64) -> TrainConfig {
    let (_, _, attack) = toy_task(0);
    let mut cfg = TrainConfig::with_attack(epochs, 16, 0.05, seed, attack);
    cfg.lambda = 1.0;
    cfg
}
