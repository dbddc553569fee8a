//! Adversarial training with the relation-consistency regularizer.
//!
//! Per batch: craft adversarial examples with the configured PGD attack,
//! forward both the adversarial and natural batch, and descend on
//! cross-entropy(adversarial) + lambda * consistency. Optimization is SGD
//! with momentum and weight decay (weights only, biases exempt) under a
//! step learning-rate schedule. The best checkpoint is the epoch with the
//! highest validation robust accuracy under the validation attack; the
//! last checkpoint is the final epoch.
//!
//! Every randomized step draws from a stream derived from (seed, purpose,
//! epoch, batch), so a run is bit-reproducible from its config alone.

use crate::analysis;
use crate::attacks::{pgd, AttackConfig, EvalAttack};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::lfrc::{self, MetricKind};
use crate::models::{init_model, Model, ModelSpec, Param};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Graph, Tensor};

const TAG_SHUFFLE: u64 = 1;
const TAG_ATTACK: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_VAL: u64 = 4;

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per batch; at least 2 so similarity matrices are defined.
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    /// Defaults to floor(0.75 T) and floor(0.90 T).
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the consistency term in the total loss.
    pub lambda: f64,
    pub metric: MetricKind,
    pub eps_norm: f64,
    /// Taps used by the consistency loss; empty means the model spec's.
    pub tap_points: Vec<String>,
    /// Training-time attack for the inner maximization.
    pub attack: AttackConfig,
    /// Attack used to pick the best checkpoint on the validation set.
    pub val_attack: AttackConfig,
    pub seed: u64,
    pub augment: bool,
    /// Detach the natural branch: its features enter the consistency loss
    /// as constants. Ablation switch; off by default.
    pub stop_natural_gradient: bool,
    /// Skip the natural forward pass entirely (pure adversarial training).
    /// The history then reports NaN for the consistency column.
    pub disable_lfrc_branch: bool,
}

impl TrainConfig {
    /// Scaled-down defaults for [0,1] image data: SGD momentum 0.9, weight
    /// decay 2e-4, training attack PGD-10 with eps 8/255 and step 2/255,
    /// validation attack the same, lambda 100, exp metric.
    pub fn image_defaults(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            lr_milestones: None,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            lambda: 100.0,
            metric: MetricKind::Exp,
            eps_norm: lfrc::DEFAULT_EPS_NORM,
            tap_points: vec![],
            attack: AttackConfig::pgd_image_default(10),
            val_attack: AttackConfig::pgd_image_default(10),
            seed,
            augment: false,
            stop_natural_gradient: false,
            disable_lfrc_branch: false,
        }
    }

    /// Defaults with an explicit attack, for data without a [0,1] range
    /// (synthetic tabular sets), where eps and step must be chosen by hand.
    pub fn with_attack(epochs: usize, batch_size: usize, lr: f64, seed: u64, attack: AttackConfig) -> Self {
        let mut cfg = Self::image_defaults(epochs, batch_size, lr, seed);
        cfg.val_attack = attack.clone();
        cfg.attack = attack;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 (similarity matrices need at least 2 rows)".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::InvalidConfig("eps_norm must be > 0".into()));
        }
        self.attack.validate()?;
        self.val_attack.validate()?;
        Ok(())
    }

    /// Canonical rendering of every field, used for the config hash.
    /// Milestones are resolved to their effective values first, so a
    /// config that spells out the defaults hashes the same as one that
    /// omits them.
    pub fn canonical_string(&self) -> String {
        let a = &self.attack;
        let v = &self.val_attack;
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nmilestones={:?}\nlr_decay={}\nmomentum={}\n\
             weight_decay={}\nlambda={}\nmetric={}\neps_norm={}\ntaps={}\n\
             attack={} {} {} {} {:?} {:?}\nval_attack={} {} {} {} {:?} {:?}\nseed={}\naugment={}\n\
             stop_natural_gradient={}\ndisable_lfrc_branch={}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            milestones(self),
            self.lr_decay,
            self.momentum,
            self.weight_decay,
            self.lambda,
            self.metric.name(),
            self.eps_norm,
            self.tap_points.join(","),
            a.epsilon,
            a.step_size,
            a.iterations,
            a.random_start,
            a.inner_loss,
            a.data_range,
            v.epsilon,
            v.step_size,
            v.iterations,
            v.random_start,
            v.inner_loss,
            v.data_range,
            self.seed,
            self.augment,
            self.stop_natural_gradient,
            self.disable_lfrc_branch,
        )
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the model spec and training config a run was launched with.
pub fn config_hash(spec: &ModelSpec, cfg: &TrainConfig) -> u64 {
    let mut text = spec.to_config_string();
    text.push_str(&cfg.canonical_string());
    fnv1a64(text.as_bytes())
}

/// Milestones in effect: explicit ones, or floor(0.75 T), floor(0.90 T).
pub fn milestones(cfg: &TrainConfig) -> Vec<usize> {
    cfg.lr_milestones.clone().unwrap_or_else(|| {
        vec![
            (0.75 * cfg.epochs as f64).floor() as usize,
            (0.90 * cfg.epochs as f64).floor() as usize,
        ]
    })
}

/// Piecewise-constant schedule: lr * decay^(milestones passed).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = milestones(cfg).iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// One SGD step: v <- momentum v + grad + wd * param; param <- param - lr v.
/// Weight decay applies to weights only, never biases.
pub fn sgd_step<E: Element>(
    params: &mut [Param<E>],
    grads: &[Tensor<E>],
    velocity: &mut [Tensor<E>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr_e = E::from_f64(lr);
    let mom = E::from_f64(momentum);
    let wd = E::from_f64(weight_decay);
    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let decay = if param.is_bias { E::ZERO } else { wd };
        let pv = param.value.data_mut();
        let vv = vel.data_mut();
        let gv = grad.data();
        for i in 0..pv.len() {
            vv[i] = mom * vv[i] + gv[i] + decay * pv[i];
            pv[i] = pv[i] - lr_e * vv[i];
        }
    }
}

/// Which checkpoint a snapshot is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Best,
    Last,
}

impl CheckpointKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckpointKind::Best => "best",
            CheckpointKind::Last => "last",
        }
    }
}

/// A serializable model snapshot with provenance. Parameters are stored
/// at f64 so the on-disk format is independent of training precision
/// (f32 values survive the round trip bit-exactly).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Element type the model was trained at: "f32" or "f64".
    pub precision: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub kind: CheckpointKind,
    pub epoch: usize,
    /// Validation robust accuracy that selected this snapshot.
    pub selection_value: f64,
    pub config_hash: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_model<E: Element>(
        model: &Model<E>,
        kind: CheckpointKind,
        epoch: usize,
        selection_value: f64,
        config_hash: u64,
        seed: u64,
    ) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            precision: E::NAME.to_string(),
            params: model
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        p.value.shape().to_vec(),
                        p.value.to_f64_vec(),
                    )
                })
                .collect(),
            kind,
            epoch,
            selection_value,
            config_hash,
            seed,
        }
    }

    /// Rebuild the model. The element type must match the recorded
    /// precision; shapes are checked parameter by parameter.
    pub fn instantiate<E: Element>(&self) -> Result<Model<E>> {
        if E::NAME != self.precision {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained at {}, asked to load at {}",
                self.precision,
                E::NAME
            )));
        }
        let skeleton: Model<E> = init_model(&self.spec, 0)?;
        let mut params = Vec::with_capacity(skeleton.params().len());
        for proto in skeleton.params() {
            let stored = self
                .params
                .iter()
                .find(|(name, _, _)| name == &proto.name)
                .ok_or_else(|| {
                    Error::Incompatible(format!("checkpoint is missing parameter {:?}", proto.name))
                })?;
            if stored.1 != proto.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {:?} has shape {:?}, model expects {:?}",
                    proto.name,
                    stored.1,
                    proto.value.shape()
                )));
            }
            params.push(Param {
                name: proto.name.clone(),
                value: Tensor::from_f64(stored.1.clone(), &stored.2)?,
                is_bias: proto.is_bias,
            });
        }
        if self.params.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Model::from_parts(self.spec.clone(), params))
    }

    pub fn verify_config_hash(&self, expected: u64) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Incompatible(format!(
                "config hash mismatch: checkpoint {:016x}, expected {:016x}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }
}

/// Per-epoch record written to the history CSV.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    /// Mean over batches of the summed per-tap consistency loss
    /// (unweighted by lambda). NaN when the branch is disabled.
    pub train_lfrc: f64,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_ce,train_lfrc,val_clean_acc,val_robust_acc";

/// Render history as CSV, floats at 12 significant digits.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch,
            analysis::format_sig12(h.lr),
            analysis::format_sig12(h.train_ce),
            analysis::format_sig12(h.train_lfrc),
            analysis::format_sig12(h.val_clean_acc),
            analysis::format_sig12(h.val_robust_acc),
        ));
    }
    out
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Run the full training loop. Deterministic: the same (spec, config,
/// datasets) produce bit-identical checkpoints and history.
pub fn train<E: Element>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset<E>,
    val_set: &Dataset<E>,
) -> Result<TrainOutput> {
    spec.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("datasets must be non-empty".into()));
    }
    if train_set.example_numel() != spec.input_numel() {
        return Err(Error::InvalidInput(format!(
            "dataset examples have {} features, model expects {}",
            train_set.example_numel(),
            spec.input_numel()
        )));
    }
    if train_set.classes != spec.classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model expects {}",
            train_set.classes, spec.classes
        )));
    }
    if train_set.len() < cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "training set of {} is smaller than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let taps: Vec<String> = if cfg.tap_points.is_empty() {
        spec.tap_points.clone()
    } else {
        cfg.tap_points.clone()
    };
    for tap in &taps {
        if !spec.tap_points.contains(tap) {
            return Err(Error::InvalidConfig(format!(
                "training tap {tap:?} is not extracted by the model (taps: {:?})",
                spec.tap_points
            )));
        }
    }
    if !cfg.disable_lfrc_branch && taps.is_empty() && cfg.lambda > 0.0 {
        return Err(Error::InvalidConfig(
            "lambda > 0 needs at least one tap point".into(),
        ));
    }

    let hash = config_hash(spec, cfg);
    let mut model: Model<E> = init_model(spec, cfg.seed)?;
    let mut velocity: Vec<Tensor<E>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);

        let mut ce_sum = 0.0;
        let mut lfrc_sum = 0.0;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < cfg.batch_size {
                break; // drop the partial tail: similarity matrices share B
            }
            let (mut x, y) = train_set.batch(chunk);
            if cfg.augment {
                let mut arng =
                    SplitMix64::derive(cfg.seed, &[TAG_AUGMENT, epoch as u64, batch_idx as u64]);
                x = augment(&x, &AugmentConfig::default(), &mut arng)?;
            }
            let mut attack_rng =
                SplitMix64::derive(cfg.seed, &[TAG_ATTACK, epoch as u64, batch_idx as u64]);
            let x_adv = pgd(&model, &x, &y, &cfg.attack, &mut attack_rng)?;

            // adversarial branch first: with lambda = 0 the backward pass
            // then touches exactly the nodes a consistency-free run records
            let mut g: Graph<E> = Graph::new();
            let bound = model.bind(&mut g, true);
            let xa = g.constant(x_adv);
            let out_adv = model.forward_with_taps(&mut g, &bound, xa)?;
            let ce = g.softmax_cross_entropy(out_adv.logits, &y)?;
            let ce_val = g.value(ce).item()?.to_f64();

            let mut batch_lfrc = f64::NAN;
            let loss = if cfg.disable_lfrc_branch {
                ce
            } else {
                // reuse the adversarial binding so gradients flow through
                // both forward passes; a fresh no-grad binding detaches the
                // natural branch for the ablation
                let nat_bound = if cfg.stop_natural_gradient {
                    model.bind(&mut g, false)
                } else {
                    bound.clone()
                };
                let xn = g.constant(x);
                let out_nat = model.forward_with_taps(&mut g, &nat_bound, xn)?;
                let mut terms = Vec::with_capacity(taps.len());
                let mut value = 0.0;
                for tap in &taps {
                    let nat_var = find_tap(&out_nat.taps, tap)?;
                    let adv_var = find_tap(&out_adv.taps, tap)?;
                    let m_nat = lfrc::similarity_from_features(&mut g, nat_var, cfg.eps_norm)?;
                    let m_adv = lfrc::similarity_from_features(&mut g, adv_var, cfg.eps_norm)?;
                    let term = lfrc::lfrc_loss(&mut g, m_nat, m_adv, cfg.metric)?;
                    value += g.value(term).item()?.to_f64();
                    terms.push(term);
                }
                batch_lfrc = value;
                lfrc::total_loss(&mut g, ce, &terms, cfg.lambda)?
            };

            let loss_val = g.value(loss).item()?.to_f64();
            if !loss_val.is_finite() || !ce_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}: \
                     total={loss_val} ce={ce_val} lfrc={batch_lfrc}"
                )));
            }

            g.backward(loss)?;
            let grads = model.grads(&g, &bound);
            sgd_step(
                model.params_mut(),
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );

            ce_sum += ce_val;
            lfrc_sum += batch_lfrc;
            batches += 1;
        }

        if batches == 0 {
            return Err(Error::InvalidInput(
                "no full batch could be formed from the training set".into(),
            ));
        }

        let mut val_rng = SplitMix64::derive(cfg.seed, &[TAG_VAL, epoch as u64]);
        let val_clean = analysis::robust_accuracy(
            &model,
            val_set,
            &EvalAttack::Identity,
            cfg.batch_size,
            &mut val_rng,
        )?;
        let val_robust = analysis::robust_accuracy(
            &model,
            val_set,
            &EvalAttack::Pgd(cfg.val_attack.clone()),
            cfg.batch_size,
            &mut val_rng,
        )?;

        history.push(EpochStats {
            epoch,
            lr,
            train_ce: ce_sum / batches as f64,
            train_lfrc: lfrc_sum / batches as f64,
            val_clean_acc: val_clean,
            val_robust_acc: val_robust,
        });

        let is_better = match &best {
            None => true,
            Some((best_acc, _, _)) => val_robust > *best_acc,
        };
        if is_better {
            best = Some((
                val_robust,
                epoch,
                Checkpoint::from_model(
                    &model,
                    CheckpointKind::Best,
                    epoch,
                    val_robust,
                    hash,
                    cfg.seed,
                ),
            ));
        }
    }

    let last_stats = history.last().expect("at least one epoch ran");
    let last = Checkpoint::from_model(
        &model,
        CheckpointKind::Last,
        cfg.epochs - 1,
        last_stats.val_robust_acc,
        hash,
        cfg.seed,
    );
    let best = best.expect("at least one epoch ran").2;
    Ok(TrainOutput {
        best,
        last,
        history,
    })
}

fn find_tap(taps: &[(String, crate::tensor::Var)], name: &str) -> Result<crate::tensor::Var> {
    taps.iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::InvalidConfig(format!("forward produced no tap named {name:?}")))
}
