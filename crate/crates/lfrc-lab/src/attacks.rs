//! White-box adversarial example generation under an L-infinity budget.
//!
//! FGSM takes a single signed-gradient step of size epsilon. PGD iterates
//! smaller steps, projecting back into the epsilon-ball and the valid data
//! range after each one; with the margin inner loss it becomes the
//! CW-style evaluation attack. Everything is deterministic given a seed,
//! and attacks never touch model parameters.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Graph, Tensor};

/// Loss maximized by the inner attack loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerLoss {
    CrossEntropy,
    /// max_{j != y} logit_j - logit_y, the margin loss.
    CwMargin,
}

/// Parameters of an iterated signed-gradient attack.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// L-infinity radius, in input units.
    pub epsilon: f64,
    /// Step size per iteration, in input units.
    pub step_size: f64,
    pub iterations: usize,
    /// Start from a uniform point in the epsilon-ball instead of x.
    pub random_start: bool,
    pub inner_loss: InnerLoss,
    /// Valid data range [lo, hi]; use infinities for unbounded data.
    pub data_range: (f64, f64),
}

impl AttackConfig {
    /// PGD with cross-entropy inner loss on [0,1] image data.
    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size,
            iterations,
            random_start: true,
            inner_loss: InnerLoss::CrossEntropy,
            data_range: (0.0, 1.0),
        }
    }

    /// The standard image-data evaluation attack: eps 8/255, step 2/255.
    pub fn pgd_image_default(iterations: usize) -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, iterations)
    }

    pub fn with_inner_loss(mut self, loss: InnerLoss) -> Self {
        self.inner_loss = loss;
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.data_range = (lo, hi);
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step_size must be > 0".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.data_range.0 < self.data_range.1) {
            return Err(Error::InvalidConfig(format!(
                "data range [{}, {}] is empty",
                self.data_range.0, self.data_range.1
            )));
        }
        Ok(())
    }
}

/// sign with sign(0) = 0, so zero-gradient coordinates stay put.
#[inline]
pub fn sign<E: Element>(v: E) -> E {
    if v > E::ZERO {
        E::ONE
    } else if v < E::ZERO {
        -E::ONE
    } else {
        E::ZERO
    }
}

/// Clamp x' into [x - eps, x + eps] intersected with [lo, hi], elementwise.
pub fn project_linf<E: Element>(
    x_adv: &Tensor<E>,
    x: &Tensor<E>,
    eps: f64,
    range: (f64, f64),
) -> Result<Tensor<E>> {
    if x_adv.shape() != x.shape() {
        return Err(Error::DimensionMismatch {
            op: "project_linf",
            lhs: x_adv.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let eps_e = E::from_f64(eps);
    let lo = E::from_f64(range.0);
    let hi = E::from_f64(range.1);
    let data = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &c)| a.maximum(c - eps_e).minimum(c + eps_e).maximum(lo).minimum(hi))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Gradient of the chosen loss w.r.t. the input batch. Parameters are
/// bound as constants, so no weight gradients are ever computed.
fn input_grad<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    labels: &[usize],
    loss_kind: InnerLoss,
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, &bound, xv)?;
    let loss = match loss_kind {
        InnerLoss::CrossEntropy => g.softmax_cross_entropy(logits, labels)?,
        InnerLoss::CwMargin => g.cw_margin(logits, labels)?,
    };
    g.backward(loss)?;
    Ok(g.grad(xv))
}

/// One signed-gradient step of size eps, then a range clamp.
pub fn fgsm<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    labels: &[usize],
    eps: f64,
    range: (f64, f64),
) -> Result<Tensor<E>> {
    if eps < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let grad = input_grad(model, x, labels, InnerLoss::CrossEntropy)?;
    let eps_e = E::from_f64(eps);
    let lo = E::from_f64(range.0);
    let hi = E::from_f64(range.1);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &gv)| (xv + eps_e * sign(gv)).maximum(lo).minimum(hi))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Projected gradient descent on the inner loss.
///
/// With `random_start` the iterate begins at x + U(-eps, eps), clamped to
/// the data range; every step projects back into the ball and the range.
/// eps = 0 returns x unchanged. Deterministic given `rng`'s state.
pub fn pgd<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut SplitMix64,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = if cfg.random_start {
        let lo = E::from_f64(cfg.data_range.0);
        let hi = E::from_f64(cfg.data_range.1);
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let jitter = E::from_f64(rng.uniform(-cfg.epsilon, cfg.epsilon));
                (v + jitter).maximum(lo).minimum(hi)
            })
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)?
    } else {
        x.clone()
    };
    let step = E::from_f64(cfg.step_size);
    for _ in 0..cfg.iterations {
        let grad = input_grad(model, &adv, labels, cfg.inner_loss)?;
        let stepped: Vec<E> = adv
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&av, &gv)| av + step * sign(gv))
            .collect();
        let stepped = Tensor::from_vec(x.shape().to_vec(), stepped)?;
        adv = project_linf(&stepped, x, cfg.epsilon, cfg.data_range)?;
    }
    Ok(adv)
}

/// Mean margin loss of a batch of logits; the value PGD maximizes in the
/// CW-style evaluation attack.
pub fn cw_margin_loss<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let m = g.cw_margin(lv, labels)?;
    Ok(g.value(m).item()?.to_f64())
}

/// An attack as selected on the command line. `Identity` leaves inputs
/// untouched, so accuracy under it is clean accuracy.
#[derive(Debug, Clone)]
pub enum EvalAttack {
    Identity,
    Fgsm { epsilon: f64, range: (f64, f64) },
    Pgd(AttackConfig),
}

impl EvalAttack {
    pub fn apply<E: Element>(
        &self,
        model: &Model<E>,
        x: &Tensor<E>,
        labels: &[usize],
        rng: &mut SplitMix64,
    ) -> Result<Tensor<E>> {
        match self {
            EvalAttack::Identity => Ok(x.clone()),
            EvalAttack::Fgsm { epsilon, range } => fgsm(model, x, labels, *epsilon, *range),
            EvalAttack::Pgd(cfg) => pgd(model, x, labels, cfg, rng),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            EvalAttack::Identity => "none".into(),
            EvalAttack::Fgsm { epsilon, .. } => format!("fgsm eps={epsilon}"),
            EvalAttack::Pgd(cfg) => format!(
                "{} eps={} step={} iters={} random_start={}",
                match cfg.inner_loss {
                    InnerLoss::CrossEntropy => "pgd",
                    InnerLoss::CwMargin => "cw",
                },
                cfg.epsilon,
                cfg.step_size,
                cfg.iterations,
                cfg.random_start
            ),
        }
    }
}
