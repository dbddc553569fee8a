//! Latent feature relation consistency.
//!
//! A batch of latent features is pooled to one vector per example (global
//! average pooling), L2-normalized per row, and multiplied with its own
//! transpose to give the B x B cosine-similarity matrix of the batch. The
//! consistency loss penalizes the entrywise difference between the
//! matrices of a natural batch and its adversarial counterpart:
//!
//! - `exp`: mean of e^|diff| (1.0 exactly when the matrices agree),
//! - `l1`:  mean of |diff|,
//! - `l2`:  mean of diff^2.
//!
//! The total training objective adds lambda times the sum of per-tap
//! consistency losses to the adversarial cross-entropy. Gradients flow
//! through both the natural and adversarial forward passes unless the
//! caller deliberately detaches one branch.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Norm floor for row normalization; never active on healthy activations,
/// only keeps all-zero feature rows finite.
pub const DEFAULT_EPS_NORM: f64 = 1e-12;

/// Entrywise metric applied to the matrix difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Exp,
    L1,
    L2,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(MetricKind::Exp),
            "l1" => Ok(MetricKind::L1),
            "l2" => Ok(MetricKind::L2),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?}, expected exp|l1|l2"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Exp => "exp",
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
        }
    }
}

/// Pool features to [B, C]: rank-4 tensors go through global average
/// pooling, rank-2 tensors (MLP taps, H = W = 1) pass through unchanged.
pub fn pooled_features<E: Element>(g: &mut Graph<E>, features: Var) -> Result<Var> {
    match g.shape(features).len() {
        2 => Ok(features),
        4 => g.gap(features),
        _ => Err(Error::InvalidInput(format!(
            "features must be [B,C] or [B,C,H,W], got {:?}",
            g.shape(features)
        ))),
    }
}

/// Cosine-similarity matrix of unit rows: Q . Q^T, shape [B, B].
pub fn similarity_of_rows<E: Element>(g: &mut Graph<E>, q: Var) -> Result<Var> {
    let s = g.shape(q);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::InvalidInput(format!(
            "similarity needs a non-empty [B,C] matrix, got {s:?}"
        )));
    }
    let qt = g.transpose(q)?;
    g.matmul(q, qt)
}

/// Full pipeline from tap features to the similarity matrix:
/// pool, L2-normalize rows, multiply with the transpose.
pub fn similarity_from_features<E: Element>(
    g: &mut Graph<E>,
    features: Var,
    eps_norm: f64,
) -> Result<Var> {
    let pooled = pooled_features(g, features)?;
    let q = g.l2_normalize_rows(pooled, eps_norm)?;
    similarity_of_rows(g, q)
}

/// Consistency loss between two B x B similarity matrices.
pub fn lfrc_loss<E: Element>(
    g: &mut Graph<E>,
    m_nat: Var,
    m_adv: Var,
    metric: MetricKind,
) -> Result<Var> {
    if g.shape(m_nat) != g.shape(m_adv) {
        return Err(Error::DimensionMismatch {
            op: "lfrc_loss",
            lhs: g.shape(m_nat).to_vec(),
            rhs: g.shape(m_adv).to_vec(),
        });
    }
    let diff = g.sub(m_adv, m_nat)?;
    let per_entry = match metric {
        MetricKind::Exp => {
            let a = g.abs(diff);
            g.exp(a)
        }
        MetricKind::L1 => g.abs(diff),
        MetricKind::L2 => g.mul(diff, diff)?,
    };
    Ok(g.mean_all(per_entry))
}

/// Total objective: adversarial cross-entropy plus lambda times the sum of
/// per-tap consistency losses. With lambda = 0 the cross-entropy node is
/// returned unchanged, so the objective degenerates to plain adversarial
/// training exactly.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    ce_adv: Var,
    lfrc_per_layer: &[Var],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    if lambda == 0.0 || lfrc_per_layer.is_empty() {
        return Ok(ce_adv);
    }
    let mut sum = lfrc_per_layer[0];
    for &term in &lfrc_per_layer[1..] {
        sum = g.add(sum, term)?;
    }
    let weighted = g.scale(sum, lambda);
    g.add(ce_adv, weighted)
}

/// A batch similarity matrix with the labels of its rows, for diagnostics
/// and export. Values are stored at f64 regardless of training precision.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub batch: usize,
    /// Row-major B x B values.
    pub values: Vec<f64>,
    /// Class label of each row/column.
    pub labels: Vec<usize>,
    /// Name of the tap the features came from.
    pub layer: String,
}

impl SimilarityMatrix {
    /// Compute the similarity matrix of a feature batch outside any
    /// training graph (no gradients, f64 output).
    pub fn from_features<E: Element>(
        features: &Tensor<E>,
        labels: &[usize],
        layer: &str,
        eps_norm: f64,
    ) -> Result<Self> {
        let batch = *features.shape().first().ok_or_else(|| {
            Error::InvalidInput("features must have a leading batch dimension".into())
        })?;
        if batch != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch
            )));
        }
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let m = similarity_from_features(&mut g, f, eps_norm)?;
        Ok(SimilarityMatrix {
            batch,
            values: g.value(m).to_f64_vec(),
            labels: labels.to_vec(),
            layer: layer.to_string(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.batch + j]
    }

    /// Check symmetry, unit diagonal, and the [-1, 1] range within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let b = self.batch;
        if self.values.len() != b * b || self.labels.len() != b {
            return Err(Error::InvalidInput(format!(
                "inconsistent similarity matrix: B={b}, {} values, {} labels",
                self.values.len(),
                self.labels.len()
            )));
        }
        for i in 0..b {
            let d = self.get(i, i);
            if (d - 1.0).abs() > tol {
                return Err(Error::Numerical(format!(
                    "diagonal entry ({i},{i}) = {d}, expected 1"
                )));
            }
            for j in 0..b {
                let v = self.get(i, j);
                if !(-1.0 - tol..=1.0 + tol).contains(&v) {
                    return Err(Error::Numerical(format!(
                        "entry ({i},{j}) = {v} outside [-1, 1]"
                    )));
                }
                let sym = (v - self.get(j, i)).abs();
                if sym > tol {
                    return Err(Error::Numerical(format!(
                        "asymmetry at ({i},{j}): {sym}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Consistency loss of two diagnostic matrices (no gradients).
pub fn lfrc_loss_value(
    m_nat: &SimilarityMatrix,
    m_adv: &SimilarityMatrix,
    metric: MetricKind,
) -> Result<f64> {
    if m_nat.batch != m_adv.batch {
        return Err(Error::DimensionMismatch {
            op: "lfrc_loss",
            lhs: vec![m_nat.batch, m_nat.batch],
            rhs: vec![m_adv.batch, m_adv.batch],
        });
    }
    let mut g = Graph::<f64>::new();
    let b = m_nat.batch;
    let nat = g.constant(Tensor::from_vec(vec![b, b], m_nat.values.clone())?);
    let adv = g.constant(Tensor::from_vec(vec![b, b], m_adv.values.clone())?);
    let loss = lfrc_loss(&mut g, nat, adv, metric)?;
    Ok(g.value(loss).item()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_constant_map_and_hand_mean() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::filled(&[2, 3, 4, 4], 0.7));
        let p = g.gap(c).unwrap();
        assert_eq!(g.shape(p), &[2, 3]);
        for &v in g.value(p).data() {
            assert!((v - 0.7).abs() < 1e-15);
        }

        let m = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let pm = g.gap(m).unwrap();
        assert_eq!(g.value(pm).data(), &[2.5]);
    }

    #[test]
    fn gap_is_invariant_to_spatial_permutation() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[4.0, 1.0, 2.0, 3.0]).unwrap());
        let pa = g.gap(a).unwrap();
        let pb = g.gap(b).unwrap();
        assert_eq!(g.value(pa).data(), g.value(pb).data());
    }

    #[test]
    fn l2_normalize_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap());
        let q = g.l2_normalize_rows(x, DEFAULT_EPS_NORM).unwrap();
        let v = g.value(q).data();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
        // zero row divides by eps, stays zero and finite
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn l2_normalize_random_rows_have_unit_norm() {
        let mut rng = crate::rng::SplitMix64::new(2);
        let vals: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![8, 5], &vals).unwrap());
        let q = g.l2_normalize_rows(x, DEFAULT_EPS_NORM).unwrap();
        for row in g.value(q).data().chunks(5) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-7, "norm {norm}");
        }
    }

    #[test]
    fn similarity_matrix_hand_cases() {
        let mut g = Graph::<f64>::new();
        // orthonormal rows -> identity
        let q = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let m = similarity_of_rows(&mut g, q).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.0, 0.0, 1.0]);

        // duplicated row -> off-diagonal 1
        let q2 = g.constant(Tensor::from_f64(vec![2, 2], &[0.6, 0.8, 0.6, 0.8]).unwrap());
        let m2 = similarity_of_rows(&mut g, q2).unwrap();
        assert!((g.value(m2).data()[1] - 1.0).abs() < 1e-12);

        // antipodal rows -> [[1,-1],[-1,1]]
        let q3 = g.constant(Tensor::from_f64(vec![2, 2], &[0.6, 0.8, -0.6, -0.8]).unwrap());
        let m3 = similarity_of_rows(&mut g, q3).unwrap();
        let v = g.value(m3).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[2] + 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0).abs() < 1e-12);

        let empty = g.constant(Tensor::zeros(&[0, 3]));
        assert!(similarity_of_rows(&mut g, empty).is_err());
    }

    #[test]
    fn loss_on_identical_matrices() {
        let mut g = Graph::<f64>::new();
        let vals = [1.0, 0.3, 0.3, 1.0];
        let a = g.constant(Tensor::from_f64(vec![2, 2], &vals).unwrap());
        let b = g.constant(Tensor::from_f64(vec![2, 2], &vals).unwrap());
        let exp = lfrc_loss(&mut g, a, b, MetricKind::Exp).unwrap();
        assert_eq!(g.value(exp).item().unwrap(), 1.0);
        let l1 = lfrc_loss(&mut g, a, b, MetricKind::L1).unwrap();
        assert_eq!(g.value(l1).item().unwrap(), 0.0);
        let l2 = lfrc_loss(&mut g, a, b, MetricKind::L2).unwrap();
        assert_eq!(g.value(l2).item().unwrap(), 0.0);
    }

    #[test]
    fn exp_loss_of_ln2_shift_is_two() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 3]));
        let b = g.constant(Tensor::filled(&[3, 3], std::f64::consts::LN_2));
        let loss = lfrc_loss(&mut g, a, b, MetricKind::Exp).unwrap();
        assert!((g.value(loss).item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_double_loop() {
        let mut rng = crate::rng::SplitMix64::new(77);
        for b in [1usize, 2, 5, 16] {
            let nat: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let adv: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
            for metric in [MetricKind::Exp, MetricKind::L1, MetricKind::L2] {
                let mut naive = 0.0;
                for i in 0..b {
                    for j in 0..b {
                        let d = (adv[i * b + j] - nat[i * b + j]).abs();
                        naive += match metric {
                            MetricKind::Exp => d.exp(),
                            MetricKind::L1 => d,
                            MetricKind::L2 => d * d,
                        };
                    }
                }
                naive /= (b * b) as f64;

                let mut g = Graph::<f64>::new();
                let a = g.constant(Tensor::from_vec(vec![b, b], nat.clone()).unwrap());
                let c = g.constant(Tensor::from_vec(vec![b, b], adv.clone()).unwrap());
                let loss = lfrc_loss(&mut g, a, c, metric).unwrap();
                let got = g.value(loss).item().unwrap();
                assert!(
                    (got - naive).abs() < 1e-12,
                    "B={b} {metric:?}: {got} vs {naive}"
                );
            }
        }
    }

    #[test]
    fn loss_shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            lfrc_loss(&mut g, a, b, MetricKind::Exp),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn total_loss_cases() {
        let mut g = Graph::<f64>::new();
        let ce = g.constant(Tensor::scalar(2.3));
        let term = g.constant(Tensor::scalar(1.0));

        // lambda = 0 returns the cross-entropy node itself
        let same = total_loss(&mut g, ce, &[term], 0.0).unwrap();
        assert_eq!(same, ce);

        let total = total_loss(&mut g, ce, &[term], 100.0).unwrap();
        assert!((g.value(total).item().unwrap() - 102.3).abs() < 1e-12);

        assert!(total_loss(&mut g, ce, &[term], -1.0).is_err());
    }

    #[test]
    fn exp_loss_is_at_least_one_and_symmetric() {
        let mut rng = crate::rng::SplitMix64::new(5);
        for _ in 0..30 {
            let b = 2 + rng.below(6);
            let nat: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let adv: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut g = Graph::<f64>::new();
            let a = g.constant(Tensor::from_vec(vec![b, b], nat.clone()).unwrap());
            let c = g.constant(Tensor::from_vec(vec![b, b], adv.clone()).unwrap());
            for metric in [MetricKind::Exp, MetricKind::L1, MetricKind::L2] {
                let fwd = lfrc_loss(&mut g, a, c, metric).unwrap();
                let rev = lfrc_loss(&mut g, c, a, metric).unwrap();
                let (fv, rv) = (g.value(fwd).item().unwrap(), g.value(rev).item().unwrap());
                assert_eq!(fv, rv, "loss must be symmetric in its arguments");
                if metric == MetricKind::Exp {
                    assert!(fv >= 1.0);
                }
            }
        }
    }

    #[test]
    fn row_scaling_leaves_similarity_unchanged() {
        let mut rng = crate::rng::SplitMix64::new(8);
        let vals: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let features = Tensor::<f64>::from_vec(vec![3, 4], vals.clone()).unwrap();
        let scaled: Vec<f64> = vals
            .chunks(4)
            .enumerate()
            .flat_map(|(i, row)| {
                let s = [2.0, 0.5, 7.0][i];
                row.iter().map(move |v| v * s)
            })
            .collect();
        let features_scaled = Tensor::<f64>::from_vec(vec![3, 4], scaled).unwrap();

        let m1 = SimilarityMatrix::from_features(&features, &[0, 1, 2], "fc1", DEFAULT_EPS_NORM)
            .unwrap();
        let m2 =
            SimilarityMatrix::from_features(&features_scaled, &[0, 1, 2], "fc1", DEFAULT_EPS_NORM)
                .unwrap();
        for (a, b) in m1.values.iter().zip(&m2.values) {
            assert!((a - b).abs() < 1e-12);
        }
        m1.validate(1e-6).unwrap();
    }

    #[test]
    fn permutation_invariance_of_all_metrics() {
        let mut rng = crate::rng::SplitMix64::new(13);
        let b = 5;
        let nat: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let adv: Vec<f64> = (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &[f64]| {
            let mut out = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    out[i * b + j] = m[perm[i] * b + perm[j]];
                }
            }
            out
        };
        for metric in [MetricKind::Exp, MetricKind::L1, MetricKind::L2] {
            let mut g = Graph::<f64>::new();
            let a = g.constant(Tensor::from_vec(vec![b, b], nat.clone()).unwrap());
            let c = g.constant(Tensor::from_vec(vec![b, b], adv.clone()).unwrap());
            let base = lfrc_loss(&mut g, a, c, metric).unwrap();
            let ap = g.constant(Tensor::from_vec(vec![b, b], permute(&nat)).unwrap());
            let cp = g.constant(Tensor::from_vec(vec![b, b], permute(&adv)).unwrap());
            let permuted = lfrc_loss(&mut g, ap, cp, metric).unwrap();
            let (bv, pv) = (
                g.value(base).item().unwrap(),
                g.value(permuted).item().unwrap(),
            );
            assert!((bv - pv).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_flow_through_both_branches() {
        use crate::models::{init_model, ModelSpec};
        let spec = ModelSpec::mlp(3, vec![6], 2);
        let model = init_model::<f64>(&spec, 4).unwrap();
        let x_nat = Tensor::from_f64(vec![3, 3], &[0.1, 0.5, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6])
            .unwrap();
        let x_adv = x_nat.map(|v| v + 0.05);

        // full loss: gradients through both forward passes
        let grads_full = {
            let mut g = Graph::<f64>::new();
            let bound = model.bind(&mut g, true);
            let nat = g.constant(x_nat.clone());
            let adv = g.constant(x_adv.clone());
            let out_nat = model.forward_with_taps(&mut g, &bound, nat).unwrap();
            let out_adv = model.forward_with_taps(&mut g, &bound, adv).unwrap();
            let m_nat =
                similarity_from_features(&mut g, out_nat.taps[0].1, DEFAULT_EPS_NORM).unwrap();
            let m_adv =
                similarity_from_features(&mut g, out_adv.taps[0].1, DEFAULT_EPS_NORM).unwrap();
            let loss = lfrc_loss(&mut g, m_nat, m_adv, MetricKind::Exp).unwrap();
            g.backward(loss).unwrap();
            model.grads(&g, &bound)
        };

        // natural branch detached: its features enter as constants
        let grads_detached = {
            let mut g0 = Graph::<f64>::new();
            let b0 = model.bind(&mut g0, false);
            let nat0 = g0.constant(x_nat.clone());
            let frozen = model.forward_with_taps(&mut g0, &b0, nat0).unwrap();
            let nat_tap = g0.value(frozen.taps[0].1).clone();

            let mut g = Graph::<f64>::new();
            let bound = model.bind(&mut g, true);
            let adv = g.constant(x_adv.clone());
            let out_adv = model.forward_with_taps(&mut g, &bound, adv).unwrap();
            let nat_const = g.constant(nat_tap);
            let m_nat = similarity_from_features(&mut g, nat_const, DEFAULT_EPS_NORM).unwrap();
            let m_adv =
                similarity_from_features(&mut g, out_adv.taps[0].1, DEFAULT_EPS_NORM).unwrap();
            let loss = lfrc_loss(&mut g, m_nat, m_adv, MetricKind::Exp).unwrap();
            g.backward(loss).unwrap();
            model.grads(&g, &bound)
        };

        let mut any_differs = false;
        for (a, b) in grads_full.iter().zip(&grads_detached) {
            if a.max_abs_diff(b) > 1e-12 {
                any_differs = true;
            }
        }
        assert!(
            any_differs,
            "detaching the natural branch must change parameter gradients"
        );

        // and the taps themselves feed the loss: some non-head parameter
        // gets a nonzero gradient from the consistency term alone
        let fc1_grad = &grads_full[0];
        assert!(fc1_grad.data().iter().any(|&v| v != 0.0));
    }
}
