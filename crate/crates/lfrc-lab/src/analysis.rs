//! Diagnostics: similarity-matrix difference vs accuracy difference,
//! Pearson correlation, robustness evaluation, transfer attacks, and
//! label-grouped heatmap export.
//!
//! Per batch, `ds` is the mean absolute entrywise difference between the
//! adversarial and natural similarity matrices; `da` is the number of
//! correctly classified natural examples minus the number of correctly
//! classified adversarial ones. Collected over a test set these points
//! quantify how feature-relation drift tracks accuracy loss.

use std::path::Path;

use crate::attacks::EvalAttack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lfrc::SimilarityMatrix;
use crate::models::Model;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};

/// Serialize a float with 12 significant digits, the convention for every
/// CSV this crate writes.
pub fn format_sig12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Mean absolute entrywise difference of two same-size similarity
/// matrices (bounded by 2 since entries live in [-1, 1]).
pub fn similarity_difference(m_nat: &SimilarityMatrix, m_adv: &SimilarityMatrix) -> Result<f64> {
    if m_nat.batch != m_adv.batch {
        return Err(Error::DimensionMismatch {
            op: "similarity_difference",
            lhs: vec![m_nat.batch, m_nat.batch],
            rhs: vec![m_adv.batch, m_adv.batch],
        });
    }
    let b2 = (m_nat.batch * m_nat.batch) as f64;
    let sum: f64 = m_nat
        .values
        .iter()
        .zip(&m_adv.values)
        .map(|(a, b)| (b - a).abs())
        .sum();
    Ok(sum / b2)
}

/// Correct-count difference: #correct on natural minus #correct on
/// adversarial, for one aligned batch.
pub fn accuracy_difference<E: Element>(
    model: &Model<E>,
    x_nat: &Tensor<E>,
    x_adv: &Tensor<E>,
    labels: &[usize],
) -> Result<i64> {
    let pred_nat = model.predict(x_nat)?;
    let pred_adv = model.predict(x_adv)?;
    let correct =
        |preds: &[usize]| preds.iter().zip(labels).filter(|(p, y)| p == y).count() as i64;
    Ok(correct(&pred_nat) - correct(&pred_adv))
}

/// Sample Pearson correlation coefficient.
///
/// Errors on series shorter than 2 or constant series instead of
/// returning NaN.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs at least 2 points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Least-squares fit y = slope * x + intercept.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(
            "least squares needs two aligned series of length >= 2".into(),
        ));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series"));
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Fraction of the dataset classified correctly after the attack.
/// `EvalAttack::Identity` measures clean accuracy.
pub fn robust_accuracy<E: Element>(
    model: &Model<E>,
    dataset: &Dataset<E>,
    attack: &EvalAttack,
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (x, y) = dataset.batch(chunk);
        let adv = attack.apply(model, &x, &y, rng)?;
        let preds = model.predict(&adv)?;
        correct += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Black-box transfer: craft adversarial examples on the surrogate and
/// measure the target's accuracy on them.
pub fn transfer_eval<E: Element>(
    surrogate: &Model<E>,
    target: &Model<E>,
    dataset: &Dataset<E>,
    attack: &EvalAttack,
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<f64> {
    if surrogate.spec().input_shape != target.spec().input_shape
        || surrogate.spec().classes != target.spec().classes
    {
        return Err(Error::InvalidConfig(format!(
            "surrogate ({:?}, {} classes) incompatible with target ({:?}, {} classes)",
            surrogate.spec().input_shape,
            surrogate.spec().classes,
            target.spec().input_shape,
            target.spec().classes
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (x, y) = dataset.batch(chunk);
        let adv = attack.apply(surrogate, &x, &y, rng)?;
        let preds = target.predict(&adv)?;
        correct += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// One point of the difference-vs-accuracy scatter.
#[derive(Debug, Clone)]
pub struct BatchDiagnostic {
    pub batch_index: usize,
    pub layer: String,
    /// Mean absolute similarity difference, >= 0.
    pub ds: f64,
    /// Natural-minus-adversarial correct count; |da| <= batch size.
    pub da: i64,
}

/// Matrices retained from a scatter pass so they can be exported.
pub struct ScatterBatch {
    pub diagnostic: BatchDiagnostic,
    pub natural: SimilarityMatrix,
    pub adversarial: SimilarityMatrix,
}

/// Walk the dataset in fixed-size batches (dropping a partial tail),
/// attack each batch, and record similarity matrices and diagnostics at
/// the requested tap.
pub fn ds_da_scatter<E: Element>(
    model: &Model<E>,
    dataset: &Dataset<E>,
    attack: &EvalAttack,
    batch_size: usize,
    tap: &str,
    eps_norm: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<ScatterBatch>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(
            "similarity matrices need batch_size >= 2".into(),
        ));
    }
    if batch_size > dataset.len() {
        return Err(Error::InvalidInput(format!(
            "batch_size {} exceeds dataset size {}",
            batch_size,
            dataset.len()
        )));
    }
    if !model.spec().tap_points.iter().any(|t| t == tap) {
        return Err(Error::InvalidConfig(format!(
            "tap {tap:?} not among the model's tap points {:?}",
            model.spec().tap_points
        )));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::new();
    for (batch_index, chunk) in indices.chunks(batch_size).enumerate() {
        if chunk.len() < batch_size {
            break; // partial tail dropped: matrices must share B
        }
        let (x, y) = dataset.batch(chunk);
        let adv = attack.apply(model, &x, &y, rng)?;
        let nat_tap = tap_features(model, &x, tap)?;
        let adv_tap = tap_features(model, &adv, tap)?;
        let natural = SimilarityMatrix::from_features(&nat_tap, &y, tap, eps_norm)?;
        let adversarial = SimilarityMatrix::from_features(&adv_tap, &y, tap, eps_norm)?;
        let ds = similarity_difference(&natural, &adversarial)?;
        let da = accuracy_difference(model, &x, &adv, &y)?;
        out.push(ScatterBatch {
            diagnostic: BatchDiagnostic {
                batch_index,
                layer: tap.to_string(),
                ds,
                da,
            },
            natural,
            adversarial,
        });
    }
    Ok(out)
}

/// Activation values at a named tap for one batch, no gradients.
pub fn tap_features<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    tap: &str,
) -> Result<Tensor<E>> {
    let mut g = crate::tensor::Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = model.forward_with_taps(&mut g, &bound, xv)?;
    let var = out
        .taps
        .iter()
        .find(|(name, _)| name == tap)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::InvalidConfig(format!("model produced no tap named {tap:?}")))?;
    Ok(g.value(var).clone())
}

/// Scatter CSV: one row per full batch, then footer comment lines with
/// the Pearson coefficient and the least-squares fit.
pub fn scatter_to_csv(diags: &[BatchDiagnostic]) -> String {
    let mut csv = String::from("batch_index,ds,da\n");
    for d in diags {
        csv.push_str(&format!("{},{},{}\n", d.batch_index, format_sig12(d.ds), d.da));
    }
    let xs: Vec<f64> = diags.iter().map(|d| d.ds).collect();
    let ys: Vec<f64> = diags.iter().map(|d| d.da as f64).collect();
    match pearson(&xs, &ys) {
        Ok(r) => csv.push_str(&format!("# pcc,{}\n", format_sig12(r))),
        Err(Error::UndefinedCorrelation(_)) => csv.push_str("# pcc,undefined (constant series)\n"),
        Err(e) => csv.push_str(&format!("# pcc,unavailable ({e})\n")),
    }
    match least_squares(&xs, &ys) {
        Ok((slope, intercept)) => {
            csv.push_str(&format!("# slope,{}\n", format_sig12(slope)));
            csv.push_str(&format!("# intercept,{}\n", format_sig12(intercept)));
        }
        Err(_) => {
            csv.push_str("# slope,undefined (constant series)\n");
            csv.push_str("# intercept,undefined (constant series)\n");
        }
    }
    csv
}

/// Parse the data rows of a scatter CSV (footer lines are skipped).
pub fn read_scatter_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let loc = format!("scatter csv line {}", idx + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(loc, "expected batch_index,ds,da"));
        }
        let b = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        let ds = fields[1]
            .parse::<f64>()
            .map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        let da = fields[2]
            .parse::<f64>()
            .map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        rows.push((b, ds, da));
    }
    Ok(rows)
}

/// Stable permutation grouping batch rows by label.
pub fn grouping_permutation(labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    order
}

/// Write a similarity matrix as a plain-text PGM (P2) heatmap plus a CSV
/// sidecar holding the exact values.
///
/// Rows and columns are permuted so examples with the same label sit next
/// to each other; this grouping exists only in the exported view. Values
/// are mapped linearly from [-1, 1] to 0..255 for the PGM.
pub fn export_heatmap(m: &SimilarityMatrix, base_path: &Path) -> Result<()> {
    let b = m.batch;
    let perm = grouping_permutation(&m.labels);

    let pgm_path = base_path.with_extension("pgm");
    let csv_path = base_path.with_extension("csv");

    let mut pgm = format!("P2\n# layer {} grouped by label\n{b} {b}\n255\n", m.layer);
    for &i in &perm {
        let mut row = Vec::with_capacity(b);
        for &j in &perm {
            let v = m.get(i, j).clamp(-1.0, 1.0);
            let gray = ((v + 1.0) / 2.0 * 255.0).round() as i64;
            row.push(gray.clamp(0, 255).to_string());
        }
        pgm.push_str(&row.join(" "));
        pgm.push('\n');
    }
    std::fs::write(&pgm_path, pgm)?;

    let mut csv = String::from("labels");
    for &i in &perm {
        csv.push_str(&format!(",{}", m.labels[i]));
    }
    csv.push('\n');
    for &i in &perm {
        let row: Vec<String> = perm.iter().map(|&j| format_sig12(m.get(i, j))).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;
    Ok(())
}

/// Read back a heatmap CSV sidecar (grouped order, as written).
pub fn read_heatmap_csv(path: &Path) -> Result<SimilarityMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path.display().to_string(), "empty heatmap csv"))?;
    let labels: Vec<usize> = header
        .split(',')
        .skip(1)
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
        })
        .collect::<Result<_>>()?;
    let b = labels.len();
    let mut values = Vec::with_capacity(b * b);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for field in line.split(',') {
            values.push(field.trim().parse::<f64>().map_err(|e| {
                Error::format(path.display().to_string(), e.to_string())
            })?);
        }
    }
    if values.len() != b * b {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} values for a {b}x{b} matrix", values.len()),
        ));
    }
    Ok(SimilarityMatrix {
        batch: b,
        values,
        labels,
        layer: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfrc::SimilarityMatrix;

    fn matrix(b: usize, values: Vec<f64>, labels: Vec<usize>) -> SimilarityMatrix {
        SimilarityMatrix {
            batch: b,
            values,
            labels,
            layer: "block1".into(),
        }
    }

    #[test]
    fn ds_hand_cases() {
        let a = matrix(2, vec![0.0, 0.0, 0.0, 0.0], vec![0, 1]);
        let b = matrix(2, vec![0.0, 1.0, 1.0, 0.0], vec![0, 1]);
        assert_eq!(similarity_difference(&a, &a).unwrap(), 0.0);
        assert_eq!(similarity_difference(&a, &b).unwrap(), 0.5);

        let c = matrix(3, vec![0.0; 9], vec![0, 1, 2]);
        assert!(similarity_difference(&a, &c).is_err());
    }

    #[test]
    fn ds_is_bounded_by_two() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..20 {
            let b = 2 + rng.below(6);
            let mk = |rng: &mut SplitMix64| {
                matrix(
                    b,
                    (0..b * b).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    vec![0; b],
                )
            };
            let (x, y) = (mk(&mut rng), mk(&mut rng));
            let ds = similarity_difference(&x, &y).unwrap();
            assert!((0.0..=2.0).contains(&ds));
        }
    }

    #[test]
    fn pearson_hand_cases_and_errors() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);

        let constant = vec![3.0; 10];
        assert!(matches!(
            pearson(&xs, &constant),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_matches_compensated_oracle() {
        // Kahan-compensated two-pass oracle at f64
        fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
            let (mut sum, mut c) = (0.0, 0.0);
            for v in values {
                let y = v - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        }
        let mut rng = SplitMix64::new(15);
        let xs: Vec<f64> = (0..50).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x + rng.uniform(-2.0, 2.0))
            .collect();
        let n = xs.len() as f64;
        let mx = kahan_sum(xs.iter().copied()) / n;
        let my = kahan_sum(ys.iter().copied()) / n;
        let sxy = kahan_sum(xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)));
        let sxx = kahan_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
        let syy = kahan_sum(ys.iter().map(|y| (y - my) * (y - my)));
        let oracle = sxy / (sxx.sqrt() * syy.sqrt());
        assert!((pearson(&xs, &ys).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance_and_negation() {
        let mut rng = SplitMix64::new(9);
        let xs: Vec<f64> = (0..30).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ys: Vec<f64> = (0..30).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let base = pearson(&xs, &ys).unwrap();
        let xs_affine: Vec<f64> = xs.iter().map(|x| 3.5 * x + 2.0).collect();
        assert!((pearson(&xs_affine, &ys).unwrap() - base).abs() < 1e-10);
        let ys_neg: Vec<f64> = ys.iter().map(|y| -y).collect();
        assert!((pearson(&xs, &ys_neg).unwrap() + base).abs() < 1e-10);
    }

    #[test]
    fn grouping_permutation_is_stable() {
        assert_eq!(grouping_permutation(&[1, 0, 1, 0]), vec![1, 3, 0, 2]);
        assert_eq!(grouping_permutation(&[0, 0, 0]), vec![0, 1, 2]);
    }

    #[test]
    fn heatmap_export_round_trips_and_maps_gray() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        // identity similarity of 3 examples with interleaved labels
        let m = matrix(
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![1, 0, 1],
        );
        export_heatmap(&m, &base).unwrap();

        let pgm = std::fs::read_to_string(base.with_extension("pgm")).unwrap();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        let data_rows: Vec<&str> = pgm
            .lines()
            .skip(4)
            .filter(|l| !l.trim().is_empty())
            .collect();
        for (i, row) in data_rows.iter().enumerate() {
            let vals: Vec<i64> = row
                .split_whitespace()
                .map(|v| v.parse().unwrap())
                .collect();
            for (j, v) in vals.iter().enumerate() {
                if i == j {
                    assert_eq!(*v, 255, "diagonal must be white");
                } else {
                    assert!(*v == 127 || *v == 128, "off-diagonal mid-gray, got {v}");
                }
            }
        }

        let back = read_heatmap_csv(&base.with_extension("csv")).unwrap();
        // grouped order: label-0 row first (original index 1)
        assert_eq!(back.labels, vec![0, 1, 1]);
        let perm = grouping_permutation(&m.labels);
        for gi in 0..3 {
            for gj in 0..3 {
                let expect = m.get(perm[gi], perm[gj]);
                assert!((back.get(gi, gj) - expect).abs() < 1e-9);
            }
        }
        // grouping preserves symmetry
        for i in 0..3 {
            for j in 0..3 {
                assert!((back.get(i, j) - back.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_unwritable_path_is_io_error() {
        let m = matrix(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]);
        let err = export_heatmap(&m, Path::new("/nonexistent-dir/x/y")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn scatter_csv_writes_rows_and_footer() {
        let diags = vec![
            BatchDiagnostic {
                batch_index: 0,
                layer: "block1".into(),
                ds: 0.1,
                da: 3,
            },
            BatchDiagnostic {
                batch_index: 1,
                layer: "block1".into(),
                ds: 0.3,
                da: 7,
            },
            BatchDiagnostic {
                batch_index: 2,
                layer: "block1".into(),
                ds: 0.2,
                da: 5,
            },
        ];
        let csv = scatter_to_csv(&diags);
        let rows = read_scatter_csv(&csv).unwrap();
        assert_eq!(rows.len(), 3);
        let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let r = pearson(&xs, &ys).unwrap();
        let footer_line = csv
            .lines()
            .find(|l| l.starts_with("# pcc"))
            .expect("pcc footer");
        let footer_r: f64 = footer_line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((footer_r - r).abs() < 1e-9);

        // constant ds -> undefined correlation, reported as text
        let flat: Vec<BatchDiagnostic> = (0..3)
            .map(|i| BatchDiagnostic {
                batch_index: i,
                layer: "t".into(),
                ds: 0.0,
                da: i as i64,
            })
            .collect();
        let csv2 = scatter_to_csv(&flat);
        assert!(csv2.contains("undefined (constant series)"));
    }

    #[test]
    fn accuracy_difference_matches_naive_loop_and_bound_case() {
        use crate::models::{init_model, ModelSpec};
        let spec = ModelSpec::mlp(3, vec![5], 2);
        let model = init_model::<f64>(&spec, 12).unwrap();
        let mut rng = SplitMix64::new(4);
        let vals: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::from_vec(vec![8, 3], vals.clone()).unwrap();
        let adv_vals: Vec<f64> = vals.iter().map(|v| v + 0.3).collect();
        let adv = Tensor::from_vec(vec![8, 3], adv_vals).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let da = accuracy_difference(&model, &x, &adv, &labels).unwrap();

        // naive per-example loop
        let mut expect = 0i64;
        for i in 0..8 {
            let (xb, _) = (
                Tensor::from_vec(vec![1, 3], vals[i * 3..(i + 1) * 3].to_vec()).unwrap(),
                0,
            );
            let ab = Tensor::from_vec(
                vec![1, 3],
                vals[i * 3..(i + 1) * 3].iter().map(|v| v + 0.3).collect(),
            )
            .unwrap();
            let pn = model.predict(&xb).unwrap()[0];
            let pa = model.predict(&ab).unwrap()[0];
            expect += (pn == labels[i]) as i64 - (pa == labels[i]) as i64;
        }
        assert_eq!(da, expect);
        assert!(da.unsigned_abs() as usize <= 8);

        // bound case: a linear model that flips its prediction when x flips
        let mut m2 = init_model::<f64>(&ModelSpec::mlp(2, vec![2], 2), 0).unwrap();
        for p in m2.params_mut() {
            match p.name.as_str() {
                "fc1.weight" => {
                    p.value = Tensor::from_f64(vec![2, 2], &[1.0, -1.0, 0.0, 0.0]).unwrap()
                }
                "fc1.bias" => p.value = Tensor::zeros(&[2]),
                "head.weight" => {
                    p.value = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()
                }
                "head.bias" => p.value = Tensor::zeros(&[2]),
                _ => {}
            }
        }
        let b = 256;
        let nat: Vec<f64> = (0..b * 2).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let advf: Vec<f64> = nat.iter().map(|v| -v).collect();
        let x_nat = Tensor::from_vec(vec![b, 2], nat).unwrap();
        let x_adv = Tensor::from_vec(vec![b, 2], advf).unwrap();
        let y = vec![0usize; b];
        assert_eq!(
            accuracy_difference(&m2, &x_nat, &x_adv, &y).unwrap(),
            b as i64
        );
    }

    use crate::rng::SplitMix64;
}
