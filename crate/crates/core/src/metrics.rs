//! Evaluation metrics: Matthews correlation coefficient (binary and
//! multiclass) and per-track Pearson correlation at bin resolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Binary MCC from confusion counts; any zero factor in the denominator
/// yields 0 (the undefined-case convention).
pub fn mcc_binary(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom <= 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// K×K confusion matrix; entry (i, j) counts samples of class i predicted
/// as class j.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "confusion matrix needs K >= 2");
        ConfusionMatrix { k, counts: vec![0.0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<f64>) -> Self {
        assert_eq!(counts.len(), k * k);
        assert!(counts.iter().all(|&c| c >= 0.0));
        ConfusionMatrix { k, counts }
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual * self.k + predicted] += 1.0;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.k + j]
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Multiclass MCC via the confusion-matrix triple sum
/// Σ_k Σ_l Σ_m (C_kk·C_lm − C_kl·C_mk) over the usual marginal
/// denominator; equals the binary formula for K = 2 and 0 whenever the
/// denominator vanishes.
pub fn mcc_multiclass(c: &ConfusionMatrix) -> f64 {
    let k = c.k();
    let mut numerator = 0.0;
    for a in 0..k {
        for l in 0..k {
            for m in 0..k {
                numerator += c.get(a, a) * c.get(l, m) - c.get(a, l) * c.get(m, a);
            }
        }
    }
    let total: f64 = (0..k).map(|i| (0..k).map(|j| c.get(i, j)).sum::<f64>()).sum();
    let true_marginal: Vec<f64> =
        (0..k).map(|i| (0..k).map(|j| c.get(i, j)).sum::<f64>()).collect();
    let pred_marginal: Vec<f64> =
        (0..k).map(|j| (0..k).map(|i| c.get(i, j)).sum::<f64>()).collect();
    let d1 = total * total - true_marginal.iter().map(|v| v * v).sum::<f64>();
    let d2 = total * total - pred_marginal.iter().map(|v| v * v).sum::<f64>();
    if d1 <= 0.0 || d2 <= 0.0 {
        return 0.0;
    }
    numerator / (d1.sqrt() * d2.sqrt())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    // Constant inputs yield the null sentinel exactly, before rounding in
    // the mean can manufacture phantom variance.
    if a.iter().all(|&x| x == a[0]) || b.iter().all(|&y| y == b[0]) {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackMetric {
    pub track_id: String,
    pub assay_type: String,
    /// `null` marks a constant track excluded from averages.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_track: Vec<TrackMetric>,
    pub per_assay_type: BTreeMap<String, f64>,
    pub overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcc: Option<f64>,
}

impl MetricsReport {
    /// Aggregate per-track correlations into per-type and overall means,
    /// skipping null (constant) tracks.
    pub fn from_tracks(per_track: Vec<TrackMetric>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut all = (0.0, 0usize);
        for t in &per_track {
            if let Some(r) = t.pearson {
                let e = sums.entry(t.assay_type.clone()).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
                all.0 += r;
                all.1 += 1;
            }
        }
        let per_assay_type =
            sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let overall = if all.1 > 0 { Some(all.0 / all.1 as f64) } else { None };
        MetricsReport { per_track, per_assay_type, overall, mcc: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn binary_examples() {
        assert_eq!(mcc_binary(1.0, 1.0, 0.0, 0.0), 1.0);
        assert_eq!(mcc_binary(0.0, 0.0, 1.0, 1.0), -1.0);
        let v = mcc_binary(6.0, 3.0, 1.0, 2.0);
        assert!((v - 16.0 / 1120.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn multiclass_perfect_uniform_and_binary_agreement() {
        let mut perfect = ConfusionMatrix::new(3);
        for i in 0..3 {
            for _ in 0..5 {
                perfect.record(i, i);
            }
        }
        assert!((mcc_multiclass(&perfect) - 1.0).abs() < 1e-12);

        let uniform = ConfusionMatrix::from_counts(3, vec![2.0; 9]);
        assert_eq!(mcc_multiclass(&uniform), 0.0);

        let mut rng = Rng::new(31);
        for _ in 0..1000 {
            let counts: Vec<f64> = (0..4).map(|_| rng.below(30) as f64).collect();
            let c = ConfusionMatrix::from_counts(2, counts.clone());
            // Class 1 as "positive": TP = C[1][1], TN = C[0][0],
            // FP = C[0][1], FN = C[1][0].
            let binary = mcc_binary(counts[3], counts[0], counts[1], counts[2]);
            let multi = mcc_multiclass(&c);
            assert!(
                (binary - multi).abs() <= 1e-12,
                "binary {binary} vs multiclass {multi} for {counts:?}"
            );
            assert!((-1.0..=1.0).contains(&multi));
        }
    }

    #[test]
    fn mcc_scale_invariance() {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let counts: Vec<f64> = (0..9).map(|_| rng.below(20) as f64).collect();
            let c1 = ConfusionMatrix::from_counts(3, counts.clone());
            let c5 = ConfusionMatrix::from_counts(3, counts.iter().map(|v| v * 5.0).collect());
            assert!((mcc_multiclass(&c1) - mcc_multiclass(&c5)).abs() <= 1e-12);
        }
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Frozen from the covariance formula: cov = 11, var_a = 5, var_b = 26.
        let b = [2.0, 4.0, 5.0, 9.0];
        let want = 11.0 / (5.0f64 * 26.0).sqrt();
        assert!((pearson(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.9647638212377322).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance_and_null() {
        let mut rng = Rng::new(9);
        let a: Vec<f64> = (0..50).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let r = pearson(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| 3.5 * v + 7.0).collect();
        let r2 = pearson(&scaled, &b).unwrap();
        assert!((r - r2).abs() <= 1e-9);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn report_aggregation_skips_nulls() {
        let report = MetricsReport::from_tracks(vec![
            TrackMetric { track_id: "a".into(), assay_type: "CAGE".into(), pearson: Some(0.8) },
            TrackMetric { track_id: "b".into(), assay_type: "CAGE".into(), pearson: None },
            TrackMetric {
                track_id: "c".into(),
                assay_type: "TF_CHIP".into(),
                pearson: Some(0.4),
            },
        ]);
        assert!((report.per_assay_type["CAGE"] - 0.8).abs() < 1e-12);
        assert!((report.overall.unwrap() - 0.6).abs() < 1e-12);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"pearson\":null"));
        assert!(!json.contains("mcc"));
    }
}
