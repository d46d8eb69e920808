//! Routing statistics: accumulated gate mass per (species, expert) and the
//! CSV exports used for expert-selection analysis.

use crate::data::AssayType;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Accumulated joint gate mass J[m][n] = Σ over species-m tokens of the
/// token's weight on expert n, plus per-species token counts.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    pub n_species: usize,
    pub n_experts: usize,
    joint: Vec<f64>,
    token_count: Vec<f64>,
}

impl RoutingTrace {
    pub fn new(n_species: usize, n_experts: usize) -> Self {
        RoutingTrace {
            n_species,
            n_experts,
            joint: vec![0.0; n_species * n_experts],
            token_count: vec![0.0; n_species],
        }
    }

    /// Fold in one batch's gate weights (any tensor whose last axis is the
    /// expert dimension; leading axes are token axes).
    pub fn accumulate<T: Scalar>(&mut self, gate_weights: &Tensor<T>, species: usize) {
        let n = self.n_experts;
        assert_eq!(gate_weights.shape().last(), Some(&n), "gate tensor last axis != n_experts");
        let tokens = gate_weights.numel() / n;
        for row in gate_weights.data().chunks(n) {
            for (j, &w) in row.iter().enumerate() {
                self.joint[species * n + j] += w.to_f64();
            }
        }
        self.token_count[species] += tokens as f64;
    }

    pub fn merge(&mut self, other: &RoutingTrace) {
        assert_eq!(self.joint.len(), other.joint.len());
        for (a, b) in self.joint.iter_mut().zip(other.joint.iter()) {
            *a += b;
        }
        for (a, b) in self.token_count.iter_mut().zip(other.token_count.iter()) {
            *a += b;
        }
    }

    pub fn joint(&self, m: usize, n: usize) -> f64 {
        self.joint[m * self.n_experts + n]
    }

    pub fn token_count(&self, m: usize) -> f64 {
        self.token_count[m]
    }

    pub fn total_tokens(&self) -> f64 {
        self.token_count.iter().sum()
    }

    /// Per-species expert selection frequencies F[m][n] = J[m][n] /
    /// token_count[m]; rows sum to 1 for normalized gate inputs. `None`
    /// when a species has no tokens.
    pub fn frequencies(&self) -> Option<Vec<Vec<f64>>> {
        if self.token_count.iter().any(|&c| c <= 0.0) {
            return None;
        }
        Some(
            (0..self.n_species)
                .map(|m| {
                    (0..self.n_experts)
                        .map(|n| self.joint(m, n) / self.token_count[m])
                        .collect()
                })
                .collect(),
        )
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Encoder routing export: one row per (layer, species).
pub fn routing_frequencies_csv(
    traces: &[RoutingTrace],
    species_ids: &[String],
) -> Option<String> {
    let n_experts = traces.first()?.n_experts;
    let mut out = String::from("layer,species");
    for n in 0..n_experts {
        out.push_str(&format!(",expert_{n}"));
    }
    out.push('\n');
    for (layer, trace) in traces.iter().enumerate() {
        let freqs = trace.frequencies()?;
        for (m, row) in freqs.iter().enumerate() {
            out.push_str(&format!("{layer},{}", species_ids[m]));
            for v in row {
                out.push(',');
                out.push_str(&fmt_float(*v));
            }
            out.push('\n');
        }
    }
    Some(out)
}

/// Decoder routing export: one row per profile type, rows normalized.
pub fn profile_routing_csv(rows: &[(AssayType, Vec<f64>)]) -> Option<String> {
    let k = rows.first()?.1.len();
    let mut out = String::from("profile_type");
    for n in 0..k {
        out.push_str(&format!(",expert_{n}"));
    }
    out.push('\n');
    for (assay, freqs) in rows {
        let total: f64 = freqs.iter().sum();
        if total <= 0.0 {
            return None;
        }
        out.push_str(assay.as_str());
        for v in freqs {
            out.push(',');
            out.push_str(&fmt_float(v / total));
        }
        out.push('\n');
    }
    Some(out)
}
