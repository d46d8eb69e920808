//! Training objective: Poisson negative log-likelihood plus the
//! expert-species mutual-information regularizer, combined as
//! total = poisson − alpha · Σ_d MI(S; E_d).
//!
//! MI statistics are estimated over one optimizer window spanning
//! micro-batches of every species; a window that misses a species is
//! rejected (the joint would be degenerate and MI vacuously biased).

use crate::autodiff::{NodeId, Tape};
use crate::routing::RoutingTrace;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Softplus rate activation with a floor that keeps the Poisson domain
/// precondition (p > 0) valid.
pub const RATE_EPSILON: f64 = 1e-6;

/// p = softplus(o_final) + ε.
pub fn predicted_rate<T: Scalar>(tape: &mut Tape<T>, o_final: NodeId) -> NodeId {
    let sp = tape.softplus(o_final);
    tape.add_scalar(sp, RATE_EPSILON)
}

/// Mean Poisson NLL on plain values; same conventions as the tape op.
pub fn poisson_nll_value<T: Scalar>(p: &Tensor<T>, t: &Tensor<T>) -> TensorResult<f64> {
    if p.shape() != t.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "poisson_nll",
            lhs: p.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (&pi, &ti) in p.data().iter().zip(t.data().iter()) {
        let (pv, tv) = (pi.to_f64(), ti.to_f64());
        if tv > 0.0 {
            if pv <= 0.0 {
                return Err(TensorError::Domain {
                    op: "poisson_nll",
                    message: format!("rate {pv} <= 0 where target {tv} > 0"),
                });
            }
            acc += pv - tv * pv.ln();
        } else {
            acc += pv;
        }
    }
    Ok(acc / p.numel() as f64)
}

/// Joint distribution over (species, expert) with cached shape.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    pub n_species: usize,
    pub n_experts: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(n_species: usize, n_experts: usize, p: Vec<f64>) -> TensorResult<Self> {
        if p.len() != n_species * n_experts {
            return Err(TensorError::InvalidArgument {
                op: "joint_distribution",
                message: format!(
                    "expected {} masses, got {}",
                    n_species * n_experts,
                    p.len()
                ),
            });
        }
        let mut total = 0.0;
        for &v in &p {
            if v < -1e-9 {
                return Err(TensorError::Domain {
                    op: "joint_distribution",
                    message: format!("negative mass {v}"),
                });
            }
            total += v;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(TensorError::Domain {
                op: "joint_distribution",
                message: format!("total mass {total} != 1"),
            });
        }
        Ok(JointDistribution { n_species, n_experts, p })
    }

    /// P[m][n] = J[m][n] / Σ_m token_count[m]. Requires every species to
    /// have tokens.
    pub fn from_trace(trace: &RoutingTrace) -> TensorResult<Self> {
        for m in 0..trace.n_species {
            if trace.token_count(m) <= 0.0 {
                return Err(TensorError::InvalidArgument {
                    op: "joint_distribution",
                    message: format!(
                        "species {m} contributed no tokens; MI over a single-species window is degenerate"
                    ),
                });
            }
        }
        let total = trace.total_tokens();
        let p: Vec<f64> = (0..trace.n_species)
            .flat_map(|m| (0..trace.n_experts).map(move |n| trace.joint(m, n) / total))
            .collect();
        // Gate rows sum to 1, so Σ p == 1 up to accumulation error; let the
        // constructor re-validate.
        Self::new(trace.n_species, trace.n_experts, p)
    }

    pub fn mass(&self, m: usize, n: usize) -> f64 {
        self.p[m * self.n_experts + n]
    }

    pub fn species_marginal(&self) -> Vec<f64> {
        (0..self.n_species)
            .map(|m| (0..self.n_experts).map(|n| self.mass(m, n)).sum())
            .collect()
    }

    pub fn expert_marginal(&self) -> Vec<f64> {
        (0..self.n_experts)
            .map(|n| (0..self.n_species).map(|m| self.mass(m, n)).sum())
            .collect()
    }
}

fn entropy(masses: impl Iterator<Item = f64>) -> f64 {
    masses.map(|q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum()
}

/// MI(S;E) = H(S) + H(E) − H(S,E), natural log, 0·ln 0 := 0.
pub fn mutual_information(joint: &JointDistribution) -> f64 {
    let h_s = entropy(joint.species_marginal().into_iter());
    let h_e = entropy(joint.expert_marginal().into_iter());
    let h_se = entropy(joint.p.iter().copied().map(|v| v.max(0.0)));
    h_s + h_e - h_se
}

/// Loss components of one optimizer step. The identity
/// total == poisson − alpha · Σ mi_per_layer holds in f64 by construction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub poisson: f64,
    pub mi_per_layer: Vec<f64>,
    pub total: f64,
    pub alpha: f64,
}

impl LossReport {
    pub fn compose(poisson: f64, mi_per_layer: Vec<f64>, alpha: f64) -> Self {
        let total = poisson - alpha * mi_per_layer.iter().sum::<f64>();
        LossReport { poisson, mi_per_layer, total, alpha }
    }
}

/// Value-level composite objective over one accumulation window: mean
/// Poisson NLL of (p, t) plus MI of each layer's merged trace.
pub fn total_loss<T: Scalar>(
    p: &Tensor<T>,
    t: &Tensor<T>,
    traces: &[RoutingTrace],
    alpha: f64,
) -> TensorResult<LossReport> {
    let poisson = poisson_nll_value(p, t)?;
    let mi: Vec<f64> = traces
        .iter()
        .map(|tr| JointDistribution::from_trace(tr).map(|j| mutual_information(&j)))
        .collect::<TensorResult<_>>()?;
    Ok(LossReport::compose(poisson, mi, alpha))
}

/// Tape-level accumulation of per-layer gate mass across an optimizer
/// window, keeping the MI term differentiable through every micro-batch's
/// gate weights.
pub struct TraceWindow {
    n_species: usize,
    n_experts: usize,
    /// [layer][species] → list of [N] column-sum nodes.
    rows: Vec<Vec<Vec<NodeId>>>,
    /// [layer][species] token counts.
    tokens: Vec<Vec<f64>>,
}

impl TraceWindow {
    pub fn new(n_layers: usize, n_species: usize, n_experts: usize) -> Self {
        TraceWindow {
            n_species,
            n_experts,
            rows: vec![vec![Vec::new(); n_species]; n_layers],
            tokens: vec![vec![0.0; n_species]; n_layers],
        }
    }

    /// Record one micro-batch's gate weights [B, T, N] for `layer`.
    pub fn add<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        layer: usize,
        species: usize,
        gates: NodeId,
    ) -> TensorResult<()> {
        let shape = tape.value(gates).shape().to_vec();
        let n = *shape.last().expect("gate tensor is at least rank 1");
        assert_eq!(n, self.n_experts, "gate tensor expert axis mismatch");
        assert!(species < self.n_species, "species index out of window range");
        let tokens = tape.value(gates).numel() / n;
        let flat = tape.reshape(gates, &[tokens, n])?;
        let colsum = tape.sum_axis(flat, 0)?;
        self.rows[layer][species].push(colsum);
        self.tokens[layer][species] += tokens as f64;
        Ok(())
    }

    /// One differentiable MI node per layer. Errors if any species is
    /// missing from the window.
    pub fn mi_nodes<T: Scalar>(&self, tape: &mut Tape<T>) -> TensorResult<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for (layer, per_species) in self.rows.iter().enumerate() {
            let total: f64 = self.tokens[layer].iter().sum();
            for (m, contributions) in per_species.iter().enumerate() {
                if contributions.is_empty() || self.tokens[layer][m] <= 0.0 {
                    return Err(TensorError::InvalidArgument {
                        op: "total_loss",
                        message: format!(
                            "species {m} contributed no tokens to layer {layer}; MI over a single-species window is degenerate"
                        ),
                    });
                }
            }
            let mut joint: Option<NodeId> = None;
            for contributions in per_species {
                let mut row = contributions[0];
                for &extra in &contributions[1..] {
                    row = tape.add(row, extra)?;
                }
                let row2 = tape.reshape(row, &[1, self.n_experts])?;
                joint = Some(match joint {
                    None => row2,
                    Some(acc) => tape.concat(acc, row2, 0)?,
                });
            }
            let stacked = joint.expect("n_species >= 1");
            let normalized = tape.mul_scalar(stacked, 1.0 / total);
            out.push(tape.mutual_information(normalized)?);
        }
        Ok(out)
    }
}
