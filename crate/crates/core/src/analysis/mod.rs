//! Diagnostics: k-NN entropy of neuron outputs across clients, partition
//! stability and accuracy summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{contract, Result};
use crate::federation::RoundRecord;
use crate::model::SplitParams;
use crate::numerics::{quantile, DenseMatrix};

/// Lowest entropy ever reported.
pub const ENTROPY_FLOOR: f64 = -50.0;
/// Stand-in for a zero nearest-neighbour distance.
pub const DISTANCE_JITTER: f64 = 1e-12;

/// One-dimensional Kozachenko–Leonenko entropy estimate.
///
/// `Ĥ = ψ(n) − ψ(k) + ln 2 + mean(ln εᵢ)` with `εᵢ` the distance from sample
/// `i` to its `k`-th nearest neighbour. Zero distances count as
/// [`DISTANCE_JITTER`]; a sample with no spread at all returns the floor.
pub fn knn_entropy(samples: &[f64], k: usize) -> Result<f64> {
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(contract(format!("knn_entropy needs n > k ≥ 1, got n={n}, k={k}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(contract("knn_entropy input contains non-finite values"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    if xs[0] == xs[n - 1] {
        return Ok(ENTROPY_FLOOR);
    }
    let mut log_sum = 0.0;
    for i in 0..n {
        // merge outward from i until k neighbours are consumed
        let (mut lo, mut hi) = (i, i);
        let mut eps = 0.0;
        for _ in 0..k {
            let left = if lo > 0 { xs[i] - xs[lo - 1] } else { f64::INFINITY };
            let right = if hi + 1 < n { xs[hi + 1] - xs[i] } else { f64::INFINITY };
            if left <= right {
                lo -= 1;
                eps = left;
            } else {
                hi += 1;
                eps = right;
            }
        }
        log_sum += eps.max(DISTANCE_JITTER).ln();
    }
    let h = digamma(n as f64) - digamma(k as f64) + std::f64::consts::LN_2 + log_sum / n as f64;
    Ok(h.max(ENTROPY_FLOOR))
}

/// Per-client scalar summarizing a neuron's outputs on that client's probe set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSummary {
    Mean,
    Median,
}

impl std::str::FromStr for ProbeSummary {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ProbeSummary::Mean),
            "median" => Ok(ProbeSummary::Median),
            other => Err(crate::error::config_err("entropy.summary", format!("unknown summary `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub entropies: Vec<f64>,
    pub k: usize,
    pub probe: String,
}

impl EntropyReport {
    /// Sample variance of the per-neuron entropies.
    pub fn variance(&self) -> f64 {
        crate::numerics::sample_variance(&self.entropies)
    }
}

/// Entropy across clients of each neuron's summarized output on hidden `layer`.
///
/// `models[c]` is evaluated on `probes[c]`; every client contributes one
/// scalar per neuron and the entropy is taken over those `C` scalars.
pub fn neuron_entropy_report(
    models: &[SplitParams],
    probes: &[&DenseMatrix],
    layer: usize,
    k: usize,
    summary: ProbeSummary,
) -> Result<EntropyReport> {
    if models.len() != probes.len() {
        return Err(contract("one probe set per model required"));
    }
    if models.len() < k + 2 {
        return Err(contract(format!("entropy report needs at least {} clients, got {}", k + 2, models.len())));
    }
    if probes.iter().any(|p| p.rows() == 0) {
        return Err(contract("empty probe set"));
    }
    let per_client: Vec<Vec<f64>> = models
        .par_iter()
        .zip(probes.par_iter())
        .map(|(m, x)| {
            let act = m.hidden_activations(x, layer)?;
            Ok((0..act.cols())
                .map(|j| {
                    let col = act.column(j);
                    match summary {
                        ProbeSummary::Mean => crate::numerics::mean(&col),
                        ProbeSummary::Median => quantile(&col, 0.5),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let width = per_client[0].len();
    let entropies = (0..width)
        .into_par_iter()
        .map(|j| {
            let values: Vec<f64> = per_client.iter().map(|v| v[j]).collect();
            knn_entropy(&values, k)
        })
        .collect::<Result<_>>()?;
    let probe = format!(
        "{} activation of hidden layer {layer} over each client's probe set, {} clients",
        match summary {
            ProbeSummary::Mean => "mean",
            ProbeSummary::Median => "median",
        },
        models.len()
    );
    Ok(EntropyReport { entropies, k, probe })
}

/// Share of units whose shared/personalized state is the same in both arrays.
pub fn stability_fraction(prev: &[bool], curr: &[bool]) -> Result<f64> {
    if prev.len() != curr.len() {
        return Err(contract(format!("ζ lengths differ: {} vs {}", prev.len(), curr.len())));
    }
    if prev.is_empty() {
        return Ok(1.0);
    }
    let same = prev.iter().zip(curr).filter(|(a, b)| a == b).count();
    Ok(same as f64 / prev.len() as f64)
}

/// `Σ n_c·acc_c / Σ n_c`.
pub fn weighted_accuracy(clients: &[(usize, f64)]) -> Result<f64> {
    if clients.is_empty() {
        return Err(contract("weighted accuracy over no clients"));
    }
    if clients.iter().any(|(n, _)| *n == 0) {
        return Err(contract("client weight n_c must be positive"));
    }
    let total: usize = clients.iter().map(|(n, _)| n).sum();
    Ok(clients.iter().map(|(n, a)| *n as f64 * a).sum::<f64>() / total as f64)
}

/// Per-round fraction of units with unchanged `ζ`, averaged over split layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub fractions: Vec<f64>,
}

impl StabilityTrace {
    /// Rounds `1..=T` of a run (round 0 has no predecessor).
    pub fn from_records(records: &[RoundRecord]) -> Self {
        Self { fractions: records.iter().skip(1).map(|r| r.stability()).collect() }
    }

    /// Mean over the last `n` rounds (all rounds if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.fractions[self.fractions.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 1.0;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}
