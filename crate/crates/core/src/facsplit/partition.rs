use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::quantile;

/// Assignment of one layer's hidden units to the shared (`zeta = true`) or
/// personalized group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub layer: usize,
    pub zeta: Vec<bool>,
    pub shared: Vec<usize>,
    pub personal: Vec<usize>,
    /// Communalities the split was derived from; empty for supplied partitions.
    #[serde(default)]
    pub nu: Vec<f64>,
}

impl Partition {
    pub fn from_zeta(layer: usize, zeta: Vec<bool>) -> Self {
        let shared = zeta.iter().enumerate().filter(|(_, &z)| z).map(|(j, _)| j).collect();
        let personal = zeta.iter().enumerate().filter(|(_, &z)| !z).map(|(j, _)| j).collect();
        Self { layer, zeta, shared, personal, nu: Vec::new() }
    }

    pub fn all_shared(layer: usize, width: usize) -> Self {
        Self::from_zeta(layer, vec![true; width])
    }

    pub fn all_personal(layer: usize, width: usize) -> Self {
        Self::from_zeta(layer, vec![false; width])
    }

    pub fn width(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_shared(&self, unit: usize) -> bool {
        self.zeta[unit]
    }

    pub fn n_shared(&self) -> usize {
        self.shared.len()
    }

    pub fn n_personal(&self) -> usize {
        self.personal.len()
    }

    /// Number of units whose group differs between `self` and `other`.
    pub fn flips(&self, other: &Partition) -> usize {
        self.zeta.iter().zip(&other.zeta).filter(|(a, b)| a != b).count()
    }
}

/// How the split threshold τ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauSpec {
    /// Empirical quantile `q ∈ [0,1]` of the communalities.
    Quantile(f64),
    Absolute(f64),
    /// No unit is shared.
    Infinity,
    /// Every unit is shared.
    NegInfinity,
}

impl TauSpec {
    pub fn resolve(&self, nu: &[f64]) -> f64 {
        match *self {
            TauSpec::Quantile(q) => quantile(nu, q),
            TauSpec::Absolute(t) => t,
            TauSpec::Infinity => f64::INFINITY,
            TauSpec::NegInfinity => f64::NEG_INFINITY,
        }
    }
}

impl std::fmt::Display for TauSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauSpec::Quantile(q) => write!(f, "q{}", q * 100.0),
            TauSpec::Absolute(t) => write!(f, "{t}"),
            TauSpec::Infinity => write!(f, "inf"),
            TauSpec::NegInfinity => write!(f, "-inf"),
        }
    }
}

impl std::str::FromStr for TauSpec {
    type Err = String;

    /// Accepts `inf`, `-inf`, `q50` / `50%` (quantiles), or a plain number.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => return Ok(TauSpec::Infinity),
            "-inf" | "neg_infinity" | "-infinity" => return Ok(TauSpec::NegInfinity),
            _ => {}
        }
        let pct = s.strip_prefix('q').or_else(|| s.strip_suffix('%'));
        if let Some(p) = pct {
            let v: f64 = p.parse().map_err(|_| format!("bad quantile `{s}`"))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(format!("quantile `{s}` outside 0..100"));
            }
            return Ok(TauSpec::Quantile(v / 100.0));
        }
        s.parse::<f64>()
            .map(TauSpec::Absolute)
            .map_err(|_| format!("bad threshold `{s}`"))
    }
}

/// Shared iff `ν_j ≥ τ`. Returns the partition and the resolved τ.
pub fn threshold_split(layer: usize, nu: &[f64], tau: TauSpec) -> Result<(Partition, f64)> {
    if nu.is_empty() {
        return Err(contract("threshold_split needs at least one communality"));
    }
    let t = tau.resolve(nu);
    let zeta = nu.iter().map(|&v| v >= t).collect();
    let mut p = Partition::from_zeta(layer, zeta);
    p.nu = nu.to_vec();
    Ok((p, t))
}
