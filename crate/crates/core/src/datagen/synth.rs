//! Synthetic heterogeneous federation.
//!
//! Each client's covariates split into personalized columns `xᵖ ~ N(μ_c, Σ)`
//! (AR(1) covariance with coefficient 0.5) and shared columns `xˢ ~ N(0, I)`.
//! Labels come from a one-hidden-layer ReLU teacher whose first `m1` units are
//! client-specific and whose last `m2` units (and output weights) are common
//! to every client.

use serde::{Deserialize, Serialize};

use super::ClientDataset;
use crate::error::{config_err, Result};
use crate::numerics::{dot, DenseMatrix, RngStream};

const AR1_COEF: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clients: usize,
    pub input_dim: usize,
    pub hidden: usize,
    /// Proportion of shared covariates.
    pub alpha: f64,
    /// Proportion of shared teacher units.
    pub shared_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            input_dim: 100,
            hidden: 200,
            alpha: 0.4,
            shared_fraction: 0.5,
            n_train: 200,
            n_test: 50,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(config_err("synth.clients", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(config_err("synth.d", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(config_err("synth.m", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err("synth.alpha", format!("must lie in [0,1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(config_err(
                "synth.p",
                format!("must lie in [0,1], got {}", self.shared_fraction),
            ));
        }
        if self.n_train == 0 {
            return Err(config_err("synth.n_train", "must be at least 1"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(config_err("synth.noise_sd", "must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Number of shared covariates `round(α·d)`.
    pub fn shared_dims(&self) -> usize {
        ((self.alpha * self.input_dim as f64).round() as usize).min(self.input_dim)
    }

    pub fn personal_dims(&self) -> usize {
        self.input_dim - self.shared_dims()
    }

    /// Number of shared teacher units `round(p·m)`.
    pub fn shared_units(&self) -> usize {
        ((self.shared_fraction * self.hidden as f64).round() as usize).min(self.hidden)
    }

    pub fn personal_units(&self) -> usize {
        self.hidden - self.shared_units()
    }
}

/// Teacher network. Units `0..m1` are personalized, `m1..m` shared; input
/// columns `0..d1` are personalized covariates, `d1..d` shared ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueModel {
    pub personal_dims: usize,
    pub shared_dims: usize,
    /// `m2 × d`, rows `(w^{sp}, w^{ss})`.
    pub shared_weights: DenseMatrix,
    /// Per client `m1 × d`, rows `(w^{pp}_c, w^{ps}_c)`.
    pub personal_weights: Vec<DenseMatrix>,
    pub client_means: Vec<Vec<f64>>,
    /// Output weights over all `m1 + m2` units.
    pub head: Vec<f64>,
}

impl TrueModel {
    pub fn personal_units(&self) -> usize {
        self.head.len() - self.shared_weights.rows()
    }

    pub fn shared_units(&self) -> usize {
        self.shared_weights.rows()
    }

    /// `ζ` of the teacher: `false` for personalized units, `true` for shared.
    pub fn true_zeta(&self) -> Vec<bool> {
        let m1 = self.personal_units();
        (0..self.head.len()).map(|j| j >= m1).collect()
    }

    /// Noise-free teacher output `h*_c(x)`.
    pub fn output(&self, client: usize, x: &[f64]) -> f64 {
        let m1 = self.personal_units();
        let relu = |z: f64| z.max(0.0);
        let personal = &self.personal_weights[client];
        let mut h = 0.0;
        for q in 0..m1 {
            h += self.head[q] * relu(dot(personal.row(q), x));
        }
        for r in 0..self.shared_units() {
            h += self.head[m1 + r] * relu(dot(self.shared_weights.row(r), x));
        }
        h
    }

    /// Client `c`'s full first-layer weights (personalized rows, then shared).
    pub fn client_weights(&self, client: usize) -> DenseMatrix {
        let p = &self.personal_weights[client];
        let mut values = p.values().to_vec();
        values.extend_from_slice(self.shared_weights.values());
        DenseMatrix::from_vec(p.rows() + self.shared_units(), p.cols(), values)
            .expect("teacher weights are consistent")
    }
}

pub fn generate_synthetic_federation(
    cfg: &SynthConfig,
) -> Result<(Vec<ClientDataset>, TrueModel)> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let d1 = cfg.personal_dims();
    let m1 = cfg.personal_units();
    let m2 = cfg.shared_units();
    let root = crate::numerics::derive_rng_stream(cfg.seed, &[("synth", 0)]);

    let mut shared_rng = root.child("shared", 0);
    let mut shared_weights = DenseMatrix::zeros(m2, d);
    for r in 0..m2 {
        let row = shared_weights.row_mut(r);
        for (k, w) in row.iter_mut().enumerate() {
            *w = if k < d1 { shared_rng.uniform(-0.1, 0.1) } else { shared_rng.uniform(-1.0, 1.0) };
        }
    }
    let head = shared_rng.normal_vec(m1 + m2, 1.0);

    let mut personal_weights = Vec::with_capacity(cfg.clients);
    let mut client_means = Vec::with_capacity(cfg.clients);
    let mut clients = Vec::with_capacity(cfg.clients);
    let mut model = TrueModel {
        personal_dims: d1,
        shared_dims: d - d1,
        shared_weights,
        personal_weights: Vec::new(),
        client_means: Vec::new(),
        head,
    };
    for c in 0..cfg.clients {
        let crng = root.child("client", c as u64);
        let mu = crng.child("mean", 0).normal_vec(d1, 1.0);
        let mut wrng = crng.child("weights", 0);
        let mut w = DenseMatrix::zeros(m1, d);
        for q in 0..m1 {
            let row = w.row_mut(q);
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k < d1 { mu[k] + wrng.normal() } else { wrng.uniform(-0.1, 0.1) };
            }
        }
        personal_weights.push(w);
        client_means.push(mu);
    }
    model.personal_weights = personal_weights;
    model.client_means = client_means;

    for c in 0..cfg.clients {
        let crng = root.child("client", c as u64);
        let mut train_rng = crng.child("train", 0);
        let mut test_rng = crng.child("test", 0);
        let (x_train, y_train) = draw_samples(&model, c, cfg.n_train, cfg.noise_sd, &mut train_rng);
        let (x_test, y_test) = draw_samples(&model, c, cfg.n_test, cfg.noise_sd, &mut test_rng);
        clients.push(ClientDataset::new(c, x_train, y_train, x_test, y_test)?);
    }
    Ok((clients, model))
}

/// Draw `n` labelled samples for `client` from the teacher.
pub fn draw_samples(
    model: &TrueModel,
    client: usize,
    n: usize,
    noise_sd: f64,
    rng: &mut RngStream,
) -> (DenseMatrix, Vec<f64>) {
    let d1 = model.personal_dims;
    let d = d1 + model.shared_dims;
    let mu = &model.client_means[client];
    let innov = (1.0 - AR1_COEF * AR1_COEF).sqrt();
    let mut x = DenseMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row_mut(i);
        // AR(1) innovations give Σ_ij = 0.5^|i-j| with unit diagonal
        let mut prev = 0.0;
        for k in 0..d1 {
            let z = rng.normal();
            let e = if k == 0 { z } else { AR1_COEF * prev + innov * z };
            prev = e;
            row[k] = mu[k] + e;
        }
        for v in row.iter_mut().skip(d1) {
            *v = rng.normal();
        }
        let y_star = model.output(client, x.row(i)) + noise_sd * rng.normal();
        y.push(if y_star > 0.0 { 1.0 } else { 0.0 });
    }
    (x, y)
}
