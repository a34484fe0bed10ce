//! Flat `key = value` configuration with dotted namespaces.
//!
//! `#` starts a comment when it opens a line or follows whitespace. Every key
//! must appear in [`KEYS`] (or be `sweep.<key>` for a key that does); unknown
//! keys, duplicates and malformed lines are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::SynthConfig;
use crate::error::{config_err, Error, Result};
use crate::facsplit::{FactorConfig, FactorInput, TauSpec};
use crate::federation::{Algorithm, FederationConfig, Participation, Weighting};
use crate::model::{LocalTraining, LossKind, ModelConfig};

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for every random stream"),
    ("workers", "1", "worker threads for per-client work"),
    ("data.kind", "synth", "gen-data source: synth | dirichlet | iid"),
    ("data.path", "", "federation CSV used by train (overridden by --data)"),
    ("synth.clients", "100", "number of clients C"),
    ("synth.d", "100", "input dimension d"),
    ("synth.m", "200", "teacher hidden width m"),
    ("synth.alpha", "0.4", "shared covariate proportion d2/d"),
    ("synth.p", "0.5", "shared unit proportion m2/m"),
    ("synth.n_train", "200", "training samples per client"),
    ("synth.n_test", "50", "test samples per client"),
    ("synth.noise_sd", "1.0", "standard deviation of the label noise"),
    ("synth.holdout", "0", "extra generated clients written to holdout.csv"),
    ("pool.path", "", "pooled CSV (header y,x0,..) for dirichlet/iid; empty pools synthetic samples"),
    ("pool.clients", "100", "clients to partition the pool across"),
    ("pool.pi", "0.1", "Dirichlet concentration for data.kind = dirichlet"),
    ("pool.train_ratio", "0.8", "per-client training share"),
    ("algorithm", "fedfac_dynamic", "fedavg | fedsplit_true | fedfac_static | fedfac_dynamic | random_split | local_only"),
    ("rounds", "50", "communication rounds T"),
    ("participation.clients", "0", "clients per round K (0 = use participation.rate)"),
    ("participation.rate", "1.0", "fraction of clients per round when no count is given"),
    ("local.epochs", "1", "local epochs G per round"),
    ("local.batch_size", "20", "mini-batch size B"),
    ("local.lr", "0.05", "local step size eta_l"),
    ("eta_g", "1.0", "global step size"),
    ("weighting", "sample_size", "aggregation weights: sample_size | uniform"),
    ("split_layers", "0", "comma list of hidden layers that may be split (empty = none)"),
    ("init_local_epochs", "5", "local epochs before the initial factor analysis"),
    ("true_personal_units", "", "fedsplit_true: units 0..m1 are personalized, one m1 per split layer"),
    ("random_shared", "", "random_split: shared count per split layer (empty = match static FedFac)"),
    ("factor.kappa", "0.85", "cumulative eigenvalue share fixing the factor count"),
    ("factor.tau", "q50", "threshold: qNN quantile, absolute value, inf or -inf"),
    ("factor.max_iter", "100", "factor-analysis iteration cap"),
    ("factor.tol", "1e-4", "convergence tolerance on the uniquenesses"),
    ("factor.input", "weights", "factor-analysis input: weights | deltas"),
    ("model.hidden", "200", "comma list of hidden widths"),
    ("model.loss", "bce", "bce | quadratic"),
    ("model.scale_by_sqrt_width", "true", "1/sqrt(width) output prefactors"),
    ("model.train_output_weights", "false", "train the output weights"),
    ("model.init_scale", "1.0", "standard deviation of the weight initialization"),
    ("entropy.k", "3", "nearest-neighbour order"),
    ("entropy.layer", "0", "hidden layer probed"),
    ("entropy.summary", "mean", "per-client scalar: mean | median"),
    ("gram.mc_samples", "2000", "Monte-Carlo draws for the infinite-width kernel"),
    ("gram.max_samples", "200", "data points used (taken evenly across clients)"),
    ("newclient.data", "", "federation CSV of held-out clients"),
    ("newclient.epochs", "5", "LocalTrain epochs G'"),
    ("newclient.lr", "0.05", "LocalTrain step size"),
    ("newclient.batch_size", "20", "LocalTrain batch size"),
    ("newclient.freeze_shared", "true", "keep shared rows fixed during LocalTrain"),
];

pub const SWEEP_PREFIX: &str = "sweep.";

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(config_err(&format!("line {}", n + 1), "empty key"));
            }
            check_known(k)?;
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err(k, "given more than once"));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        check_known(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Overlay `other` on top of `self`.
    pub fn merged(&self, other: &ConfigMap) -> ConfigMap {
        let mut values = self.values.clone();
        values.extend(other.values.iter().map(|(k, v)| (k.clone(), v.clone())));
        ConfigMap { values }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| default_of(key))
            .unwrap_or_else(|| panic!("`{key}` is not a documented key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| config_err(key, format!("cannot parse `{raw}`: {e}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(config_err(key, format!("expected true or false, got `{other}`"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| config_err(key, format!("cannot parse `{s}`: {e}"))))
            .collect()
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Every documented key with its effective value (sweep keys excluded).
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|(k, _, _)| (k.to_string(), self.raw(k).to_string())).collect()
    }

    /// `(key, values)` for each `sweep.<key>`, in key order.
    pub fn sweeps(&self) -> Vec<(String, Vec<String>)> {
        self.values
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(SWEEP_PREFIX)
                    .map(|inner| (inner.to_string(), v.split('|').map(|s| s.trim().to_string()).collect()))
            })
            .collect()
    }

    /// The map with every sweep key removed.
    pub fn without_sweeps(&self) -> ConfigMap {
        let values = self.values.iter().filter(|(k, _)| !k.starts_with(SWEEP_PREFIX)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ConfigMap { values }
    }
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

fn check_known(key: &str) -> Result<()> {
    let base = key.strip_prefix(SWEEP_PREFIX).unwrap_or(key);
    if default_of(base).is_none() {
        return Err(config_err(key, "unknown key"));
    }
    Ok(())
}

pub fn synth_config(map: &ConfigMap) -> Result<SynthConfig> {
    let cfg = SynthConfig {
        clients: map.get("synth.clients")?,
        input_dim: map.get("synth.d")?,
        hidden: map.get("synth.m")?,
        alpha: map.get("synth.alpha")?,
        shared_fraction: map.get("synth.p")?,
        n_train: map.get("synth.n_train")?,
        n_test: map.get("synth.n_test")?,
        noise_sd: map.get("synth.noise_sd")?,
        seed: map.get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config(map: &ConfigMap, input_dim: usize) -> Result<ModelConfig> {
    let hidden: Vec<usize> = map.get_list("model.hidden")?;
    if hidden.is_empty() {
        return Err(config_err("model.hidden", "at least one hidden layer is required"));
    }
    let mut layer_widths = vec![input_dim];
    layer_widths.extend(&hidden);
    layer_widths.push(1);
    let cfg = ModelConfig {
        layer_widths,
        loss: map.get::<LossKind>("model.loss")?,
        scale_by_sqrt_width: map.get_bool("model.scale_by_sqrt_width")?,
        train_output_weights: map.get_bool("model.train_output_weights")?,
        init_scale: map.get("model.init_scale")?,
    };
    if !(cfg.init_scale >= 0.0 && cfg.init_scale.is_finite()) {
        return Err(config_err("model.init_scale", "must be a finite non-negative number"));
    }
    cfg.validate().map_err(|e| config_err("model.hidden", e.to_string()))?;
    Ok(cfg)
}

pub fn factor_config(map: &ConfigMap) -> Result<FactorConfig> {
    let input = match map.raw("factor.input") {
        "weights" => FactorInput::Weights,
        "deltas" => FactorInput::Deltas,
        other => return Err(config_err("factor.input", format!("expected weights or deltas, got `{other}`"))),
    };
    let cfg = FactorConfig {
        kappa: map.get("factor.kappa")?,
        tau: map.get::<TauSpec>("factor.tau")?,
        max_iter: map.get("factor.max_iter")?,
        tol: map.get("factor.tol")?,
        input,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn federation_config(map: &ConfigMap, input_dim: usize) -> Result<FederationConfig> {
    let model = model_config(map, input_dim)?;
    let algorithm: Algorithm = map.get("algorithm")?;
    let split_layers: Vec<usize> = map.get_list("split_layers")?;
    let count: usize = map.get("participation.clients")?;
    let participation = if count > 0 {
        if map.is_set("participation.rate") {
            return Err(config_err("participation.rate", "give either participation.clients or participation.rate"));
        }
        Participation::Count(count)
    } else {
        Participation::Rate(map.get("participation.rate")?)
    };
    let weighting = match map.raw("weighting") {
        "sample_size" => Weighting::SampleSize,
        "uniform" => Weighting::Uniform,
        other => return Err(config_err("weighting", format!("expected sample_size or uniform, got `{other}`"))),
    };
    let true_units: Vec<usize> = map.get_list("true_personal_units")?;
    let true_zeta = if true_units.is_empty() {
        None
    } else {
        if true_units.len() != split_layers.len() {
            return Err(config_err("true_personal_units", "one count per split layer required"));
        }
        let mut zetas = Vec::new();
        for (&m1, &l) in true_units.iter().zip(&split_layers) {
            let width = *model
                .layer_widths
                .get(l + 1)
                .filter(|_| l < model.num_hidden())
                .ok_or_else(|| config_err("split_layers", format!("layer {l} is not a hidden layer")))?;
            if m1 > width {
                return Err(config_err("true_personal_units", format!("{m1} exceeds layer {l} width {width}")));
            }
            zetas.push((0..width).map(|j| j >= m1).collect());
        }
        Some(zetas)
    };
    let random: Vec<usize> = map.get_list("random_shared")?;
    let cfg = FederationConfig {
        algorithm,
        rounds: map.get("rounds")?,
        participation,
        local: LocalTraining {
            epochs: map.get("local.epochs")?,
            batch_size: map.get("local.batch_size")?,
            lr: map.get("local.lr")?,
        },
        eta_g: map.get("eta_g")?,
        split_layers,
        factor: factor_config(map)?,
        weighting,
        seed: map.get("seed")?,
        init_local_epochs: map.get("init_local_epochs")?,
        workers: map.get("workers")?,
        model,
        true_zeta,
        random_shared: if random.is_empty() { None } else { Some(random) },
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = ConfigMap::parse("# header\nseed = 4 # trailing\n\n  factor.tau=q75\nsynth.d = 10#x\n").unwrap();
        assert_eq!(m.get::<u64>("seed").unwrap(), 4);
        assert_eq!(m.raw("factor.tau"), "q75");
        assert_eq!(m.raw("synth.d"), "10#x");
        assert_eq!(m.raw("rounds"), "50");
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let e = ConfigMap::parse("seed = 1\nfoo.bar = 2").unwrap_err().to_string();
        assert!(e.contains("foo.bar"), "{e}");
        assert!(ConfigMap::parse("seed = 1\nseed = 2").is_err());
        let e = ConfigMap::parse("seed 1").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(ConfigMap::parse("sweep.factor.tau = q25 | q50").is_ok());
        assert!(ConfigMap::parse("sweep.nope = 1").is_err());
    }

    #[test]
    fn bad_alpha_names_the_key() {
        let m = ConfigMap::parse("synth.alpha = 1.5").unwrap();
        let e = synth_config(&m).unwrap_err().to_string();
        assert!(e.contains("alpha"), "{e}");
    }

    #[test]
    fn federation_config_from_defaults() {
        let m = ConfigMap::parse("algorithm = fedsplit_true\ntrue_personal_units = 120\nmodel.hidden = 200").unwrap();
        let cfg = federation_config(&m, 100).unwrap();
        assert_eq!(cfg.model.layer_widths, vec![100, 200, 1]);
        let zeta = &cfg.true_zeta.unwrap()[0];
        assert_eq!(zeta.iter().filter(|z| !**z).count(), 120);
        assert_eq!(cfg.factor.tau, TauSpec::Quantile(0.5));
    }

    #[test]
    fn participation_count_and_rate_are_exclusive() {
        let m = ConfigMap::parse("participation.clients = 3\nparticipation.rate = 0.5").unwrap();
        assert!(federation_config(&m, 4).is_err());
    }

    #[test]
    fn sweeps_split_on_bars() {
        let m = ConfigMap::parse("sweep.factor.tau = q25 | q50|q75\nrounds = 3").unwrap();
        assert_eq!(m.sweeps(), vec![("factor.tau".to_string(), vec!["q25".into(), "q50".into(), "q75".into()])]);
        assert!(!m.without_sweeps().is_set("sweep.factor.tau"));
        assert_eq!(m.resolved()["rounds"], "3");
    }
}
