//! Communication rounds: broadcast, local training, aggregation and, for the
//! factor-analysis variants, the choice of which hidden units are shared.

mod newclient;
mod ops;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{stability_fraction, weighted_accuracy};
use crate::datagen::ClientDataset;
use crate::error::{config_err, contract, Error, Result};
use crate::facsplit::{decompose, FactorConfig, FactorInput, Partition, TauSpec};
use crate::model::{
    init_params, run_local_epochs, split_delta, Freeze, LocalTraining, LocalUpdate, ModelConfig,
    SharedDelta, SplitParams,
};
use crate::numerics::{derive_rng_stream, DenseMatrix, RngStream};

pub use newclient::{predict_new_client_ensemble, predict_new_client_localtrain, NewClientPrediction};
pub use ops::{aggregate_shared, apply_global_update, broadcast_shared, mask_group, sample_clients, Group};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    /// Split fixed to the known generating partition.
    FedSplitTrue,
    FedFacStatic,
    FedFacDynamic,
    /// Same shared count per layer as static FedFac, placement drawn at random.
    RandomSplit,
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::FedSplitTrue,
        Algorithm::FedFacStatic,
        Algorithm::FedFacDynamic,
        Algorithm::RandomSplit,
        Algorithm::LocalOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedSplitTrue => "fedsplit_true",
            Algorithm::FedFacStatic => "fedfac_static",
            Algorithm::FedFacDynamic => "fedfac_dynamic",
            Algorithm::RandomSplit => "random_split",
            Algorithm::LocalOnly => "local_only",
        }
    }

    fn splits(&self) -> bool {
        !matches!(self, Algorithm::FedAvg | Algorithm::LocalOnly)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config_err("algorithm", format!("unknown algorithm `{s}`")))
    }
}

/// Clients per round, as a count or as a fraction of the federation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Count(usize),
    Rate(f64),
}

impl Participation {
    pub fn resolve(&self, clients: usize) -> Result<usize> {
        let k = match *self {
            Participation::Count(k) => k,
            Participation::Rate(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(config_err("participation", "rate must lie in (0,1]"));
                }
                ((r * clients as f64).ceil() as usize).max(1)
            }
        };
        if k == 0 || k > clients {
            return Err(config_err(
                "participation",
                format!("{k} clients per round is outside 1..={clients}"),
            ));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `n_k / Σ n_k` over the sampled clients.
    SampleSize,
    /// `1 / |S_t|`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub participation: Participation,
    pub local: LocalTraining,
    pub eta_g: f64,
    /// Hidden layers whose units may be personalized (Λ).
    pub split_layers: Vec<usize>,
    pub factor: FactorConfig,
    pub weighting: Weighting,
    pub seed: u64,
    /// Local epochs each client runs before the initial factor analysis.
    pub init_local_epochs: usize,
    pub workers: usize,
    pub model: ModelConfig,
    /// Generating `ζ` for each split layer, required by `fedsplit_true`.
    pub true_zeta: Option<Vec<Vec<bool>>>,
    /// Overrides the shared count per split layer for `random_split`.
    pub random_shared: Option<Vec<usize>>,
}

impl FederationConfig {
    /// Defaults for a one-hidden-layer model with the given widths.
    pub fn new(algorithm: Algorithm, model: ModelConfig) -> Self {
        Self {
            algorithm,
            rounds: 50,
            participation: Participation::Rate(1.0),
            local: LocalTraining { epochs: 1, batch_size: 20, lr: 0.05 },
            eta_g: 1.0,
            split_layers: vec![0],
            factor: FactorConfig::default(),
            weighting: Weighting::SampleSize,
            seed: 0,
            init_local_epochs: 5,
            workers: 1,
            model,
            true_zeta: None,
            random_shared: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.factor.validate()?;
        if !(self.eta_g > 0.0) {
            return Err(config_err("eta_g", "must be positive"));
        }
        if self.local.epochs == 0 {
            return Err(config_err("local.epochs", "must be at least 1"));
        }
        if self.local.batch_size == 0 {
            return Err(config_err("local.batch_size", "must be at least 1"));
        }
        if !(self.local.lr >= 0.0) {
            return Err(config_err("local.lr", "must be non-negative"));
        }
        if self.workers == 0 {
            return Err(config_err("workers", "must be at least 1"));
        }
        let nh = self.model.num_hidden();
        if let Some(&l) = self.split_layers.iter().find(|&&l| l >= nh) {
            return Err(config_err(
                "split_layers",
                format!("layer {l} is not a hidden layer (model has {nh}); the output head is always shared"),
            ));
        }
        let mut sorted = self.split_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.split_layers.len() {
            return Err(config_err("split_layers", "layers must be distinct"));
        }
        if self.algorithm == Algorithm::FedSplitTrue {
            let zetas = self
                .true_zeta
                .as_ref()
                .ok_or_else(|| config_err("true_personal_units", "fedsplit_true needs the true partition"))?;
            if zetas.len() != self.split_layers.len() {
                return Err(config_err("true_personal_units", "one partition per split layer required"));
            }
            for (z, &l) in zetas.iter().zip(&self.split_layers) {
                if z.len() != self.model.hidden_width(l) {
                    return Err(config_err("true_personal_units", format!("width mismatch on layer {l}")));
                }
            }
        }
        if let Some(counts) = &self.random_shared {
            if counts.len() != self.split_layers.len() {
                return Err(config_err("random_shared", "one count per split layer required"));
            }
            for (&k, &l) in counts.iter().zip(&self.split_layers) {
                if k > self.model.hidden_width(l) {
                    return Err(config_err("random_shared", format!("{k} exceeds the width of layer {l}")));
                }
            }
        }
        Ok(())
    }

    fn effective_split_layers(&self) -> Vec<usize> {
        if self.algorithm.splits() {
            self.split_layers.clone()
        } else {
            Vec::new()
        }
    }
}

/// Partition of one layer at the end of a round, with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSnapshot {
    pub layer: usize,
    pub zeta: Vec<bool>,
    pub nu: Vec<f64>,
    /// Resolved threshold; absent when the partition did not come from factor analysis.
    pub tau: Option<f64>,
    pub num_factors: Option<usize>,
    pub kappa: Option<f64>,
    /// Hamming distance to the previous round's `ζ`.
    pub flips: usize,
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean over clients of each client's training loss after the round.
    pub train_loss: f64,
    pub clients: Vec<ClientEval>,
    /// `Σ n_c·acc_c / Σ n_c` with `n_c` the client's training-set size.
    pub weighted_acc: f64,
    pub min_client_acc: f64,
    pub max_client_acc: f64,
    pub partitions: Vec<PartitionSnapshot>,
}

impl RoundRecord {
    /// Mean stability over split layers (1 when nothing is split).
    pub fn stability(&self) -> f64 {
        if self.partitions.is_empty() {
            return 1.0;
        }
        self.partitions.iter().map(|p| p.stability).sum::<f64>() / self.partitions.len() as f64
    }
}

/// Server copy plus every client's own copy.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    /// Authoritative for shared rows, non-split layers and the head.
    pub server: SplitParams,
    /// Indexed like the input dataset list.
    pub clients: Vec<SplitParams>,
    pub round: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub state: FederationState,
}

/// Run `cfg.rounds` communication rounds; see [`run_experiment_with_hook`].
pub fn run_experiment(cfg: &FederationConfig, data: &[ClientDataset]) -> Result<ExperimentResult> {
    run_experiment_with_hook(cfg, data, &mut |_, _| {})
}

/// Like [`run_experiment`], calling `hook(t, state)` after initialization
/// (`t = 0`) and after each round's aggregation, before evaluation.
pub fn run_experiment_with_hook(
    cfg: &FederationConfig,
    data: &[ClientDataset],
    hook: &mut dyn FnMut(usize, &mut FederationState),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("no clients"));
    }
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let ok = data[i].n_train() > 0;
            if !ok {
                warn!("client {} has no training data and is excluded", data[i].client_id);
            }
            ok
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data("every client has an empty training set".into()));
    }
    if let Some(c) = data.iter().find(|c| c.input_dim() != cfg.model.input_dim()) {
        return Err(Error::Data(format!(
            "client {} has {} features, model expects {}",
            c.client_id,
            c.input_dim(),
            cfg.model.input_dim()
        )));
    }
    let k = cfg.participation.resolve(eligible.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| contract(format!("worker pool: {e}")))?;

    let root = derive_rng_stream(cfg.seed, &[("federation", 0)]);
    let layers = cfg.effective_split_layers();
    let initial = init_params(&cfg.model, &layers, &mut root.child("init", 0))?;
    let (partitions, snapshots) = pool.install(|| initial_partitions(cfg, data, &eligible, &initial, &root))?;

    let mut server = initial.clone();
    for p in partitions {
        server.set_partition(p)?;
    }
    let clients = data
        .iter()
        .map(|c| {
            let mut p = server.clone();
            p.client_id = Some(c.client_id);
            p
        })
        .collect();
    let mut state = FederationState { server, clients, round: 0 };
    hook(0, &mut state);

    let mut records = Vec::with_capacity(cfg.rounds + 1);
    records.push(pool.install(|| evaluate(&state, data, &eligible, 0, Vec::new(), snapshots))?);

    for t in 1..=cfg.rounds {
        let round_rng = root.child("round", t as u64);
        let picked = sample_clients(eligible.len(), k, &mut round_rng.child("sample", 0))?;
        let sampled: Vec<usize> = picked.iter().map(|&i| eligible[i]).collect();
        let snapshots = pool.install(|| run_round(cfg, data, &mut state, &sampled, &round_rng))?;
        state.round = t;
        hook(t, &mut state);
        let ids = sampled.iter().map(|&i| data[i].client_id).collect();
        records.push(pool.install(|| evaluate(&state, data, &eligible, t, ids, snapshots))?);
    }
    Ok(ExperimentResult { records, state })
}

fn local_update(
    cfg: &FederationConfig,
    params: &SplitParams,
    client: &ClientDataset,
    epochs: usize,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    let opts = LocalTraining { epochs, ..cfg.local };
    run_local_epochs(params, &client.x_train, &client.y_train, &opts, Freeze::Nothing, rng)
}

/// Factor-analysis input of one layer for each update.
fn factor_inputs<'a>(cfg: &FactorConfig, updates: &'a [LocalUpdate], layer: usize) -> Vec<&'a DenseMatrix> {
    updates
        .iter()
        .map(|u| match cfg.input {
            FactorInput::Weights => &u.params.hidden[layer],
            FactorInput::Deltas => &u.delta.hidden[layer],
        })
        .collect()
}

fn snapshot_from_decomposition(d: &crate::facsplit::Decomposition, prev: Option<&[bool]>) -> PartitionSnapshot {
    snapshot(&d.partition, Some(d.tau), Some(d.num_factors), Some(d.kappa), prev)
}

fn snapshot(
    p: &Partition,
    tau: Option<f64>,
    num_factors: Option<usize>,
    kappa: Option<f64>,
    prev: Option<&[bool]>,
) -> PartitionSnapshot {
    let (flips, stability) = match prev {
        Some(z) => (
            z.iter().zip(&p.zeta).filter(|(a, b)| a != b).count(),
            stability_fraction(z, &p.zeta).expect("equal widths"),
        ),
        None => (0, 1.0),
    };
    PartitionSnapshot {
        layer: p.layer,
        zeta: p.zeta.clone(),
        nu: p.nu.clone(),
        tau: tau.filter(|t| t.is_finite()),
        num_factors,
        kappa,
        flips,
        stability,
    }
}

fn initial_partitions(
    cfg: &FederationConfig,
    data: &[ClientDataset],
    eligible: &[usize],
    initial: &SplitParams,
    root: &RngStream,
) -> Result<(Vec<Partition>, Vec<PartitionSnapshot>)> {
    let layers = cfg.effective_split_layers();
    let mut parts = Vec::new();
    let mut snaps = Vec::new();
    match cfg.algorithm {
        Algorithm::FedAvg | Algorithm::LocalOnly => {}
        Algorithm::FedSplitTrue => {
            let zetas = cfg.true_zeta.as_ref().expect("validated");
            for (z, &l) in zetas.iter().zip(&layers) {
                let p = Partition::from_zeta(l, z.clone());
                snaps.push(snapshot(&p, None, None, None, None));
                parts.push(p);
            }
        }
        Algorithm::FedFacStatic | Algorithm::FedFacDynamic | Algorithm::RandomSplit => {
            let fixed = match cfg.factor.tau {
                TauSpec::Infinity => Some(false),
                TauSpec::NegInfinity => Some(true),
                _ => None,
            };
            let needs_fa = fixed.is_none()
                && !(cfg.algorithm == Algorithm::RandomSplit && cfg.random_shared.is_some());
            let decomps = if needs_fa {
                if eligible.len() < 2 {
                    return Err(contract("factor analysis needs at least 2 clients with data"));
                }
                let updates: Vec<LocalUpdate> = eligible
                    .par_iter()
                    .map(|&i| {
                        let mut rng = root.child("init-train", data[i].client_id as u64);
                        local_update(cfg, initial, &data[i], cfg.init_local_epochs.max(1), &mut rng)
                    })
                    .collect::<Result<_>>()?;
                layers
                    .iter()
                    .map(|&l| decompose(l, &factor_inputs(&cfg.factor, &updates, l), &cfg.factor).map(Some))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![None; layers.len()]
            };
            for (idx, (&l, d)) in layers.iter().zip(decomps).enumerate() {
                let width = cfg.model.hidden_width(l);
                let (p, snap) = match (d, fixed) {
                    (Some(d), _) => {
                        let s = snapshot_from_decomposition(&d, None);
                        (d.partition, s)
                    }
                    (None, Some(shared)) => {
                        let p = if shared { Partition::all_shared(l, width) } else { Partition::all_personal(l, width) };
                        let tau = if shared { f64::NEG_INFINITY } else { f64::INFINITY };
                        let s = snapshot(&p, Some(tau), None, Some(cfg.factor.kappa), None);
                        (p, s)
                    }
                    (None, None) => {
                        let p = Partition::all_shared(l, width);
                        let s = snapshot(&p, None, None, None, None);
                        (p, s)
                    }
                };
                if cfg.algorithm == Algorithm::RandomSplit {
                    let count = cfg.random_shared.as_ref().map_or(p.n_shared(), |c| c[idx]);
                    let mut rng = root.child("random-split", l as u64);
                    let chosen = rng.sample_without_replacement(width, count);
                    let mut zeta = vec![false; width];
                    for j in chosen {
                        zeta[j] = true;
                    }
                    let rp = Partition::from_zeta(l, zeta);
                    snaps.push(snapshot(&rp, None, None, None, None));
                    parts.push(rp);
                } else {
                    snaps.push(snap);
                    parts.push(p);
                }
            }
        }
    }
    Ok((parts, snaps))
}

fn run_round(
    cfg: &FederationConfig,
    data: &[ClientDataset],
    state: &mut FederationState,
    sampled: &[usize],
    round_rng: &RngStream,
) -> Result<Vec<PartitionSnapshot>> {
    let local_only = cfg.algorithm == Algorithm::LocalOnly;
    if !local_only {
        for &i in sampled {
            broadcast_shared(&state.server, &mut state.clients[i]);
        }
    }
    let before: Vec<SplitParams> = sampled.iter().map(|&i| state.clients[i].clone()).collect();
    let updates: Vec<LocalUpdate> = sampled
        .par_iter()
        .zip(before.par_iter())
        .map(|(&i, params)| {
            let mut rng = round_rng.child("client", data[i].client_id as u64);
            local_update(cfg, params, &data[i], cfg.local.epochs, &mut rng)
        })
        .collect::<Result<_>>()?;

    if local_only {
        for (&i, u) in sampled.iter().zip(updates) {
            state.clients[i] = u.params;
        }
        return Ok(Vec::new());
    }

    let layers = state.server.split_layers();
    let old: Vec<Partition> = layers
        .iter()
        .map(|&l| state.server.partitions[l].clone().expect("split layer"))
        .collect();
    let mut snaps = Vec::with_capacity(layers.len());
    let mut new = old.clone();
    if cfg.algorithm == Algorithm::FedFacDynamic {
        if sampled.len() < 2 {
            warn!("round {}: fewer than 2 sampled clients, partition kept", state.round + 1);
            for p in &old {
                snaps.push(snapshot(p, None, None, None, Some(&p.zeta)));
            }
        } else {
            new.clear();
            for (&l, prev) in layers.iter().zip(&old) {
                let d = decompose(l, &factor_inputs(&cfg.factor, &updates, l), &cfg.factor)?;
                snaps.push(snapshot_from_decomposition(&d, Some(&prev.zeta)));
                new.push(d.partition);
            }
        }
    } else {
        for p in &old {
            snaps.push(snapshot(p, None, None, None, Some(&p.zeta)));
        }
    }

    let weights: Vec<f64> = sampled
        .iter()
        .map(|&i| match cfg.weighting {
            Weighting::SampleSize => data[i].n_train() as f64,
            Weighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();

    // rows that become shared start from the clients' pre-update average
    for (p_old, p_new) in old.iter().zip(&new) {
        let l = p_new.layer;
        for &j in &p_new.shared {
            if p_old.is_shared(j) {
                continue;
            }
            let mut base = vec![0.0; state.server.hidden[l].cols()];
            for (b, &w) in before.iter().zip(&weights) {
                for (acc, v) in base.iter_mut().zip(b.hidden[l].row(j)) {
                    *acc += w / total * v;
                }
            }
            state.server.hidden[l].set_row(j, &base);
        }
    }
    for p in &new {
        state.server.set_partition(p.clone())?;
    }

    let shared: Vec<SharedDelta> = updates.iter().map(|u| split_delta(&u.delta, &state.server).0).collect();
    let refs: Vec<&SharedDelta> = shared.iter().collect();
    let aggregated = aggregate_shared(&refs, &weights)?;
    apply_global_update(&mut state.server, &aggregated, cfg.eta_g)?;

    for (&i, u) in sampled.iter().zip(updates) {
        state.clients[i] = u.params;
    }
    for client in state.clients.iter_mut() {
        for p in &new {
            client.set_partition(p.clone())?;
        }
    }
    for &i in sampled {
        broadcast_shared(&state.server, &mut state.clients[i]);
    }
    Ok(snaps)
}

fn evaluate(
    state: &FederationState,
    data: &[ClientDataset],
    eligible: &[usize],
    round: usize,
    sampled: Vec<usize>,
    partitions: Vec<PartitionSnapshot>,
) -> Result<RoundRecord> {
    let clients: Vec<ClientEval> = eligible
        .par_iter()
        .map(|&i| {
            let p = &state.clients[i];
            let c = &data[i];
            let train_loss = p.loss(&c.x_train, &c.y_train)?;
            let test_acc = if c.n_test() > 0 { p.accuracy(&c.x_test, &c.y_test)? } else { f64::NAN };
            Ok(ClientEval {
                client_id: c.client_id,
                n_train: c.n_train(),
                n_test: c.n_test(),
                train_loss,
                test_acc,
            })
        })
        .collect::<Result<_>>()?;
    let train_loss = clients.iter().map(|c| c.train_loss).sum::<f64>() / clients.len() as f64;
    let tested: Vec<&ClientEval> = clients.iter().filter(|c| c.n_test > 0).collect();
    let (weighted_acc, min_client_acc, max_client_acc) = if tested.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let pairs: Vec<(usize, f64)> = tested.iter().map(|c| (c.n_train, c.test_acc)).collect();
        (
            weighted_accuracy(&pairs)?,
            tested.iter().map(|c| c.test_acc).fold(f64::INFINITY, f64::min),
            tested.iter().map(|c| c.test_acc).fold(f64::NEG_INFINITY, f64::max),
        )
    };
    Ok(RoundRecord {
        round,
        sampled,
        train_loss,
        clients,
        weighted_acc,
        min_client_acc,
        max_client_acc,
        partitions,
    })
}
