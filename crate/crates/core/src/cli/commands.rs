use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use super::config::{federation_config, synth_config, ConfigMap};
use super::manifest::ArtifactWriter;
use crate::analysis::{neuron_entropy_report, ProbeSummary};
use crate::datagen::{
    federate_pool, generate_synthetic_federation, read_federation_csv, write_federation_csv, ClientDataset, LabeledData,
};
use crate::error::{config_err, contract, Error, Result};
use crate::federation::{
    predict_new_client_ensemble, predict_new_client_localtrain, run_experiment, ExperimentResult,
};
use crate::model::{checkpoint, gram_matrices, normalize_rows, ntk_limit_estimate, LocalTraining, SplitParams};
use crate::numerics::{derive_rng_stream, DenseMatrix};

pub const METRICS_HEADER: [&str; 7] =
    ["round", "algorithm", "seed", "train_loss", "weighted_acc", "min_client_acc", "max_client_acc"];
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED: &str = "config.resolved";
pub const DATA: &str = "data.csv";
pub const HOLDOUT: &str = "holdout.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeMode {
    Entropy,
    Gram,
    NewClient,
}

impl AnalyzeMode {
    pub fn name(&self) -> &'static str {
        match self {
            AnalyzeMode::Entropy => "entropy",
            AnalyzeMode::Gram => "gram",
            AnalyzeMode::NewClient => "new-client",
        }
    }
}

impl std::str::FromStr for AnalyzeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "entropy" => Ok(AnalyzeMode::Entropy),
            "gram" => Ok(AnalyzeMode::Gram),
            "new-client" => Ok(AnalyzeMode::NewClient),
            other => Err(format!("unknown mode `{other}` (entropy | gram | new-client)")),
        }
    }
}

fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn federation_bytes(clients: &[ClientDataset]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_federation_csv(&mut buf, clients)?;
    Ok(buf)
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))
}

fn json_bytes(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn resolved_text(map: &ConfigMap) -> String {
    map.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Read a pooled CSV with header `y,x0,..`.
fn read_pool(path: &Path) -> Result<LabeledData> {
    let bytes = read_artifact(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let headers = r.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "y" {
        return Err(Error::Data(format!("{}: expected header `y,x0,...`", path.display())));
    }
    let d = headers.len() - 1;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| Error::Data(format!("{}: bad number `{s}` on row {}", path.display(), line + 2)))
        };
        ys.push(parse(&rec[0])?);
        for k in 0..d {
            xs.push(parse(&rec[k + 1])?);
        }
    }
    LabeledData::new(DenseMatrix::from_vec(ys.len(), d, xs)?, ys)
}

/// Generate or partition a dataset according to `data.kind` and write it
/// (plus `holdout.csv` when held-out synthetic clients are requested).
pub fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let map = ConfigMap::load(config)?;
    let seed: u64 = map.get("seed")?;
    let holdout: usize = map.get("synth.holdout")?;
    let kind = map.raw("data.kind").to_string();
    let (clients, held) = match kind.as_str() {
        "synth" => {
            let mut cfg = synth_config(&map)?;
            let c = cfg.clients;
            cfg.clients += holdout;
            let (mut all, _) = generate_synthetic_federation(&cfg)?;
            let held = all.split_off(c);
            (all, held)
        }
        "dirichlet" | "iid" => {
            if holdout > 0 {
                return Err(config_err("synth.holdout", "held-out clients require data.kind = synth"));
            }
            let pool = match map.raw("pool.path") {
                "" => {
                    let (all, _) = generate_synthetic_federation(&synth_config(&map)?)?;
                    pooled(&all)?
                }
                p => read_pool(Path::new(p))?,
            };
            let pi = if kind == "dirichlet" { Some(map.get::<f64>("pool.pi")?) } else { None };
            let ratio: f64 = map.get("pool.train_ratio")?;
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(config_err("pool.train_ratio", "must lie in (0,1]"));
            }
            let mut rng = derive_rng_stream(seed, &[("pool", 0)]);
            (federate_pool(&pool, map.get("pool.clients")?, pi, ratio, &mut rng)?, Vec::new())
        }
        other => return Err(config_err("data.kind", format!("expected synth, dirichlet or iid, got `{other}`"))),
    };
    let mut w = ArtifactWriter::new(out)?;
    w.write(DATA, &federation_bytes(&clients)?)?;
    if !held.is_empty() {
        w.write(HOLDOUT, &federation_bytes(&held)?)?;
    }
    w.write(RESOLVED, resolved_text(&map).as_bytes())?;
    w.finish(MANIFEST, "gen-data", seed, map.resolved())?;
    info!("wrote {} clients to {}", clients.len(), out.display());
    Ok(())
}

/// Every client's train and test rows stacked into one pool.
pub fn pooled(clients: &[ClientDataset]) -> Result<LabeledData> {
    let d = clients.first().map(ClientDataset::input_dim).ok_or_else(|| contract("no clients to pool"))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for c in clients {
        for (x, y) in [(&c.x_train, &c.y_train), (&c.x_test, &c.y_test)] {
            xs.extend_from_slice(x.values());
            ys.extend_from_slice(y);
        }
    }
    LabeledData::new(DenseMatrix::from_vec(ys.len(), d, xs)?, ys)
}

/// `train` with the data path taken from `--data` or `data.path`.
pub fn cmd_train(config: &Path, data: Option<&Path>, out: &Path, workers: Option<usize>) -> Result<ExperimentResult> {
    let mut map = ConfigMap::load(config)?;
    if let Some(w) = workers {
        map.set("workers", w.to_string())?;
    }
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None if !map.raw("data.path").is_empty() => PathBuf::from(map.raw("data.path")),
        None => return Err(Error::MissingArtifact("no dataset: pass --data or set data.path".into())),
    };
    let bytes = read_artifact(&data_path)?;
    let holdout = match map.raw("newclient.data") {
        "" => {
            let sibling = data_path.with_file_name(HOLDOUT);
            sibling.exists().then(|| read_artifact(&sibling)).transpose()?
        }
        p => Some(read_artifact(Path::new(p))?),
    };
    train_into(&map, &bytes, holdout.as_deref(), out, "train")
}

/// Run one experiment on CSV `data` and write a complete run directory.
pub fn train_into(
    map: &ConfigMap,
    data: &[u8],
    holdout: Option<&[u8]>,
    out: &Path,
    command: &str,
) -> Result<ExperimentResult> {
    let clients = read_federation_csv(data)?;
    let d = clients.first().map(ClientDataset::input_dim).ok_or_else(|| Error::Data("dataset has no clients".into()))?;
    let cfg = federation_config(map, d)?;
    let mut w = ArtifactWriter::new(out)?;
    let result = run_experiment(&cfg, &clients)?;
    let alg = cfg.algorithm.name();

    let records = &result.records[1..];
    let metrics: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                alg.to_string(),
                cfg.seed.to_string(),
                format!("{}", r.train_loss),
                format!("{}", r.weighted_acc),
                format!("{}", r.min_client_acc),
                format!("{}", r.max_client_acc),
            ]
        })
        .collect();
    w.write("metrics.csv", &csv_bytes(&METRICS_HEADER, &metrics)?)?;

    let per_client: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| {
                vec![r.round.to_string(), c.client_id.to_string(), c.n_train.to_string(), format!("{}", c.test_acc)]
            })
        })
        .collect();
    w.write("clients.csv", &csv_bytes(&["round", "client_id", "n_c", "test_acc"], &per_client)?)?;

    let stability: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| {
            r.partitions.iter().map(move |p| vec![r.round.to_string(), p.layer.to_string(), format!("{}", p.stability)])
        })
        .collect();
    w.write("stability.csv", &csv_bytes(&["round", "layer", "fraction_unchanged"], &stability)?)?;

    let snapshots: Vec<_> = records.iter().map(|r| json!({ "round": r.round, "layers": r.partitions })).collect();
    let partition = json!({ "algorithm": alg, "initial": result.records[0].partitions, "rounds": snapshots });
    w.write("partition.json", &json_bytes(&partition)?)?;

    w.write("checkpoints/server.json", checkpoint::to_json(&result.state.server)?.as_bytes())?;
    for (c, p) in clients.iter().zip(&result.state.clients) {
        w.write(&format!("checkpoints/client_{}.json", c.client_id), checkpoint::to_json(p)?.as_bytes())?;
    }
    w.write(DATA, data)?;
    if let Some(h) = holdout {
        w.write(HOLDOUT, h)?;
    }
    w.write(RESOLVED, resolved_text(map).as_bytes())?;
    w.finish(MANIFEST, command, cfg.seed, map.resolved())?;
    info!("{alg}: {} rounds written to {}", cfg.rounds, out.display());
    Ok(result)
}

struct RunDir {
    map: ConfigMap,
    clients: Vec<ClientDataset>,
    server: SplitParams,
    models: Vec<SplitParams>,
}

fn load_run(run: &Path, overlay: Option<&Path>) -> Result<RunDir> {
    let mut missing = Vec::new();
    for name in [MANIFEST, RESOLVED, DATA, "checkpoints/server.json"] {
        if !run.join(name).is_file() {
            missing.push(name.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!("{} lacks {}", run.display(), missing.join(", "))));
    }
    let mut map = ConfigMap::load(&run.join(RESOLVED))?;
    if let Some(p) = overlay {
        map = map.merged(&ConfigMap::load(p)?);
    }
    let clients = read_federation_csv(read_artifact(&run.join(DATA))?.as_slice())?;
    let paths: Vec<PathBuf> =
        clients.iter().map(|c| run.join(format!("checkpoints/client_{}.json", c.client_id))).collect();
    let absent: Vec<String> =
        paths.iter().filter(|p| !p.is_file()).map(|p| p.strip_prefix(run).unwrap_or(p).display().to_string()).collect();
    if !absent.is_empty() {
        return Err(Error::MissingArtifact(format!("{} lacks {}", run.display(), absent.join(", "))));
    }
    let models = paths.iter().map(|p| checkpoint::load(p)).collect::<Result<_>>()?;
    let server = checkpoint::load(&run.join("checkpoints/server.json"))?;
    Ok(RunDir { map, clients, server, models })
}

/// Post-hoc analysis of a run directory; outputs go to `out` (default: the run directory).
pub fn cmd_analyze(run: &Path, mode: AnalyzeMode, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let r = load_run(run, config)?;
    let seed: u64 = r.map.get("seed")?;
    let mut w = ArtifactWriter::new(out.unwrap_or(run))?;
    match mode {
        AnalyzeMode::Entropy => {
            let layer: usize = r.map.get("entropy.layer")?;
            let k: usize = r.map.get("entropy.k")?;
            let summary: ProbeSummary = r.map.get("entropy.summary")?;
            let probes: Vec<&DenseMatrix> =
                r.clients.iter().map(|c| if c.n_test() > 0 { &c.x_test } else { &c.x_train }).collect();
            let report = neuron_entropy_report(&r.models, &probes, layer, k, summary)?;
            let rows: Vec<Vec<String>> =
                report.entropies.iter().enumerate().map(|(j, h)| vec![j.to_string(), format!("{h}")]).collect();
            w.write("entropy.csv", &csv_bytes(&["neuron_id", "entropy"], &rows)?)?;
            info!("entropy variance over {} neurons: {}", rows.len(), report.variance());
        }
        AnalyzeMode::Gram => {
            let value = gram_report(&r, seed)?;
            w.write("gram.json", &json_bytes(&value)?)?;
        }
        AnalyzeMode::NewClient => {
            let path = match r.map.raw("newclient.data") {
                "" => run.join(HOLDOUT),
                p => PathBuf::from(p),
            };
            let held = read_federation_csv(read_artifact(&path)?.as_slice())?;
            if held.is_empty() {
                return Err(Error::Data(format!("{} holds no held-out clients", path.display())));
            }
            let opts = LocalTraining {
                epochs: r.map.get("newclient.epochs")?,
                batch_size: r.map.get("newclient.batch_size")?,
                lr: r.map.get("newclient.lr")?,
            };
            let freeze = r.map.get_bool("newclient.freeze_shared")?;
            let rows = new_client_rows(&r.server, &r.models, &held, &opts, freeze, seed)?;
            let header = ["client_id", "n_train", "n_test", "baseline_acc", "localtrain_acc", "ensemble_acc"];
            w.write("newclient.csv", &csv_bytes(&header, &rows)?)?;
        }
    }
    let name = format!("analysis-{}.manifest.json", mode.name());
    w.finish(&name, &format!("analyze --mode {}", mode.name()), seed, r.map.resolved())?;
    Ok(())
}

fn gram_report(r: &RunDir, seed: u64) -> Result<serde_json::Value> {
    let budget: usize = r.map.get("gram.max_samples")?;
    let mc: usize = r.map.get("gram.mc_samples")?;
    let used: Vec<usize> = (0..r.clients.len()).filter(|&c| r.clients[c].n_train() > 0).collect();
    let per = (budget / used.len().max(1)).max(1);
    let (mut rows, mut sets) = (Vec::new(), Vec::new());
    for &c in &used {
        let take = per.min(r.clients[c].n_train());
        let start = rows.len();
        rows.extend((0..take).map(|i| r.clients[c].x_train.row(i).to_vec()));
        sets.push((start..start + take).collect::<Vec<_>>());
    }
    let d = r.server.input_dim();
    let x = normalize_rows(&DenseMatrix::from_vec(rows.len(), d, rows.concat())?);
    let zeta: Vec<bool> = match &r.server.partitions[0] {
        Some(p) => p.zeta.clone(),
        None => vec![true; r.server.hidden[0].rows()],
    };
    // shared rows are the server's; personalized rows stay client-owned
    let weights: Vec<DenseMatrix> = used
        .iter()
        .map(|&c| {
            let mut w = r.models[c].hidden[0].clone();
            for (j, _) in zeta.iter().enumerate().filter(|(_, s)| **s) {
                w.set_row(j, r.server.hidden[0].row(j));
            }
            w
        })
        .collect();
    let refs: Vec<&DenseMatrix> = weights.iter().collect();
    let finite = gram_matrices(&x, &sets, &refs, &zeta)?;
    let mut rng = derive_rng_stream(seed, &[("gram", 0)]);
    let limit = ntk_limit_estimate(&x, &sets, mc, &mut rng)?;
    Ok(json!({
        "samples": x.rows(),
        "clients": used.len(),
        "mc_samples": limit.mc_samples,
        "lambda_s": limit.lambda_shared,
        "lambda_p": limit.lambda_personal,
        "lambda_s_se": limit.lambda_shared_se,
        "lambda_p_se": limit.lambda_personal_se,
        "ordering_holds": limit.ordering_holds(),
        "finite_width": {
            "shared_units": zeta.iter().filter(|s| **s).count(),
            "personal_units": zeta.iter().filter(|s| !**s).count(),
            "lambda_s": finite.lambda_shared,
            "lambda_p": finite.lambda_personal,
            "ordering_holds": finite.ordering_holds(),
        },
    }))
}

/// Baseline (fresh personalized rows, no training), LocalTrain and Ensemble
/// accuracy for each held-out client.
pub fn new_client_rows(
    server: &SplitParams,
    models: &[SplitParams],
    held: &[ClientDataset],
    opts: &LocalTraining,
    freeze_shared: bool,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let root = derive_rng_stream(seed, &[("newclient", 0)]);
    let baseline_opts = LocalTraining { epochs: 0, ..*opts };
    held.iter()
        .map(|c| {
            let stream = root.child("client", c.client_id as u64);
            let base = predict_new_client_localtrain(server, c, &baseline_opts, freeze_shared, &mut stream.clone())?;
            let local = predict_new_client_localtrain(server, c, opts, freeze_shared, &mut stream.clone())?;
            let ens = predict_new_client_ensemble(models, c)?;
            Ok(vec![
                c.client_id.to_string(),
                c.n_train().to_string(),
                c.n_test().to_string(),
                format!("{}", base.accuracy),
                format!("{}", local.accuracy),
                format!("{}", ens.accuracy),
            ])
        })
        .collect()
}

struct MetricsRow {
    algorithm: String,
    seed: String,
    round: usize,
    values: [f64; 4],
}

fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>> {
    let path = run.join("metrics.csv");
    let bytes = read_artifact(&path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Data(format!("{}: incompatible schema `{}`", path.display(), header.join(","))));
    }
    let bad = |what: &str| Error::Data(format!("{}: bad {what}", path.display()));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
            Ok(MetricsRow {
                algorithm: rec[1].to_string(),
                seed: rec[2].to_string(),
                round: rec[0].parse().map_err(|_| bad("round"))?,
                values: [num(3)?, num(4)?, num(5)?, num(6)?],
            })
        })
        .collect()
}

/// Merge the metrics of several runs; differences are taken against the first run.
pub fn cmd_compare(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.len() < 2 {
        return Err(contract(format!("compare needs at least 2 run directories, got {}", runs.len())));
    }
    let all: Vec<Vec<MetricsRow>> = runs.iter().map(|r| read_metrics(r)).collect::<Result<_>>()?;
    let reference: BTreeMap<usize, [f64; 4]> = all[0].iter().map(|m| (m.round, m.values)).collect();
    let mut rows = Vec::new();
    for (run, metrics) in runs.iter().zip(&all) {
        for m in metrics {
            let mut row = vec![run.display().to_string(), m.algorithm.clone(), m.seed.clone(), m.round.to_string()];
            row.extend(m.values.iter().map(|v| format!("{v}")));
            match reference.get(&m.round) {
                Some(base) => row.extend([format!("{}", m.values[0] - base[0]), format!("{}", m.values[1] - base[1])]),
                None => row.extend([String::new(), String::new()]),
            }
            rows.push(row);
        }
    }
    let header = [
        "run",
        "algorithm",
        "seed",
        "round",
        "train_loss",
        "weighted_acc",
        "min_client_acc",
        "max_client_acc",
        "train_loss_diff",
        "weighted_acc_diff",
    ];
    let mut w = ArtifactWriter::new(out)?;
    w.write("compare.csv", &csv_bytes(&header, &rows)?)?;
    let mut config = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        config.insert(format!("run.{i}"), r.display().to_string());
    }
    w.finish(MANIFEST, "compare", 0, config)?;
    Ok(())
}

/// Cartesian product of the `sweep.*` keys; each grid point is trained into
/// `out/point_NNN` and summarized as one row of `sweep.csv`.
pub fn cmd_sweep(config: &Path, data: Option<&Path>, out: &Path, workers: Option<usize>) -> Result<()> {
    let full = ConfigMap::load(config)?;
    let sweeps = full.sweeps();
    if sweeps.is_empty() {
        return Err(contract("sweep config has no `sweep.<key>` entries"));
    }
    let mut base = full.without_sweeps();
    if let Some(w) = workers {
        base.set("workers", w.to_string())?;
    }
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None if !base.raw("data.path").is_empty() => PathBuf::from(base.raw("data.path")),
        None => return Err(Error::MissingArtifact("no dataset: pass --data or set data.path".into())),
    };
    let bytes = read_artifact(&data_path)?;
    let mut grid: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in &sweeps {
        grid = grid.iter().flat_map(|g| values.iter().map(move |v| [g.clone(), vec![v.clone()]].concat())).collect();
    }
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(sweeps.iter().map(|(k, _)| k.clone()));
    header.extend(["algorithm", "seed", "rounds", "train_loss", "weighted_acc", "min_client_acc", "max_client_acc", "loss_auc"].map(String::from));
    let mut rows = Vec::new();
    for (i, point) in grid.iter().enumerate() {
        let mut map = base.clone();
        for ((k, _), v) in sweeps.iter().zip(point) {
            map.set(k, v.clone())?;
        }
        let dir = out.join(format!("point_{i:03}"));
        let res = train_into(&map, &bytes, None, &dir, "compare --sweep")?;
        let last = res.records.last().expect("round 0 record");
        let auc: f64 = res.records[1..].iter().map(|r| r.train_loss).sum();
        let mut row = vec![i.to_string()];
        row.extend(point.iter().cloned());
        row.extend([
            map.raw("algorithm").to_string(),
            map.raw("seed").to_string(),
            last.round.to_string(),
            format!("{}", last.train_loss),
            format!("{}", last.weighted_acc),
            format!("{}", last.min_client_acc),
            format!("{}", last.max_client_acc),
            format!("{auc}"),
        ]);
        rows.push(row);
        if res.records.len() == 1 {
            warn!("grid point {i} ran zero rounds");
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = ArtifactWriter::new(out)?;
    w.write("sweep.csv", &csv_bytes(&header_refs, &rows)?)?;
    let mut cfg = base.resolved();
    for (k, v) in &sweeps {
        cfg.insert(format!("sweep.{k}"), v.join(" | "));
    }
    w.finish(MANIFEST, "compare --sweep", base.get("seed")?, cfg)?;
    Ok(())
}
