//! CSV datasets, run configuration files and metrics documents.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{SplitSpec, StDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objectives::Metrics;
use crate::tensor::Tensor;
use crate::trainer::EvalTable;

pub const SEED_ENV: &str = "DIFFIRM_SEED";

/// A dataset plus any non-fatal findings made while reading it.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: StDataset,
    pub warnings: Vec<String>,
}

fn parse_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), row, msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

type NodesAndEdges = (Vec<String>, Vec<(usize, usize)>);

/// Node order from the edge list: first appearance, `src` before `dst`. A
/// row with an empty `dst` declares a node without adding an edge.
fn read_adjacency(path: &Path, warnings: &mut Vec<String>) -> Result<NodesAndEdges> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "src" || &header[1] != "dst" {
        return Err(parse_err(path, 1, "adjacency header must be `src,dst`"));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut intern = |id: &str, ids: &mut Vec<String>| -> usize {
        *index.entry(id.to_string()).or_insert_with(|| {
            ids.push(id.to_string());
            ids.len() - 1
        })
    };
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(path, row, e.to_string()))?;
        let src = rec.get(0).unwrap_or("");
        let dst = rec.get(1).unwrap_or("");
        if src.is_empty() {
            return Err(parse_err(path, row, "empty src"));
        }
        let a = intern(src, &mut ids);
        if dst.is_empty() {
            continue;
        }
        let b = intern(dst, &mut ids);
        if a == b {
            return Err(parse_err(path, row, format!("self-loop on node {src}")));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            warnings.push(format!("{}: duplicate edge {src}-{dst} at row {row} ignored", path.display()));
            continue;
        }
        edges.push((a, b));
    }
    Ok((ids, edges))
}

/// Integer timestamps sort numerically, anything else lexicographically
/// (which orders ISO-8601 strings chronologically).
fn sort_timestamps(ts: &mut [String]) {
    if ts.iter().all(|t| t.parse::<i64>().is_ok()) {
        ts.sort_by_key(|t| t.parse::<i64>().expect("checked"));
    } else {
        ts.sort();
    }
}

/// Reads `timestamp,node_id,<features...>` and a `src,dst` edge list.
pub fn ingest_csv(features: &Path, adjacency: &Path, tau: usize, horizon: usize) -> Result<Ingested> {
    let mut warnings = Vec::new();
    let (mut node_ids, edges) = read_adjacency(adjacency, &mut warnings)?;
    let mut rdr = reader(features)?;
    let header = rdr.headers().map_err(|e| parse_err(features, 1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "timestamp" || &header[1] != "node_id" {
        return Err(parse_err(features, 1, "features header must be `timestamp,node_id,<feature>...`"));
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let f = names.len();

    let mut node_index: HashMap<String, usize> = node_ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut cells: HashMap<(String, usize), Vec<f64>> = HashMap::new();
    let mut stamps = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(features, row, e.to_string()))?;
        if rec.len() != f + 2 {
            return Err(parse_err(features, row, format!("expected {} fields, found {}", f + 2, rec.len())));
        }
        let node = match node_index.get(&rec[1]) {
            Some(&n) => n,
            None => {
                warnings.push(format!("node {} has no edges", &rec[1]));
                node_ids.push(rec[1].to_string());
                node_index.insert(rec[1].to_string(), node_ids.len() - 1);
                node_ids.len() - 1
            }
        };
        let mut vals = Vec::with_capacity(f);
        for (k, cell) in rec.iter().skip(2).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(features, row, format!("non-numeric value `{cell}` in column {}", names[k])))?;
            if !v.is_finite() {
                return Err(parse_err(features, row, format!("non-finite value in column {}", names[k])));
            }
            vals.push(v);
        }
        let ts = rec[0].to_string();
        stamps.insert(ts.clone());
        if cells.insert((ts, node), vals).is_some() {
            return Err(parse_err(features, row, format!("duplicate cell for node {}", &rec[1])));
        }
    }
    let mut timestamps: Vec<String> = stamps.into_iter().collect();
    sort_timestamps(&mut timestamps);
    let n = node_ids.len();

    let mut gaps = Vec::new();
    let mut n_gaps = 0usize;
    let mut series = Vec::with_capacity(timestamps.len() * n * f);
    for ts in &timestamps {
        for (node, id) in node_ids.iter().enumerate() {
            match cells.get(&(ts.clone(), node)) {
                Some(v) => series.extend_from_slice(v),
                None => {
                    n_gaps += 1;
                    if gaps.len() < 10 {
                        gaps.push(format!("({ts}, {id})"));
                    }
                }
            }
        }
    }
    if n_gaps > 0 {
        return Err(Error::Contract(format!(
            "feature grid has {n_gaps} missing (timestamp, node) cells; first: {}",
            gaps.join(", ")
        )));
    }
    let graph = Graph::from_edges(n, &edges)?;
    let dataset = StDataset::new(graph, series, names, timestamps, tau, horizon)?.with_node_ids(node_ids)?;
    Ok(Ingested { dataset, warnings })
}

/// Writes the dataset in the layout [`ingest_csv`] reads back.
pub fn export_csv(ds: &StDataset, features: &Path, adjacency: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(adjacency)?;
    w.write_record(["src", "dst"])?;
    for id in &ds.node_ids {
        w.write_record([id.as_str(), ""])?;
    }
    for (i, j) in ds.graph.edges() {
        w.write_record([ds.node_ids[i].as_str(), ds.node_ids[j].as_str()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(features)?;
    let mut header = vec!["timestamp".to_string(), "node_id".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (t, ts) in ds.timestamps.iter().enumerate() {
        for (node, id) in ds.node_ids.iter().enumerate() {
            let mut rec = vec![ts.clone(), id.clone()];
            rec.extend((0..ds.n_features()).map(|c| format!("{}", ds.value(t, node, c))));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything a `train` run needs: data locations, split and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub features: PathBuf,
    pub adjacency: PathBuf,
    pub out_dir: PathBuf,
    /// Subset and order of feature columns to use; all when empty.
    pub feature_names: Vec<String>,
    pub target_channel: usize,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

const RUN_KEYS: [&str; 11] = [
    "features",
    "adjacency",
    "out_dir",
    "feature_names",
    "target_channel",
    "train_frac",
    "val_frac",
    "test_frac",
    "train_steps",
    "val_steps",
    "test_steps",
];

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunKeys {
    features: Option<PathBuf>,
    adjacency: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    feature_names: Vec<String>,
    #[serde(default)]
    target_channel: usize,
    train_frac: Option<f64>,
    val_frac: Option<f64>,
    test_frac: Option<f64>,
    train_steps: Option<usize>,
    val_steps: Option<usize>,
    test_steps: Option<usize>,
}

impl RunConfig {
    /// Parses a flat key-value file. Paths are relative to `base`.
    /// `DIFFIRM_SEED`, when set, replaces the seed.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let cfg_err = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(text).map_err(cfg_err)?;
        let mut run = toml::Table::new();
        for k in RUN_KEYS {
            if let Some(v) = table.remove(k) {
                run.insert(k.to_string(), v);
            }
        }
        let keys: RunKeys = run.try_into().map_err(cfg_err)?;
        let mut train: TrainConfig = table.try_into().map_err(cfg_err)?;
        if let Some(seed) = seed_override()? {
            train.seed = seed;
        }
        train.validate()?;

        let steps = [keys.train_steps, keys.val_steps, keys.test_steps];
        let fracs = [keys.train_frac, keys.val_frac, keys.test_frac];
        let split = match (steps.iter().any(Option::is_some), fracs.iter().any(Option::is_some)) {
            (true, true) => return Err(Error::Config("give split fractions or step counts, not both".into())),
            (true, false) => match steps {
                [Some(train), Some(val), Some(test)] => SplitSpec::Steps { train, val, test },
                _ => return Err(Error::Config("train_steps, val_steps and test_steps go together".into())),
            },
            (false, true) => match fracs {
                [Some(train), Some(val), Some(test)] => SplitSpec::Fractions { train, val, test },
                _ => return Err(Error::Config("train_frac, val_frac and test_frac go together".into())),
            },
            (false, false) => SplitSpec::default(),
        };
        let need = |p: Option<PathBuf>, key: &str| -> Result<PathBuf> {
            p.map(|p| base.join(p)).ok_or_else(|| Error::Config(format!("missing `{key}`")))
        };
        Ok(Self {
            features: need(keys.features, "features")?,
            adjacency: need(keys.adjacency, "adjacency")?,
            out_dir: base.join(keys.out_dir.unwrap_or_else(|| PathBuf::from("out"))),
            feature_names: keys.feature_names,
            target_channel: keys.target_channel,
            split,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Ingests the configured files, reorders features and sets the target.
    pub fn dataset(&self) -> Result<Ingested> {
        let mut ing = ingest_csv(&self.features, &self.adjacency, self.train.tau, self.train.horizon)?;
        if !self.feature_names.is_empty() {
            ing.dataset = select_features(&ing.dataset, &self.feature_names)?;
        }
        ing.dataset = ing.dataset.with_target_channel(self.target_channel)?;
        Ok(ing)
    }
}

/// Reads the seed override from the environment.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn select_features(ds: &StDataset, names: &[String]) -> Result<StDataset> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            ds.feature_names
                .iter()
                .position(|f| f == n)
                .ok_or_else(|| Error::Config(format!("unknown feature `{n}`")))
        })
        .collect::<Result<_>>()?;
    let mut series = Vec::with_capacity(ds.n_steps() * ds.n_nodes() * idx.len());
    for t in 0..ds.n_steps() {
        for node in 0..ds.n_nodes() {
            series.extend(idx.iter().map(|&c| ds.value(t, node, c)));
        }
    }
    StDataset::new(ds.graph.clone(), series, names.to_vec(), ds.timestamps.clone(), ds.tau, ds.horizon)?
        .with_node_ids(ds.node_ids.clone())
}

/// Evaluation output, one document per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub per_horizon: Vec<Metrics>,
    pub average: Metrics,
    #[serde(rename = "final")]
    pub final_step: Metrics,
}

impl MetricsDoc {
    pub fn new(cfg: &TrainConfig, table: &EvalTable) -> Self {
        Self {
            method: cfg.method.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            per_horizon: table.per_horizon.clone(),
            average: table.average,
            final_step: table.final_step,
        }
    }
}

/// SHA-256 over the JSON encoding of any serializable settings.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Lists the files a command wrote together with the settings that produced
/// them, so plain CSV payloads stay plot-ready.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Long-format window features: `window,node,lag,feature,value`.
pub fn write_window_features(path: &Path, x: &Tensor, n_nodes: usize, tau: usize, features: &[String]) -> Result<()> {
    let f = features.len();
    if x.cols() != tau * f || !x.rows().is_multiple_of(n_nodes) {
        return Err(Error::Dimension(format!("features {:?} do not match {tau}x{f}", x.shape())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "node", "lag", "feature", "value"])?;
    for (r, row) in x.data().chunks(tau * f).enumerate() {
        for t in 0..tau {
            for (c, name) in features.iter().enumerate() {
                w.write_record([
                    (r / n_nodes).to_string(),
                    (r % n_nodes).to_string(),
                    t.to_string(),
                    name.clone(),
                    format!("{}", row[t * f + c]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
