//! The operations behind the command-line tool.
//!
//! A run directory holds:
//!
//! | file              | contents                                             |
//! |-------------------|------------------------------------------------------|
//! | `config.toml`     | the resolved configuration                           |
//! | `metrics.json`    | final ACC/NMI and the per-round series               |
//! | `rounds.jsonl`    | one round report per line                            |
//! | `predictions.txt` | predicted cluster per input row, in input order      |
//! | `model.fstm`      | the averaged model checkpoint                        |
//!
//! `metrics.json` holds nothing that depends on scheduling or the clock, so
//! equal configurations produce equal bytes regardless of thread count.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::datasets::{load_dataset, partition, save_dataset, DatasetFormat, EmbeddingDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, nmi};
use crate::federated::{server_run, EvalSet, RoundReport, RunError, RunOutput};
use crate::jsonfmt::{f64_17, format_f64, opt_f64_17};
use crate::model::write_checkpoint;
use crate::numerics::{kmeans_restarts, Rng};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_HEADER: &str = "dataset,m,rho,lambda,seed,acc,nmi,rounds,wall_s";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    #[serde(serialize_with = "opt_f64_17")]
    pub acc: Option<f64>,
    #[serde(serialize_with = "opt_f64_17")]
    pub nmi: Option<f64>,
    /// Client means of the per-client mean losses over non-skipped steps.
    #[serde(serialize_with = "opt_f64_17")]
    pub mean_l_c: Option<f64>,
    #[serde(serialize_with = "opt_f64_17")]
    pub mean_l_a: Option<f64>,
    #[serde(serialize_with = "f64_17")]
    pub kept_fraction: f64,
    pub skipped_batches: usize,
}

/// Schema of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub rho: u32,
    #[serde(serialize_with = "f64_17")]
    pub lambda: f64,
    pub seed: u64,
    pub rounds: usize,
    pub local_iters: usize,
    #[serde(serialize_with = "opt_f64_17")]
    pub acc: Option<f64>,
    #[serde(serialize_with = "opt_f64_17")]
    pub nmi: Option<f64>,
    pub shard_sizes: Vec<usize>,
    pub per_round: Vec<RoundMetrics>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub metrics: Metrics,
    pub wall_s: f64,
}

fn round_metrics(r: &RoundReport) -> RoundMetrics {
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    RoundMetrics {
        round: r.round,
        acc: r.acc,
        nmi: r.nmi,
        mean_l_c: mean(r.clients.iter().filter_map(|c| c.mean_l_c).collect()),
        mean_l_a: mean(r.clients.iter().filter_map(|c| c.mean_l_a).collect()),
        kept_fraction: r.clients.iter().map(|c| c.kept_fraction).sum::<f64>() / r.clients.len().max(1) as f64,
        skipped_batches: r.clients.iter().map(|c| c.skipped_batches).sum(),
    }
}

/// Content hash of the configuration snapshot, shortened like a git id.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().take(6).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `base/id`, or `base/id-1`, `base/id-2`, ... if taken. Creates it.
fn fresh_run_dir(base: &Path, id: &str) -> Result<PathBuf> {
    fs::create_dir_all(base).map_err(|e| Error::at_path(base, e))?;
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            id.to_string()
        } else {
            format!("{id}-{attempt}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::at_path(&dir, e)),
        }
    }
    unreachable!("u32 attempts exhausted")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::at_path(path, e))
}

/// Loads the dataset, partitions it, runs the federated protocol and
/// writes the run directory plus a `results.csv` row.
///
/// Everything that can be rejected (configuration, dataset, labels,
/// partition) is checked before anything is written.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset, DatasetFormat::from_path(&cfg.dataset))?;
    let k = cfg.clusters();
    ds.validate_labels(k).map_err(|e| Error::Config(e.to_string()))?;
    let spec = cfg.partition_spec();
    let shards = partition(&ds, &spec).map_err(|e| Error::Config(e.to_string()))?;
    let shard_sizes: Vec<usize> = shards.iter().map(|s| s.indices.len()).collect();
    let fed = cfg.federated();
    if shard_sizes.contains(&0) {
        return Err(Error::Config("partition produced an empty shard".into()));
    }

    let started = Instant::now();
    let labels = ds.labels.clone();
    let eval = labels.as_deref().map(|l| EvalSet { x: &ds.x, labels: l });
    let outcome = server_run(shards.into_iter().map(|s| s.data).collect(), &fed, eval);
    let wall_s = started.elapsed().as_secs_f64();

    let run_dir = fresh_run_dir(&cfg.output_dir, &run_id(cfg))?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let out: RunOutput = match outcome {
        Ok(out) => out,
        Err(RunError { source, reports }) => {
            write_rounds(&run_dir, &reports)?;
            return Err(source);
        }
    };
    write_rounds(&run_dir, &out.reports)?;

    let pred = out.model.predict(&ds.x)?;
    let (acc, nmi_v) = match &labels {
        Some(l) => (Some(accuracy(l, &pred, k)?), Some(nmi(l, &pred)?)),
        None => (None, None),
    };
    let mut text = String::with_capacity(pred.len() * 3);
    for p in &pred {
        let _ = writeln!(text, "{p}");
    }
    write_file(&run_dir.join("predictions.txt"), text.as_bytes())?;
    let mut ckpt = Vec::new();
    write_checkpoint(&out.model, &mut ckpt)?;
    write_file(&run_dir.join("model.fstm"), &ckpt)?;

    let metrics = Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        dataset: cfg.dataset_name(),
        n: ds.n(),
        d: ds.d(),
        k,
        m: cfg.m,
        rho: cfg.rho,
        lambda: fed.lambda,
        seed: cfg.seed,
        rounds: cfg.rounds,
        local_iters: cfg.local_iters,
        acc,
        nmi: nmi_v,
        shard_sizes,
        per_round: out.reports.iter().map(round_metrics).collect(),
    };
    let mut json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::invalid(e.to_string()))?;
    json.push('\n');
    write_file(&run_dir.join("metrics.json"), json.as_bytes())?;
    append_results(&cfg.output_dir, &metrics, wall_s)?;
    Ok(RunSummary {
        run_dir,
        metrics,
        wall_s,
    })
}

fn write_rounds(dir: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?);
        text.push('\n');
    }
    write_file(&dir.join("rounds.jsonl"), text.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn append_results(dir: &Path, m: &Metrics, wall_s: f64) -> Result<()> {
    let path = dir.join("results.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::at_path(&path, e))?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, format_f64);
    let mut line = String::new();
    if fresh {
        line.push_str(RESULTS_HEADER);
        line.push('\n');
    }
    let _ = writeln!(
        line,
        "{},{},{},{},{},{},{},{},{:.3}",
        csv_field(&m.dataset),
        m.m,
        m.rho,
        format_f64(m.lambda),
        m.seed,
        opt(m.acc),
        opt(m.nmi),
        m.rounds,
        wall_s
    );
    f.write_all(line.as_bytes()).map_err(|e| Error::at_path(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineMetrics {
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(serialize_with = "f64_17")]
    pub acc: f64,
    #[serde(serialize_with = "f64_17")]
    pub nmi: f64,
    #[serde(serialize_with = "f64_17")]
    pub inertia: f64,
}

/// Pooled k-means on the raw embeddings, scored against the labels.
pub fn cmd_baseline_kmeans(data: &Path, k: usize, seed: u64, restarts: usize) -> Result<BaselineMetrics> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let ds = load_dataset(data, DatasetFormat::from_path(data))?;
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no labels to score against", data.display())))?;
    ds.validate_labels(k).map_err(|e| Error::Config(e.to_string()))?;
    let km = kmeans_restarts(&ds.x, k, &mut Rng::new(seed), 100, restarts.max(1))?;
    Ok(BaselineMetrics {
        dataset: ds.source_name.clone(),
        n: ds.n(),
        k,
        seed,
        acc: accuracy(labels, &km.assignments, k)?,
        nmi: nmi(labels, &km.assignments)?,
        inertia: km.inertia,
    })
}

/// Writes `shard_<i>.fstc` for every client plus `shard_<i>.idx` with the
/// source row of each shard row.
pub fn cmd_partition(data: &Path, spec: &PartitionSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = load_dataset(data, DatasetFormat::from_path(data))?;
    let shards = partition(&ds, spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::at_path(out_dir, e))?;
    let mut paths = Vec::with_capacity(shards.len());
    for (i, shard) in shards.iter().enumerate() {
        let path = out_dir.join(format!("shard_{i}.fstc"));
        save_dataset(&shard.data, &path)?;
        let mut idx = String::new();
        for j in &shard.indices {
            let _ = writeln!(idx, "{j}");
        }
        write_file(&out_dir.join(format!("shard_{i}.idx")), idx.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub k: usize,
    #[serde(serialize_with = "f64_17")]
    pub acc: f64,
    #[serde(serialize_with = "f64_17")]
    pub nmi: f64,
}

/// Reads one nonnegative integer label per line; blank lines are skipped.
pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("{}:{}: `{}`: {e}", path.display(), i + 1, l.trim())))
        })
        .collect()
}

/// Labels from a label file, or from a dataset file that carries labels.
fn read_truth(path: &Path) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    let is_dataset = fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .is_ok()
        && magic == crate::datasets::DATASET_MAGIC;
    if !is_dataset {
        return read_label_file(path);
    }
    let ds: EmbeddingDataset = load_dataset(path, DatasetFormat::Binary)?;
    ds.labels
        .ok_or_else(|| Error::Config(format!("{} has no labels", path.display())))
}

pub fn cmd_eval(pred: &Path, truth: &Path) -> Result<EvalMetrics> {
    let p = read_label_file(pred)?;
    let t = read_truth(truth)?;
    if p.len() != t.len() {
        return Err(Error::Config(format!(
            "{} predictions but {} true labels",
            p.len(),
            t.len()
        )));
    }
    if t.is_empty() {
        return Err(Error::Config("no labels to evaluate".into()));
    }
    let k = t.iter().max().map_or(0, |m| m + 1);
    Ok(EvalMetrics {
        n: t.len(),
        k,
        acc: accuracy(&t, &p, k)?,
        nmi: nmi(&t, &p)?,
    })
}

/// Process exit code for an error: 2 for rejected input, 3 for numerical
/// divergence, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence(_) => 3,
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::Format { .. }
        | Error::Truncated { .. }
        | Error::Path { .. } => 2,
        _ => 1,
    }
}
