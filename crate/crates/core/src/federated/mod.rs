//! In-process simulation of the federated protocol: clients train locally
//! and report cluster centers, the server aggregates them into global
//! centers each round and averages the client models at the end.

mod centers;
mod messages;
mod schedule;

pub use centers::{aggregate_global_centers, average_models, compute_local_centers};
pub use messages::{CenterMessage, GlobalCenters};
pub use schedule::{default_schedule_updates, pseudo_label_schedule};

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::{BatchStream, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, nmi};
use crate::gum::{self, GumConfig};
use crate::jsonfmt::{f64_17, opt_f64_17};
use crate::model::{
    backward_and_step, Activation, AlignmentTarget, ModelConfig, ModelParams, OptimizerState, TrainBatch,
};
use crate::numerics::{kmeans_restarts, Matrix, Rng};
use crate::sinkhorn::{generate_pseudo_labels, TransportConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedConfig {
    pub clusters: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub transport: TransportConfig,
    pub gum: GumConfig,
    pub hidden_dim: Option<usize>,
    pub adapter: bool,
    pub activation: Activation,
    pub adapter_lr: f64,
    pub head_lr: f64,
    /// Pseudo-label refreshes over the whole run; `None` means one per
    /// pass over the client's shard.
    pub schedule_updates: Option<usize>,
    /// Iterations trained on the initial k-means labels before the first
    /// refresh; `None` means one round.
    pub refresh_warmup: Option<usize>,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
    /// Worker threads for client updates; 1 runs clients sequentially.
    pub threads: usize,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            rounds: 40,
            local_iters: 100,
            batch_size: 200,
            lambda: 1.0,
            transport: TransportConfig::default(),
            gum: GumConfig::default(),
            hidden_dim: None,
            adapter: true,
            activation: Activation::Identity,
            adapter_lr: 5e-6,
            head_lr: 5e-4,
            schedule_updates: None,
            refresh_warmup: None,
            kmeans_iters: 100,
            kmeans_restarts: 10,
            seed: 0,
            threads: 1,
        }
    }
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusters", self.clusters),
            ("rounds", self.rounds),
            ("local_iters", self.local_iters),
            ("batch_size", self.batch_size),
            ("kmeans_iters", self.kmeans_iters),
            ("kmeans_restarts", self.kmeans_restarts),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.schedule_updates == Some(0) {
            return Err(Error::Config("schedule_updates must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        for (name, lr) in [("adapter_lr", self.adapter_lr), ("head_lr", self.head_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        let as_config = |e: Error| match e {
            Error::InvalidInput(msg) => Error::Config(msg),
            other => other,
        };
        self.transport.validate().map_err(as_config)?;
        self.gum.validate().map_err(as_config)
    }

    pub fn total_iters(&self) -> usize {
        self.rounds * self.local_iters
    }

    pub fn warmup(&self) -> usize {
        self.refresh_warmup.unwrap_or(self.local_iters)
    }

    /// Refresh iterations for a shard of `shard_len` rows: the geometric
    /// schedule over the post-warmup iterations, shifted past the warmup.
    pub fn schedule_for(&self, shard_len: usize) -> Vec<usize> {
        let warmup = self.warmup();
        let span = self.total_iters().saturating_sub(warmup);
        let updates = self
            .schedule_updates
            .unwrap_or_else(|| default_schedule_updates(span, self.batch_size, shard_len));
        pseudo_label_schedule(span, updates)
            .into_iter()
            .map(|t| t + warmup)
            .collect()
    }

    fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            clusters: self.clusters,
            adapter: self.adapter,
            activation: self.activation,
        }
    }
}

/// Everything one client keeps between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub shard: EmbeddingDataset,
    pub model: ModelParams,
    pub opt: OptimizerState,
    pub q_shard: Matrix,
    pub r_shard: Vec<f64>,
    pub c_local: Matrix,
    pub counts: Vec<u64>,
    pub rng: Rng,
    pub schedule: Vec<usize>,
    batches: BatchStream,
    iteration: usize,
}

impl ClientState {
    /// A client whose pseudo-labels are the one-hot rows of `assignments`.
    pub fn new(
        id: u32,
        shard: EmbeddingDataset,
        model: ModelParams,
        assignments: &[usize],
        cfg: &FederatedConfig,
    ) -> Result<Self> {
        let n = shard.n();
        let k = cfg.clusters;
        if assignments.len() != n {
            return Err(Error::invalid(format!(
                "client {id}: {} assignments for {n} rows",
                assignments.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid(format!("client {id} has an empty shard")));
        }
        let mut q_shard = Matrix::zeros(n, k);
        for (i, &a) in assignments.iter().enumerate() {
            if a >= k {
                return Err(Error::invalid(format!("assignment {a} is not below K={k}")));
            }
            q_shard[(i, a)] = 1.0;
        }
        let e = model.embed(&shard.x)?;
        let (c_local, counts) = compute_local_centers(&e, &q_shard, &Matrix::zeros(k, shard.d()))?;
        let opt = OptimizerState::new(&model, cfg.adapter_lr, cfg.head_lr);
        Ok(Self {
            id,
            model,
            opt,
            q_shard,
            r_shard: vec![1.0; n],
            c_local,
            counts,
            rng: Rng::derive(cfg.seed, &[u64::from(id), 0]),
            schedule: cfg.schedule_for(n),
            batches: BatchStream::new(n, cfg.batch_size),
            iteration: 0,
            shard,
        })
    }

    pub fn message(&self, round: u32) -> CenterMessage {
        CenterMessage {
            client_id: self.id,
            round,
            centers: self.c_local.clone(),
            counts: self.counts.clone(),
        }
    }

    /// Re-labels the whole shard from the current model, one
    /// equipartitioned transport problem per near-equal chunk.
    fn refresh_pseudo_labels(&mut self, cfg: &FederatedConfig) -> Result<bool> {
        let n = self.shard.n();
        let (_, o) = self.model.forward(&self.shard.x)?;
        check_finite_scores(self.id, &o)?;
        let chunks = n.div_ceil(cfg.batch_size.min(n));
        let mut all_converged = true;
        let mut start = 0;
        for c in 0..chunks {
            let len = n / chunks + usize::from(c < n % chunks);
            let idx: Vec<usize> = (start..start + len).collect();
            let batch = generate_pseudo_labels(&o.select_rows(&idx), &cfg.transport)?;
            all_converged &= batch.converged;
            for (row, &i) in idx.iter().enumerate() {
                self.q_shard.row_mut(i).copy_from_slice(batch.q.row(row));
            }
            start += len;
        }
        Ok(all_converged)
    }
}

fn check_finite_scores(client: u32, o: &Matrix) -> Result<()> {
    if o.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "client {client}: model produced non-finite scores"
        )))
    }
}

/// Per-client figures for one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundStats {
    pub client_id: u32,
    /// Mean over the steps that were not skipped; `null` if all were.
    #[serde(serialize_with = "opt_f64_17")]
    pub mean_l_c: Option<f64>,
    #[serde(serialize_with = "opt_f64_17")]
    pub mean_l_a: Option<f64>,
    /// Mean fraction of batch samples with `w > 0`.
    #[serde(serialize_with = "f64_17")]
    pub kept_fraction: f64,
    pub skipped_batches: usize,
    pub refreshes: usize,
    pub unconverged_refreshes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub clients: Vec<ClientRoundStats>,
    #[serde(serialize_with = "opt_f64_17")]
    pub acc: Option<f64>,
    #[serde(serialize_with = "opt_f64_17")]
    pub nmi: Option<f64>,
}

/// Runs `cfg.local_iters` local steps and recomputes the shard centers.
pub fn client_update(
    client: &mut ClientState,
    global: &GlobalCenters,
    round: u32,
    cfg: &FederatedConfig,
) -> Result<(CenterMessage, ClientRoundStats)> {
    if cfg.local_iters == 0 {
        return Err(Error::invalid("local_iters must be at least 1"));
    }
    client.rng = Rng::derive(cfg.seed, &[u64::from(client.id), u64::from(round)]);
    let mut stats = ClientRoundStats {
        client_id: client.id,
        mean_l_c: None,
        mean_l_a: None,
        kept_fraction: 0.0,
        skipped_batches: 0,
        refreshes: 0,
        unconverged_refreshes: 0,
    };
    let (mut sum_c, mut sum_a, mut steps) = (0.0, 0.0, 0usize);

    for _ in 0..cfg.local_iters {
        client.iteration += 1;
        if client.schedule.binary_search(&client.iteration).is_ok() {
            stats.refreshes += 1;
            if !client.refresh_pseudo_labels(cfg)? {
                stats.unconverged_refreshes += 1;
                log::debug!(
                    "client {}: transport did not converge at iteration {}",
                    client.id,
                    client.iteration
                );
            }
        }
        let idx = client.batches.next_batch(&mut client.rng);
        let x = client.shard.x.select_rows(&idx);
        let q = client.q_shard.select_rows(&idx);
        let (_, o) = client.model.forward(&x)?;
        check_finite_scores(client.id, &o)?;
        let r_init: Vec<f64> = idx.iter().map(|&i| client.r_shard[i]).collect();
        let (weights, _) = gum::fit(&q, &o, &r_init, &cfg.gum)?;
        for (&i, &r) in idx.iter().zip(&weights.r) {
            client.r_shard[i] = r;
        }
        stats.kept_fraction += weights.kept_fraction();

        let loss = backward_and_step(
            &mut client.model,
            &mut client.opt,
            TrainBatch {
                x: &x,
                q: &q,
                w: &weights.w,
            },
            AlignmentTarget {
                global: &global.c,
                fallback: &client.c_local,
            },
            cfg.lambda,
        )
        .map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("client {}: {msg}", client.id)),
            other => other,
        })?;
        if loss.skipped {
            stats.skipped_batches += 1;
        } else {
            sum_c += loss.l_c;
            sum_a += loss.l_a;
            steps += 1;
        }
    }
    stats.kept_fraction /= cfg.local_iters as f64;
    if steps > 0 {
        stats.mean_l_c = Some(sum_c / steps as f64);
        stats.mean_l_a = Some(sum_a / steps as f64);
    }

    let e = client.model.embed(&client.shard.x)?;
    let (c_local, counts) = compute_local_centers(&e, &client.q_shard, &client.c_local)?;
    client.c_local = c_local;
    client.counts = counts;
    Ok((client.message(round), stats))
}

/// Pooled, labelled data the averaged model is scored on after each round.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub x: &'a Matrix,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ModelParams,
    pub centers: GlobalCenters,
    pub alphas: Vec<f64>,
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientState>,
}

/// A failed run together with the rounds that completed.
#[derive(Debug, thiserror::Error)]
#[error("run aborted after {} completed rounds: {source}", reports.len())]
pub struct RunError {
    pub source: Error,
    pub reports: Vec<RoundReport>,
}

impl From<Error> for RunError {
    fn from(source: Error) -> Self {
        Self {
            source,
            reports: Vec::new(),
        }
    }
}

/// Builds identical client models, seeds pseudo-labels with k-means over
/// the pooled client representations, then runs the rounds.
pub fn server_run(
    shards: Vec<EmbeddingDataset>,
    cfg: &FederatedConfig,
    eval: Option<EvalSet<'_>>,
) -> std::result::Result<RunOutput, RunError> {
    cfg.validate()?;
    let clients = init_clients(shards, cfg)?;
    run_rounds(clients, cfg, eval)
}

/// Initial client states: shared model, pooled k-means pseudo-labels,
/// reliabilities of one.
pub fn init_clients(shards: Vec<EmbeddingDataset>, cfg: &FederatedConfig) -> Result<Vec<ClientState>> {
    let first = shards
        .first()
        .ok_or_else(|| Error::invalid("need at least one client"))?;
    let d = first.d();
    if let Some(bad) = shards.iter().position(|s| s.d() != d) {
        return Err(Error::invalid(format!(
            "shard {bad} has width {}, expected {d}",
            shards[bad].d()
        )));
    }
    let total: usize = shards.iter().map(EmbeddingDataset::n).sum();
    if total < cfg.clusters {
        return Err(Error::invalid(format!(
            "{total} samples cannot form {} clusters",
            cfg.clusters
        )));
    }
    let mut server_rng = Rng::derive(cfg.seed, &[u64::MAX]);
    let model = ModelParams::init(&cfg.model_config(d), &mut server_rng)?;

    let mut pooled = Vec::with_capacity(total * d);
    for s in &shards {
        pooled.extend_from_slice(model.embed(&s.x)?.as_slice());
    }
    let pooled = Matrix::from_vec(total, d, pooled)?;
    let km = kmeans_restarts(
        &pooled,
        cfg.clusters,
        &mut server_rng,
        cfg.kmeans_iters,
        cfg.kmeans_restarts,
    )?;

    let mut start = 0;
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| {
            let n = shard.n();
            let assignments = &km.assignments[start..start + n];
            start += n;
            ClientState::new(id as u32, shard, model.clone(), assignments, cfg)
        })
        .collect()
}

/// Runs every round on already initialised clients.
pub fn run_rounds(
    mut clients: Vec<ClientState>,
    cfg: &FederatedConfig,
    eval: Option<EvalSet<'_>>,
) -> std::result::Result<RunOutput, RunError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("need at least one client").into());
    }
    clients.sort_by_key(|c| c.id);
    let (k, d) = clients[0].c_local.shape();
    let initial: Vec<CenterMessage> = clients.iter().map(|c| c.message(0)).collect();
    let mut global = aggregate_global_centers(
        &initial,
        &GlobalCenters {
            c: Matrix::zeros(k, d),
            round: 0,
        },
    )?;
    let total: usize = clients.iter().map(|c| c.shard.n()).sum();
    let alphas: Vec<f64> = clients.iter().map(|c| c.shard.n() as f64 / total as f64).collect();

    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds as u32 {
        let step = |c: &mut ClientState| client_update(c, &global, round, cfg);
        let results: Vec<Result<(CenterMessage, ClientRoundStats)>> = match &pool {
            Some(p) => p.install(|| clients.par_iter_mut().map(step).collect()),
            None => clients.iter_mut().map(step).collect(),
        };
        let mut messages = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok((m, s)) => {
                    messages.push(m);
                    stats.push(s);
                }
                Err(source) => return Err(RunError { source, reports }),
            }
        }
        global = match aggregate_global_centers(&messages, &global) {
            Ok(g) => g,
            Err(source) => return Err(RunError { source, reports }),
        };

        let (acc, nmi_v) = match eval {
            Some(ev) => match score_round(&clients, &alphas, ev, k) {
                Ok(v) => (Some(v.0), Some(v.1)),
                Err(source) => return Err(RunError { source, reports }),
            },
            None => (None, None),
        };
        log::info!(
            "round {round}/{}: acc={} nmi={}",
            cfg.rounds,
            acc.map_or("-".into(), |v| format!("{v:.4}")),
            nmi_v.map_or("-".into(), |v| format!("{v:.4}"))
        );
        reports.push(RoundReport {
            round,
            clients: stats,
            acc,
            nmi: nmi_v,
        });
    }

    let models: Vec<ModelParams> = clients.iter().map(|c| c.model.clone()).collect();
    let model = match average_models(&models, &alphas) {
        Ok(m) => m,
        Err(source) => return Err(RunError { source, reports }),
    };
    Ok(RunOutput {
        model,
        centers: global,
        alphas,
        reports,
        clients,
    })
}

fn score_round(clients: &[ClientState], alphas: &[f64], ev: EvalSet<'_>, k: usize) -> Result<(f64, f64)> {
    let models: Vec<ModelParams> = clients.iter().map(|c| c.model.clone()).collect();
    let avg = average_models(&models, alphas)?;
    score_model(&avg, ev, k)
}

/// ACC and NMI of a model's cluster predictions.
pub fn score_model(model: &ModelParams, ev: EvalSet<'_>, k: usize) -> Result<(f64, f64)> {
    let pred = model.predict(ev.x)?;
    Ok((accuracy(ev.labels, &pred, k)?, nmi(ev.labels, &pred)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{partition, synth_blobs, PartitionSpec};

    fn small_cfg() -> FederatedConfig {
        FederatedConfig {
            clusters: 3,
            rounds: 3,
            local_iters: 5,
            batch_size: 30,
            head_lr: 1e-2,
            seed: 11,
            ..Default::default()
        }
    }

    fn shards(m: usize, n: usize, seed: u64) -> Vec<EmbeddingDataset> {
        let ds = synth_blobs(3, n, 6, 6.0, 1.0, &mut Rng::new(seed)).unwrap();
        partition(&ds, &PartitionSpec::iid(m, seed))
            .unwrap()
            .into_iter()
            .map(|s| s.data)
            .collect()
    }

    #[test]
    fn frozen_client_keeps_its_centers() {
        let cfg = FederatedConfig {
            local_iters: 1,
            lambda: 0.0,
            adapter_lr: 0.0,
            head_lr: 0.0,
            ..small_cfg()
        };
        let mut clients = init_clients(shards(1, 90, 1), &cfg).unwrap();
        let client = &mut clients[0];
        client.schedule.clear();
        let before = client.c_local.clone();
        let global = GlobalCenters {
            c: before.clone(),
            round: 0,
        };
        let (msg, _) = client_update(client, &global, 1, &cfg).unwrap();
        assert_eq!(msg.centers, before);
    }

    #[test]
    fn identical_clients_report_identical_centers() {
        let cfg = small_cfg();
        let shard = shards(1, 90, 2).remove(0);
        let clients = init_clients(vec![shard.clone(), shard], &cfg).unwrap();
        let mut a = clients[0].clone();
        let mut b = clients[0].clone();
        let global = GlobalCenters {
            c: a.c_local.clone(),
            round: 0,
        };
        let (ma, _) = client_update(&mut a, &global, 1, &cfg).unwrap();
        let (mb, _) = client_update(&mut b, &global, 1, &cfg).unwrap();
        assert_eq!(ma, mb);
        let relabeled = CenterMessage { client_id: 1, ..mb };
        let agg = aggregate_global_centers(&[ma.clone(), relabeled], &global).unwrap();
        assert_eq!(agg.c, ma.centers);
    }

    #[test]
    fn blob_shard_counts_stay_balanced() {
        let cfg = FederatedConfig {
            rounds: 1,
            local_iters: 100,
            refresh_warmup: Some(20),
            ..small_cfg()
        };
        let mut clients = init_clients(shards(1, 300, 3), &cfg).unwrap();
        let global = GlobalCenters {
            c: clients[0].c_local.clone(),
            round: 0,
        };
        let (msg, stats) = client_update(&mut clients[0], &global, 1, &cfg).unwrap();
        for &c in &msg.counts {
            assert!((c as f64 - 100.0).abs() <= 20.0, "{:?}", msg.counts);
        }
        assert!((0.0..=1.0).contains(&stats.kept_fraction));
        assert!(stats.refreshes > 0);
    }

    #[test]
    fn single_client_single_round_returns_its_model() {
        let cfg = FederatedConfig {
            rounds: 1,
            ..small_cfg()
        };
        let out = server_run(shards(1, 90, 4), &cfg, None).unwrap();
        assert_eq!(out.model, out.clients[0].model);
        assert_eq!(out.alphas, vec![1.0]);
        assert_eq!(out.centers.c, out.clients[0].c_local);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let seq = server_run(shards(3, 150, 5), &small_cfg(), None).unwrap();
        let cfg = FederatedConfig {
            threads: 3,
            ..small_cfg()
        };
        let par = server_run(shards(3, 150, 5), &cfg, None).unwrap();
        assert_eq!(seq.model, par.model);
        assert_eq!(seq.centers, par.centers);
        assert_eq!(seq.reports, par.reports);
    }

    #[test]
    fn alphas_are_shard_proportions() {
        let ds = synth_blobs(3, 100, 6, 6.0, 1.0, &mut Rng::new(6)).unwrap();
        let parts = partition(&ds, &PartitionSpec::skew(3, 6)).unwrap();
        let out = server_run(parts.into_iter().map(|s| s.data).collect(), &small_cfg(), None).unwrap();
        assert_eq!(out.alphas, vec![0.8, 0.2]);
        assert!((out.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reports_carry_scores_when_labels_are_given() {
        let ds = synth_blobs(3, 120, 6, 6.0, 1.0, &mut Rng::new(7)).unwrap();
        let labels = ds.labels.clone().unwrap();
        let parts = partition(&ds, &PartitionSpec::iid(2, 7)).unwrap();
        let out = server_run(
            parts.into_iter().map(|s| s.data).collect(),
            &small_cfg(),
            Some(EvalSet {
                x: &ds.x,
                labels: &labels,
            }),
        )
        .unwrap();
        assert_eq!(out.reports.len(), 3);
        for r in &out.reports {
            let acc = r.acc.unwrap();
            assert!((0.0..=1.0).contains(&acc));
            assert_eq!(r.clients.len(), 2);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = FederatedConfig {
            rounds: 0,
            ..small_cfg()
        };
        assert!(matches!(
            server_run(shards(1, 30, 8), &cfg, None),
            Err(RunError {
                source: Error::Config(_),
                ..
            })
        ));
    }

    #[test]
    fn warmup_shifts_the_schedule() {
        let cfg = FederatedConfig {
            rounds: 4,
            local_iters: 25,
            schedule_updates: Some(4),
            refresh_warmup: Some(0),
            ..small_cfg()
        };
        assert_eq!(cfg.schedule_for(500), vec![3, 10, 32, 100]);
        let shifted = FederatedConfig {
            refresh_warmup: Some(20),
            ..cfg
        };
        assert_eq!(
            shifted.schedule_for(500),
            pseudo_label_schedule(80, 4).iter().map(|t| t + 20).collect::<Vec<_>>()
        );
    }
}
