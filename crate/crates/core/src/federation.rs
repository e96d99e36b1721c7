//! The server loop: client selection, local instruction tuning on frozen
//! base + adapters, weighted adapter aggregation, and per-round logging
//! with communication accounting.

use crate::data::{tokenize, DatasetManifest, TokenizedExample};
use crate::error::{Error, Result};
use crate::lora::{
    header_bytes, payload_bytes, set_from_adapters, LoraAdapter, LoraAdapterSet, Provenance,
};
use crate::model::BaseModel;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::partition::ClientShard;
use crate::rng::{derive_seed, seeded_rng};
use crate::tape::{forward_lm, GradMap};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeighting {
    UniformOverSelected,
    ProportionalToShardSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: u32,
    pub clients_per_round: usize,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lora_rank: usize,
    pub aggregation: AggregationWeighting,
    pub selection_seed: u64,
    pub training_seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            n_clients: 100,
            rounds: 20,
            clients_per_round: 5,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 5e-3,
            optimizer: OptimizerKind::Adam,
            lora_rank: 8,
            aggregation: AggregationWeighting::ProportionalToShardSize,
            selection_seed: 31,
            training_seed: 37,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config(
                "n_clients, rounds and local_epochs must be positive".into(),
            ));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(Error::Config(format!(
                "clients_per_round {} must lie in [1, {}]",
                self.clients_per_round, self.n_clients
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform sample of `m` distinct clients, deterministic in
/// (selection_seed, round), sorted ascending.
pub fn select_clients(
    n_clients: usize,
    m: usize,
    round: u32,
    selection_seed: u64,
) -> Result<Vec<u64>> {
    if m == 0 || m > n_clients {
        return Err(Error::Config(format!(
            "cannot select {m} of {n_clients} clients"
        )));
    }
    let mut rng = seeded_rng(derive_seed(selection_seed, &[round as u64]));
    let mut pool: Vec<u64> = (0..n_clients as u64).collect();
    for i in 0..m {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut picked: Vec<u64> = pool[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: u64,
    /// Usable (tokenized) examples in the client's shard.
    pub shard_examples: usize,
    /// Records dropped because their prompt alone overflowed the context.
    pub skipped_records: usize,
    /// None when the shard had no usable examples.
    pub mean_loss: Option<f64>,
    pub update_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub selected: Vec<u64>,
    pub clients: Vec<ClientRoundStats>,
    /// L2 distance between the new and previous global adapters.
    pub aggregate_update_l2: f64,
    /// || mean(B_i A_i) - mean(B_i) mean(A_i) ||_F, the aggregation
    /// nonlinearity; logged as a diagnostic, not corrected.
    pub ab_product_gap: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Measured wall time. Environment-dependent, so excluded from replay
    /// comparisons; see [`RoundLog::deterministic_view`].
    pub wall_secs: f64,
}

impl RoundLog {
    /// The log with its timing field zeroed: every remaining field is a pure
    /// function of (config, seeds, data) and must replay bit-exactly.
    pub fn deterministic_view(&self) -> RoundLog {
        RoundLog {
            wall_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Tokenized per-client training data plus the frozen base, shared read-only
/// by all clients.
pub struct FedEnv<'a> {
    pub base: &'a BaseModel<f32>,
    pub client_examples: Vec<Vec<TokenizedExample>>,
    pub skipped: Vec<usize>,
    pub shard_seeds: Vec<u64>,
}

impl<'a> FedEnv<'a> {
    /// Tokenizes every shard once. Shards must be exactly clients 0..n-1.
    pub fn prepare(
        base: &'a BaseModel<f32>,
        manifest: &DatasetManifest,
        shards: &[ClientShard],
    ) -> Result<FedEnv<'a>> {
        let max_seq = base.config.max_seq_len;
        let mut client_examples = Vec::with_capacity(shards.len());
        let mut skipped = Vec::with_capacity(shards.len());
        let mut shard_seeds = Vec::with_capacity(shards.len());
        for (i, shard) in shards.iter().enumerate() {
            if shard.client_id != i as u64 {
                return Err(Error::Config(format!(
                    "shards must be contiguous client ids; found {} at position {i}",
                    shard.client_id
                )));
            }
            let mut examples = Vec::with_capacity(shard.record_indices.len());
            let mut n_skipped = 0usize;
            for &ri in &shard.record_indices {
                match tokenize(&manifest.records[ri], max_seq) {
                    Ok(ex) => examples.push(ex),
                    Err(_) => n_skipped += 1,
                }
            }
            client_examples.push(examples);
            skipped.push(n_skipped);
            shard_seeds.push(shard.seed);
        }
        Ok(FedEnv {
            base,
            client_examples,
            skipped,
            shard_seeds,
        })
    }
}

/// One client's local pass: clone the global adapters, run `local_epochs`
/// over seeded shuffled mini-batches with a fresh optimizer, return the
/// updated adapters and stats. The base model is never touched.
pub fn local_train(
    base: &BaseModel<f32>,
    global: &LoraAdapterSet<f32>,
    examples: &[TokenizedExample],
    config: &FedConfig,
    client_id: u64,
    round: u32,
    shuffle_seed: u64,
) -> Result<(LoraAdapterSet<f32>, ClientRoundStats)> {
    let mut adapters = global.clone();
    adapters.provenance = Provenance::Client { round, client_id };

    if examples.is_empty() {
        return Ok((
            adapters,
            ClientRoundStats {
                client_id,
                shard_examples: 0,
                skipped_records: 0,
                mean_loss: None,
                update_l2: 0.0,
            },
        ));
    }

    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate);
    let mut rng = seeded_rng(shuffle_seed);
    let mut loss_sum = 0.0f64;
    let mut loss_count = 0usize;

    for _epoch in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = GradMap::<f32>::new();
            let mut batch_loss = 0.0f64;
            for &ei in batch {
                let ex = &examples[ei];
                let (_, mut tape) = forward_lm(base, Some(&adapters), &ex.tokens)
                    .map_err(|e| wrap_client_err(e, round, client_id))?;
                let loss = tape
                    .loss_next_token(&ex.loss_mask)
                    .map_err(|e| wrap_client_err(e, round, client_id))?;
                batch_loss += loss as f64;
                let g = tape
                    .backward()
                    .map_err(|e| wrap_client_err(e, round, client_id))?;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f32);
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "round {round} client {client_id}: non-finite batch loss"
                )));
            }
            loss_sum += batch_loss;
            loss_count += 1;
            optimizer.step(param_views_mut(&mut adapters), &grads)?;
        }
    }

    let update_l2 = adapters.update_l2(global);
    Ok((
        adapters,
        ClientRoundStats {
            client_id,
            shard_examples: examples.len(),
            skipped_records: 0,
            mean_loss: Some(loss_sum / loss_count as f64),
            update_l2,
        },
    ))
}

fn wrap_client_err(e: Error, round: u32, client_id: u64) -> Error {
    match e {
        Error::NonFinite(msg) => {
            Error::NonFinite(format!("round {round} client {client_id}: {msg}"))
        }
        other => other,
    }
}

/// Named mutable views over every adapter tensor, for the optimizer.
pub fn param_views_mut<T: crate::tensor::Scalar>(
    set: &mut LoraAdapterSet<T>,
) -> Vec<(String, &mut Matrix<T>)> {
    let mut out = Vec::new();
    for adapter in set.adapters_mut() {
        let name = adapter.layer_name.clone();
        let LoraAdapter { a, b, .. } = adapter;
        out.push((format!("{name}.lora_a"), a));
        out.push((format!("{name}.lora_b"), b));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AggregateInput {
    pub client_id: u64,
    pub adapters: LoraAdapterSet<f32>,
    pub weight: f64,
}

/// Entrywise weighted mean of A and B separately, accumulated in f64 in
/// ascending client order, rounded to f32 once at the end. Sorting makes the
/// result independent of arrival order.
pub fn aggregate(updates: &[AggregateInput], round: u32) -> Result<LoraAdapterSet<f32>> {
    if updates.is_empty() {
        return Err(Error::Protocol("aggregate called with no updates".into()));
    }
    let mut sorted: Vec<&AggregateInput> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Protocol(format!(
                "duplicate update from client {}",
                pair[0].client_id
            )));
        }
    }
    let first = &sorted[0].adapters;
    for u in &sorted {
        if !u.weight.is_finite() || u.weight < 0.0 {
            return Err(Error::Protocol(format!(
                "client {} has invalid weight {}",
                u.client_id, u.weight
            )));
        }
        if u.adapters.rank() != first.rank()
            || u.adapters.adapters().len() != first.adapters().len()
        {
            return Err(Error::Protocol(format!(
                "client {} sent adapters of mismatched shape",
                u.client_id
            )));
        }
        for (a, b) in u.adapters.adapters().iter().zip(first.adapters()) {
            if a.layer_name != b.layer_name
                || a.a.shape() != b.a.shape()
                || a.b.shape() != b.b.shape()
            {
                return Err(Error::Protocol(format!(
                    "client {} sent adapters of mismatched shape for layer {}",
                    u.client_id, b.layer_name
                )));
            }
        }
    }
    let weight_sum: f64 = sorted.iter().map(|u| u.weight).sum();
    if weight_sum <= 0.0 {
        return Err(Error::Protocol("all aggregation weights are zero".into()));
    }

    let mut result = Vec::with_capacity(first.adapters().len());
    for li in 0..first.adapters().len() {
        let proto = &first.adapters()[li];
        let mut acc_a = vec![0.0f64; proto.a.len()];
        let mut acc_b = vec![0.0f64; proto.b.len()];
        for u in &sorted {
            let ad = &u.adapters.adapters()[li];
            for (acc, &v) in acc_a.iter_mut().zip(ad.a.as_slice()) {
                *acc += u.weight * v as f64;
            }
            for (acc, &v) in acc_b.iter_mut().zip(ad.b.as_slice()) {
                *acc += u.weight * v as f64;
            }
        }
        let a = Matrix::from_vec(
            proto.a.rows(),
            proto.a.cols(),
            acc_a.into_iter().map(|v| (v / weight_sum) as f32).collect(),
        )?;
        let b = Matrix::from_vec(
            proto.b.rows(),
            proto.b.cols(),
            acc_b.into_iter().map(|v| (v / weight_sum) as f32).collect(),
        )?;
        result.push(LoraAdapter {
            layer_name: proto.layer_name.clone(),
            a,
            b,
        });
    }
    Ok(set_from_adapters(
        result,
        first.rank(),
        Provenance::Global { round: round + 1 },
    ))
}

/// Frobenius norm of weighted_mean(B_i A_i) - mean(B) mean(A), summed over
/// layers. The known FedAvg-on-factors nonlinearity, logged per round.
pub fn ab_product_gap(updates: &[AggregateInput], aggregated: &LoraAdapterSet<f32>) -> f64 {
    let weight_sum: f64 = updates.iter().map(|u| u.weight).sum();
    if weight_sum <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0f64;
    for li in 0..aggregated.adapters().len() {
        let agg = &aggregated.adapters()[li];
        let mean_product = {
            let mut acc = Matrix::<f64>::zeros(agg.b.rows(), agg.a.cols());
            for u in updates {
                let ad = &u.adapters.adapters()[li];
                let prod = crate::tensor::matmul_nn(&ad.b.cast::<f64>(), &ad.a.cast::<f64>());
                acc.axpy_assign(u.weight / weight_sum, &prod);
            }
            acc
        };
        let product_of_means =
            crate::tensor::matmul_nn(&agg.b.cast::<f64>(), &agg.a.cast::<f64>());
        let diff = mean_product.sub(&product_of_means);
        let n = diff.l2_norm();
        total += n * n;
    }
    total.sqrt()
}

/// Server-side state between rounds: the current global adapters, the round
/// counter, cumulative traffic, and the log history. Mutated only by the
/// federation loop between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_adapters: LoraAdapterSet<f32>,
    pub round: u32,
    pub cumulative_uplink_bytes: u64,
    pub cumulative_downlink_bytes: u64,
    pub history: Vec<RoundLog>,
}

impl ServerState {
    pub fn new(global_adapters: LoraAdapterSet<f32>, round: u32) -> Self {
        ServerState {
            global_adapters,
            round,
            cumulative_uplink_bytes: 0,
            cumulative_downlink_bytes: 0,
            history: Vec::new(),
        }
    }
}

pub struct FederationRun {
    pub adapters: LoraAdapterSet<f32>,
    pub logs: Vec<RoundLog>,
}

/// Runs rounds `start_round..config.rounds` from the given global adapters.
/// `threads` > 1 trains the selected clients of a round concurrently; each
/// client is a pure function of (base, global, shard, seeds), so the result
/// is identical to sequential execution. `on_round` fires after each round
/// with the new log and global state, for streaming persistence.
pub fn run_federation_rounds(
    env: &FedEnv,
    config: &FedConfig,
    global: LoraAdapterSet<f32>,
    start_round: u32,
    threads: usize,
    mut on_round: impl FnMut(&RoundLog, &LoraAdapterSet<f32>) -> Result<()>,
) -> Result<FederationRun> {
    config.validate()?;
    if env.client_examples.len() != config.n_clients {
        return Err(Error::Config(format!(
            "environment has {} client shards, config declares {}",
            env.client_examples.len(),
            config.n_clients
        )));
    }
    global.validate_against(&env.base.config)?;
    if global.rank() != config.lora_rank {
        return Err(Error::Config(format!(
            "global adapters have rank {}, config declares {}",
            global.rank(),
            config.lora_rank
        )));
    }

    let payload = payload_bytes(&global) as u64;
    let mut server = ServerState::new(global, start_round);

    while server.round < config.rounds {
        let round = server.round;
        let global = &server.global_adapters;
        let started = std::time::Instant::now();
        let selected = select_clients(
            config.n_clients,
            config.clients_per_round,
            round,
            config.selection_seed,
        )?;

        let train_one = |&client_id: &u64| -> Result<(LoraAdapterSet<f32>, ClientRoundStats)> {
            let examples = &env.client_examples[client_id as usize];
            let shuffle_seed = derive_seed(
                config.training_seed,
                &[round as u64, client_id, env.shard_seeds[client_id as usize]],
            );
            let (adapters, mut stats) = local_train(
                env.base,
                global,
                examples,
                config,
                client_id,
                round,
                shuffle_seed,
            )?;
            stats.skipped_records = env.skipped[client_id as usize];
            Ok((adapters, stats))
        };

        let results: Vec<(LoraAdapterSet<f32>, ClientRoundStats)> = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                selected.par_iter().map(train_one).collect::<Result<Vec<_>>>()
            })?
        } else {
            selected.iter().map(train_one).collect::<Result<Vec<_>>>()?
        };

        let updates: Vec<AggregateInput> = selected
            .iter()
            .zip(&results)
            .map(|(&client_id, (adapters, stats))| AggregateInput {
                client_id,
                adapters: adapters.clone(),
                weight: match config.aggregation {
                    AggregationWeighting::UniformOverSelected => {
                        if stats.shard_examples == 0 {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    AggregationWeighting::ProportionalToShardSize => stats.shard_examples as f64,
                },
            })
            .collect();

        let new_global = aggregate(&updates, round)?;
        let gap = ab_product_gap(&updates, &new_global);
        let aggregate_update_l2 = new_global.update_l2(global);

        let log = RoundLog {
            round,
            selected: selected.clone(),
            clients: results.into_iter().map(|(_, s)| s).collect(),
            aggregate_update_l2,
            ab_product_gap: gap,
            uplink_bytes: payload * config.clients_per_round as u64,
            downlink_bytes: payload * config.clients_per_round as u64,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        server.global_adapters = new_global;
        server.round = round + 1;
        server.cumulative_uplink_bytes += log.uplink_bytes;
        server.cumulative_downlink_bytes += log.downlink_bytes;
        on_round(&log, &server.global_adapters)?;
        server.history.push(log);
    }

    Ok(FederationRun {
        adapters: server.global_adapters,
        logs: server.history,
    })
}

/// Full federation run from freshly distributed global adapters.
pub fn run_federation(
    env: &FedEnv,
    config: &FedConfig,
    init: LoraAdapterSet<f32>,
    threads: usize,
) -> Result<FederationRun> {
    run_federation_rounds(env, config, init, 0, threads, |_, _| Ok(()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommReport {
    pub rounds: u32,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub per_round: Vec<(u32, u64, u64)>,
    pub adapter_payload_bytes: u64,
    pub adapter_header_bytes: u64,
    /// Per-round uplink if clients sent every base parameter instead.
    pub full_model_uplink_per_round: u64,
    /// Adapter f32 traffic over full-model f32 traffic; equals the trainable
    /// parameter fraction.
    pub reduction_ratio: f64,
}

/// Totals and the counterfactual full-model-exchange cost.
pub fn account_communication(
    logs: &[RoundLog],
    adapters: &LoraAdapterSet<f32>,
    base_params: usize,
    clients_per_round: usize,
) -> Result<CommReport> {
    if logs.is_empty() {
        return Err(Error::Input("no round logs to account".into()));
    }
    let header = header_bytes(adapters) as u64;
    let payload = payload_bytes(adapters) as u64;
    let m = clients_per_round as u64;
    let per_round: Vec<(u32, u64, u64)> = logs
        .iter()
        .map(|l| (l.round, l.uplink_bytes, l.downlink_bytes))
        .collect();
    let total_uplink_bytes: u64 = logs.iter().map(|l| l.uplink_bytes).sum();
    let total_downlink_bytes: u64 = logs.iter().map(|l| l.downlink_bytes).sum();
    let full_model_uplink_per_round = m * 4 * base_params as u64;
    let adapter_f32_bytes_per_round = m * (payload - header);
    let reduction_ratio =
        adapter_f32_bytes_per_round as f64 / full_model_uplink_per_round as f64;
    Ok(CommReport {
        rounds: logs.len() as u32,
        total_uplink_bytes,
        total_downlink_bytes,
        per_round,
        adapter_payload_bytes: payload,
        adapter_header_bytes: header,
        full_model_uplink_per_round,
        reduction_ratio,
    })
}
