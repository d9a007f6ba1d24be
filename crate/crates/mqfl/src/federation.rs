//! Federated orchestration: dataset partitioning into client shards,
//! synchronous local-training rounds, and dataset-size-weighted parameter
//! aggregation with a global broadcast between rounds.
//!
//! Every round proceeds broadcast -> parallel local training -> weighted
//! average. All clients participate in every round; aggregation is a strict
//! barrier and any client failure aborts the round (no partial average).
//! Client RNG streams are derived from (seed, client, round) so the result
//! is independent of thread scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerSpec;
use crate::circuits::NoiseSpec;
use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::seeds::derive_seed;

/// Give up on a partition draw after this many fresh attempts fail to make
/// every shard non-empty.
pub const MAX_PARTITION_RETRIES: usize = 100;

/// Client dataset-size profile the label-skewed partition mimics: each
/// client's label histogram follows these proportions, rotated per client.
const LABEL_SKEW_PROFILE: [f64; 6] = [12500.0, 6000.0, 5000.0, 4050.0, 2250.0, 1900.0];

/// How samples are distributed across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Uniform random split; shard sizes differ by at most one.
    Iid,
    /// Each client leans toward different labels, with proportions scaled
    /// from a fixed imbalanced size profile.
    LabelSkew,
    /// Per-label client shares drawn from a symmetric Dirichlet; small
    /// `alpha` concentrates each label on few clients.
    Dirichlet { alpha: f64 },
}

/// Splits a dataset into `num_clients` non-empty shards. Deterministic in
/// `seed`; schemes that can draw an empty shard redraw with a fresh
/// sub-seed, up to [`MAX_PARTITION_RETRIES`] times.
pub fn partition(
    dataset: &MultimodalDataset,
    num_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<MultimodalDataset>> {
    let n = dataset.samples.len();
    if num_clients == 0 {
        return Err(Error::config("num_clients", "need at least one client"));
    }
    if n < num_clients {
        return Err(Error::config(
            "num_clients",
            format!("{n} samples cannot cover {num_clients} clients"),
        ));
    }
    if let PartitionScheme::Dirichlet { alpha } = scheme {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::config(
                "partition.alpha",
                format!("concentration must be positive and finite, got {alpha}"),
            ));
        }
    }
    if num_clients == 1 {
        return Ok(vec![dataset.clone()]);
    }
    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "partition", attempt as u64));
        let assignment = match scheme {
            PartitionScheme::Iid => assign_iid(n, num_clients, &mut rng),
            PartitionScheme::LabelSkew => {
                let rotation = rng.random_range(0..LABEL_SKEW_PROFILE.len());
                assign_by_label_shares(dataset, num_clients, &mut rng, |label, client, _| {
                    LABEL_SKEW_PROFILE[(label + client + rotation) % LABEL_SKEW_PROFILE.len()]
                })
            }
            PartitionScheme::Dirichlet { alpha } => {
                let gamma = Gamma::new(alpha, 1.0).map_err(|e| {
                    Error::config("partition.alpha", format!("invalid concentration: {e}"))
                })?;
                assign_by_label_shares(dataset, num_clients, &mut rng, |_, _, rng| {
                    gamma.sample(rng)
                })
            }
        };
        if assignment.iter().all(|shard| !shard.is_empty()) {
            return Ok(build_shards(dataset, assignment));
        }
    }
    Err(Error::config(
        "partition",
        format!("could not produce non-empty shards after {MAX_PARTITION_RETRIES} retries"),
    ))
}

/// Shuffle then deal round-robin: sizes differ by at most one and every
/// client is non-empty whenever `n >= num_clients`.
fn assign_iid(n: usize, num_clients: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut assignment = vec![Vec::with_capacity(n.div_ceil(num_clients)); num_clients];
    for (i, sample) in order.into_iter().enumerate() {
        assignment[i % num_clients].push(sample);
    }
    assignment
}

/// Splits each label's samples across clients proportionally to
/// `weight(label, client)`, using largest-remainder rounding so each
/// label's count is preserved exactly.
fn assign_by_label_shares<F>(
    dataset: &MultimodalDataset,
    num_clients: usize,
    rng: &mut ChaCha8Rng,
    mut weight: F,
) -> Vec<Vec<usize>>
where
    F: FnMut(usize, usize, &mut ChaCha8Rng) -> f64,
{
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, sample) in dataset.samples.iter().enumerate() {
        groups[sample.label].push(i);
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (label, group) in groups.iter_mut().enumerate() {
        group.shuffle(rng);
        let weights: Vec<f64> = (0..num_clients)
            .map(|client| weight(label, client, rng))
            .collect();
        let counts = apportion(group.len(), &weights);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&group[cursor..cursor + count]);
            cursor += count;
        }
    }
    for shard in &mut assignment {
        shard.sort_unstable();
    }
    assignment
}

/// Largest-remainder apportionment of `count` items over `weights`; ties
/// break toward the lower index so the result is deterministic.
fn apportion(count: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut counts = vec![0usize; weights.len()];
    if !(total > 0.0) {
        counts[0] = count;
        return counts;
    }
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (k, w) in weights.iter().enumerate() {
        let quota = count as f64 * w / total;
        let floor = quota.floor() as usize;
        counts[k] = floor;
        assigned += floor;
        remainders.push((quota - floor as f64, k));
    }
    remainders.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    for &(_, k) in remainders.iter().take(count - assigned) {
        counts[k] += 1;
    }
    counts
}

fn build_shards(dataset: &MultimodalDataset, assignment: Vec<Vec<usize>>) -> Vec<MultimodalDataset> {
    assignment
        .into_iter()
        .map(|indices| MultimodalDataset {
            specs: dataset.specs.clone(),
            num_classes: dataset.num_classes,
            samples: indices
                .into_iter()
                .map(|i| dataset.samples[i].clone())
                .collect(),
        })
        .collect()
}

/// Size-weighted mean of client parameter vectors: sum over clients of
/// (D_k / D) * params_k, accumulated in the given (client id) order so the
/// reduction is deterministic. Every slot is averaged the same way,
/// modality blocks and fusion block alike.
pub fn aggregate(client_params: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    let Some(first) = client_params.first() else {
        return Err(Error::structural("aggregate needs at least one client"));
    };
    let len = first.0.len();
    let mut total = 0u64;
    for (k, (params, size)) in client_params.iter().enumerate() {
        if params.len() != len {
            return Err(Error::structural(format!(
                "client {k} supplied {} parameters where the first client has {len}",
                params.len()
            )));
        }
        if *size == 0 {
            return Err(Error::structural(format!("client {k} reports an empty shard")));
        }
        total += *size as u64;
    }
    if client_params.len() == 1 {
        return Ok(first.0.clone());
    }
    let total = total as f64;
    let mut out = vec![0.0; len];
    for (params, size) in client_params {
        let w = *size as f64 / total;
        for (acc, p) in out.iter_mut().zip(params) {
            *acc += w * p;
        }
    }
    Ok(out)
}

/// One simulated participant: an id, its local shard, and the parameter
/// vector it trains between broadcasts.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: MultimodalDataset,
    pub params: Vec<f64>,
}

impl ClientState {
    pub fn new(client_id: usize, shard: MultimodalDataset, params: Vec<f64>) -> Result<Self> {
        if shard.samples.is_empty() {
            return Err(Error::structural(format!("client {client_id} has an empty shard")));
        }
        Ok(ClientState {
            client_id,
            shard,
            params,
        })
    }

    /// Local sample count; the numerator of this client's aggregation weight.
    pub fn data_size(&self) -> usize {
        self.shard.samples.len()
    }
}

/// Server-side shared parameters after `round` completed rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: Vec<f64>,
    pub round: usize,
}

/// Everything recorded about one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Zero-based round index.
    pub round: usize,
    /// Each client's local training loss after its final epoch, by client id.
    pub client_losses: Vec<f64>,
    /// Accuracy of the freshly aggregated model over the held-out test set.
    pub test_accuracy: f64,
    /// Test accuracy when only one modality is presented, indexed like the
    /// modality specs; 0 when no test sample carries that modality.
    pub modality_accuracy: Vec<f64>,
    /// Seconds this round spent training and evaluating.
    pub wall_time_secs: f64,
}

/// Schedule and local-solver settings for [`run_federation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationOptions {
    pub rounds: usize,
    pub local_epochs: usize,
    pub optimizer: OptimizerSpec,
    pub noise: NoiseSpec,
}

/// Runs synchronous federated training over pre-partitioned shards.
///
/// `model` enters holding the initial global parameters and exits holding
/// the final aggregated ones. Each round broadcasts the global vector to
/// every client bitwise, trains the clients in parallel (fresh optimizer,
/// noise stream derived from the client id and round), aggregates by shard
/// size, and evaluates the aggregate noiselessly on `test`. `on_round` sees
/// each report and the updated model as soon as the round closes.
pub fn run_federation(
    model: &mut MultimodalModel,
    shards: Vec<MultimodalDataset>,
    test: &MultimodalDataset,
    options: &FederationOptions,
    mut on_round: impl FnMut(&RoundReport, &MultimodalModel) -> Result<()>,
) -> Result<(GlobalModel, Vec<RoundReport>)> {
    if options.rounds == 0 {
        return Err(Error::config("rounds", "need at least one round"));
    }
    if options.local_epochs == 0 {
        return Err(Error::config("local_epochs", "need at least one local epoch"));
    }
    if shards.is_empty() {
        return Err(Error::structural("run_federation needs at least one shard"));
    }
    let mut clients = shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| ClientState::new(k, shard, model.params().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(options.rounds);
    for round in 0..options.rounds {
        let start = Instant::now();
        let global = model.params().to_vec();
        for client in &mut clients {
            client.params.clone_from(&global);
        }
        let results = clients
            .par_iter()
            .map(|client| {
                train_client(model, client, options, round).map_err(|e| {
                    e.with_context(&format!("client {} round {round}", client.client_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut client_losses = Vec::with_capacity(results.len());
        let mut weighted = Vec::with_capacity(results.len());
        for ((params, loss), client) in results.into_iter().zip(&clients) {
            client_losses.push(loss);
            weighted.push((params, client.data_size()));
        }
        let new_global = aggregate(&weighted)?;
        model.set_params(&new_global)?;
        let test_accuracy = model.accuracy(&test.samples)?;
        let modality_accuracy = (0..model.num_modalities())
            .map(|m| {
                Ok(model
                    .accuracy_single_modality(&test.samples, m)?
                    .unwrap_or(0.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = RoundReport {
            round,
            client_losses,
            test_accuracy,
            modality_accuracy,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        on_round(&report, model)?;
        reports.push(report);
    }
    let global = GlobalModel {
        params: model.params().to_vec(),
        round: options.rounds,
    };
    Ok((global, reports))
}

/// One client's round: copy the architecture, load the broadcast
/// parameters, run local full-batch training, and hand back the trained
/// vector with the final loss.
fn train_client(
    model: &MultimodalModel,
    client: &ClientState,
    options: &FederationOptions,
    round: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut local = model.clone();
    local.set_params(&client.params)?;
    let mut opt = options.optimizer.build(local.num_params())?;
    let noise = client_noise(&options.noise, client.client_id, round);
    let trace = local.local_train(
        &client.shard.samples,
        options.local_epochs,
        &mut opt,
        &noise,
    )?;
    let loss = *trace.last().expect("loss trace is never empty");
    Ok((local.params().to_vec(), loss))
}

/// Derives an independent noise stream for (client, round) so parallel
/// clients never share trajectories regardless of scheduling.
fn client_noise(noise: &NoiseSpec, client_id: usize, round: usize) -> NoiseSpec {
    let per_client = derive_seed(noise.seed, "client", client_id as u64);
    NoiseSpec {
        seed: derive_seed(per_client, "round", round as u64),
        ..*noise
    }
}
