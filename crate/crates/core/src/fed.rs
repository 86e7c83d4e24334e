//! Federated averaging simulator with optional FedProx and local DP.
//!
//! A round selects `max(ceil(C*K), 1)` of the still-active clients, runs
//! their local updates (concurrently when a thread pool is configured),
//! averages the returned parameters with weights `n_k / sum(n_k)` over the
//! reporting clients, and evaluates the new global model.
//!
//! Every random choice is drawn from a stream keyed by `(seed, round)` or
//! `(seed, client, round)`, so thread count never changes results.

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{max_steps_with, to_epsilon_with, AccountantState, Conversion, MechanismParams, PrivacyBudget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{flatten_params, init_model, loss_and_accuracy, unflatten_params, MlpConfig, MlpModel};
use crate::optim::DpSpec;
use crate::rng::{stream_rng, Stream};
use crate::train::{run_epoch, LocalTraining, OptimizerKind, Proximal, Sampling};

/// Local differential privacy applied by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdpConfig {
    pub dp: DpSpec,
    pub budget: PrivacyBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub num_clients: usize,
    pub fraction: f64,
    pub local_batch: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub prox_mu: f64,
    pub ldp: Option<LdpConfig>,
    pub rounds: usize,
    pub optimizer: OptimizerKind,
    pub sampling: Sampling,
    pub conversion: Conversion,
    /// Worker threads for client updates; `1` runs clients sequentially, `0` uses all cores.
    pub threads: usize,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("need at least one client".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "client fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return Err(Error::InvalidArgument("prox_mu must be finite and >= 0".into()));
        }
        self.local_training().validate()
    }

    /// `max(ceil(C * K), 1)`.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.num_clients, self.fraction)
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            lot_size: self.local_batch,
            sampling: self.sampling,
            dp: self.ldp.map(|l| l.dp),
        }
    }
}

fn clients_per_round(k: usize, c: f64) -> usize {
    // guard against 0.7 * 10 = 7.000000000000001 rounding up to 8
    let raw = c * k as f64;
    let m = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (m as usize).clamp(1, k.max(1))
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Dataset,
    pub accountant: Option<AccountantState>,
    /// Steps allowed by the client's budget.
    pub max_steps: Option<u64>,
    pub active: bool,
}

impl ClientState {
    pub fn n_k(&self) -> usize {
        self.shard.len()
    }

    pub fn steps_spent(&self) -> u64 {
        self.accountant.as_ref().map_or(0, |a| a.steps)
    }

    pub fn epsilon(&self, delta: f64, conversion: Conversion) -> Result<Option<f64>> {
        self.accountant
            .as_ref()
            .map(|a| to_epsilon_with(a, delta, conversion).map(|r| r.epsilon))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub id: usize,
    pub steps: u64,
    /// Mean loss of the returned local model on the client's shard.
    pub train_loss: f64,
    pub epsilon: Option<f64>,
    /// Stopped mid-round because the next step would exceed the budget.
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientReport>,
    pub dropped: Vec<usize>,
    /// Privacy spent by every LDP client after this round, by id.
    pub client_epsilon: Vec<(usize, f64)>,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: MlpModel,
    pub round: usize,
    pub history: Vec<RoundReport>,
}

impl ServerState {
    pub fn new(global: MlpModel) -> Self {
        Self { global, round: 0, history: Vec::new() }
    }
}

/// Data used to score the global model after each round.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Disjoint shards of near-equal size (differing by at most one) from a seeded shuffle.
/// Each shard keeps its rows in original dataset order.
pub fn partition_iid(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    let n = dataset.len();
    if num_clients == 0 || num_clients > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {num_clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Partition, &[]));
    let base = n / num_clients;
    let extra = n % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let len = base + usize::from(k < extra);
        let mut part = idx[start..start + len].to_vec();
        part.sort_unstable();
        shards.push(dataset.subset(&part, format!("{}-client{k}", dataset.name)));
        start += len;
    }
    Ok(shards)
}

/// Uniform subset of `min(max(ceil(C*K), 1), |active|)` ids, sorted ascending.
pub fn select_clients(active: &[usize], num_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = clients_per_round(num_clients, fraction).min(active.len());
    let mut rng = stream_rng(seed, Stream::Select, &[round as u64]);
    let mut chosen: Vec<usize> = active.choose_multiple(&mut rng, m).copied().collect();
    chosen.sort_unstable();
    chosen
}

/// Runs `E` local epochs from a copy of `global`. With LDP the client halts as
/// soon as another step would exceed its budget, returns what it has, and is
/// deactivated.
pub fn client_update(
    client: &mut ClientState,
    global: &MlpModel,
    cfg: &RoundConfig,
    seed: u64,
    round: usize,
) -> Result<(MlpModel, ClientReport)> {
    if !client.active {
        return Err(Error::InvalidArgument(format!("client {} is inactive", client.id)));
    }
    if client.shard.is_empty() {
        return Err(Error::Empty(format!("client {} has no data", client.id)));
    }
    let training = cfg.local_training();
    let mut model = global.clone();
    let mut adam = training.new_state(model.param_count());
    let anchor = (cfg.prox_mu > 0.0).then(|| flatten_params(global));
    let prox = anchor.as_deref().map(|a| Proximal { anchor: a, mu: cfg.prox_mu });
    let key = [client.id as u64, round as u64];
    let mut shuffle_rng = stream_rng(seed, Stream::ClientShuffle, &key);
    let mut noise_rng = stream_rng(seed, Stream::ClientNoise, &key);

    let mut steps = 0u64;
    let mut halted = false;
    for _ in 0..cfg.local_epochs {
        let limit = client.max_steps.map(|m| m.saturating_sub(client.steps_spent()));
        if limit == Some(0) {
            halted = true;
            break;
        }
        let out = run_epoch(
            &mut model,
            &mut adam,
            &client.shard,
            &training,
            prox,
            &mut shuffle_rng,
            &mut noise_rng,
            limit,
            &mut |_| {},
        )?;
        steps += out.steps;
        if let Some(acc) = client.accountant.as_mut() {
            *acc = acc.compose(out.steps);
        }
        if out.halted {
            halted = true;
            break;
        }
    }
    if client.max_steps.is_some_and(|m| client.steps_spent() >= m) {
        client.active = false;
    }
    let (train_loss, _) = loss_and_accuracy(&model, &client.shard.features, &client.shard.labels)?;
    let epsilon = match cfg.ldp {
        Some(ldp) => client.epsilon(ldp.budget.delta, cfg.conversion)?,
        None => None,
    };
    Ok((
        model,
        ClientReport { id: client.id, steps, train_loss, epsilon, halted },
    ))
}

/// `sum_k (n_k / n) w_k` over the given updates, summed in list order.
pub fn aggregate_fedavg(updates: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    let first = updates.first().ok_or_else(|| Error::Empty("no client updates to aggregate".into()))?;
    let dim = first.0.len();
    if updates.iter().any(|(w, _)| w.len() != dim) {
        return Err(Error::Shape("client updates differ in length".into()));
    }
    let n: usize = updates.iter().map(|(_, n_k)| n_k).sum();
    if n == 0 {
        return Err(Error::Empty("reporting clients hold no samples".into()));
    }
    let mut out = vec![0.0; dim];
    for (w, n_k) in updates {
        let weight = *n_k as f64 / n as f64;
        out.iter_mut().zip(w).for_each(|(o, v)| *o += weight * v);
    }
    Ok(out)
}

/// Builds a thread pool for `threads` workers; `None` means run sequentially.
pub fn client_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// One communication round.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &RoundConfig,
    eval: EvalSets<'_>,
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RoundReport> {
    let round = server.round + 1;
    let active: Vec<usize> = clients.iter().filter(|c| c.active).map(|c| c.id).collect();
    let selected = select_clients(&active, cfg.num_clients, cfg.fraction, seed, round);

    let global = &server.global;
    let work = |c: &mut ClientState| {
        let id = c.id;
        client_update(c, global, cfg, seed, round).map_err(|e| Error::Client { client: id, source: Box::new(e) })
    };
    let results: Vec<Result<(MlpModel, ClientReport)>> = match pool {
        Some(pool) => pool.install(|| {
            clients
                .par_iter_mut()
                .filter(|c| selected.binary_search(&c.id).is_ok())
                .map(work)
                .collect()
        }),
        None => clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .map(work)
            .collect(),
    };
    let mut updates = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (model, report) = r?;
        let n_k = clients.iter().find(|c| c.id == report.id).map_or(0, ClientState::n_k);
        updates.push((flatten_params(&model), n_k));
        reports.push(report);
    }
    if !updates.is_empty() {
        let averaged = aggregate_fedavg(&updates)?;
        server.global = unflatten_params(&server.global, &averaged)?;
    }
    let dropped: Vec<usize> = reports
        .iter()
        .filter(|r| clients.iter().any(|c| c.id == r.id && !c.active))
        .map(|r| r.id)
        .collect();
    let client_epsilon = match cfg.ldp {
        Some(ldp) => clients
            .iter()
            .filter_map(|c| match c.epsilon(ldp.budget.delta, cfg.conversion) {
                Ok(Some(e)) => Some(Ok((c.id, e))),
                Ok(None) => None,
                Err(e) => Some(Err(e)),
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let (train_loss, train_acc) = loss_and_accuracy(&server.global, &eval.train.features, &eval.train.labels)?;
    let (test_loss, test_acc) = loss_and_accuracy(&server.global, &eval.test.features, &eval.test.labels)?;
    let report = RoundReport {
        round,
        selected,
        clients: reports,
        dropped,
        client_epsilon,
        train_loss,
        train_acc,
        test_loss,
        test_acc,
    };
    server.round = round;
    server.history.push(report.clone());
    Ok(report)
}

/// Builds clients from IID shards of `train`, with per-client accountants under LDP.
pub fn build_clients(cfg: &RoundConfig, train: &Dataset, seed: u64) -> Result<Vec<ClientState>> {
    cfg.validate()?;
    partition_iid(train, cfg.num_clients, seed)?
        .into_iter()
        .enumerate()
        .map(|(id, shard)| {
            let (accountant, max_steps) = match cfg.ldp {
                Some(ldp) => {
                    let params = MechanismParams::from_lot(cfg.local_batch, shard.len(), ldp.dp.noise_multiplier)?;
                    let acc = AccountantState::new(params)?;
                    let t = max_steps_with(&acc, &ldp.budget, cfg.conversion)?;
                    (Some(acc), Some(t))
                }
                None => (None, None),
            };
            Ok(ClientState {
                id,
                active: max_steps != Some(0),
                shard,
                accountant,
                max_steps,
            })
        })
        .collect()
}

/// Full simulation: partition, initialize `w_0` from `seed`, and run `R`
/// rounds, calling `on_round` after each.
pub fn run_federation(
    cfg: &RoundConfig,
    model: &MlpConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    on_round: &mut dyn FnMut(&RoundReport, &[ClientState]) -> Result<()>,
) -> Result<(MlpModel, Vec<RoundReport>)> {
    let mut clients = build_clients(cfg, train, seed)?;
    if cfg.ldp.is_some() && clients.iter().all(|c| !c.active) {
        return Err(Error::BudgetInfeasible(
            "every client would exceed its budget on the first step".into(),
        ));
    }
    let mut server = ServerState::new(init_model(model, seed)?);
    let pool = client_pool(cfg.threads)?;
    let eval = EvalSets { train, test };
    for _ in 0..cfg.rounds {
        let report = run_round(&mut server, &mut clients, cfg, eval, seed, pool.as_ref())?;
        on_round(&report, &clients)?;
    }
    Ok((server.global, server.history))
}
