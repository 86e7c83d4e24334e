//! Minibatch training loops shared by centralized and federated runs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{
    max_steps_with, to_epsilon_with, AccountantState, Conversion, MechanismParams, PrivacyBudget,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{backward_per_sample, flatten_params, forward, init_model, MlpConfig, MlpModel};
use crate::optim::{
    add_proximal_term, adam_step, dp_adam_step, dp_sgd_step, sgd_step, AdamState, ClippedSum, DpSpec,
    StepReport,
};
use crate::rng::{stream_rng, Stream, StreamRng};

/// Samples processed per forward/backward pass inside one lot.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    DpSgd,
    DpAdam,
}

impl OptimizerKind {
    pub fn is_private(self) -> bool {
        matches!(self, OptimizerKind::DpSgd | OptimizerKind::DpAdam)
    }

    fn uses_adam(self) -> bool {
        matches!(self, OptimizerKind::Adam | OptimizerKind::DpAdam)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "dp-sgd" => Ok(OptimizerKind::DpSgd),
            "dp-adam" => Ok(OptimizerKind::DpAdam),
            other => Err(format!("unknown optimizer `{other}` (sgd, adam, dp-sgd, dp-adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::DpSgd => "dp-sgd",
            OptimizerKind::DpAdam => "dp-adam",
        })
    }
}

/// How lots are drawn from the local data each epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Shuffle, then cut into `ceil(n / L)` consecutive lots.
    #[default]
    Shuffle,
    /// `ceil(n / L)` lots per epoch, each sample included independently with probability `L / n`.
    Poisson,
}

impl std::str::FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shuffle" => Ok(Sampling::Shuffle),
            "poisson" => Ok(Sampling::Poisson),
            other => Err(format!("unknown sampling `{other}` (shuffle or poisson)")),
        }
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampling::Shuffle => "shuffle",
            Sampling::Poisson => "poisson",
        })
    }
}

/// Optimizer, lot size and privatization used for local steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lot_size: usize,
    pub sampling: Sampling,
    /// Required exactly when `optimizer` is private.
    pub dp: Option<DpSpec>,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.lot_size == 0 {
            return Err(Error::InvalidArgument("lot size must be >= 1".into()));
        }
        match (self.optimizer.is_private(), self.dp.is_some()) {
            (true, false) => Err(Error::InvalidArgument(format!(
                "{} needs clipping and noise parameters",
                self.optimizer
            ))),
            (false, true) => Err(Error::InvalidArgument(format!(
                "{} is not a private optimizer but DP parameters were given",
                self.optimizer
            ))),
            _ => Ok(()),
        }
    }

    pub fn new_state(&self, param_count: usize) -> Option<AdamState> {
        self.optimizer.uses_adam().then(|| AdamState::new(param_count))
    }
}

/// FedProx anchor: adds `mu * (w - anchor)` to every step's gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a [f64],
    pub mu: f64,
}

/// Per-step callback payload.
#[derive(Debug, Clone)]
pub struct StepInfo<'a> {
    pub batch_size: usize,
    /// Present for private optimizers.
    pub report: Option<&'a StepReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochOutcome {
    pub steps: u64,
    /// The step limit stopped the epoch early.
    pub halted: bool,
}

fn lots<R: Rng>(n: usize, lot_size: usize, sampling: Sampling, rng: &mut R) -> Vec<Vec<usize>> {
    let steps = n.div_ceil(lot_size);
    match sampling {
        Sampling::Shuffle => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(lot_size)
                .map(|c| {
                    // lots are sets; a canonical order keeps sums independent of the shuffle
                    let mut lot = c.to_vec();
                    lot.sort_unstable();
                    lot
                })
                .collect()
        }
        Sampling::Poisson => {
            let q = (lot_size as f64 / n as f64).min(1.0);
            (0..steps)
                .map(|_| (0..n).filter(|_| rng.random::<f64>() < q).collect())
                .collect()
        }
    }
}

/// Sums per-sample gradients of `lot` into `acc`, `CHUNK` samples at a time.
fn accumulate(model: &MlpModel, data: &Dataset, lot: &[usize], acc: &mut ClippedSum) -> Result<()> {
    for chunk in lot.chunks(CHUNK) {
        let x = data.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (_, cache) = forward(model, &x)?;
        let grads = backward_per_sample(model, &cache, &y)?;
        acc.add(&grads)?;
    }
    Ok(())
}

/// Runs one pass over `data`, taking at most `step_limit` optimizer steps.
///
/// Private lots are normalized by the configured lot size even when the last
/// shuffled lot is short, matching the accountant's fixed-`L` assumption.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    model: &mut MlpModel,
    adam: &mut Option<AdamState>,
    data: &Dataset,
    cfg: &LocalTraining,
    prox: Option<Proximal<'_>>,
    shuffle_rng: &mut StreamRng,
    noise_rng: &mut StreamRng,
    step_limit: Option<u64>,
    on_step: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<EpochOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training on an empty dataset".into()));
    }
    let p = model.param_count();
    let mut steps = 0u64;
    for lot in lots(data.len(), cfg.lot_size, cfg.sampling, shuffle_rng) {
        if step_limit.is_some_and(|limit| steps >= limit) {
            return Ok(EpochOutcome { steps, halted: true });
        }
        let (mut grad, report) = match cfg.dp {
            Some(spec) => {
                let mut acc = ClippedSum::new(p, Some(spec.clip_norm));
                accumulate(model, data, &lot, &mut acc)?;
                let (g, rep) = acc.privatize(&spec, cfg.lot_size, noise_rng)?;
                (g, Some(rep))
            }
            None => {
                if lot.is_empty() {
                    continue;
                }
                let mut acc = ClippedSum::new(p, None);
                accumulate(model, data, &lot, &mut acc)?;
                (acc.mean()?.0, None)
            }
        };
        if let Some(prox) = prox {
            if prox.mu != 0.0 {
                add_proximal_term(&mut grad, &flatten_params(model), prox.anchor, prox.mu)?;
            }
        }
        match (cfg.optimizer, adam.as_mut()) {
            (OptimizerKind::Sgd, _) => sgd_step(model, &grad, cfg.learning_rate)?,
            (OptimizerKind::DpSgd, _) => dp_sgd_step(model, &grad, cfg.learning_rate)?,
            (OptimizerKind::Adam, Some(st)) => adam_step(model, st, &grad, cfg.learning_rate)?,
            (OptimizerKind::DpAdam, Some(st)) => dp_adam_step(model, st, &grad, cfg.learning_rate)?,
            (_, None) => return Err(Error::InvalidArgument("Adam optimizer without state".into())),
        }
        steps += 1;
        on_step(&StepInfo {
            batch_size: lot.len(),
            report: report.as_ref(),
        });
    }
    Ok(EpochOutcome { steps, halted: false })
}

/// Everything needed for a centralized run.
#[derive(Debug, Clone)]
pub struct CentralSetup {
    pub model: MlpConfig,
    pub training: LocalTraining,
    pub epochs: usize,
    /// Stops the run before the accountant would exceed this budget.
    pub budget: Option<PrivacyBudget>,
    pub conversion: Conversion,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub total_steps: u64,
    pub epsilon: Option<f64>,
    pub halted: bool,
}

#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub model: MlpModel,
    pub total_steps: u64,
    /// `None` without private optimization or with zero noise.
    pub epsilon: Option<f64>,
    /// Accountant limit for the configured budget.
    pub max_steps: Option<u64>,
}

/// Accountant for a run over `n` local samples, if the setup is private with positive noise.
pub fn accountant_for(training: &LocalTraining, n: usize) -> Result<Option<AccountantState>> {
    match training.dp {
        Some(spec) if spec.noise_multiplier > 0.0 => {
            let params = MechanismParams::from_lot(training.lot_size, n, spec.noise_multiplier)?;
            Ok(Some(AccountantState::new(params)?))
        }
        _ => Ok(None),
    }
}

/// Trains one model on `train` for `setup.epochs` epochs (or until the budget
/// binds), calling `on_epoch` after each epoch, including a final partial one.
pub fn train_central(
    setup: &CentralSetup,
    train: &Dataset,
    on_epoch: &mut dyn FnMut(&MlpModel, &EpochSummary) -> Result<()>,
    on_step: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<CentralOutcome> {
    setup.training.validate()?;
    let mut model = init_model(&setup.model, setup.seed)?;
    let mut adam = setup.training.new_state(model.param_count());
    let accountant = accountant_for(&setup.training, train.len())?;
    let max_steps = match (&setup.budget, &accountant) {
        (Some(budget), Some(acc)) => {
            let t = max_steps_with(acc, budget, setup.conversion)?;
            if t == 0 {
                return Err(Error::BudgetInfeasible(format!(
                    "epsilon {} is exceeded by the first step",
                    budget.epsilon
                )));
            }
            Some(t)
        }
        (Some(_), None) if setup.training.dp.is_some() => {
            return Err(Error::BudgetInfeasible(
                "a finite budget needs a positive noise multiplier".into(),
            ))
        }
        _ => None,
    };
    let delta = setup.budget.map_or(1e-5, |b| b.delta);
    let mut shuffle_rng = stream_rng(setup.seed, Stream::Shuffle, &[]);
    let mut noise_rng = stream_rng(setup.seed, Stream::Noise, &[]);
    let mut total = 0u64;
    let mut epsilon = None;
    for epoch in 1..=setup.epochs {
        let limit = max_steps.map(|m| m - total);
        if limit == Some(0) {
            break;
        }
        let out = run_epoch(
            &mut model,
            &mut adam,
            train,
            &setup.training,
            None,
            &mut shuffle_rng,
            &mut noise_rng,
            limit,
            on_step,
        )?;
        total += out.steps;
        epsilon = accountant
            .as_ref()
            .map(|acc| to_epsilon_with(&acc.at_steps(total), delta, setup.conversion).map(|r| r.epsilon))
            .transpose()?;
        let summary = EpochSummary {
            epoch,
            total_steps: total,
            epsilon,
            halted: out.halted,
        };
        on_epoch(&model, &summary)?;
        if out.halted {
            break;
        }
    }
    Ok(CentralOutcome {
        model,
        total_steps: total,
        epsilon,
        max_steps,
    })
}
