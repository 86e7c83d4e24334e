//! Config-driven experiments: parsing, orchestration of the four training
//! modes, JSONL metrics and the accountant calculator.
//!
//! Config files are flat `key = value` lines; `#` starts a comment.
//!
//! ```text
//! mode = central-dp
//! seed = 7
//! data.synthetic.n_samples = 10000
//! train.lot_size = 512
//! dp.noise_multiplier = 1.1
//! dp.epsilon = 8
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{
    max_steps_with, sigma_for_budget_with, to_epsilon_with, AccountantState, Conversion, MechanismParams,
    PrivacyBudget, SigmaSearch,
};
use crate::data::{load_csv, normalize_apply, normalize_fit, split, synth_blobs, Dataset, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fed::{run_federation, LdpConfig, RoundConfig};
use crate::nn::{loss_and_accuracy, Activation, MlpConfig};
use crate::optim::DpSpec;
use crate::train::{train_central, CentralSetup, LocalTraining, OptimizerKind, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Central,
    CentralDp,
    Fed,
    FedLdp,
}

impl Mode {
    pub fn is_private(self) -> bool {
        matches!(self, Mode::CentralDp | Mode::FedLdp)
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Mode::Fed | Mode::FedLdp)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(Mode::Central),
            "central-dp" => Ok(Mode::CentralDp),
            "fed" => Ok(Mode::Fed),
            "fed-ldp" => Ok(Mode::FedLdp),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (central, central-dp, fed, fed-ldp)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Central => "central",
            Mode::CentralDp => "central-dp",
            Mode::Fed => "fed",
            Mode::FedLdp => "fed-ldp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSection {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Training stops before the accountant would exceed this.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub conversion: Conversion,
}

impl DpSection {
    pub fn spec(&self) -> DpSpec {
        DpSpec { clip_norm: self.clip_norm, noise_multiplier: self.noise_multiplier }
    }

    pub fn budget(&self) -> Option<PrivacyBudget> {
        self.epsilon.map(|epsilon| PrivacyBudget { epsilon, delta: self.delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedSection {
    pub clients: usize,
    pub fraction: f64,
    pub local_batch: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub prox_mu: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub sampling: Sampling,
    pub data: DataSource,
    pub split: SplitSpec,
    pub normalize: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lot_size: usize,
    pub epochs: usize,
    pub dp: Option<DpSection>,
    pub fed: Option<FedSection>,
    /// Record elapsed time; when off every `wall_time_s` is 0 so reruns compare byte for byte.
    pub wall_time: bool,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "sampling",
    "data.path",
    "data.synthetic.n_samples",
    "data.synthetic.n_features",
    "data.synthetic.separation",
    "data.synthetic.noise_std",
    "data.split",
    "data.normalize",
    "model.hidden",
    "model.activation",
    "train.optimizer",
    "train.learning_rate",
    "train.lot_size",
    "train.epochs",
    "dp.clip_norm",
    "dp.noise_multiplier",
    "dp.epsilon",
    "dp.delta",
    "dp.conversion",
    "fed.clients",
    "fed.fraction",
    "fed.local_batch",
    "fed.local_epochs",
    "fed.rounds",
    "fed.prox_mu",
    "fed.threads",
    "output.wall_time",
];

/// Reads `key = value` pairs, rejecting duplicates and malformed lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(k, "given more than once"));
        }
    }
    Ok(pairs)
}

struct Pairs {
    map: BTreeMap<String, String>,
}

impl Pairs {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str, why: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::config(key, format!("required {why}")))
    }

    fn section(&self, prefix: &str) -> Option<&str> {
        self.map.keys().find(|k| k.starts_with(prefix)).map(String::as_str)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<T>()
                            .map_err(|e| Error::config(key, format!("cannot parse `{p}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

fn check(key: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Validates and fills defaults.
    pub fn from_pairs(map: BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown key"));
        }
        let p = Pairs { map };
        let mode: Mode = p.required("mode", "in every config")?;

        let data = match (p.raw("data.path"), p.section("data.synthetic.")) {
            (Some(_), Some(k)) => return Err(Error::config(k, "data.path and data.synthetic.* are exclusive")),
            (Some(path), None) => DataSource::Csv(PathBuf::from(path)),
            (None, Some(_)) => {
                let spec = SyntheticSpec {
                    n_samples: p.or("data.synthetic.n_samples", 10_000)?,
                    n_features: p.or("data.synthetic.n_features", 10)?,
                    class_separation: p.or("data.synthetic.separation", 6.0)?,
                    noise_std: p.or("data.synthetic.noise_std", 1.0)?,
                };
                spec.validate().map_err(|e| Error::config("data.synthetic", e.to_string()))?;
                DataSource::Synthetic(spec)
            }
            (None, None) => return Err(Error::config("data", "set data.path or data.synthetic.*")),
        };
        let split = match p.list::<f64>("data.split")? {
            None => SplitSpec::default(),
            Some(v) if v.len() == 3 => {
                SplitSpec::new(v[0], v[1], v[2]).map_err(|e| Error::config("data.split", e.to_string()))?
            }
            Some(_) => return Err(Error::config("data.split", "expected three fractions")),
        };

        let hidden = p.list::<usize>("model.hidden")?.unwrap_or_else(|| vec![64, 64, 64]);
        check("model.hidden", hidden.iter().all(|&h| h > 0), "widths must be positive")?;
        let default_opt = if mode.is_private() { OptimizerKind::DpAdam } else { OptimizerKind::Adam };
        let optimizer: OptimizerKind = p.or("train.optimizer", default_opt)?;
        check(
            "train.optimizer",
            optimizer.is_private() == mode.is_private(),
            if mode.is_private() { "this mode needs dp-sgd or dp-adam" } else { "this mode needs sgd or adam" },
        )?;
        let learning_rate: f64 = p.or("train.learning_rate", 0.001)?;
        check("train.learning_rate", learning_rate > 0.0 && learning_rate.is_finite(), "must be positive")?;
        let lot_size: usize = p.or("train.lot_size", 256)?;
        check("train.lot_size", lot_size > 0, "must be positive")?;

        let dp = if mode.is_private() {
            let noise_multiplier: f64 = p.required("dp.noise_multiplier", &format!("by mode {mode}"))?;
            let clip_norm: f64 = p.or("dp.clip_norm", 4.0)?;
            DpSpec::new(clip_norm, noise_multiplier).map_err(|e| {
                let key = if noise_multiplier >= 0.0 && noise_multiplier.is_finite() { "dp.clip_norm" } else { "dp.noise_multiplier" };
                Error::config(key, e.to_string())
            })?;
            let epsilon: Option<f64> = if mode == Mode::FedLdp {
                Some(p.required("dp.epsilon", "by mode fed-ldp")?)
            } else {
                p.get("dp.epsilon")?
            };
            let delta: f64 = p.or("dp.delta", 1e-5)?;
            PrivacyBudget::new(epsilon.unwrap_or(1.0), delta).map_err(|e| {
                let key = if epsilon.is_some_and(|e| !(e > 0.0)) { "dp.epsilon" } else { "dp.delta" };
                Error::config(key, e.to_string())
            })?;
            Some(DpSection {
                clip_norm,
                noise_multiplier,
                epsilon,
                delta,
                conversion: p.or("dp.conversion", Conversion::Classic)?,
            })
        } else {
            if let Some(k) = p.section("dp.") {
                return Err(Error::config(k, format!("mode {mode} does not use a dp section")));
            }
            None
        };

        let fed = if mode.is_federated() {
            let section = FedSection {
                clients: p.required("fed.clients", &format!("by mode {mode}"))?,
                fraction: p.or("fed.fraction", 1.0)?,
                local_batch: p.or("fed.local_batch", lot_size)?,
                local_epochs: p.or("fed.local_epochs", 1)?,
                rounds: p.or("fed.rounds", 20)?,
                prox_mu: p.or("fed.prox_mu", 0.0)?,
                threads: p.or("fed.threads", 1)?,
            };
            check("fed.clients", section.clients > 0, "must be positive")?;
            check("fed.fraction", section.fraction > 0.0 && section.fraction <= 1.0, "must lie in (0, 1]")?;
            check("fed.local_batch", section.local_batch > 0, "must be positive")?;
            check("fed.prox_mu", section.prox_mu >= 0.0 && section.prox_mu.is_finite(), "must be >= 0")?;
            Some(section)
        } else {
            if let Some(k) = p.section("fed.") {
                return Err(Error::config(k, format!("mode {mode} does not use a fed section")));
            }
            None
        };

        Ok(Self {
            mode,
            seed: p.or("seed", 0)?,
            sampling: p.or("sampling", Sampling::Shuffle)?,
            data,
            split,
            normalize: p.or("data.normalize", true)?,
            hidden,
            activation: p.or("model.activation", Activation::ReLU)?,
            optimizer,
            learning_rate,
            lot_size,
            epochs: p.or("train.epochs", 50)?,
            dp,
            fed,
            wall_time: p.or("output.wall_time", true)?,
        })
    }

    /// Every resolved setting as dotted key/value pairs; `from_pairs` inverts this.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("mode", self.mode.to_string());
        put("seed", self.seed.to_string());
        put("sampling", self.sampling.to_string());
        match &self.data {
            DataSource::Csv(path) => put("data.path", path.display().to_string()),
            DataSource::Synthetic(s) => {
                put("data.synthetic.n_samples", s.n_samples.to_string());
                put("data.synthetic.n_features", s.n_features.to_string());
                put("data.synthetic.separation", s.class_separation.to_string());
                put("data.synthetic.noise_std", s.noise_std.to_string());
            }
        }
        put("data.split", format!("{},{},{}", self.split.train, self.split.val, self.split.test));
        put("data.normalize", self.normalize.to_string());
        put("model.hidden", self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        put("model.activation", self.activation.to_string());
        put("train.optimizer", self.optimizer.to_string());
        put("train.learning_rate", self.learning_rate.to_string());
        put("train.lot_size", self.lot_size.to_string());
        put("train.epochs", self.epochs.to_string());
        if let Some(dp) = &self.dp {
            put("dp.clip_norm", dp.clip_norm.to_string());
            put("dp.noise_multiplier", dp.noise_multiplier.to_string());
            if let Some(e) = dp.epsilon {
                put("dp.epsilon", e.to_string());
            }
            put("dp.delta", dp.delta.to_string());
            put("dp.conversion", dp.conversion.to_string());
        }
        if let Some(f) = &self.fed {
            put("fed.clients", f.clients.to_string());
            put("fed.fraction", f.fraction.to_string());
            put("fed.local_batch", f.local_batch.to_string());
            put("fed.local_epochs", f.local_epochs.to_string());
            put("fed.rounds", f.rounds.to_string());
            put("fed.prox_mu", f.prox_mu.to_string());
            put("fed.threads", f.threads.to_string());
        }
        put("output.wall_time", self.wall_time.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Same config with one key replaced, revalidated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut pairs = self.to_pairs();
        pairs.insert(key.to_string(), value.to_string());
        Self::from_pairs(pairs)
    }

    pub fn training(&self) -> LocalTraining {
        LocalTraining {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            lot_size: self.lot_size,
            sampling: self.sampling,
            dp: self.dp.map(|d| d.spec()),
        }
    }

    pub fn round_config(&self) -> Option<RoundConfig> {
        let f = self.fed?;
        Some(RoundConfig {
            num_clients: f.clients,
            fraction: f.fraction,
            local_batch: f.local_batch,
            local_epochs: f.local_epochs,
            learning_rate: self.learning_rate,
            prox_mu: f.prox_mu,
            ldp: self
                .dp
                .and_then(|d| d.budget().map(|budget| LdpConfig { dp: d.spec(), budget })),
            rounds: f.rounds,
            optimizer: self.optimizer,
            sampling: self.sampling,
            conversion: self.dp.map_or(Conversion::Classic, |d| d.conversion),
            threads: f.threads,
        })
    }
}

/// One config per value of `key`, all other settings held fixed.
pub fn sweep(base: &ExperimentConfig, key: &str, values: &[&str]) -> Result<Vec<ExperimentConfig>> {
    values.iter().map(|v| base.with(key, v)).collect()
}

/// Train/validation/test splits, normalized with train statistics when enabled.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = match &cfg.data {
        DataSource::Csv(path) => load_csv(path).map_err(|e| Error::DataLoad {
            path: path.display().to_string(),
            source: Box::new(e),
        })?,
        DataSource::Synthetic(spec) => synth_blobs(spec, cfg.seed)?,
    };
    let (train, val, test) = split(&full, &cfg.split, cfg.seed)?;
    if !cfg.normalize {
        return Ok(Splits { train, val, test });
    }
    let norm = normalize_fit(&train)?;
    Ok(Splits {
        train: normalize_apply(&norm, &train)?,
        val: normalize_apply(&norm, &val)?,
        test: normalize_apply(&norm, &test)?,
    })
}

/// One metrics line: per epoch in central modes, per round in federated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    /// Optimizer steps so far, summed over clients in federated modes.
    pub steps: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Central: the model's ε. Federated LDP: the largest client ε.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_spent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_epsilon: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_clients: Option<usize>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: BTreeMap<String, String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: usize,
    pub total_steps: u64,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_spent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl RunSummary {
    pub fn from_records(records: &[MetricRecord]) -> Self {
        Self {
            records: records.len(),
            total_steps: records.last().map_or(0, |r| r.steps),
            final_test_acc: records.last().map(|r| r.test_acc),
            best_test_acc: records.iter().map(|r| r.test_acc).reduce(f64::max),
            epsilon_spent: records.last().and_then(|r| r.epsilon_spent),
            max_steps: None,
        }
    }
}

/// A line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MetricLine {
    Header(RunHeader),
    Record(MetricRecord),
    Summary(RunSummary),
}

/// Streams JSONL lines to a writer, flushing after each.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, line: &MetricLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Writes a complete metrics file.
pub fn emit_metrics(header: &RunHeader, records: &[MetricRecord], summary: &RunSummary, path: impl AsRef<Path>) -> Result<()> {
    let mut w = MetricsWriter::new(BufWriter::new(File::create(path)?));
    w.write(&MetricLine::Header(header.clone()))?;
    for r in records {
        w.write(&MetricLine::Record(r.clone()))?;
    }
    w.write(&MetricLine::Summary(summary.clone()))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricLine>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Runs the configured mode, streaming metrics to `sink`.
pub fn run_experiment<W: Write>(cfg: &ExperimentConfig, sink: &mut MetricsWriter<W>) -> Result<RunSummary> {
    let start = Instant::now();
    let elapsed = || if cfg.wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let splits = load_data(cfg)?;
    let model_cfg = MlpConfig {
        input_dim: splits.train.n_features(),
        hidden_dims: cfg.hidden.clone(),
        output_dim: splits.train.num_classes().max(splits.test.num_classes()),
        activation: cfg.activation,
    };
    model_cfg.validate()?;
    sink.write(&MetricLine::Header(RunHeader {
        config: cfg.to_pairs(),
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        n_features: splits.train.n_features(),
        param_count: model_cfg.param_count(),
    }))?;
    let mut records = Vec::new();
    let mut max_steps = None;

    if let Some(round_cfg) = cfg.round_config() {
        let mut total = 0u64;
        run_federation(&round_cfg, &model_cfg, &splits.train, &splits.test, cfg.seed, &mut |rep, clients| {
            total += rep.clients.iter().map(|c| c.steps).sum::<u64>();
            let client_epsilon: Option<BTreeMap<String, f64>> = round_cfg
                .ldp
                .is_some()
                .then(|| rep.client_epsilon.iter().map(|(id, e)| (id.to_string(), *e)).collect());
            let record = MetricRecord {
                epoch: None,
                round: Some(rep.round),
                steps: total,
                train_loss: rep.train_loss,
                train_acc: rep.train_acc,
                test_loss: rep.test_loss,
                test_acc: rep.test_acc,
                epsilon_spent: client_epsilon.as_ref().and_then(|m| m.values().copied().reduce(f64::max)),
                client_epsilon,
                active_clients: Some(clients.iter().filter(|c| c.active).count()),
                wall_time_s: elapsed(),
            };
            sink.write(&MetricLine::Record(record.clone()))?;
            records.push(record);
            Ok(())
        })?;
    } else {
        let setup = CentralSetup {
            model: model_cfg,
            training: cfg.training(),
            epochs: cfg.epochs,
            budget: cfg.dp.and_then(|d| d.budget()),
            conversion: cfg.dp.map_or(Conversion::Classic, |d| d.conversion),
            seed: cfg.seed,
        };
        let outcome = train_central(
            &setup,
            &splits.train,
            &mut |model, s| {
                let (train_loss, train_acc) = loss_and_accuracy(model, &splits.train.features, &splits.train.labels)?;
                let (test_loss, test_acc) = loss_and_accuracy(model, &splits.test.features, &splits.test.labels)?;
                let record = MetricRecord {
                    epoch: Some(s.epoch),
                    round: None,
                    steps: s.total_steps,
                    train_loss,
                    train_acc,
                    test_loss,
                    test_acc,
                    epsilon_spent: s.epsilon,
                    client_epsilon: None,
                    active_clients: None,
                    wall_time_s: elapsed(),
                };
                sink.write(&MetricLine::Record(record.clone()))?;
                records.push(record);
                Ok(())
            },
            &mut |_| {},
        )?;
        max_steps = outcome.max_steps;
    }
    let summary = RunSummary { max_steps, ..RunSummary::from_records(&records) };
    sink.write(&MetricLine::Summary(summary.clone()))?;
    log::info!(
        "{} finished: {} records, final test acc {:?}",
        cfg.mode,
        summary.records,
        summary.final_test_acc
    );
    Ok(summary)
}

/// Runs and writes metrics to `path`.
pub fn run_to_file(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<RunSummary> {
    let mut w = MetricsWriter::new(BufWriter::new(File::create(path)?));
    run_experiment(cfg, &mut w)
}

/// Inputs of the privacy calculator. Steps come from `steps`, or from
/// `epochs * ceil(n / batch)` to match the shuffled-lot training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccountantQuery {
    pub sigma: Option<f64>,
    pub batch: usize,
    pub n: usize,
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub delta: f64,
    pub target_eps: Option<f64>,
    pub conversion: Conversion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum QueryKind {
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "max_steps")]
    MaxSteps,
    #[serde(rename = "sigma")]
    Sigma,
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryKind::Epsilon => "epsilon",
            QueryKind::MaxSteps => "max_steps",
            QueryKind::Sigma => "sigma",
        })
    }
}

/// One machine-readable answer row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccountantRow {
    pub query: QueryKind,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_order: f64,
}

impl AccountantQuery {
    fn steps(&self) -> Option<u64> {
        self.steps
            .or_else(|| self.epochs.map(|e| e * self.n.div_ceil(self.batch.max(1)) as u64))
    }

    /// Forward ε when `sigma` is set without a target; `max_steps` with both;
    /// the smallest grid σ with a target and no `sigma`.
    pub fn answer(&self) -> Result<AccountantRow> {
        let q = MechanismParams::from_lot(self.batch, self.n, self.sigma.unwrap_or(1.0))?.sampling_rate;
        let row = |kind, sigma: f64, steps: u64| -> Result<AccountantRow> {
            let state = AccountantState::new(MechanismParams::new(q, sigma)?)?.at_steps(steps);
            let rep = to_epsilon_with(&state, self.delta, self.conversion)?;
            Ok(AccountantRow {
                query: kind,
                q,
                sigma,
                steps,
                delta: self.delta,
                epsilon: rep.epsilon,
                best_order: rep.best_order,
            })
        };
        match (self.sigma, self.target_eps) {
            (Some(sigma), None) => {
                let steps = self
                    .steps()
                    .ok_or_else(|| Error::InvalidArgument("give --steps or --epochs".into()))?;
                row(QueryKind::Epsilon, sigma, steps)
            }
            (Some(sigma), Some(eps)) => {
                let budget = PrivacyBudget::new(eps, self.delta)?;
                let state = AccountantState::new(MechanismParams::new(q, sigma)?)?;
                let t = max_steps_with(&state, &budget, self.conversion)?;
                if t == 0 {
                    return Err(Error::BudgetInfeasible(format!("a single step already exceeds epsilon {eps}")));
                }
                row(QueryKind::MaxSteps, sigma, t)
            }
            (None, Some(eps)) => {
                let steps = self
                    .steps()
                    .ok_or_else(|| Error::InvalidArgument("give --steps or --epochs".into()))?;
                let budget = PrivacyBudget::new(eps, self.delta)?;
                let sigma = sigma_for_budget_with(q, steps, &budget, SigmaSearch::default(), self.conversion)?;
                row(QueryKind::Sigma, sigma, steps)
            }
            (None, None) => Err(Error::InvalidArgument("give --sigma, --target-eps, or both".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "mode = central\ndata.synthetic.n_samples = 200\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.hidden, vec![64, 64, 64]);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.sampling, Sampling::Shuffle);
        assert_eq!(cfg.split, SplitSpec::default());
        assert!(cfg.dp.is_none() && cfg.fed.is_none());
    }

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn rejections_name_the_key() {
        let fed_ldp = "mode = fed-ldp\ndata.synthetic.n_samples = 200\nfed.clients = 5\n";
        assert_eq!(key_of(ExperimentConfig::parse(fed_ldp).unwrap_err()), "dp.noise_multiplier");
        let neg = "mode = central-dp\ndata.path = x.csv\ndp.noise_multiplier = -1\n";
        assert_eq!(key_of(ExperimentConfig::parse(neg).unwrap_err()), "dp.noise_multiplier");
        let unknown = format!("{MINIMAL}train.momentum = 0.9\n");
        assert_eq!(key_of(ExperimentConfig::parse(&unknown).unwrap_err()), "train.momentum");
        let typo = format!("{MINIMAL}train.epochs = five\n");
        assert_eq!(key_of(ExperimentConfig::parse(&typo).unwrap_err()), "train.epochs");
        assert_eq!(key_of(ExperimentConfig::parse("mode = central\n").unwrap_err()), "data");
        let stray = format!("{MINIMAL}dp.epsilon = 3\n");
        assert_eq!(key_of(ExperimentConfig::parse(&stray).unwrap_err()), "dp.epsilon");
        let wrong_opt = format!("{MINIMAL}train.optimizer = dp-sgd\n");
        assert_eq!(key_of(ExperimentConfig::parse(&wrong_opt).unwrap_err()), "train.optimizer");
        let dup = format!("{MINIMAL}seed = 1\nseed = 2\n");
        assert_eq!(key_of(ExperimentConfig::parse(&dup).unwrap_err()), "seed");
        let no_eps = "mode = fed-ldp\ndata.synthetic.n_samples = 200\nfed.clients = 5\ndp.noise_multiplier = 1\n";
        assert_eq!(key_of(ExperimentConfig::parse(no_eps).unwrap_err()), "dp.epsilon");
        assert_eq!(key_of(ExperimentConfig::parse("mode = fed\ndata.path = a\n").unwrap_err()), "fed.clients");
    }

    #[test]
    fn text_round_trip() {
        let text = "mode = fed-ldp\nseed = 3\ndata.synthetic.n_samples = 500\nfed.clients = 5\nfed.fraction = 0.7\n\
                    dp.noise_multiplier = 1.1\ndp.epsilon = 4\nmodel.hidden = 8,4\nmodel.activation = tanh\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn sweep_changes_only_the_swept_key() {
        let base = ExperimentConfig::parse(MINIMAL).unwrap();
        let runs = sweep(&base, "train.lot_size", &["32", "64", "128"]).unwrap();
        let base_pairs = base.to_pairs();
        for (run, v) in runs.iter().zip(["32", "64", "128"]) {
            for (k, val) in run.to_pairs() {
                if k == "train.lot_size" {
                    assert_eq!(val, v);
                } else {
                    assert_eq!(base_pairs[&k], val, "{k}");
                }
            }
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentConfig::parse("x").unwrap_err().exit_code(), 2);
        assert_eq!(Error::BudgetInfeasible("x".into()).exit_code(), 4);
        assert_eq!(Error::Data { line: 2, message: "x".into() }.exit_code(), 3);
        assert_eq!(Error::Empty("x".into()).exit_code(), 1);
    }

    #[test]
    fn accountant_queries() {
        let q = AccountantQuery {
            sigma: Some(1e6),
            batch: 2048,
            n: 30000,
            steps: None,
            epochs: Some(50),
            delta: 1e-5,
            target_eps: None,
            conversion: Conversion::Classic,
        };
        let r = q.answer().unwrap();
        assert_eq!(r.steps, 750);
        assert!(r.epsilon < 0.1, "{}", r.epsilon);
        assert!(AccountantQuery { sigma: None, ..q }.answer().is_err());
        let inv = AccountantQuery { sigma: None, target_eps: Some(8.0), ..q }.answer().unwrap();
        assert_eq!(inv.query, QueryKind::Sigma);
        assert!(inv.epsilon <= 8.0);
    }
}
