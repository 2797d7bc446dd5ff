//! Experiment configs, metrics collection and summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, parse_requests, FederatedDataset, SyntheticSpec, UnlearnRequest};
use crate::engine::{train, TrainingObserver};
use crate::error::{Error, Result};
use crate::objective::{
    check_lr_condition, diversity_at, estimate_local_variance, estimate_smoothness, global_grad, global_loss, norm_sq,
    LossKind, LossModel, ModelParams,
};
use crate::params::{HyperParams, StorageMode};
use crate::rng::{trial_seed, Purpose, StreamKey};
use crate::stats::mean;
use crate::store::Iteration;
use crate::unlearning::{StreamReport, UnlearnOutcome, UnlearningSession};

fn cfg_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub requests: Option<RequestConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset file to load instead of generating one.
    pub import: Option<PathBuf>,
    pub clients: Option<usize>,
    pub samples_per_client: Option<usize>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    pub beta: Option<f64>,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub loss: String,
    pub total_iters: usize,
    pub local_iters: usize,
    pub rho_sample: Option<f64>,
    pub rho_client: Option<f64>,
    pub clients_per_round: Option<usize>,
    pub batch_size: Option<usize>,
    /// When absent, `1/(L sqrt(Gamma) T)` from estimated constants, capped
    /// at `1/L`.
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub storage: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Each request is applied to its own copy of the trained state.
    Batch,
    /// Requests are applied in order to one evolving state.
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMix {
    Sample,
    Client,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestConfig {
    pub schedule: Schedule,
    #[serde(default = "default_mix")]
    pub kind: RequestMix,
    #[serde(default)]
    pub count: usize,
    /// Defaults to `T`.
    pub issue_iteration: Option<usize>,
    /// Request file; replaces generated requests.
    pub file: Option<PathBuf>,
}

fn default_mix() -> RequestMix {
    RequestMix::Sample
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Evaluate the virtual average at every iteration instead of every
    /// round end.
    #[serde(default)]
    pub per_iteration: bool,
    #[serde(default = "default_draws")]
    pub estimate_draws: usize,
}

fn default_draws() -> usize {
    32
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            per_iteration: false,
            estimate_draws: default_draws(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(&toml_path(text, &e), e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths resolve against the config file's directory.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.output_dir);
            if let Some(p) = cfg.dataset.import.as_mut() {
                fix(p);
            }
            if let Some(p) = cfg.requests.as_mut().and_then(|r| r.file.as_mut()) {
                fix(p);
            }
        }
        Ok(cfg)
    }

    /// Sets a dotted field path such as `training.total_iters` from its
    /// text form; the value is parsed as a TOML scalar, falling back to a
    /// string.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut doc: toml::Value = toml::Value::try_from(&*self).map_err(|e| cfg_err(path, e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut cur = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let table = cur.as_table_mut().ok_or_else(|| cfg_err(path, "not a table"))?;
            if i + 1 == parts.len() {
                table.insert(p.to_string(), parsed.clone());
                break;
            }
            cur = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(path, e.message().to_string()))?;
        Ok(())
    }

    /// Checks every field and reports the first problem with its path.
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(cfg_err("repeats", "must be >= 1"));
        }
        let d = &self.dataset;
        match &d.import {
            Some(p) => {
                if !p.exists() {
                    return Err(cfg_err("dataset.import", format!("{} does not exist", p.display())));
                }
            }
            None => {
                for (f, v) in [
                    ("dataset.clients", d.clients),
                    ("dataset.samples_per_client", d.samples_per_client),
                    ("dataset.dim", d.dim),
                    ("dataset.classes", d.classes),
                ] {
                    match v {
                        None => return Err(cfg_err(f, "required when dataset.import is absent")),
                        Some(0) => return Err(cfg_err(f, "must be >= 1")),
                        _ => {}
                    }
                }
                match d.beta {
                    None => return Err(cfg_err("dataset.beta", "required when dataset.import is absent")),
                    Some(b) if !(b > 0.0 && b.is_finite()) => return Err(cfg_err("dataset.beta", "must be positive")),
                    _ => {}
                }
            }
        }
        let t = &self.training;
        if LossKind::parse(&t.loss).is_none() {
            return Err(cfg_err("training.loss", format!("unknown loss `{}`", t.loss)));
        }
        if t.local_iters == 0 {
            return Err(cfg_err("training.local_iters", "must be >= 1"));
        }
        if t.total_iters == 0 || !t.total_iters.is_multiple_of(t.local_iters) {
            return Err(cfg_err(
                "training.total_iters",
                "must be a positive multiple of local_iters",
            ));
        }
        let budgets = t.rho_sample.is_some() || t.rho_client.is_some();
        let explicit = t.clients_per_round.is_some() || t.batch_size.is_some();
        if budgets == explicit {
            return Err(cfg_err(
                "training",
                "give either rho_sample and rho_client or clients_per_round and batch_size",
            ));
        }
        if budgets {
            for (f, v) in [
                ("training.rho_sample", t.rho_sample),
                ("training.rho_client", t.rho_client),
            ] {
                match v {
                    None => return Err(cfg_err(f, "required with the other budget")),
                    Some(r) if !(r > 0.0 && r <= 1.0) => return Err(cfg_err(f, "must lie in (0, 1]")),
                    _ => {}
                }
            }
        } else {
            for (f, v) in [
                ("training.clients_per_round", t.clients_per_round),
                ("training.batch_size", t.batch_size),
            ] {
                match v {
                    None => return Err(cfg_err(f, "required with the other size")),
                    Some(0) => return Err(cfg_err(f, "must be >= 1")),
                    _ => {}
                }
            }
        }
        if let Some(eta) = t.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(cfg_err("training.learning_rate", "must be positive"));
            }
        }
        if let Some(s) = &t.storage {
            if StorageMode::parse(s).is_none() {
                return Err(cfg_err("training.storage", format!("unknown storage mode `{s}`")));
            }
        }
        if let Some(r) = &self.requests {
            if let Some(f) = &r.file {
                if !f.exists() {
                    return Err(cfg_err("requests.file", format!("{} does not exist", f.display())));
                }
            }
            if let Some(tu) = r.issue_iteration {
                if tu == 0 || tu > t.total_iters {
                    return Err(cfg_err("requests.issue_iteration", "must lie in [1, total_iters]"));
                }
            }
        }
        if self.metrics.estimate_draws == 0 {
            return Err(cfg_err("metrics.estimate_draws", "must be >= 1"));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        LossKind::parse(&self.training.loss).unwrap_or(LossKind::LeastSquares)
    }

    pub fn storage(&self) -> StorageMode {
        self.training
            .storage
            .as_deref()
            .and_then(StorageMode::parse)
            .unwrap_or_default()
    }

    pub fn build_dataset(&self) -> Result<FederatedDataset> {
        let d = &self.dataset;
        match &d.import {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                FederatedDataset::from_text(&text)
            }
            None => generate_synthetic(&SyntheticSpec {
                clients: d.clients.unwrap_or(0),
                samples_per_client: d.samples_per_client.unwrap_or(0),
                dim: d.dim.unwrap_or(0),
                classes: d.classes.unwrap_or(0),
                beta: d.beta.unwrap_or(0.0),
                seed: d.seed.unwrap_or(self.seed),
            }),
        }
    }

    /// Hyperparameters for `dataset` with the given learning rate.
    pub fn hyper(&self, dataset: &FederatedDataset, learning_rate: f64, seed: u64) -> Result<HyperParams> {
        let t = &self.training;
        let (m, n) = (dataset.num_clients(), dataset.samples_per_client());
        let h = match (t.rho_sample, t.rho_client) {
            (Some(rs), Some(rc)) => {
                HyperParams::from_budgets(m, n, t.total_iters, t.local_iters, rs, rc, learning_rate, seed)?
            }
            _ => HyperParams::explicit(
                m,
                n,
                t.total_iters,
                t.local_iters,
                t.clients_per_round.unwrap_or(1),
                t.batch_size.unwrap_or(1),
                learning_rate,
                seed,
            )?,
        };
        Ok(h.with_storage(self.storage()))
    }
}

/// Dotted path of the key at the error position: the enclosing `[table]`
/// header plus the key on that line.
fn toml_path(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return "<document>".to_string();
    };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[line_start..].find('\n').map_or(text.len(), |i| line_start + i);
    let line = text[line_start..line_end].trim();
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = line.split('=').next().unwrap_or("").trim();
    match (table, key.is_empty() || line.starts_with('[')) {
        (Some(t), false) => format!("{t}.{key}"),
        (None, false) => key.to_string(),
        (Some(t), true) => t,
        (None, true) => "<document>".to_string(),
    }
}

impl ExperimentConfig {
    /// Hyperparameters for one run with seed `seed`. The learning rate is the
    /// configured one, or [`default_learning_rate`] from the estimates.
    pub fn resolve_hyper(
        &self,
        dataset: &FederatedDataset,
        model: &dyn LossModel,
        seed: u64,
    ) -> Result<(HyperParams, Estimates)> {
        let probe = self.hyper(dataset, 1.0, seed)?;
        let est = estimate_constants(model, dataset, probe.batch_size, self.seed, self.metrics.estimate_draws)?;
        let eta = match self.training.learning_rate {
            Some(eta) => eta,
            None => default_learning_rate(
                &est,
                probe.rho_sample,
                dataset.num_clients(),
                dataset.samples_per_client(),
                probe.total_iters,
            ),
        };
        Ok((probe.with_learning_rate(eta), est))
    }
}

/// Constants estimated from the data at the initial model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimates {
    pub l_hat: f64,
    pub g_hat: f64,
    pub lambda_hat: f64,
    pub initial_loss: f64,
}

/// `Gamma = G^2 / (L (F0 - F*) rho_S M N)`.
pub fn gamma(g: f64, l: f64, gap: f64, rho_s: f64, m: usize, n: usize) -> f64 {
    g * g / (l * gap * rho_s * (m * n) as f64)
}

/// `1/(L sqrt(Gamma) T)`.
pub fn stability_learning_rate(l: f64, gamma: f64, t: usize) -> f64 {
    1.0 / (l * gamma.sqrt() * t as f64)
}

pub fn estimate_constants(
    model: &dyn LossModel,
    dataset: &FederatedDataset,
    batch: usize,
    seed: u64,
    draws: usize,
) -> Result<Estimates> {
    let theta0 = vec![0.0; model.dim()];
    let l_hat = estimate_smoothness(model, dataset, seed, 8, 12)?;
    let g_hat = estimate_local_variance(model, dataset, &theta0, batch, seed, draws)?;
    let lambda_hat = diversity_at(model, &theta0, dataset).unwrap_or(1.0);
    Ok(Estimates {
        l_hat,
        g_hat,
        lambda_hat,
        initial_loss: global_loss(model, &theta0, dataset),
    })
}

/// Default learning rate: the stability-balanced choice with `F* ~ 0`,
/// capped at `1/L`.
pub fn default_learning_rate(est: &Estimates, rho_s: f64, m: usize, n: usize, t: usize) -> f64 {
    let cap = 1.0 / est.l_hat.max(f64::MIN_POSITIVE);
    let gap = est.initial_loss.max(f64::MIN_POSITIVE);
    let g = gamma(est.g_hat, est.l_hat, gap, rho_s, m, n);
    let eta = stability_learning_rate(est.l_hat, g, t);
    if eta.is_finite() && eta > 0.0 {
        eta.min(cap)
    } else {
        cap
    }
}

/// One evaluation point of the virtual average model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub iteration: Iteration,
    pub round: usize,
    pub grad_norm_sq: f64,
    pub loss: f64,
    pub diversity: Option<f64>,
}

/// Records `||grad F||^2`, `F` and the gradient diversity of the virtual
/// average at round ends, or at every iteration.
pub struct MetricsObserver<'a> {
    pub model: &'a dyn LossModel,
    pub dataset: &'a FederatedDataset,
    pub per_iteration: bool,
    pub local_iters: usize,
    pub probes: Vec<Probe>,
    pub error: Option<Error>,
}

impl<'a> MetricsObserver<'a> {
    pub fn new(
        model: &'a dyn LossModel,
        dataset: &'a FederatedDataset,
        local_iters: usize,
        per_iteration: bool,
    ) -> Self {
        Self {
            model,
            dataset,
            per_iteration,
            local_iters,
            probes: Vec::new(),
            error: None,
        }
    }

    fn probe(&mut self, t: Iteration, theta: &ModelParams, with_diversity: bool) {
        match global_grad(self.model, &theta.0, self.dataset) {
            Ok(g) => self.probes.push(Probe {
                iteration: t,
                round: (t - 1) / self.local_iters + 1,
                grad_norm_sq: norm_sq(&g),
                loss: global_loss(self.model, &theta.0, self.dataset),
                diversity: if with_diversity {
                    diversity_at(self.model, &theta.0, self.dataset).ok()
                } else {
                    None
                },
            }),
            Err(e) => {
                self.error.get_or_insert(e);
            }
        }
    }
}

impl TrainingObserver for MetricsObserver<'_> {
    fn per_iteration(&self) -> bool {
        self.per_iteration
    }

    fn on_iteration(&mut self, t: Iteration, v: &ModelParams) {
        if !t.is_multiple_of(self.local_iters) {
            self.probe(t, v, false);
        }
    }

    fn on_round_end(&mut self, _round: usize, t: Iteration, g: &ModelParams) {
        self.probe(t, g, true);
    }
}

/// Trains and returns the probes of the virtual average.
pub fn convergence_trace(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    per_iteration: bool,
) -> Result<Vec<Probe>> {
    let mut obs = MetricsObserver::new(model, dataset, hyper.local_iters, per_iteration);
    train(hyper, dataset, model, &mut obs)?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    Ok(obs.probes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSummary {
    /// Mean of all recorded squared gradient norms.
    pub avg_grad_norm_sq: f64,
    /// Mean over the last quarter of the records.
    pub plateau: f64,
    /// Left side of the learning-rate condition (negative is safe).
    pub lr_margin: f64,
    /// `E/T >= (1/2) sqrt(Gamma/lambda)`.
    pub divergence_risk: bool,
}

/// Summarizes a sequence of squared gradient norms.
pub fn convergence_summary(
    grad_norms_sq: &[f64],
    hyper: &HyperParams,
    l_hat: f64,
    lambda_hat: f64,
    gamma_hat: f64,
) -> ConvergenceSummary {
    let n = grad_norms_sq.len();
    let tail = &grad_norms_sq[n - n.div_ceil(4).min(n)..];
    let lr = check_lr_condition(hyper.learning_rate, l_hat, lambda_hat, hyper.local_iters);
    let ratio = hyper.local_iters as f64 / hyper.total_iters as f64;
    ConvergenceSummary {
        avg_grad_norm_sq: mean(grad_norms_sq),
        plateau: mean(tail),
        lr_margin: lr.margin,
        divergence_risk: ratio >= 0.5 * (gamma_hat / lambda_hat).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub requests: usize,
    pub recomputes: usize,
    pub recompute_rate: f64,
    pub mean_retrained: f64,
    pub max_retrained: usize,
    /// `T * requests / retrained iterations`; `None` when nothing was
    /// recomputed.
    pub speedup: Option<f64>,
    pub mean_wall_time: Duration,
}

impl EfficiencyReport {
    pub fn speedup_text(&self) -> String {
        match self.speedup {
            Some(s) => format!("{s:.4}"),
            None => "no-recompute".to_string(),
        }
    }
}

/// Aggregates outcomes against the baseline of retraining `T` iterations
/// per request.
pub fn unlearning_efficiency_report(outcomes: &[UnlearnOutcome], total_iters: usize) -> EfficiencyReport {
    let n = outcomes.len();
    let recomputes = outcomes.iter().filter(|o| o.action.is_recompute()).count();
    let retrained: usize = outcomes.iter().map(|o| o.retrained_iterations).sum();
    let wall: Duration = outcomes.iter().map(|o| o.wall_time).sum();
    EfficiencyReport {
        requests: n,
        recomputes,
        recompute_rate: if n == 0 { 0.0 } else { recomputes as f64 / n as f64 },
        mean_retrained: if n == 0 { 0.0 } else { retrained as f64 / n as f64 },
        max_retrained: outcomes.iter().map(|o| o.retrained_iterations).max().unwrap_or(0),
        speedup: (retrained > 0).then(|| (total_iters * n) as f64 / retrained as f64),
        mean_wall_time: if n == 0 { Duration::ZERO } else { wall / n as u32 },
    }
}

/// Requests drawn deterministically from `seed`: uniform clients and, for
/// sample requests, uniform points; client requests use distinct clients
/// and leave at least one.
pub fn generate_requests(
    dataset: &FederatedDataset,
    mix: RequestMix,
    count: usize,
    issue_iteration: usize,
    seed: u64,
) -> Vec<UnlearnRequest> {
    let mut rng = StreamKey::new(seed, Purpose::Trial).step(7).rng();
    let mut clients = dataset.client_ids();
    let mut out = Vec::with_capacity(count);
    let mut unused: BTreeMap<usize, Vec<u64>> = dataset
        .clients()
        .iter()
        .map(|c| (c.client_id, c.uids().collect()))
        .collect();
    for i in 0..count {
        let client_req = match mix {
            RequestMix::Sample => false,
            RequestMix::Client => true,
            RequestMix::Mixed => i % 2 == 1,
        };
        if client_req {
            if clients.len() <= 1 {
                break;
            }
            let k = clients.remove(rng.random_range(0..clients.len()));
            unused.remove(&k);
            out.push(UnlearnRequest::client(k, issue_iteration));
        } else {
            let open: Vec<usize> = unused.iter().filter(|(_, v)| !v.is_empty()).map(|(&k, _)| k).collect();
            if open.is_empty() {
                break;
            }
            let k = open[rng.random_range(0..open.len())];
            let pool = unused.get_mut(&k).expect("open client");
            let u = pool.swap_remove(rng.random_range(0..pool.len()));
            out.push(UnlearnRequest::sample(k, u, issue_iteration));
        }
    }
    out
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: usize,
    pub phase: &'static str,
    pub round: usize,
    pub iteration: Iteration,
    pub grad_norm_sq: f64,
    pub avg_grad_norm_sq: f64,
    pub loss: f64,
    pub diversity: Option<f64>,
    pub recompute_events: usize,
    pub retrained_iterations: usize,
    pub rho_sample: f64,
    pub rho_client: f64,
    pub gamma_hat: f64,
}

pub const METRICS_HEADER: &str = "run,phase,round,iteration,grad_norm_sq,avg_grad_norm_sq,loss,diversity,recompute_events,retrained_iterations,rho_sample,rho_client,gamma_hat";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{},{},{},{:e},{:e},{}",
            self.run,
            self.phase,
            self.round,
            self.iteration,
            self.grad_norm_sq,
            self.avg_grad_norm_sq,
            self.loss,
            self.diversity.map_or(String::new(), |v| format!("{v:e}")),
            self.recompute_events,
            self.retrained_iterations,
            self.rho_sample,
            self.rho_client,
            // Empty when no run improved on its initial loss.
            if self.gamma_hat.is_finite() {
                format!("{:e}", self.gamma_hat)
            } else {
                String::new()
            }
        )
    }
}

/// Result of one repeat.
#[derive(Debug)]
pub struct RunResult {
    pub run: usize,
    pub hyper: HyperParams,
    pub estimates: Estimates,
    pub probes: Vec<Probe>,
    pub outcomes: Vec<UnlearnOutcome>,
    pub stream: Option<StreamReport>,
    pub unlearned: Option<Probe>,
    pub realized_rho: (f64, f64),
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub runs: Vec<RunResult>,
    pub best_loss: f64,
    pub metrics_path: PathBuf,
    pub outcomes_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs every repeat (in parallel) and writes `metrics.csv`,
/// `outcomes.csv` and `summary.csv` to the output directory. Everything but
/// the wall-time columns of `outcomes.csv` is a function of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let dataset = cfg.build_dataset()?;
    let model = cfg.loss_kind().build(dataset.dim());
    let model: &dyn LossModel = model.as_ref();

    let requests_from_file = match cfg.requests.as_ref().and_then(|r| r.file.as_ref()) {
        Some(p) => Some(parse_requests(
            &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None => None,
    };

    let runs: Vec<RunResult> = (0..cfg.repeats)
        .into_par_iter()
        .map(|run| run_one(cfg, &dataset, model, run, requests_from_file.as_deref()))
        .collect::<Result<_>>()?;

    let best_loss = runs
        .iter()
        .flat_map(|r| {
            r.probes
                .iter()
                .map(|p| p.loss)
                .chain(std::iter::once(r.estimates.initial_loss))
        })
        .fold(f64::INFINITY, f64::min);

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let metrics_path = cfg.output_dir.join("metrics.csv");
    let outcomes_path = cfg.output_dir.join("outcomes.csv");
    let summary_path = cfg.output_dir.join("summary.csv");

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut outcomes = String::from("run,");
    outcomes.push_str(OUTCOME_HEADER);
    outcomes.push('\n');
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');

    for r in &runs {
        let h = &r.hyper;
        let (m, n) = (dataset.num_clients(), dataset.samples_per_client());
        let gap = r.estimates.initial_loss - best_loss;
        let g_hat = gamma(r.estimates.g_hat, r.estimates.l_hat, gap, h.rho_sample, m, n);
        let (rho_s, rho_c) = h.realized_rho(m, n);
        let mut running = 0.0;
        for (i, p) in r.probes.iter().enumerate() {
            running += p.grad_norm_sq;
            let row = MetricsRow {
                run: r.run,
                phase: "train",
                round: p.round,
                iteration: p.iteration,
                grad_norm_sq: p.grad_norm_sq,
                avg_grad_norm_sq: running / (i + 1) as f64,
                loss: p.loss,
                diversity: p.diversity,
                recompute_events: 0,
                retrained_iterations: 0,
                rho_sample: rho_s,
                rho_client: rho_c,
                gamma_hat: g_hat,
            };
            writeln!(metrics, "{}", row.to_csv()).unwrap();
        }
        if let Some(p) = &r.unlearned {
            let eff = unlearning_efficiency_report(&r.outcomes, h.total_iters);
            let row = MetricsRow {
                run: r.run,
                phase: "unlearned",
                round: p.round,
                iteration: p.iteration,
                grad_norm_sq: p.grad_norm_sq,
                avg_grad_norm_sq: p.grad_norm_sq,
                loss: p.loss,
                diversity: p.diversity,
                recompute_events: eff.recomputes,
                retrained_iterations: r.outcomes.iter().map(|o| o.retrained_iterations).sum(),
                rho_sample: r.realized_rho.0,
                rho_client: r.realized_rho.1,
                gamma_hat: g_hat,
            };
            writeln!(metrics, "{}", row.to_csv()).unwrap();
        }

        if let Some(rep) = &r.stream {
            for line in rep.to_csv().lines().skip(1) {
                writeln!(outcomes, "{},{line}", r.run).unwrap();
            }
        } else {
            let rep = StreamReport {
                entries: r
                    .outcomes
                    .iter()
                    .map(|o| crate::unlearning::StreamEntry {
                        request: o.request,
                        result: Ok(o.clone()),
                    })
                    .collect(),
                recompute_bound: 0.0,
            };
            for line in rep.to_csv().lines().skip(1) {
                writeln!(outcomes, "{},{line}", r.run).unwrap();
            }
        }

        let norms: Vec<f64> = r.probes.iter().map(|p| p.grad_norm_sq).collect();
        let conv = convergence_summary(&norms, h, r.estimates.l_hat, r.estimates.lambda_hat, g_hat);
        let eff = unlearning_efficiency_report(&r.outcomes, h.total_iters);
        writeln!(
            summary,
            "{},{:e},{},{},{:e},{:e},{:e},{},{},{},{:e},{:e},{},{}",
            r.run,
            h.learning_rate,
            h.clients_per_round,
            h.batch_size,
            conv.avg_grad_norm_sq,
            conv.plateau,
            conv.lr_margin,
            conv.divergence_risk,
            eff.requests,
            eff.recomputes,
            eff.recompute_rate,
            eff.mean_retrained,
            eff.max_retrained,
            eff.speedup_text()
        )
        .unwrap();
    }

    write_file(&metrics_path, &metrics)?;
    write_file(&outcomes_path, &outcomes)?;
    write_file(&summary_path, &summary)?;
    Ok(ExperimentSummary {
        runs,
        best_loss,
        metrics_path,
        outcomes_path,
        summary_path,
    })
}

pub const OUTCOME_HEADER: &str =
    "index,kind,client,uid,t_u,action,from,retrained_iterations,wall_time_us,beyond_horizon,error";

pub const SUMMARY_HEADER: &str = "run,learning_rate,clients_per_round,batch_size,avg_grad_norm_sq,plateau,lr_margin,divergence_risk,requests,recomputes,recompute_rate,mean_retrained,max_retrained,speedup";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_one(
    cfg: &ExperimentConfig,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    run: usize,
    requests_from_file: Option<&[UnlearnRequest]>,
) -> Result<RunResult> {
    let seed = trial_seed(cfg.seed, run as u64);
    let (hyper, estimates) = cfg.resolve_hyper(dataset, model, seed)?;

    let mut obs = MetricsObserver::new(model, dataset, hyper.local_iters, cfg.metrics.per_iteration);
    let (_, store) = train(&hyper, dataset, model, &mut obs)?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    let probes = obs.probes;

    let mut outcomes = Vec::new();
    let mut stream = None;
    let mut unlearned = None;
    let mut realized_rho = hyper.realized_rho(dataset.num_clients(), dataset.min_client_size());
    if let Some(rc) = &cfg.requests {
        let t_u = rc.issue_iteration.unwrap_or(hyper.total_iters);
        let requests = match requests_from_file {
            Some(r) => r.to_vec(),
            None => generate_requests(dataset, rc.kind, rc.count, t_u, trial_seed(seed, 1)),
        };
        match rc.schedule {
            Schedule::Stream => {
                let mut s = UnlearningSession::new(hyper.clone(), dataset.clone(), store, model);
                let rep = s.process_stream(&requests);
                outcomes = rep
                    .entries
                    .iter()
                    .filter_map(|e| e.result.as_ref().ok().cloned())
                    .collect();
                realized_rho = s.realized_rho();
                let mut obs = MetricsObserver::new(model, s.dataset(), hyper.local_iters, false);
                obs.on_round_end(hyper.rounds(), hyper.total_iters, s.model());
                unlearned = obs.probes.pop();
                stream = Some(rep);
            }
            Schedule::Batch => {
                for req in &requests {
                    let mut s = UnlearningSession::new(hyper.clone(), dataset.clone(), store.clone(), model);
                    outcomes.push(s.unlearn(req)?);
                }
            }
        }
    }
    Ok(RunResult {
        run,
        hyper,
        estimates,
        probes,
        outcomes,
        stream,
        unlearned,
        realized_rho,
    })
}

/// Averages `summary.csv` rows by column name over runs.
pub fn report_from_summary(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty summary"))?
        .split(',')
        .collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::parse(i + 2, "column count mismatch"));
        }
        for (h, v) in header.iter().zip(f) {
            if *h == "run" {
                continue;
            }
            if let Ok(x) = v.parse::<f64>() {
                let e = sums.entry(h.to_string()).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}
