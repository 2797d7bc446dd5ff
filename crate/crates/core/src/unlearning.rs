//! Exact unlearning of samples and clients by verification and partial
//! re-computation.
//!
//! Verification is one index lookup. If the target never influenced the
//! run, nothing is recomputed; otherwise the history is pruned at the first
//! iteration that touched the target and training resumes from there with
//! fresh randomness on the reduced dataset.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::{ClientId, FederatedDataset, RequestKind, Uid, UnlearnRequest};
use crate::engine::{run_fats_with, NoObserver, Resume, RoundSchedule};
use crate::error::{Error, Result};
use crate::objective::{LossModel, ModelParams};
use crate::params::{HyperParams, StorageMode};
use crate::store::{HistoryStore, Iteration};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnlearnAction {
    Noop,
    PartialRetrain { from: Iteration },
    FullRetrain,
}

impl UnlearnAction {
    pub fn name(self) -> &'static str {
        match self {
            UnlearnAction::Noop => "noop",
            UnlearnAction::PartialRetrain { .. } => "partial_retrain",
            UnlearnAction::FullRetrain => "full_retrain",
        }
    }

    pub fn is_recompute(self) -> bool {
        self != UnlearnAction::Noop
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnOutcome {
    pub request: UnlearnRequest,
    pub action: UnlearnAction,
    pub retrained_iterations: usize,
    pub wall_time: Duration,
    pub model: ModelParams,
    /// The target's first use came after `t_u`; re-computation started there.
    pub beyond_horizon: bool,
    /// Realized `(rho_S, rho_C)` on the population left after this request.
    pub realized_rho: (f64, f64),
}

/// Training state that deletion requests act on.
pub struct UnlearningSession<'m> {
    hyper: HyperParams,
    dataset: FederatedDataset,
    store: HistoryStore,
    model: &'m dyn LossModel,
    theta: ModelParams,
    deleted_samples: HashSet<Uid>,
    deleted_clients: HashSet<ClientId>,
}

impl<'m> UnlearningSession<'m> {
    /// Wraps a finished run; `theta` is taken from the store's last global
    /// model.
    pub fn new(hyper: HyperParams, dataset: FederatedDataset, store: HistoryStore, model: &'m dyn LossModel) -> Self {
        let theta = store.latest_global().clone();
        Self {
            hyper,
            dataset,
            store,
            model,
            theta,
            deleted_samples: HashSet::new(),
            deleted_clients: HashSet::new(),
        }
    }

    /// Trains from scratch and wraps the result.
    pub fn train(hyper: HyperParams, dataset: FederatedDataset, model: &'m dyn LossModel) -> Result<Self> {
        let (theta, store) = crate::engine::train(&hyper, &dataset, model, &mut NoObserver)?;
        let mut s = Self::new(hyper, dataset, store, model);
        s.theta = theta;
        Ok(s)
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn dataset(&self) -> &FederatedDataset {
        &self.dataset
    }

    pub fn store(&self) -> &HistoryStore {
        &self.store
    }

    pub fn model(&self) -> &ModelParams {
        &self.theta
    }

    pub fn into_parts(self) -> (HyperParams, FederatedDataset, HistoryStore, ModelParams) {
        (self.hyper, self.dataset, self.store, self.theta)
    }

    /// Marks ids deleted by earlier sessions so later requests for them are
    /// reported as stale.
    pub fn mark_deleted(
        &mut self,
        samples: impl IntoIterator<Item = Uid>,
        clients: impl IntoIterator<Item = ClientId>,
    ) {
        self.deleted_samples.extend(samples);
        self.deleted_clients.extend(clients);
    }

    pub fn deleted_samples(&self) -> &HashSet<Uid> {
        &self.deleted_samples
    }

    pub fn deleted_clients(&self) -> &HashSet<ClientId> {
        &self.deleted_clients
    }

    /// Realized `(rho_S, rho_C)` of the current population. The sample
    /// budget uses the smallest client, which bounds every sample's
    /// involvement probability.
    pub fn realized_rho(&self) -> (f64, f64) {
        self.hyper
            .realized_rho(self.dataset.num_clients(), self.dataset.min_client_size())
    }

    /// Upper bound on the probability that `request` triggers
    /// re-computation on the current population, capped at 1.
    pub fn recompute_bound(&self, request: &UnlearnRequest) -> f64 {
        let h = &self.hyper;
        let m = self.dataset.num_clients();
        let p = match request.kind {
            RequestKind::Sample => {
                let n = self.dataset.client(request.client).map_or(0, |c| c.len());
                if n == 0 {
                    return 1.0;
                }
                h.realized_rho(m, n).0
            }
            RequestKind::Client => h.realized_rho(m, 1).1,
        };
        p.min(1.0)
    }

    /// Routes to partial re-computation in full-history mode and full
    /// retraining in compact mode.
    pub fn unlearn(&mut self, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
        match (self.store.mode(), request.kind) {
            (StorageMode::FullHistory, RequestKind::Sample) => self.unlearn_sample(request),
            (StorageMode::FullHistory, RequestKind::Client) => self.unlearn_client(request),
            (StorageMode::Compact, _) => self.full_retrain_unlearn(request),
        }
    }

    pub fn unlearn_sample(&mut self, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
        let start = Instant::now();
        self.require_mode(StorageMode::FullHistory)?;
        let (client, uid) = self.check_sample_request(request)?;
        let reduced = self.dataset.remove_sample(client, uid)?;

        let first = self.store.first_sample_use(uid, client);
        let Some(t_s) = first else {
            self.commit_sample(reduced, uid);
            return Ok(self.outcome(request, UnlearnAction::Noop, false, start));
        };
        let beyond = t_s > request.issue_iteration;

        // The selection drawn at the start of t_S's round did not depend on
        // the deleted sample, so it is carried over; only mini-batches from
        // t_S onwards are redrawn.
        let sched = self.schedule()?;
        let resume = if sched.is_round_start(t_s) {
            let r = sched.round_of(t_s);
            let sel = self
                .store
                .round(r)
                .ok_or_else(|| Error::CorruptedHistory(format!("missing selection of round {r}")))?
                .clients
                .clone();
            Resume::KeepSelection(sel)
        } else {
            Resume::Fresh
        };
        self.retrain_from(t_s, resume, reduced)?;
        self.deleted_samples.insert(uid);
        Ok(self.outcome(request, UnlearnAction::PartialRetrain { from: t_s }, beyond, start))
    }

    pub fn unlearn_client(&mut self, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
        let start = Instant::now();
        self.require_mode(StorageMode::FullHistory)?;
        let client = self.check_client_request(request)?;
        let reduced = self.dataset.remove_client(client)?;

        let Some(r_c) = self.store.first_client_round(client) else {
            self.commit_client(reduced, client);
            return Ok(self.outcome(request, UnlearnAction::Noop, false, start));
        };
        let sched = self.schedule()?;
        let beyond = r_c > sched.round_of(request.issue_iteration);
        let t_c = sched.round_range(r_c).start().to_owned();
        self.retrain_from(t_c, Resume::Fresh, reduced)?;
        self.store.forget_client(client);
        self.deleted_clients.insert(client);
        Ok(self.outcome(request, UnlearnAction::PartialRetrain { from: t_c }, beyond, start))
    }

    /// Verifies via involvement bits (compact mode) or the earliest-use
    /// index (full mode) and, if involved, retrains from iteration 1.
    pub fn full_retrain_unlearn(&mut self, request: &UnlearnRequest) -> Result<UnlearnOutcome> {
        let start = Instant::now();
        let compact = self.store.mode() == StorageMode::Compact;
        let (reduced, involved) = match request.kind {
            RequestKind::Sample => {
                let (client, uid) = self.check_sample_request(request)?;
                let reduced = self.dataset.remove_sample(client, uid)?;
                let involved = if compact {
                    self.store.sample_involved(client, uid).unwrap_or(false)
                } else {
                    self.store.first_sample_use(uid, client).is_some()
                };
                (reduced, involved)
            }
            RequestKind::Client => {
                let client = self.check_client_request(request)?;
                let reduced = self.dataset.remove_client(client)?;
                let involved = if compact {
                    self.store.client_participated(client).unwrap_or(false)
                } else {
                    self.store.first_client_round(client).is_some()
                };
                (reduced, involved)
            }
        };
        if !involved {
            match request.kind {
                RequestKind::Sample => self.commit_sample(reduced, request.uid.unwrap_or_default()),
                RequestKind::Client => self.commit_client(reduced, request.client),
            }
            return Ok(self.outcome(request, UnlearnAction::Noop, false, start));
        }
        self.check_feasible(&reduced)?;
        self.store.reset();
        self.theta = run_fats_with(
            1,
            Resume::Fresh,
            &self.hyper,
            &reduced,
            self.model,
            &mut self.store,
            &mut NoObserver,
        )?;
        self.dataset = reduced;
        match request.kind {
            RequestKind::Sample => {
                self.deleted_samples.insert(request.uid.unwrap_or_default());
            }
            RequestKind::Client => {
                self.store.forget_client(request.client);
                self.deleted_clients.insert(request.client);
            }
        }
        Ok(self.outcome(request, UnlearnAction::FullRetrain, false, start))
    }

    /// Applies requests strictly in order. A failing request (stale,
    /// unknown target, infeasible) is reported and the stream continues.
    pub fn process_stream(&mut self, requests: &[UnlearnRequest]) -> StreamReport {
        let mut entries = Vec::with_capacity(requests.len());
        let mut bound = 0.0;
        for req in requests {
            let b = self.recompute_bound(req);
            let res = self.unlearn(req);
            if res.is_ok() {
                bound += b;
            }
            entries.push(StreamEntry {
                request: *req,
                result: res,
            });
        }
        StreamReport {
            entries,
            recompute_bound: bound,
        }
    }

    fn schedule(&self) -> Result<RoundSchedule> {
        RoundSchedule::new(self.hyper.total_iters, self.hyper.local_iters)
    }

    fn require_mode(&self, mode: StorageMode) -> Result<()> {
        if self.store.mode() != mode {
            return Err(Error::ModeMismatch {
                expected: mode.name(),
                actual: self.store.mode().name(),
            });
        }
        Ok(())
    }

    fn check_sample_request(&self, request: &UnlearnRequest) -> Result<(ClientId, Uid)> {
        request.validate(self.hyper.total_iters)?;
        let uid = request
            .uid
            .ok_or_else(|| Error::invalid("sample request without uid"))?;
        if self.deleted_samples.contains(&uid) || self.deleted_clients.contains(&request.client) {
            return Err(Error::StaleRequest(format!(
                "sample {uid} of client {}",
                request.client
            )));
        }
        let client = self
            .dataset
            .client(request.client)
            .ok_or(Error::ClientNotFound(request.client))?;
        if client.position(uid).is_none() {
            return Err(Error::SampleNotFound {
                client: request.client,
                uid,
            });
        }
        if client.len() - 1 < self.hyper.batch_size {
            return Err(Error::InfeasibleBatch {
                client: request.client,
                available: client.len() - 1,
                batch: self.hyper.batch_size,
            });
        }
        Ok((request.client, uid))
    }

    fn check_client_request(&self, request: &UnlearnRequest) -> Result<ClientId> {
        request.validate(self.hyper.total_iters)?;
        if self.deleted_clients.contains(&request.client) {
            return Err(Error::StaleRequest(format!("client {}", request.client)));
        }
        if self.dataset.client(request.client).is_none() {
            return Err(Error::ClientNotFound(request.client));
        }
        if self.dataset.num_clients() == 1 {
            return Err(Error::EmptyFederation(request.client));
        }
        Ok(request.client)
    }

    fn check_feasible(&self, dataset: &FederatedDataset) -> Result<()> {
        for c in dataset.clients() {
            if c.len() < self.hyper.batch_size {
                return Err(Error::InfeasibleBatch {
                    client: c.client_id,
                    available: c.len(),
                    batch: self.hyper.batch_size,
                });
            }
        }
        Ok(())
    }

    fn retrain_from(&mut self, t0: Iteration, resume: Resume, reduced: FederatedDataset) -> Result<()> {
        self.check_feasible(&reduced)?;
        self.store.prune_after(t0)?;
        self.theta = run_fats_with(
            t0,
            resume,
            &self.hyper,
            &reduced,
            self.model,
            &mut self.store,
            &mut NoObserver,
        )?;
        self.dataset = reduced;
        Ok(())
    }

    fn commit_sample(&mut self, reduced: FederatedDataset, uid: Uid) {
        self.dataset = reduced;
        self.deleted_samples.insert(uid);
    }

    fn commit_client(&mut self, reduced: FederatedDataset, client: ClientId) {
        self.dataset = reduced;
        self.store.forget_client(client);
        self.deleted_clients.insert(client);
    }

    fn outcome(
        &self,
        request: &UnlearnRequest,
        action: UnlearnAction,
        beyond_horizon: bool,
        start: Instant,
    ) -> UnlearnOutcome {
        let t = self.hyper.total_iters;
        let retrained_iterations = match action {
            UnlearnAction::Noop => 0,
            UnlearnAction::PartialRetrain { from } => t - from + 1,
            UnlearnAction::FullRetrain => t,
        };
        UnlearnOutcome {
            request: *request,
            action,
            retrained_iterations,
            wall_time: start.elapsed(),
            model: self.theta.clone(),
            beyond_horizon,
            realized_rho: self.realized_rho(),
        }
    }
}

#[derive(Debug)]
pub struct StreamEntry {
    pub request: UnlearnRequest,
    pub result: Result<UnlearnOutcome>,
}

#[derive(Debug)]
pub struct StreamReport {
    pub entries: Vec<StreamEntry>,
    /// Sum over successful requests of the per-request recompute bound,
    /// evaluated on the population each request saw.
    pub recompute_bound: f64,
}

impl StreamReport {
    pub fn recomputes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(&e.result, Ok(o) if o.action.is_recompute()))
            .count()
    }

    pub fn retrained_iterations(&self) -> usize {
        self.entries
            .iter()
            .filter_map(|e| e.result.as_ref().ok())
            .map(|o| o.retrained_iterations)
            .sum()
    }

    pub fn errors(&self) -> usize {
        self.entries.iter().filter(|e| e.result.is_err()).count()
    }

    /// CSV with one line per request.
    pub fn to_csv(&self) -> String {
        let mut w = String::from(
            "index,kind,client,uid,t_u,action,from,retrained_iterations,wall_time_us,beyond_horizon,error\n",
        );
        for (i, e) in self.entries.iter().enumerate() {
            let r = &e.request;
            let uid = r.uid.map_or("-".into(), |u| u.to_string());
            match &e.result {
                Ok(o) => {
                    let from = match o.action {
                        UnlearnAction::PartialRetrain { from } => from.to_string(),
                        UnlearnAction::FullRetrain => "1".into(),
                        UnlearnAction::Noop => "-".into(),
                    };
                    writeln!(
                        w,
                        "{i},{},{},{uid},{},{},{from},{},{},{},",
                        r.kind.name(),
                        r.client,
                        r.issue_iteration,
                        o.action.name(),
                        o.retrained_iterations,
                        o.wall_time.as_micros(),
                        o.beyond_horizon
                    )
                    .unwrap();
                }
                Err(err) => {
                    let msg = err.to_string().replace([',', '\n'], ";");
                    writeln!(
                        w,
                        "{i},{},{},{uid},{},error,-,0,0,false,{msg}",
                        r.kind.name(),
                        r.client,
                        r.issue_iteration
                    )
                    .unwrap();
                }
            }
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ClientDataset, DataPoint, SyntheticSpec};
    use crate::objective::{Centroid, LeastSquares};

    fn micro(seed: u64) -> (HyperParams, FederatedDataset) {
        let clients = (0..2)
            .map(|k| ClientDataset {
                client_id: k,
                points: (0..2)
                    .map(|i| DataPoint {
                        uid: (2 * k + i) as Uid,
                        label: 0.0,
                        features: vec![(2 * k + i) as f64],
                    })
                    .collect(),
            })
            .collect();
        let d = FederatedDataset::new(clients, 1, 1, 2, 0).unwrap();
        (HyperParams::explicit(2, 2, 2, 1, 1, 1, 0.5, seed).unwrap(), d)
    }

    fn synth(seed: u64) -> FederatedDataset {
        generate_synthetic(&SyntheticSpec {
            clients: 5,
            samples_per_client: 8,
            dim: 2,
            classes: 3,
            beta: 0.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn unused_sample_is_a_bitwise_noop() {
        let model = Centroid { dim: 1 };
        for seed in 0..50 {
            let (h, d) = micro(seed);
            let mut s = UnlearningSession::train(h, d, &model).unwrap();
            let before = s.model().clone();
            let store_before = s.store().clone();
            let used: HashSet<Uid> = store_before
                .recorded_clients()
                .flat_map(|k| store_before.client_records(k).iter().flat_map(|r| r.batch.clone()))
                .collect();
            if let Some(uid) = (0..4).find(|u| !used.contains(u)) {
                let out = s.unlearn(&UnlearnRequest::sample(uid as usize / 2, uid, 2)).unwrap();
                assert_eq!(out.action, UnlearnAction::Noop);
                assert_eq!(out.retrained_iterations, 0);
                assert!(out.model.bits_eq(&before));
                assert_eq!(s.store(), &store_before);
                assert_eq!(s.dataset().num_points(), 3);
            }
        }
    }

    #[test]
    fn partial_retrain_preserves_prefix() {
        // Search seeds for a sample first used at t = 11 with E = 10, T = 30.
        let model = LeastSquares { dim: 2 };
        let d = synth(2);
        for seed in 0..200 {
            let h = HyperParams::explicit(5, 8, 30, 10, 2, 2, 0.05, seed).unwrap();
            let mut s = UnlearningSession::train(h, d.clone(), &model).unwrap();
            let target = d.clients().iter().find_map(|c| {
                c.uids()
                    .find(|&u| s.store().first_sample_use(u, c.client_id) == Some(11))
                    .map(|u| (c.client_id, u))
            });
            let Some((k, u)) = target else { continue };
            let before = s.store().clone();
            let out = s.unlearn(&UnlearnRequest::sample(k, u, 30)).unwrap();
            assert_eq!(out.action, UnlearnAction::PartialRetrain { from: 11 });
            assert_eq!(out.retrained_iterations, 20);
            let after = s.store();
            for c in before.recorded_clients() {
                let pre: Vec<_> = before.client_records(c).iter().filter(|r| r.iteration < 11).collect();
                let post: Vec<_> = after.client_records(c).iter().filter(|r| r.iteration < 11).collect();
                assert_eq!(pre, post);
            }
            assert_eq!(before.rounds()[0], after.rounds()[0]);
            // The round-2 selection is carried over.
            assert_eq!(before.rounds()[1].clients, after.rounds()[1].clients);
            assert!(after.first_sample_use(u, k).is_none());
            assert_eq!(after.epoch(), before.epoch() + 1);
            return;
        }
        panic!("no seed produced a first use at t = 11");
    }

    #[test]
    fn client_unlearning_restarts_at_round_start() {
        let model = LeastSquares { dim: 2 };
        let d = synth(3);
        let h = HyperParams::explicit(5, 8, 30, 10, 2, 2, 0.05, 4).unwrap();
        let mut s = UnlearningSession::train(h, d, &model).unwrap();
        let k = s.store().rounds()[1].clients[0];
        let r_c = s.store().first_client_round(k).unwrap();
        let out = s.unlearn(&UnlearnRequest::client(k, 30)).unwrap();
        let from = (r_c - 1) * 10 + 1;
        assert_eq!(out.action, UnlearnAction::PartialRetrain { from });
        assert_eq!(out.retrained_iterations, 30 - from + 1);
        assert!(s.store().rounds().iter().all(|r| !r.clients.contains(&k)));
        assert_eq!(s.dataset().num_clients(), 4);
        let (_, rho_c) = out.realized_rho;
        assert!((rho_c - 2.0 * 30.0 / (10.0 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn beyond_horizon_is_flagged() {
        let model = LeastSquares { dim: 2 };
        let d = synth(5);
        let h = HyperParams::explicit(5, 8, 30, 10, 2, 2, 0.05, 1).unwrap();
        let s0 = UnlearningSession::train(h, d.clone(), &model).unwrap();
        let late = d.clients().iter().find_map(|c| {
            c.uids()
                .find(|&u| s0.store().first_sample_use(u, c.client_id).is_some_and(|t| t > 15))
                .map(|u| (c.client_id, u, s0.store().first_sample_use(u, c.client_id).unwrap()))
        });
        let (k, u, t) = late.expect("some sample first used after 15");
        let mut s = s0;
        let out = s.unlearn(&UnlearnRequest::sample(k, u, 15)).unwrap();
        assert!(out.beyond_horizon);
        assert_eq!(out.action, UnlearnAction::PartialRetrain { from: t });
    }

    #[test]
    fn request_errors() {
        let model = Centroid { dim: 1 };
        let (h, d) = micro(0);
        let mut s = UnlearningSession::train(h.clone(), d.clone(), &model).unwrap();
        assert!(matches!(
            s.unlearn(&UnlearnRequest::sample(0, 3, 1)),
            Err(Error::SampleNotFound { .. })
        ));
        assert!(matches!(
            s.unlearn(&UnlearnRequest::client(7, 1)),
            Err(Error::ClientNotFound(7))
        ));
        // N = 2, b = 1: one deletion is fine, a second leaves zero points.
        s.unlearn(&UnlearnRequest::sample(0, 0, 2)).unwrap();
        assert!(matches!(
            s.unlearn(&UnlearnRequest::sample(0, 0, 2)),
            Err(Error::StaleRequest(_))
        ));
        assert!(matches!(
            s.unlearn(&UnlearnRequest::sample(0, 1, 2)),
            Err(Error::InfeasibleBatch { .. })
        ));
        s.unlearn(&UnlearnRequest::client(1, 2)).unwrap();
        assert!(matches!(
            s.unlearn(&UnlearnRequest::client(1, 2)),
            Err(Error::StaleRequest(_))
        ));
        assert!(matches!(
            s.unlearn(&UnlearnRequest::client(0, 2)),
            Err(Error::EmptyFederation(0))
        ));

        let mut c = UnlearningSession::train(h.with_storage(StorageMode::Compact), d, &model).unwrap();
        assert!(matches!(
            c.unlearn_sample(&UnlearnRequest::sample(0, 0, 1)),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn compact_mode_retrains_fully() {
        let model = LeastSquares { dim: 2 };
        let d = synth(6);
        let h = HyperParams::explicit(5, 8, 20, 5, 2, 2, 0.05, 3)
            .unwrap()
            .with_storage(StorageMode::Compact);
        let mut s = UnlearningSession::train(h, d.clone(), &model).unwrap();
        let involved = d
            .clients()
            .iter()
            .flat_map(|c| c.uids().map(move |u| (c.client_id, u)))
            .find(|&(k, u)| s.store().sample_involved(k, u) == Some(true))
            .unwrap();
        let out = s.unlearn(&UnlearnRequest::sample(involved.0, involved.1, 20)).unwrap();
        assert_eq!(out.action, UnlearnAction::FullRetrain);
        assert_eq!(out.retrained_iterations, 20);
        assert!(s.store().rounds().is_empty());
        assert_eq!(s.store().epoch(), 1);
    }

    #[test]
    fn stream_is_sequential_and_reports_stale() {
        let model = LeastSquares { dim: 2 };
        let d = synth(7);
        let h = HyperParams::explicit(5, 8, 20, 5, 2, 2, 0.05, 9).unwrap();
        let mut s = UnlearningSession::train(h, d.clone(), &model).unwrap();
        let c0 = &d.clients()[0];
        let u = c0.points[0].uid;
        let reqs = [
            UnlearnRequest::sample(c0.client_id, u, 20),
            UnlearnRequest::client(c0.client_id, 20),
            UnlearnRequest::sample(c0.client_id, c0.points[1].uid, 20),
        ];
        let rep = s.process_stream(&reqs);
        assert!(rep.entries[0].result.is_ok());
        assert!(rep.entries[1].result.is_ok());
        assert!(matches!(rep.entries[2].result, Err(Error::StaleRequest(_))));
        assert_eq!(rep.errors(), 1);
        assert!(rep.recompute_bound > 0.0);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().contains(",error,"));
    }

    #[test]
    fn micro_config_recompute_frequencies() {
        let model = Centroid { dim: 1 };
        let runs = 10_000u64;
        let (mut sample_hits, mut client_hits) = (0, 0);
        for seed in 0..runs {
            let (h, d) = micro(seed);
            let s = UnlearningSession::train(h, d, &model).unwrap();
            let mut a = UnlearningSession::new(s.hyper.clone(), s.dataset.clone(), s.store.clone(), &model);
            if a.unlearn(&UnlearnRequest::sample(0, 0, 2))
                .unwrap()
                .action
                .is_recompute()
            {
                sample_hits += 1;
            }
            let mut b = s;
            if b.unlearn(&UnlearnRequest::client(0, 2)).unwrap().action.is_recompute() {
                client_hits += 1;
            }
        }
        let fs = sample_hits as f64 / runs as f64;
        let fc = client_hits as f64 / runs as f64;
        assert!((fs - 7.0 / 16.0).abs() <= 0.015, "{fs}");
        assert!((fc - 0.75).abs() <= 0.015, "{fc}");
        assert!(fs <= 0.5);
    }
}
