//! Federated averaging with TV-stable sampling.
//!
//! At each round start the server draws `K` clients uniformly with
//! replacement; every distinct selected client runs `E` steps of mini-batch
//! SGD, each batch drawn uniformly without replacement; at the round end the
//! local models are averaged with multiplicity. A client drawn twice runs a
//! single trajectory and counts twice in the average.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::{ClientDataset, ClientId, DataPoint, FederatedDataset, Uid};
use crate::error::{Error, Result};
use crate::objective::{minibatch_grad, LossModel, ModelParams};
use crate::params::{HyperParams, StorageMode};
use crate::rng::{Purpose, StreamKey};
use crate::store::{HistoryStore, Iteration};

/// Partition of `T` iterations into `R = T/E` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSchedule {
    pub total_iters: usize,
    pub local_iters: usize,
}

impl RoundSchedule {
    pub fn new(total_iters: usize, local_iters: usize) -> Result<Self> {
        if local_iters == 0 || total_iters == 0 || !total_iters.is_multiple_of(local_iters) {
            return Err(Error::invalid(format!(
                "T = {total_iters} must be a positive multiple of E = {local_iters}"
            )));
        }
        Ok(Self {
            total_iters,
            local_iters,
        })
    }

    pub fn rounds(&self) -> usize {
        self.total_iters / self.local_iters
    }

    /// `{sE + 1 : s = 0, 1, ...}` up to `T`.
    pub fn round_starts(&self) -> Vec<Iteration> {
        (0..self.rounds()).map(|s| s * self.local_iters + 1).collect()
    }

    pub fn is_round_start(&self, t: Iteration) -> bool {
        t >= 1 && (t - 1).is_multiple_of(self.local_iters)
    }

    pub fn round_of(&self, t: Iteration) -> usize {
        (t - 1) / self.local_iters + 1
    }

    pub fn round_range(&self, r: usize) -> std::ops::RangeInclusive<Iteration> {
        ((r - 1) * self.local_iters + 1)..=(r * self.local_iters)
    }
}

/// `K` i.i.d. uniform draws over `active`, returned as a sorted multiset.
pub fn sample_client_multiset<R: Rng + ?Sized>(rng: &mut R, active: &[ClientId], k: usize) -> Result<Vec<ClientId>> {
    if active.is_empty() {
        return Err(Error::invalid("no active clients to sample from"));
    }
    let mut out: Vec<ClientId> = (0..k).map(|_| active[rng.random_range(0..active.len())]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Uniform `b`-subset of the client's points, as sorted uids.
pub fn sample_minibatch<R: Rng + ?Sized>(rng: &mut R, client: &ClientDataset, b: usize) -> Result<Vec<Uid>> {
    if b == 0 || b > client.len() {
        return Err(Error::InfeasibleBatch {
            client: client.client_id,
            available: client.len(),
            batch: b,
        });
    }
    let mut uids: Vec<Uid> = index::sample(rng, client.len(), b)
        .into_iter()
        .map(|i| client.points[i].uid)
        .collect();
    uids.sort_unstable();
    Ok(uids)
}

pub fn local_step(theta: &ModelParams, grad: &[f64], eta: f64) -> ModelParams {
    ModelParams(theta.0.iter().zip(grad).map(|(t, g)| t - eta * g).collect())
}

/// `(1/K) sum_{k in P} theta_k`, summed in ascending client order with
/// repeats for multiplicity.
pub fn aggregate(local_models: &BTreeMap<ClientId, ModelParams>, multiset: &[ClientId]) -> Result<ModelParams> {
    let first = multiset
        .first()
        .ok_or_else(|| Error::invalid("empty client multiset"))?;
    let dim = local_models.get(first).ok_or(Error::ClientNotFound(*first))?.dim();
    let mut sorted = multiset.to_vec();
    sorted.sort_unstable();
    let mut acc = vec![0.0; dim];
    for k in &sorted {
        let m = local_models.get(k).ok_or(Error::ClientNotFound(*k))?;
        acc.iter_mut().zip(&m.0).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / sorted.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(ModelParams(acc))
}

/// The analysis-time average of the selected clients' current local models.
/// Identical to [`aggregate`]; exposed separately because it is evaluated
/// at every iteration and never fed back into training.
pub fn virtual_average(
    all_local_models: &BTreeMap<ClientId, ModelParams>,
    multiset: &[ClientId],
) -> Result<ModelParams> {
    aggregate(all_local_models, multiset)
}

/// Receives progress events from a run.
pub trait TrainingObserver {
    /// Whether [`on_iteration`](Self::on_iteration) should be called.
    fn per_iteration(&self) -> bool {
        false
    }

    fn on_iteration(&mut self, _t: Iteration, _virtual_average: &ModelParams) {}

    fn on_round_end(&mut self, _round: usize, _t: Iteration, _global: &ModelParams) {}
}

pub struct NoObserver;

impl TrainingObserver for NoObserver {}

/// How a run beginning at a round start obtains that round's selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resume {
    /// Draw a fresh multiset (the normal path).
    Fresh,
    /// Re-use a multiset that was already drawn for this round.
    KeepSelection(Vec<ClientId>),
}

/// Runs iterations `t0..=T` and returns `theta^(T)`.
pub fn run_fats(
    t0: Iteration,
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    store: &mut HistoryStore,
) -> Result<ModelParams> {
    run_fats_with(t0, Resume::Fresh, hyper, dataset, model, store, &mut NoObserver)
}

pub fn run_fats_with(
    t0: Iteration,
    resume: Resume,
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    store: &mut HistoryStore,
    observer: &mut dyn TrainingObserver,
) -> Result<ModelParams> {
    hyper.validate()?;
    let sched = RoundSchedule::new(hyper.total_iters, hyper.local_iters)?;
    let total = sched.total_iters;
    if t0 == 0 || t0 > total {
        return Err(Error::invalid(format!("start iteration {t0} outside [1, {total}]")));
    }
    if store.local_iters() != hyper.local_iters {
        return Err(Error::invalid("store and hyperparameters disagree on E"));
    }
    let active = dataset.client_ids();
    if active.is_empty() {
        return Err(Error::invalid("dataset has no clients"));
    }
    let epoch = store.epoch();
    let r0 = sched.round_of(t0);

    let mut global = store
        .global_model(r0 - 1)
        .cloned()
        .or_else(|| (!sched.is_round_start(t0)).then(|| store.initial_model().clone()))
        .ok_or_else(|| Error::CorruptedHistory(format!("missing global model of round {}", r0 - 1)))?;
    let mut selection: Vec<ClientId> = Vec::new();
    let mut locals: BTreeMap<ClientId, ModelParams> = BTreeMap::new();
    let mut carried = match resume {
        Resume::KeepSelection(sel) if sched.is_round_start(t0) => Some(sel),
        _ => None,
    };

    if !sched.is_round_start(t0) {
        if store.mode() != StorageMode::FullHistory {
            return Err(Error::ModeMismatch {
                expected: StorageMode::FullHistory.name(),
                actual: store.mode().name(),
            });
        }
        selection = store
            .round(r0)
            .ok_or_else(|| Error::CorruptedHistory(format!("missing selection of round {r0}")))?
            .clients
            .clone();
        for k in distinct(&selection) {
            let m = store
                .local_model(k, t0 - 1)
                .ok_or_else(|| Error::CorruptedHistory(format!("missing local model of client {k} at {}", t0 - 1)))?;
            locals.insert(k, m.clone());
        }
    }

    for t in t0..=total {
        let r = sched.round_of(t);
        let step = (t - 1) % sched.local_iters;
        if sched.is_round_start(t) {
            selection = match carried.take() {
                Some(sel) => {
                    let mut sel = sel;
                    sel.sort_unstable();
                    sel
                }
                None => {
                    let mut rng = StreamKey::new(hyper.seed, Purpose::ClientSelection)
                        .epoch(epoch)
                        .round(r as u64)
                        .rng();
                    sample_client_multiset(&mut rng, &active, hyper.clients_per_round)?
                }
            };
            store.record_round(r, selection.clone(), epoch)?;
            locals = distinct(&selection).map(|k| (k, global.clone())).collect();
        }

        for k in distinct(&selection) {
            let client = dataset.client(k).ok_or(Error::ClientNotFound(k))?;
            let mut rng = StreamKey::new(hyper.seed, Purpose::MiniBatch)
                .epoch(epoch)
                .round(r as u64)
                .client(k as u64)
                .step(step as u64)
                .rng();
            let batch = sample_minibatch(&mut rng, client, hyper.batch_size)?;
            let points = batch_points(client, &batch);
            let theta = locals.get(&k).ok_or(Error::ClientNotFound(k))?;
            let grad = minibatch_grad(model, &theta.0, &points)?;
            let next = local_step(theta, &grad, hyper.learning_rate);
            store.record_iteration(t, k, batch, next.clone(), epoch)?;
            locals.insert(k, next);
        }

        if observer.per_iteration() {
            observer.on_iteration(t, &virtual_average(&locals, &selection)?);
        }
        if t % sched.local_iters == 0 {
            global = aggregate(&locals, &selection)?;
            store.record_global(r, global.clone())?;
            observer.on_round_end(r, t, &global);
        }
    }
    Ok(global)
}

/// Trains from scratch into a fresh store of the configured layout.
pub fn train(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    observer: &mut dyn TrainingObserver,
) -> Result<(ModelParams, HistoryStore)> {
    let mut store = HistoryStore::new(
        hyper.storage,
        hyper.local_iters,
        ModelParams::zeros(model.dim()),
        dataset,
    );
    let theta = run_fats_with(1, Resume::Fresh, hyper, dataset, model, &mut store, observer)?;
    Ok((theta, store))
}

fn distinct(multiset: &[ClientId]) -> impl Iterator<Item = ClientId> + '_ {
    multiset
        .iter()
        .enumerate()
        .filter(|&(i, k)| i == 0 || multiset[i - 1] != *k)
        .map(|(_, &k)| k)
}

/// Points of `batch` (sorted uids) in uid order.
fn batch_points<'a>(client: &'a ClientDataset, batch: &[Uid]) -> Vec<&'a DataPoint> {
    let mut pts: Vec<&DataPoint> = client
        .points
        .iter()
        .filter(|p| batch.binary_search(&p.uid).is_ok())
        .collect();
    pts.sort_unstable_by_key(|p| p.uid);
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::objective::{Centroid, LeastSquares};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn constant_dataset(m: usize, n: usize, c: f64) -> FederatedDataset {
        let clients = (0..m)
            .map(|k| ClientDataset {
                client_id: k,
                points: (0..n)
                    .map(|i| DataPoint {
                        uid: (k * n + i) as Uid,
                        label: 0.0,
                        features: vec![c],
                    })
                    .collect(),
            })
            .collect();
        FederatedDataset::new(clients, 1, 1, n, 0).unwrap()
    }

    #[test]
    fn schedule_round_starts() {
        let s = RoundSchedule::new(30, 10).unwrap();
        assert_eq!(s.round_starts(), vec![1, 11, 21]);
        assert!(s.is_round_start(11));
        assert!(!s.is_round_start(12));
        assert_eq!(s.round_of(10), 1);
        assert_eq!(s.round_of(11), 2);
        assert_eq!(s.round_range(2), 11..=20);
        assert!(RoundSchedule::new(30, 7).is_err());
    }

    #[test]
    fn single_client_multiset() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(sample_client_multiset(&mut rng, &[3], 4).unwrap(), vec![3, 3, 3, 3]);
    }

    #[test]
    fn client_frequency_is_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| sample_client_multiset(&mut rng, &[0, 1, 2, 3], 1).unwrap()[0] == 2)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.25).abs() <= 0.005, "{freq}");
    }

    #[test]
    fn minibatch_cases() {
        let d = constant_dataset(1, 4, 0.0);
        let c = &d.clients()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        assert_eq!(sample_minibatch(&mut rng, c, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(sample_minibatch(&mut rng, c, 5).is_err());
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| sample_minibatch(&mut rng, c, 2).unwrap().contains(&1))
            .count();
        let p = hits as f64 / trials as f64;
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * sigma, "{p}");
    }

    #[test]
    fn minibatch_n2_b1_is_fair() {
        let d = constant_dataset(1, 2, 0.0);
        let c = &d.clients()[0];
        let trials = 100_000;
        let hits = (0..trials as u64)
            .filter(|&i| {
                let mut rng = StreamKey::new(i, Purpose::MiniBatch).rng();
                sample_minibatch(&mut rng, c, 1).unwrap() == vec![0]
            })
            .count();
        let p = hits as f64 / trials as f64;
        assert!((p - 0.5).abs() <= 3.0 * (0.25f64 / trials as f64).sqrt(), "{p}");
    }

    #[test]
    fn local_step_cases() {
        let t = ModelParams(vec![1.0]);
        assert!((local_step(&t, &[0.5], 0.1).0[0] - 0.95).abs() < 1e-15);
        assert_eq!(local_step(&t, &[0.0], 0.1), t);
        let two = local_step(&local_step(&t, &[0.5], 0.1), &[0.5], 0.1);
        let one = local_step(&t, &[1.0], 0.1);
        assert!((two.0[0] - one.0[0]).abs() < 1e-15);
    }

    #[test]
    fn aggregate_respects_multiplicity() {
        let mut locals = BTreeMap::new();
        locals.insert(1, ModelParams(vec![2.0]));
        locals.insert(2, ModelParams(vec![5.0]));
        assert_eq!(aggregate(&locals, &[1, 1, 2]).unwrap().0, vec![3.0]);
        assert_eq!(aggregate(&locals, &[2]).unwrap().0, vec![5.0]);
        let mut same = BTreeMap::new();
        same.insert(0, ModelParams(vec![1.5, -2.0]));
        same.insert(4, ModelParams(vec![1.5, -2.0]));
        assert_eq!(aggregate(&same, &[4, 0, 0]).unwrap().0, vec![1.5, -2.0]);
        assert!(aggregate(&locals, &[]).is_err());
        assert!(aggregate(&locals, &[9]).is_err());
    }

    struct Recorder {
        virtual_avgs: Vec<(Iteration, ModelParams)>,
        globals: Vec<(Iteration, ModelParams)>,
    }

    impl TrainingObserver for Recorder {
        fn per_iteration(&self) -> bool {
            true
        }
        fn on_iteration(&mut self, t: Iteration, v: &ModelParams) {
            self.virtual_avgs.push((t, v.clone()));
        }
        fn on_round_end(&mut self, _r: usize, t: Iteration, g: &ModelParams) {
            self.globals.push((t, g.clone()));
        }
    }

    #[test]
    fn virtual_average_coincides_with_global_at_round_ends() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 5,
            samples_per_client: 10,
            dim: 3,
            classes: 3,
            beta: 0.5,
            seed: 4,
        })
        .unwrap();
        let h = HyperParams::explicit(5, 10, 12, 3, 3, 2, 0.05, 9).unwrap();
        let mut rec = Recorder {
            virtual_avgs: vec![],
            globals: vec![],
        };
        train(&h, &d, &LeastSquares { dim: 3 }, &mut rec).unwrap();
        assert_eq!(rec.virtual_avgs.len(), 12);
        assert_eq!(rec.globals.len(), 4);
        for (t, g) in &rec.globals {
            let v = &rec.virtual_avgs[t - 1].1;
            assert!(v.bits_eq(g));
        }
    }

    #[test]
    fn single_round_full_participation_is_distributed_gd() {
        // K = M via rho_C = 1 with E = T; b = N.
        let d = generate_synthetic(&SyntheticSpec {
            clients: 3,
            samples_per_client: 4,
            dim: 2,
            classes: 2,
            beta: 1.0,
            seed: 0,
        })
        .unwrap();
        let h = HyperParams::explicit(3, 4, 1, 1, 3, 4, 0.1, 5).unwrap();
        let model = LeastSquares { dim: 2 };
        let (theta, store) = train(&h, &d, &model, &mut NoObserver).unwrap();
        // With one step from zero, each client moves by -eta * grad F_k(0).
        // The multiset may repeat clients, so reproduce the weighting it chose.
        let sel = &store.rounds()[0].clients;
        let mut expect = [0.0; 2];
        for &k in sel {
            let g = crate::objective::full_local_grad(&model, &[0.0, 0.0], d.client(k).unwrap()).unwrap();
            for i in 0..2 {
                expect[i] -= 0.1 * g[i] / 3.0;
            }
        }
        for i in 0..2 {
            assert!((theta.0[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_contracts_by_one_minus_eta() {
        let c = 3.0;
        let d = constant_dataset(4, 5, c);
        let eta = 0.2;
        let h = HyperParams::explicit(4, 5, 20, 4, 2, 2, eta, 1).unwrap();
        let mut rec = Recorder {
            virtual_avgs: vec![],
            globals: vec![],
        };
        let (theta, _) = train(&h, &d, &Centroid { dim: 1 }, &mut rec).unwrap();
        let mut prev = c;
        for (t, v) in &rec.virtual_avgs {
            let err = (v.0[0] - c).abs();
            let expect = c * (1.0 - eta).powi(*t as i32);
            assert!((err - expect).abs() < 1e-12, "t={t}: {err} vs {expect}");
            assert!(err < prev);
            prev = err;
        }
        assert!((theta.0[0] - c).abs() < c * (1.0 - eta).powi(19));
    }

    #[test]
    fn determinism_and_replay() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 6,
            samples_per_client: 8,
            dim: 2,
            classes: 4,
            beta: 0.5,
            seed: 3,
        })
        .unwrap();
        let h = HyperParams::explicit(6, 8, 20, 4, 3, 2, 0.05, 77).unwrap();
        let model = LeastSquares { dim: 2 };
        let (t1, s1) = train(&h, &d, &model, &mut NoObserver).unwrap();
        let (t2, s2) = train(&h, &d, &model, &mut NoObserver).unwrap();
        assert!(t1.bits_eq(&t2));
        assert_eq!(s1, s2);
        for t0 in [2, 5, 7, 13, 20] {
            let mut s = s1.clone();
            s.rewind(t0).unwrap();
            let t = run_fats(t0, &h, &d, &model, &mut s).unwrap();
            assert!(t.bits_eq(&t1), "t0 = {t0}");
            assert_eq!(s, s1, "t0 = {t0}");
        }
    }

    #[test]
    fn invalid_starts() {
        let d = constant_dataset(2, 2, 1.0);
        let h = HyperParams::explicit(2, 2, 4, 2, 1, 1, 0.1, 0).unwrap();
        let model = Centroid { dim: 1 };
        let mut s = HistoryStore::full(2, ModelParams::zeros(1));
        assert!(matches!(
            run_fats(5, &h, &d, &model, &mut s),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            run_fats(0, &h, &d, &model, &mut s),
            Err(Error::InvalidArgument(_))
        ));
        // Mid-round start without stored state.
        assert!(matches!(
            run_fats(2, &h, &d, &model, &mut s),
            Err(Error::CorruptedHistory(_))
        ));
    }

    #[test]
    fn infeasible_batch_is_reported() {
        let d = constant_dataset(2, 2, 1.0).remove_sample(0, 0).unwrap();
        let d = d.remove_sample(1, 2).unwrap();
        let h = HyperParams::explicit(2, 2, 2, 1, 1, 2, 0.1, 0).unwrap();
        let err = train(&h, &d, &Centroid { dim: 1 }, &mut NoObserver).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleBatch {
                available: 1,
                batch: 2,
                ..
            }
        ));
    }

    #[test]
    fn record_counts_match_distinct_selection() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 5,
            samples_per_client: 6,
            dim: 2,
            classes: 2,
            beta: 1.0,
            seed: 0,
        })
        .unwrap();
        let h = HyperParams::explicit(5, 6, 30, 5, 4, 2, 0.05, 3).unwrap();
        let (_, s) = train(&h, &d, &LeastSquares { dim: 2 }, &mut NoObserver).unwrap();
        let expected: usize = s
            .rounds()
            .iter()
            .map(|r| distinct(&r.clients).count() * h.local_iters)
            .sum();
        assert_eq!(s.iteration_record_count(), expected);
        assert_eq!(s.rounds().len(), 6);
        assert!(s.rounds().iter().all(|r| r.global.is_some()));
    }
}
