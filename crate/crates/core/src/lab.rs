//! Exact and Monte-Carlo checks that unlearning reproduces the distribution
//! of retraining from scratch.
//!
//! The exact path enumerates every canonical sampling history of a small
//! configuration with arbitrary-precision rational probabilities.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::data::{ClientDataset, ClientId, FederatedDataset, RequestKind, Uid, UnlearnRequest};
use crate::engine::train;
use crate::engine::NoObserver;
use crate::error::{Error, Result};
use crate::objective::LossModel;
use crate::params::HyperParams;
use crate::rng::trial_seed;
use crate::stats::chi_square_two_sample;
use crate::store::{history_digest, RoundSample, SamplingHistory};
use crate::unlearning::UnlearningSession;

pub type Prob = BigRational;

/// Largest number of histories the exact path will enumerate.
pub const ENUMERATION_BUDGET: u64 = 1_000_000;

/// Significance level of the Monte-Carlo equivalence test.
pub const EQUIVALENCE_LEVEL: f64 = 0.001;

fn ratio(n: u64, d: u64) -> Prob {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact probability table over canonical sampling histories.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HistoryDistribution {
    probs: BTreeMap<SamplingHistory, Prob>,
}

impl HistoryDistribution {
    fn add(&mut self, h: SamplingHistory, p: Prob) {
        if p.is_zero() {
            return;
        }
        let e = self.probs.entry(h).or_insert_with(Prob::zero);
        *e += p;
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, h: &[RoundSample]) -> Prob {
        self.probs.get(h).cloned().unwrap_or_else(Prob::zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SamplingHistory, &Prob)> {
        self.probs.iter()
    }

    pub fn total(&self) -> Prob {
        self.probs.values().fold(Prob::zero(), |a, p| a + p)
    }

    /// `1/2 sum |p - q|` over the union of supports.
    pub fn tv_distance(&self, other: &Self) -> Prob {
        let mut acc = Prob::zero();
        for (h, p) in &self.probs {
            let q = other.prob(h);
            acc += if *p > q { p - &q } else { &q - p };
        }
        for (h, q) in &other.probs {
            if !self.probs.contains_key(h) {
                acc += q;
            }
        }
        acc / BigInt::from(2)
    }

    /// Total probability of histories satisfying `pred`.
    pub fn mass_where(&self, pred: impl Fn(&SamplingHistory) -> bool) -> Prob {
        self.probs
            .iter()
            .filter(|(h, _)| pred(h))
            .fold(Prob::zero(), |a, (_, p)| a + p)
    }
}

/// Upper estimate of the number of histories: `(M^K * C(N,b)^(K*E))^R`.
fn state_count(hyper: &HyperParams, dataset: &FederatedDataset) -> f64 {
    let m = dataset.num_clients() as f64;
    let n = dataset.clients().iter().map(|c| c.len()).max().unwrap_or(0);
    let c = binomial(n, hyper.batch_size) as f64;
    let k = hyper.clients_per_round as f64;
    let per_round = m.powf(k) * c.powf(k * hyper.local_iters as f64);
    per_round.powf(hyper.rounds() as f64)
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

fn check_budget(hyper: &HyperParams, dataset: &FederatedDataset) -> Result<()> {
    let states = state_count(hyper, dataset);
    if !(states <= ENUMERATION_BUDGET as f64) {
        return Err(Error::TooLargeToEnumerate {
            states,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// All `b`-subsets of the client's uids, each sorted.
fn subsets(client: &ClientDataset, b: usize) -> Vec<Vec<Uid>> {
    let mut uids: Vec<Uid> = client.uids().collect();
    uids.sort_unstable();
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(b);
    fn rec(uids: &[Uid], b: usize, start: usize, cur: &mut Vec<Uid>, out: &mut Vec<Vec<Uid>>) {
        if cur.len() == b {
            out.push(cur.clone());
            return;
        }
        for i in start..uids.len() {
            cur.push(uids[i]);
            rec(uids, b, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(&uids, b, 0, &mut cur, &mut out);
    out
}

/// Canonical multisets of `k` uniform draws with replacement from `active`.
fn client_multisets(active: &[ClientId], k: usize) -> Vec<(Vec<ClientId>, Prob)> {
    let m = active.len();
    let total = (m as u64).pow(k as u32);
    let mut counts: BTreeMap<Vec<ClientId>, u64> = BTreeMap::new();
    let mut idx = vec![0usize; k];
    for _ in 0..total {
        let mut ms: Vec<ClientId> = idx.iter().map(|&i| active[i]).collect();
        ms.sort_unstable();
        *counts.entry(ms).or_default() += 1;
        for d in idx.iter_mut() {
            *d += 1;
            if *d < m {
                break;
            }
            *d = 0;
        }
    }
    counts.into_iter().map(|(ms, c)| (ms, ratio(c, total))).collect()
}

/// Completions of one round given its multiset and, for each distinct
/// client, the batches of its first steps.
fn complete_round(
    dataset: &FederatedDataset,
    clients: &[ClientId],
    prefix: &[(ClientId, Vec<Vec<Uid>>)],
    b: usize,
    e: usize,
) -> Result<Vec<(RoundSample, Prob)>> {
    let mut partial: Vec<(Vec<(ClientId, Vec<Vec<Uid>>)>, Prob)> = vec![(Vec::new(), Prob::one())];
    let mut distinct = clients.to_vec();
    distinct.dedup();
    for k in distinct {
        let client = dataset.client(k).ok_or(Error::ClientNotFound(k))?;
        let options = subsets(client, b);
        if options.is_empty() {
            return Err(Error::InfeasibleBatch {
                client: k,
                available: client.len(),
                batch: b,
            });
        }
        let p_one = ratio(1, options.len() as u64);
        let start: Vec<Vec<Uid>> = prefix
            .iter()
            .find(|(c, _)| *c == k)
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        let mut seqs: Vec<(Vec<Vec<Uid>>, Prob)> = vec![(start.clone(), Prob::one())];
        for _ in start.len()..e {
            seqs = seqs
                .into_iter()
                .flat_map(|(s, p)| {
                    options.iter().map(move |o| {
                        let mut s = s.clone();
                        s.push(o.clone());
                        (s, p.clone())
                    })
                })
                .map(|(s, p)| (s, p * &p_one))
                .collect();
        }
        partial = partial
            .into_iter()
            .flat_map(|(acc, p)| {
                seqs.iter().map(move |(s, q)| {
                    let mut acc = acc.clone();
                    acc.push((k, s.clone()));
                    (acc, &p * q)
                })
            })
            .collect();
    }
    Ok(partial
        .into_iter()
        .map(|(batches, p)| {
            (
                RoundSample {
                    clients: clients.to_vec(),
                    batches,
                },
                p,
            )
        })
        .collect())
}

/// Distribution of one fresh round.
fn round_distribution(hyper: &HyperParams, dataset: &FederatedDataset) -> Result<Vec<(RoundSample, Prob)>> {
    let active = dataset.client_ids();
    let mut out = Vec::new();
    for (ms, p) in client_multisets(&active, hyper.clients_per_round) {
        for (rs, q) in complete_round(dataset, &ms, &[], hyper.batch_size, hyper.local_iters)? {
            out.push((rs, &p * q));
        }
    }
    Ok(out)
}

/// Distribution of `rounds` independent fresh rounds.
struct FreshRounds {
    round: Vec<(RoundSample, Prob)>,
    cache: Vec<Vec<(SamplingHistory, Prob)>>,
}

impl FreshRounds {
    fn new(hyper: &HyperParams, dataset: &FederatedDataset) -> Result<Self> {
        Ok(Self {
            round: round_distribution(hyper, dataset)?,
            cache: vec![vec![(Vec::new(), Prob::one())]],
        })
    }

    fn get(&mut self, rounds: usize) -> &[(SamplingHistory, Prob)] {
        while self.cache.len() <= rounds {
            let last = self.cache.last().unwrap();
            let next = last
                .iter()
                .flat_map(|(h, p)| {
                    self.round.iter().map(move |(r, q)| {
                        let mut h = h.clone();
                        h.push(r.clone());
                        (h, p * q)
                    })
                })
                .collect();
            self.cache.push(next);
        }
        &self.cache[rounds]
    }
}

/// Exact distribution of the sampling history of a full run.
pub fn enumerate_history_distribution(hyper: &HyperParams, dataset: &FederatedDataset) -> Result<HistoryDistribution> {
    hyper.validate()?;
    check_budget(hyper, dataset)?;
    let mut fresh = FreshRounds::new(hyper, dataset)?;
    let mut dist = HistoryDistribution::default();
    for (h, p) in fresh.get(hyper.rounds()) {
        dist.add(h.clone(), p.clone());
    }
    Ok(dist)
}

/// First `(round index, local step)` at which `uid` of `client` was in a
/// batch.
fn first_sample_use(h: &[RoundSample], client: ClientId, uid: Uid) -> Option<(usize, usize)> {
    h.iter().enumerate().find_map(|(r, rs)| {
        rs.batches
            .iter()
            .find(|(c, _)| *c == client)
            .and_then(|(_, steps)| steps.iter().position(|b| b.contains(&uid)))
            .map(|j| (r, j))
    })
}

fn first_client_round(h: &[RoundSample], client: ClientId) -> Option<usize> {
    h.iter().position(|rs| rs.clients.contains(&client))
}

/// Whether `request`'s target appears anywhere in `h`.
pub fn involved(h: &[RoundSample], request: &UnlearnRequest) -> bool {
    match (request.kind, request.uid) {
        (RequestKind::Sample, Some(u)) => first_sample_use(h, request.client, u).is_some(),
        _ => first_client_round(h, request.client).is_some(),
    }
}

fn reduce(dataset: &FederatedDataset, request: &UnlearnRequest) -> Result<FederatedDataset> {
    match (request.kind, request.uid) {
        (RequestKind::Sample, Some(u)) => dataset.remove_sample(request.client, u),
        (RequestKind::Sample, None) => Err(Error::invalid("sample request without uid")),
        (RequestKind::Client, _) => dataset.remove_client(request.client),
    }
}

/// Pushes `dist` (histories on `dataset`) through one partial-recompute
/// deletion, mirroring the unlearning session: keep uninvolved histories;
/// otherwise keep the prefix before the first use and redraw the rest on
/// the reduced dataset. For a sample, the multiset of the round of first use
/// and the earlier steps of that round are kept. For a client, the rounds
/// from its first selection are redrawn in full.
pub fn apply_unlearning(
    dist: &HistoryDistribution,
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    request: &UnlearnRequest,
) -> Result<HistoryDistribution> {
    let reduced = reduce(dataset, request)?;
    let total_rounds = hyper.rounds();
    let (b, e) = (hyper.batch_size, hyper.local_iters);
    let mut fresh = FreshRounds::new(hyper, &reduced)?;
    let mut out = HistoryDistribution::default();
    for (h, p) in dist.iter() {
        match (request.kind, request.uid) {
            (RequestKind::Sample, Some(uid)) => match first_sample_use(h, request.client, uid) {
                None => out.add(h.clone(), p.clone()),
                Some((r, j)) => {
                    let kept: Vec<(ClientId, Vec<Vec<Uid>>)> = h[r]
                        .batches
                        .iter()
                        .map(|(c, steps)| (*c, steps[..j].to_vec()))
                        .collect();
                    let completions = complete_round(&reduced, &h[r].clients, &kept, b, e)?;
                    let suffix = fresh.get(total_rounds - r - 1);
                    for (rs, q) in &completions {
                        for (suf, s) in suffix {
                            let mut nh = h[..r].to_vec();
                            nh.push(rs.clone());
                            nh.extend(suf.iter().cloned());
                            out.add(nh, p * q * s);
                        }
                    }
                }
            },
            _ => match first_client_round(h, request.client) {
                None => out.add(h.clone(), p.clone()),
                Some(r) => {
                    for (suf, s) in fresh.get(total_rounds - r) {
                        let mut nh = h[..r].to_vec();
                        nh.extend(suf.iter().cloned());
                        out.add(nh, p * s);
                    }
                }
            },
        }
    }
    Ok(out)
}

/// Distribution of the history after training on `dataset` and unlearning
/// `request` by partial re-computation.
pub fn unlearned_history_distribution(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    request: &UnlearnRequest,
) -> Result<HistoryDistribution> {
    let original = enumerate_history_distribution(hyper, dataset)?;
    apply_unlearning(&original, hyper, dataset, request)
}

/// Distribution of the history after training on `dataset` and unlearning
/// `request` by verifying involvement and, if involved, retraining from
/// iteration 1 (the compact-storage path).
pub fn full_retrain_history_distribution(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    request: &UnlearnRequest,
) -> Result<HistoryDistribution> {
    let original = enumerate_history_distribution(hyper, dataset)?;
    let reduced = reduce(dataset, request)?;
    let retrained = enumerate_history_distribution(hyper, &reduced)?;
    let p_inv = original.mass_where(|h| involved(h, request));
    let mut out = HistoryDistribution::default();
    for (h, p) in original.iter() {
        if !involved(h, request) {
            out.add(h.clone(), p.clone());
        }
    }
    for (h, q) in retrained.iter() {
        out.add(h.clone(), &p_inv * q);
    }
    Ok(out)
}

/// Closed-form probability that the target is ever involved:
/// `1 - (1 - q)^R` with per-round `q = [1 - (1 - 1/M)^K] * [1 - (1 - b/n)^E]`
/// for a sample on a client of size `n`, and without the second factor for
/// a client.
pub fn involvement_probability(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    target: &UnlearnRequest,
) -> Result<Prob> {
    let m = dataset.num_clients() as u64;
    let client = dataset
        .client(target.client)
        .ok_or(Error::ClientNotFound(target.client))?;
    let pow = |x: &Prob, n: usize| (0..n).fold(Prob::one(), |a, _| a * x);
    let q_client = Prob::one() - pow(&ratio(m - 1, m), hyper.clients_per_round);
    let q = match target.kind {
        RequestKind::Client => q_client,
        RequestKind::Sample => {
            let n = client.len() as u64;
            let b = hyper.batch_size as u64;
            q_client * (Prob::one() - pow(&ratio(n - b, n), hyper.local_iters))
        }
    };
    Ok(Prob::one() - pow(&(Prob::one() - q), hyper.rounds()))
}

/// The same probability summed over the enumerated distribution.
pub fn involvement_probability_enumerated(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    target: &UnlearnRequest,
) -> Result<Prob> {
    Ok(enumerate_history_distribution(hyper, dataset)?.mass_where(|h| involved(h, target)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquivalenceMode {
    ExactEnumeration,
    ChiSquare,
}

impl EquivalenceMode {
    pub fn name(self) -> &'static str {
        match self {
            EquivalenceMode::ExactEnumeration => "exact_enumeration",
            EquivalenceMode::ChiSquare => "chi_square",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub mode: EquivalenceMode,
    /// Chi-square statistic, or the TV distance in exact mode.
    pub statistic: f64,
    /// Significance level in chi-square mode, 0 in exact mode.
    pub threshold: f64,
    pub p_value: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    /// `name,mode,statistic,p_value,verdict`
    pub fn record(&self, name: &str) -> String {
        format!(
            "{name},{},{:.6},{:.6e},{}",
            self.mode.name(),
            self.statistic,
            self.p_value,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

/// Exact comparison of two rational distributions.
pub fn equivalence_exact(a: &HistoryDistribution, b: &HistoryDistribution) -> EquivalenceReport {
    let tv = a.tv_distance(b);
    let tv_f = tv.to_f64().unwrap_or(f64::NAN);
    EquivalenceReport {
        mode: EquivalenceMode::ExactEnumeration,
        statistic: tv_f,
        threshold: 0.0,
        p_value: if tv.is_zero() { 1.0 } else { 0.0 },
        pass: a == b,
    }
}

/// How trial outcomes are turned into bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binning {
    /// One bin per distinct outcome key.
    Categorical,
    /// `key mod bins`.
    Hashed(usize),
}

/// Runs both pipelines `trials` times on independent seeds and compares the
/// binned outcome keys with a chi-square two-sample test at level
/// [`EQUIVALENCE_LEVEL`].
pub fn equivalence_test_mc<A, B>(
    runner_a: A,
    runner_b: B,
    trials: usize,
    binning: Binning,
    seed: u64,
) -> Result<EquivalenceReport>
where
    A: Fn(u64) -> Result<u64> + Sync,
    B: Fn(u64) -> Result<u64> + Sync,
{
    let seed_a = trial_seed(seed, 0);
    let seed_b = trial_seed(seed, 1);
    let keys_a: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| runner_a(trial_seed(seed_a, i)))
        .collect::<Result<_>>()?;
    let keys_b: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| runner_b(trial_seed(seed_b, i)))
        .collect::<Result<_>>()?;
    let (ca, cb) = bin_counts(&keys_a, &keys_b, binning);
    let r = chi_square_two_sample(&ca, &cb)?;
    Ok(EquivalenceReport {
        mode: EquivalenceMode::ChiSquare,
        statistic: r.statistic,
        threshold: EQUIVALENCE_LEVEL,
        p_value: r.p_value,
        pass: r.p_value >= EQUIVALENCE_LEVEL,
    })
}

fn bin_counts(a: &[u64], b: &[u64], binning: Binning) -> (Vec<u64>, Vec<u64>) {
    match binning {
        Binning::Hashed(n) => {
            let mut ca = vec![0u64; n];
            let mut cb = vec![0u64; n];
            a.iter().for_each(|k| ca[(k % n as u64) as usize] += 1);
            b.iter().for_each(|k| cb[(k % n as u64) as usize] += 1);
            (ca, cb)
        }
        Binning::Categorical => {
            let mut index: HashMap<u64, usize> = HashMap::new();
            let mut ca = Vec::new();
            let mut cb = Vec::new();
            for (keys, which) in [(a, 0), (b, 1)] {
                for k in keys {
                    let next = index.len();
                    let i = *index.entry(*k).or_insert(next);
                    if i == ca.len() {
                        ca.push(0);
                        cb.push(0);
                    }
                    if which == 0 {
                        ca[i] += 1;
                    } else {
                        cb[i] += 1;
                    }
                }
            }
            (ca, cb)
        }
    }
}

/// Trains on `dataset` with the given seed, unlearns `request` and returns
/// the digest of the final history. With `skip_recompute` the deletion only
/// drops the data and keeps the history (a deliberately broken unlearner).
pub fn unlearn_pipeline_digest(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    request: &UnlearnRequest,
    skip_recompute: bool,
    seed: u64,
) -> Result<u64> {
    let h = hyper.clone().with_seed(seed);
    let mut s = UnlearningSession::train(h, dataset.clone(), model)?;
    if !skip_recompute {
        s.unlearn(request)?;
    }
    Ok(history_digest(&s.store().history()?))
}

/// Trains from scratch on `dataset` and returns the history digest.
pub fn retrain_pipeline_digest(
    hyper: &HyperParams,
    dataset: &FederatedDataset,
    model: &dyn LossModel,
    seed: u64,
) -> Result<u64> {
    let h = hyper.clone().with_seed(seed);
    let (_, store) = train(&h, dataset, model, &mut NoObserver)?;
    Ok(history_digest(&store.history()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataPoint;

    pub(crate) fn micro_dataset(m: usize, n: usize) -> FederatedDataset {
        let clients = (0..m)
            .map(|k| ClientDataset {
                client_id: k,
                points: (0..n)
                    .map(|i| DataPoint {
                        uid: (k * n + i) as Uid,
                        label: 0.0,
                        features: vec![0.0],
                    })
                    .collect(),
            })
            .collect();
        FederatedDataset::new(clients, 1, 1, n, 0).unwrap()
    }

    fn micro_hyper(rounds: usize) -> HyperParams {
        HyperParams::explicit(2, 2, rounds, 1, 1, 1, 0.1, 0).unwrap()
    }

    #[test]
    fn single_round_has_four_histories() {
        let d = enumerate_history_distribution(&micro_hyper(1), &micro_dataset(2, 2)).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|(_, p)| *p == ratio(1, 4)));
        assert_eq!(d.total(), Prob::one());
    }

    #[test]
    fn two_rounds_multiply() {
        let d = enumerate_history_distribution(&micro_hyper(2), &micro_dataset(2, 2)).unwrap();
        assert_eq!(d.len(), 16);
        assert!(d.iter().all(|(_, p)| *p == ratio(1, 16)));
    }

    #[test]
    fn single_client_full_batch_is_a_point_mass() {
        let h = HyperParams::explicit(1, 3, 2, 1, 1, 3, 0.1, 0).unwrap();
        let d = enumerate_history_distribution(&h, &micro_dataset(1, 3)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.total(), Prob::one());
    }

    #[test]
    fn repeated_clients_are_canonical() {
        // K = 2 of M = 2: multisets {0,0}, {0,1}, {1,1} with 1/4, 1/2, 1/4.
        let h = HyperParams::explicit(2, 1, 1, 1, 2, 1, 0.1, 0).unwrap();
        let d = enumerate_history_distribution(&h, &micro_dataset(2, 1)).unwrap();
        assert_eq!(d.len(), 3);
        let mixed = d.mass_where(|h| h[0].clients == vec![0, 1]);
        assert_eq!(mixed, ratio(1, 2));
    }

    #[test]
    fn budget_is_enforced() {
        let h = HyperParams::explicit(4, 6, 6, 2, 2, 3, 0.1, 0).unwrap();
        let err = enumerate_history_distribution(&h, &micro_dataset(4, 6)).unwrap_err();
        assert!(matches!(err, Error::TooLargeToEnumerate { .. }));
    }

    #[test]
    fn sample_unlearning_is_exact_on_micro_config() {
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let req = UnlearnRequest::sample(0, 0, 2);
        let u = unlearned_history_distribution(&h, &d, &req).unwrap();
        let r = enumerate_history_distribution(&h, &d.remove_sample(0, 0).unwrap()).unwrap();
        assert_eq!(u.total(), Prob::one());
        assert_eq!(u, r);
    }

    #[test]
    fn client_unlearning_is_exact_on_micro_config() {
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let req = UnlearnRequest::client(1, 2);
        let u = unlearned_history_distribution(&h, &d, &req).unwrap();
        let r = enumerate_history_distribution(&h, &d.remove_client(1).unwrap()).unwrap();
        assert_eq!(u, r);
    }

    #[test]
    fn exactness_on_larger_configs() {
        // Mid-round first uses (E = 2), repeated clients (K = 2), b = 2.
        let cases = [
            (
                HyperParams::explicit(2, 3, 4, 2, 1, 1, 0.1, 0).unwrap(),
                micro_dataset(2, 3),
            ),
            (
                HyperParams::explicit(2, 2, 2, 1, 2, 1, 0.1, 0).unwrap(),
                micro_dataset(2, 2),
            ),
            (
                HyperParams::explicit(3, 3, 2, 2, 1, 2, 0.1, 0).unwrap(),
                micro_dataset(3, 3),
            ),
        ];
        for (h, d) in cases {
            for req in [
                UnlearnRequest::sample(0, 0, h.total_iters),
                UnlearnRequest::client(0, h.total_iters),
            ] {
                let u = unlearned_history_distribution(&h, &d, &req).unwrap();
                let r = enumerate_history_distribution(&h, &reduce(&d, &req).unwrap()).unwrap();
                assert_eq!(u, r, "{h:?} {req:?}");
            }
        }
    }

    #[test]
    fn resampling_the_selection_at_a_round_start_would_not_be_exact() {
        // Redrawing the client multiset at the sample's first-use round
        // start gives round-1 marginal 3/8 for the target's client instead
        // of 1/2.
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let reduced = d.remove_sample(0, 0).unwrap();
        let original = enumerate_history_distribution(&h, &d).unwrap();
        let mut fresh = FreshRounds::new(&h, &reduced).unwrap();
        let mut out = HistoryDistribution::default();
        for (hist, p) in original.iter() {
            match first_sample_use(hist, 0, 0) {
                None => out.add(hist.clone(), p.clone()),
                Some((r, _)) => {
                    for (suf, s) in fresh.get(2 - r) {
                        let mut nh = hist[..r].to_vec();
                        nh.extend(suf.iter().cloned());
                        out.add(nh, p * s);
                    }
                }
            }
        }
        assert_eq!(out.mass_where(|h| h[0].clients == vec![0]), ratio(3, 8));
        let exact = enumerate_history_distribution(&h, &reduced).unwrap();
        assert_eq!(exact.mass_where(|h| h[0].clients == vec![0]), ratio(1, 2));
    }

    #[test]
    fn full_retrain_matches_recompute_probability_but_not_histories() {
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let req = UnlearnRequest::sample(0, 0, 2);
        let full = full_retrain_history_distribution(&h, &d, &req).unwrap();
        let partial = unlearned_history_distribution(&h, &d, &req).unwrap();
        assert_eq!(full.total(), Prob::one());
        // Both modes recompute exactly when the target was involved.
        let p = involvement_probability_enumerated(&h, &d, &req).unwrap();
        assert_eq!(p, ratio(7, 16));
        // The final histories differ: retraining from scratch whenever the
        // target was involved over-weights histories that avoid it.
        let both_on_zero = vec![
            RoundSample {
                clients: vec![0],
                batches: vec![(0, vec![vec![1]])],
            };
            2
        ];
        assert_eq!(partial.prob(&both_on_zero), ratio(1, 4));
        assert_eq!(full.prob(&both_on_zero), ratio(11, 64));
        assert_ne!(full, partial);
    }

    #[test]
    fn involvement_probabilities() {
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let s = UnlearnRequest::sample(0, 0, 2);
        let c = UnlearnRequest::client(0, 2);
        assert_eq!(involvement_probability(&h, &d, &s).unwrap(), ratio(7, 16));
        assert_eq!(involvement_probability_enumerated(&h, &d, &s).unwrap(), ratio(7, 16));
        assert_eq!(involvement_probability(&h, &d, &c).unwrap(), ratio(3, 4));
        assert_eq!(involvement_probability_enumerated(&h, &d, &c).unwrap(), ratio(3, 4));
        assert!(ratio(7, 16) <= ratio(1, 2));

        // Closed form and enumeration agree on other small configs.
        for (h, d) in [
            (
                HyperParams::explicit(3, 3, 4, 2, 2, 2, 0.1, 0).unwrap(),
                micro_dataset(3, 3),
            ),
            (
                HyperParams::explicit(2, 3, 3, 1, 2, 1, 0.1, 0).unwrap(),
                micro_dataset(2, 3),
            ),
        ] {
            for t in [UnlearnRequest::sample(1, 4, 1), UnlearnRequest::client(1, 1)] {
                assert_eq!(
                    involvement_probability(&h, &d, &t).unwrap(),
                    involvement_probability_enumerated(&h, &d, &t).unwrap()
                );
            }
        }

        // b = N with K large enough that every client is always selected
        // is impossible with replacement; with M = 1 it is certain.
        let h1 = HyperParams::explicit(1, 2, 1, 1, 1, 2, 0.1, 0).unwrap();
        let d1 = micro_dataset(1, 2);
        assert_eq!(
            involvement_probability(&h1, &d1, &UnlearnRequest::sample(0, 1, 1)).unwrap(),
            Prob::one()
        );
    }

    #[test]
    fn tv_bounded_by_involvement() {
        let h = micro_hyper(2);
        let d = micro_dataset(2, 2);
        let orig = enumerate_history_distribution(&h, &d).unwrap();
        for req in [UnlearnRequest::sample(0, 0, 2), UnlearnRequest::client(0, 2)] {
            let red = enumerate_history_distribution(&h, &reduce(&d, &req).unwrap()).unwrap();
            let tv = orig.tv_distance(&red);
            assert!(tv <= involvement_probability(&h, &d, &req).unwrap());
        }
    }

    #[test]
    fn two_sequential_deletions_compose() {
        let h = HyperParams::explicit(2, 3, 2, 1, 1, 1, 0.1, 0).unwrap();
        let d = micro_dataset(2, 3);
        let r1 = UnlearnRequest::sample(0, 0, 2);
        let r2 = UnlearnRequest::sample(1, 4, 2);
        let d1 = d.remove_sample(0, 0).unwrap();
        let d2 = d1.remove_sample(1, 4).unwrap();
        let orig = enumerate_history_distribution(&h, &d).unwrap();
        let once = apply_unlearning(&orig, &h, &d, &r1).unwrap();
        let twice = apply_unlearning(&once, &h, &d1, &r2).unwrap();
        assert_eq!(twice, enumerate_history_distribution(&h, &d2).unwrap());
        let rho = ratio((h.batch_size * h.clients_per_round * h.total_iters) as u64, 6);
        assert!(orig.tv_distance(&twice) <= rho * BigInt::from(2));
    }

    #[test]
    fn binning_modes() {
        let (a, b) = bin_counts(&[5, 7, 5], &[7, 9], Binning::Categorical);
        assert_eq!(a, vec![2, 1, 0]);
        assert_eq!(b, vec![0, 1, 1]);
        let (a, b) = bin_counts(&[5, 7, 5], &[7, 9], Binning::Hashed(2));
        assert_eq!(a, vec![0, 3]);
        assert_eq!(b, vec![0, 2]);
    }

    #[test]
    fn exact_report() {
        let h = micro_hyper(1);
        let d = enumerate_history_distribution(&h, &micro_dataset(2, 2)).unwrap();
        let r = equivalence_exact(&d, &d.clone());
        assert!(r.pass);
        assert_eq!(r.statistic, 0.0);
        let other = enumerate_history_distribution(&h, &micro_dataset(2, 2).remove_client(1).unwrap()).unwrap();
        let r = equivalence_exact(&d, &other);
        assert!(!r.pass);
        assert!(r.record("x").ends_with(",fail"));
    }
}
