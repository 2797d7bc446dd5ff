//! Algorithmic state of a training run.
//!
//! Two layouts are supported. Full history keeps every client selection,
//! mini-batch, local model and global model, which is what partial
//! re-computation from an arbitrary iteration needs. Compact keeps one
//! involvement bit per sample and per client plus the current model, which
//! only supports full retraining.
//!
//! Both layouts maintain the earliest-participation indices incrementally so
//! that verification of a deletion request is a single lookup.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::{ClientId, FederatedDataset, Uid};
use crate::error::{Error, Result};
use crate::objective::ModelParams;
use crate::params::StorageMode;

/// 1-based training iteration `t`.
pub type Iteration = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index `r`.
    pub round: usize,
    /// First iteration of the round, `(r-1)E+1`.
    pub start: Iteration,
    /// Selected client multiset, sorted ascending.
    pub clients: Vec<ClientId>,
    pub epoch: u64,
    /// Aggregated model at the end of the round, once reached.
    pub global: Option<ModelParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: Iteration,
    /// Mini-batch uids, sorted ascending.
    pub batch: Vec<Uid>,
    /// Local model after this iteration's step.
    pub model: ModelParams,
    pub epoch: u64,
}

/// One round of a canonical sampling history: the client multiset and, for
/// each distinct selected client, its `E` mini-batches in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoundSample {
    pub clients: Vec<ClientId>,
    pub batches: Vec<(ClientId, Vec<Vec<Uid>>)>,
}

pub type SamplingHistory = Vec<RoundSample>;

/// FNV-1a digest of a canonical history.
pub fn history_digest(history: &[RoundSample]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for round in history {
        feed(u64::MAX);
        feed(round.clients.len() as u64);
        for &c in &round.clients {
            feed(c as u64);
        }
        for (c, batches) in &round.batches {
            feed(*c as u64);
            for b in batches {
                feed(b.len() as u64);
                b.iter().for_each(|&u| feed(u));
            }
        }
    }
    h
}

/// Per-client involvement bits for compact storage.
#[derive(Debug, Clone, PartialEq)]
pub struct InvolvementBits {
    positions: HashMap<Uid, usize>,
    bits: Vec<u64>,
}

impl InvolvementBits {
    fn new(uids: impl Iterator<Item = Uid>) -> Self {
        let positions: HashMap<Uid, usize> = uids.enumerate().map(|(i, u)| (u, i)).collect();
        let words = positions.len().div_ceil(64);
        Self {
            positions,
            bits: vec![0; words],
        }
    }

    fn set(&mut self, uid: Uid) -> bool {
        match self.positions.get(&uid) {
            Some(&p) => {
                self.bits[p / 64] |= 1 << (p % 64);
                true
            }
            None => false,
        }
    }

    fn get(&self, uid: Uid) -> Option<bool> {
        self.positions
            .get(&uid)
            .map(|&p| self.bits[p / 64] & (1 << (p % 64)) != 0)
    }

    fn clear(&mut self) {
        self.bits.iter_mut().for_each(|w| *w = 0);
    }
}

/// Words held by the store, split between the server and the devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageFootprint {
    pub server_words: usize,
    pub max_client_words: usize,
    pub total_client_words: usize,
}

#[derive(Debug)]
pub struct HistoryStore {
    mode: StorageMode,
    local_iters: usize,
    initial: ModelParams,
    epoch: u64,

    rounds: Vec<RoundRecord>,
    client_records: BTreeMap<ClientId, Vec<IterationRecord>>,

    sample_bits: BTreeMap<ClientId, InvolvementBits>,
    client_bits: InvolvementBits,
    /// Current selection and model in compact mode.
    current_round: Option<RoundRecord>,
    latest_global: Option<(usize, ModelParams)>,
    last_iteration: HashMap<ClientId, Iteration>,

    earliest_use: HashMap<(ClientId, Uid), Iteration>,
    earliest_round: HashMap<ClientId, usize>,

    probes: AtomicU64,
}

impl Clone for HistoryStore {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            local_iters: self.local_iters,
            initial: self.initial.clone(),
            epoch: self.epoch,
            rounds: self.rounds.clone(),
            client_records: self.client_records.clone(),
            sample_bits: self.sample_bits.clone(),
            client_bits: self.client_bits.clone(),
            current_round: self.current_round.clone(),
            latest_global: self.latest_global.clone(),
            last_iteration: self.last_iteration.clone(),
            earliest_use: self.earliest_use.clone(),
            earliest_round: self.earliest_round.clone(),
            probes: AtomicU64::new(self.probes.load(Ordering::Relaxed)),
        }
    }
}

/// Equality over stored state; the probe counter is instrumentation and is
/// ignored.
impl PartialEq for HistoryStore {
    fn eq(&self, o: &Self) -> bool {
        self.mode == o.mode
            && self.local_iters == o.local_iters
            && self.initial.bits_eq(&o.initial)
            && self.epoch == o.epoch
            && self.rounds == o.rounds
            && self.client_records == o.client_records
            && self.sample_bits == o.sample_bits
            && self.client_bits == o.client_bits
            && self.current_round == o.current_round
            && self.latest_global == o.latest_global
            && self.last_iteration == o.last_iteration
            && self.earliest_use == o.earliest_use
            && self.earliest_round == o.earliest_round
    }
}

impl HistoryStore {
    pub fn new(mode: StorageMode, local_iters: usize, initial: ModelParams, dataset: &FederatedDataset) -> Self {
        let (sample_bits, client_bits) = match mode {
            StorageMode::FullHistory => (BTreeMap::new(), InvolvementBits::new(std::iter::empty())),
            StorageMode::Compact => (
                dataset
                    .clients()
                    .iter()
                    .map(|c| (c.client_id, InvolvementBits::new(c.uids())))
                    .collect(),
                InvolvementBits::new(dataset.client_ids().into_iter().map(|c| c as Uid)),
            ),
        };
        Self {
            mode,
            local_iters: local_iters.max(1),
            initial,
            epoch: 0,
            rounds: Vec::new(),
            client_records: BTreeMap::new(),
            sample_bits,
            client_bits,
            current_round: None,
            latest_global: None,
            last_iteration: HashMap::new(),
            earliest_use: HashMap::new(),
            earliest_round: HashMap::new(),
            probes: AtomicU64::new(0),
        }
    }

    pub fn full(local_iters: usize, initial: ModelParams) -> Self {
        Self::new(
            StorageMode::FullHistory,
            local_iters,
            initial,
            &FederatedDataset::new(Vec::new(), 0, 0, 0, 0).expect("empty dataset is valid"),
        )
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn local_iters(&self) -> usize {
        self.local_iters
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn initial_model(&self) -> &ModelParams {
        &self.initial
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn round(&self, r: usize) -> Option<&RoundRecord> {
        if r == 0 {
            return None;
        }
        match self.mode {
            StorageMode::FullHistory => self.rounds.get(r - 1),
            StorageMode::Compact => self.current_round.as_ref().filter(|rec| rec.round == r),
        }
    }

    pub fn client_records(&self, client: ClientId) -> &[IterationRecord] {
        self.client_records.get(&client).map_or(&[], |v| v.as_slice())
    }

    pub fn recorded_clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.client_records.keys().copied()
    }

    pub fn iteration_record_count(&self) -> usize {
        self.client_records.values().map(|v| v.len()).sum()
    }

    pub fn round_of(&self, t: Iteration) -> usize {
        (t - 1) / self.local_iters + 1
    }

    pub fn round_start(&self, r: usize) -> Iteration {
        (r - 1) * self.local_iters + 1
    }

    /// Global model after round `r`; round 0 is the initial model.
    pub fn global_model(&self, r: usize) -> Option<&ModelParams> {
        if r == 0 {
            return Some(&self.initial);
        }
        match self.mode {
            StorageMode::FullHistory => self.rounds.get(r - 1).and_then(|rec| rec.global.as_ref()),
            StorageMode::Compact => self
                .latest_global
                .as_ref()
                .filter(|(round, _)| *round == r)
                .map(|(_, m)| m),
        }
    }

    /// Last aggregated model, or the initial model before the first round ends.
    pub fn latest_global(&self) -> &ModelParams {
        match self.mode {
            StorageMode::FullHistory => self
                .rounds
                .iter()
                .rev()
                .find_map(|r| r.global.as_ref())
                .unwrap_or(&self.initial),
            StorageMode::Compact => self.latest_global.as_ref().map_or(&self.initial, |(_, m)| m),
        }
    }

    pub fn local_model(&self, client: ClientId, t: Iteration) -> Option<&ModelParams> {
        let recs = self.client_records.get(&client)?;
        recs.binary_search_by_key(&t, |r| r.iteration)
            .ok()
            .map(|i| &recs[i].model)
    }

    /// Saves the client multiset drawn at the start of round `r`.
    pub fn record_round(&mut self, r: usize, clients: Vec<ClientId>, epoch: u64) -> Result<()> {
        let mut clients = clients;
        clients.sort_unstable();
        let expected = match self.mode {
            StorageMode::FullHistory => self.rounds.len() + 1,
            StorageMode::Compact => self.current_round.as_ref().map_or(1, |c| c.round + 1),
        };
        if r != expected {
            return Err(Error::CorruptedHistory(format!(
                "round {r} recorded but round {expected} was expected"
            )));
        }
        for &c in &clients {
            self.earliest_round.entry(c).or_insert(r);
            if self.mode == StorageMode::Compact {
                self.client_bits.set(c as Uid);
            }
        }
        let rec = RoundRecord {
            round: r,
            start: self.round_start(r),
            clients,
            epoch,
            global: None,
        };
        match self.mode {
            StorageMode::FullHistory => self.rounds.push(rec),
            StorageMode::Compact => self.current_round = Some(rec),
        }
        Ok(())
    }

    /// Saves `(t, B_k^(t), theta_k^(t))` for one selected client.
    pub fn record_iteration(
        &mut self,
        t: Iteration,
        client: ClientId,
        batch: Vec<Uid>,
        model: ModelParams,
        epoch: u64,
    ) -> Result<()> {
        if let Some(&last) = self.last_iteration.get(&client) {
            if t <= last {
                return Err(Error::CorruptedHistory(format!(
                    "client {client}: iteration {t} recorded after {last}"
                )));
            }
        }
        let r = self.round_of(t);
        match self.round(r) {
            Some(rec) if rec.clients.binary_search(&client).is_ok() => {}
            _ => {
                return Err(Error::CorruptedHistory(format!(
                    "client {client} not selected in round {r} (iteration {t})"
                )))
            }
        }
        self.last_iteration.insert(client, t);
        let mut batch = batch;
        batch.sort_unstable();
        for &u in &batch {
            self.earliest_use
                .entry((client, u))
                .and_modify(|e| *e = (*e).min(t))
                .or_insert(t);
        }
        match self.mode {
            StorageMode::FullHistory => {
                self.client_records.entry(client).or_default().push(IterationRecord {
                    iteration: t,
                    batch,
                    model,
                    epoch,
                });
            }
            StorageMode::Compact => {
                if let Some(bits) = self.sample_bits.get_mut(&client) {
                    for &u in &batch {
                        bits.set(u);
                    }
                }
            }
        }
        Ok(())
    }

    /// Saves the aggregated model at the end of round `r`.
    pub fn record_global(&mut self, r: usize, model: ModelParams) -> Result<()> {
        match self.mode {
            StorageMode::FullHistory => match self.rounds.get_mut(r.wrapping_sub(1)) {
                Some(rec) => rec.global = Some(model),
                None => {
                    return Err(Error::CorruptedHistory(format!(
                        "global model for unrecorded round {r}"
                    )))
                }
            },
            StorageMode::Compact => self.latest_global = Some((r, model)),
        }
        Ok(())
    }

    fn probe(&self) {
        self.probes.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of index lookups performed so far.
    pub fn probe_count(&self) -> u64 {
        self.probes.load(Ordering::Relaxed)
    }

    /// Earliest recorded iteration whose batch for `client` contained `uid`,
    /// with no horizon. One index lookup.
    pub fn first_sample_use(&self, uid: Uid, client: ClientId) -> Option<Iteration> {
        self.probe();
        self.earliest_use.get(&(client, uid)).copied()
    }

    /// Earliest round in which `client` was selected, with no horizon. One
    /// index lookup.
    pub fn first_client_round(&self, client: ClientId) -> Option<usize> {
        self.probe();
        self.earliest_round.get(&client).copied()
    }

    /// Smallest `t <= t_u` at which `client`'s batch contained `uid`.
    pub fn earliest_sample_use(&self, uid: Uid, client: ClientId, t_u: Iteration) -> Option<Iteration> {
        self.first_sample_use(uid, client).filter(|&t| t <= t_u)
    }

    /// Start iteration of the earliest round `r <= floor((t_u-1)/E)+1` in
    /// which `client` was selected.
    pub fn earliest_client_use(&self, client: ClientId, t_u: Iteration) -> Option<Iteration> {
        let r_u = self.round_of(t_u.max(1));
        self.first_client_round(client)
            .filter(|&r| r <= r_u)
            .map(|r| self.round_start(r))
    }

    /// Involvement bit of a sample in compact mode (one lookup).
    pub fn sample_involved(&self, client: ClientId, uid: Uid) -> Option<bool> {
        self.probe();
        self.sample_bits.get(&client).and_then(|b| b.get(uid))
    }

    /// Participation bit of a client in compact mode (one lookup).
    pub fn client_participated(&self, client: ClientId) -> Option<bool> {
        self.probe();
        self.client_bits.get(client as Uid)
    }

    /// Drops every record with iteration `>= t` and rebuilds the indices,
    /// without touching the epoch. Replaying from `t` afterwards with the
    /// same epoch reproduces the dropped suffix.
    pub fn rewind(&mut self, t: Iteration) -> Result<()> {
        let t = t.max(1);
        if self.mode == StorageMode::Compact {
            if t == 1 {
                self.clear_all();
                return Ok(());
            }
            return Err(Error::ModeMismatch {
                expected: StorageMode::FullHistory.name(),
                actual: StorageMode::Compact.name(),
            });
        }
        self.rounds.retain(|r| r.start < t);
        let e = self.local_iters;
        for r in &mut self.rounds {
            if r.round * e >= t {
                r.global = None;
            }
        }
        for recs in self.client_records.values_mut() {
            recs.retain(|r| r.iteration < t);
        }
        self.client_records.retain(|_, v| !v.is_empty());
        self.rebuild_indices();
        Ok(())
    }

    /// [`rewind`](Self::rewind) followed by an epoch bump, so that the
    /// re-computed suffix draws fresh randomness.
    pub fn prune_after(&mut self, t: Iteration) -> Result<()> {
        self.rewind(t)?;
        self.epoch += 1;
        Ok(())
    }

    /// Empties the store and bumps the epoch (full retraining).
    pub fn reset(&mut self) {
        self.clear_all();
        self.epoch += 1;
    }

    fn clear_all(&mut self) {
        self.rounds.clear();
        self.client_records.clear();
        self.sample_bits.values_mut().for_each(InvolvementBits::clear);
        self.client_bits.clear();
        self.current_round = None;
        self.latest_global = None;
        self.last_iteration.clear();
        self.earliest_use.clear();
        self.earliest_round.clear();
    }

    /// Drops compact-mode bookkeeping for a deleted client.
    pub fn forget_client(&mut self, client: ClientId) {
        self.sample_bits.remove(&client);
    }

    fn rebuild_indices(&mut self) {
        self.earliest_use.clear();
        self.earliest_round.clear();
        self.last_iteration.clear();
        for r in &self.rounds {
            for &c in &r.clients {
                self.earliest_round.entry(c).or_insert(r.round);
            }
        }
        for (&c, recs) in &self.client_records {
            if let Some(last) = recs.last() {
                self.last_iteration.insert(c, last.iteration);
            }
            for rec in recs {
                for &u in &rec.batch {
                    self.earliest_use.entry((c, u)).or_insert(rec.iteration);
                }
            }
        }
    }

    /// Canonical sampling history of completed rounds (full mode only).
    pub fn history(&self) -> Result<SamplingHistory> {
        if self.mode != StorageMode::FullHistory {
            return Err(Error::ModeMismatch {
                expected: StorageMode::FullHistory.name(),
                actual: self.mode.name(),
            });
        }
        let e = self.local_iters;
        let mut out = Vec::with_capacity(self.rounds.len());
        for r in &self.rounds {
            let mut distinct = r.clients.clone();
            distinct.dedup();
            let mut batches = Vec::with_capacity(distinct.len());
            for c in distinct {
                let recs = self.client_records(c);
                let lo = recs.partition_point(|x| x.iteration < r.start);
                let hi = recs.partition_point(|x| x.iteration < r.start + e);
                batches.push((c, recs[lo..hi].iter().map(|x| x.batch.clone()).collect()));
            }
            out.push(RoundSample {
                clients: r.clients.clone(),
                batches,
            });
        }
        Ok(out)
    }

    /// Stored words. In compact mode the earliest-use indices are counted as
    /// one dense slot per local sample (per client at the server), so the
    /// count does not depend on how many iterations were run.
    pub fn footprint(&self) -> StorageFootprint {
        let d = self.initial.dim();
        let mut per_client: BTreeMap<ClientId, usize> = BTreeMap::new();
        let mut server = d;
        match self.mode {
            StorageMode::FullHistory => {
                server += 2 * self.earliest_round.len();
                for &(c, _) in self.earliest_use.keys() {
                    *per_client.entry(c).or_default() += 2;
                }
                for r in &self.rounds {
                    server += 2 + r.clients.len() + r.global.as_ref().map_or(0, |g| g.dim());
                }
                for (&c, recs) in &self.client_records {
                    let words: usize = recs.iter().map(|r| 2 + r.batch.len() + r.model.dim()).sum();
                    *per_client.entry(c).or_default() += words;
                }
            }
            StorageMode::Compact => {
                server += self.client_bits.bits.len() + self.client_bits.positions.len() + d;
                if let Some(r) = &self.current_round {
                    server += 2 + r.clients.len();
                }
                for (&c, bits) in &self.sample_bits {
                    *per_client.entry(c).or_default() += bits.bits.len() + bits.positions.len() + d;
                }
            }
        }
        StorageFootprint {
            server_words: server,
            max_client_words: per_client.values().copied().max().unwrap_or(0),
            total_client_words: per_client.values().sum(),
        }
    }

    // Raw access for the checkpoint codec.

    pub(crate) fn parts(&self) -> StoreParts<'_> {
        StoreParts {
            sample_bits: &self.sample_bits,
            client_bits: &self.client_bits,
            current_round: self.current_round.as_ref(),
            latest_global: self.latest_global.as_ref(),
            last_iteration: &self.last_iteration,
            earliest_use: &self.earliest_use,
            earliest_round: &self.earliest_round,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        mode: StorageMode,
        local_iters: usize,
        initial: ModelParams,
        epoch: u64,
        rounds: Vec<RoundRecord>,
        client_records: BTreeMap<ClientId, Vec<IterationRecord>>,
        sample_bits: BTreeMap<ClientId, InvolvementBits>,
        client_bits: InvolvementBits,
        current_round: Option<RoundRecord>,
        latest_global: Option<(usize, ModelParams)>,
        last_iteration: HashMap<ClientId, Iteration>,
        earliest_use: HashMap<(ClientId, Uid), Iteration>,
        earliest_round: HashMap<ClientId, usize>,
    ) -> Self {
        Self {
            mode,
            local_iters,
            initial,
            epoch,
            rounds,
            client_records,
            sample_bits,
            client_bits,
            current_round,
            latest_global,
            last_iteration,
            earliest_use,
            earliest_round,
            probes: AtomicU64::new(0),
        }
    }
}

pub(crate) struct StoreParts<'a> {
    pub sample_bits: &'a BTreeMap<ClientId, InvolvementBits>,
    pub client_bits: &'a InvolvementBits,
    pub current_round: Option<&'a RoundRecord>,
    pub latest_global: Option<&'a (usize, ModelParams)>,
    pub last_iteration: &'a HashMap<ClientId, Iteration>,
    pub earliest_use: &'a HashMap<(ClientId, Uid), Iteration>,
    pub earliest_round: &'a HashMap<ClientId, usize>,
}

impl InvolvementBits {
    pub(crate) fn to_parts(&self) -> (Vec<(Uid, usize)>, &[u64]) {
        let mut pos: Vec<(Uid, usize)> = self.positions.iter().map(|(&u, &p)| (u, p)).collect();
        pos.sort_unstable_by_key(|&(_, p)| p);
        (pos, &self.bits)
    }

    pub(crate) fn from_parts(positions: Vec<(Uid, usize)>, bits: Vec<u64>) -> Self {
        Self {
            positions: positions.into_iter().collect(),
            bits,
        }
    }
}
