//! Line-text checkpoint of a training run: hyperparameters, the history
//! store and the digest of the dataset it was trained on.
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! save/load cycle is bit-exact. Hash-map contents are written sorted.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{ClientId, FederatedDataset, Uid};
use crate::error::{Error, Result};
use crate::objective::ModelParams;
use crate::params::{HyperParams, StorageMode};
use crate::store::{HistoryStore, InvolvementBits, IterationRecord, RoundRecord};

const MAGIC: &str = "fats-checkpoint v1";
const ENCODING: &str = "encoding decimal-text";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub store: HistoryStore,
    pub dataset_digest: u64,
    /// Free-form annotations (model kind, deleted ids, ...). Keys must not
    /// contain whitespace; values run to the end of the line.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(hyper: HyperParams, store: HistoryStore, dataset: &FederatedDataset) -> Self {
        Self {
            hyper,
            store,
            dataset_digest: dataset.digest(),
            meta: BTreeMap::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.store.epoch()
    }

    pub fn verify_dataset(&self, dataset: &FederatedDataset) -> Result<()> {
        let actual = dataset.digest();
        if actual != self.dataset_digest {
            return Err(Error::DigestMismatch {
                expected: self.dataset_digest,
                actual,
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut w = String::new();
        let h = &self.hyper;
        let s = &self.store;
        let p = s.parts();
        macro_rules! line {
            ($($arg:tt)*) => {{ writeln!(w, $($arg)*).unwrap(); }};
        }
        line!("{MAGIC}");
        line!("{ENCODING}");
        line!("digest {:016x}", self.dataset_digest);
        line!("epoch {}", s.epoch());
        for (k, v) in &self.meta {
            line!("meta {k} {v}");
        }
        line!(
            "hyper {} {} {} {} {} {} {:?} {:?} {:?} {} {}",
            h.num_clients,
            h.samples_per_client,
            h.total_iters,
            h.local_iters,
            h.clients_per_round,
            h.batch_size,
            h.learning_rate,
            h.rho_sample,
            h.rho_client,
            h.seed,
            h.storage.name()
        );
        line!("store {} {}", s.mode().name(), s.local_iters());
        line!("initial {}", floats(&s.initial_model().0));

        line!("rounds {}", s.rounds().len());
        for r in s.rounds() {
            line!("{}", round_line(r));
        }
        let clients: Vec<ClientId> = s.recorded_clients().collect();
        line!("clients {}", clients.len());
        for k in clients {
            let recs = s.client_records(k);
            line!("client {k} {}", recs.len());
            for rec in recs {
                line!(
                    "rec {} {} {} {}",
                    rec.iteration,
                    rec.epoch,
                    ints(&rec.batch),
                    floats(&rec.model.0)
                );
            }
        }

        line!("sample_bits {}", p.sample_bits.len());
        for (k, bits) in p.sample_bits {
            line!("bits {k} {}", bits_line(bits));
        }
        line!("client_bits {}", bits_line(p.client_bits));
        match p.current_round {
            Some(r) => line!("current {}", round_line(r)),
            None => line!("current -"),
        }
        match p.latest_global {
            Some((r, m)) => line!("latest {r} {}", floats(&m.0)),
            None => line!("latest -"),
        }
        let mut last: Vec<_> = p.last_iteration.iter().map(|(&k, &t)| (k, t)).collect();
        last.sort_unstable();
        line!("last_iteration {}", pairs(&last));
        let mut early: Vec<_> = p.earliest_use.iter().map(|(&(k, u), &t)| (k, u, t)).collect();
        early.sort_unstable();
        line!("earliest_use {}", early.len());
        for (k, u, t) in early {
            line!("{k} {u} {t}");
        }
        let mut er: Vec<_> = p.earliest_round.iter().map(|(&k, &r)| (k, r)).collect();
        er.sort_unstable();
        line!("earliest_round {}", pairs(&er));
        line!("end");
        w
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rd = Reader::new(text);
        rd.expect_exact(MAGIC)?;
        rd.expect_exact(ENCODING)?;
        let digest_hex = rd.keyed("digest")?;
        let dataset_digest =
            u64::from_str_radix(digest_hex.trim(), 16).map_err(|_| rd.err(format!("bad digest `{digest_hex}`")))?;
        let epoch: u64 = rd.parse_one("epoch")?;

        let mut meta = BTreeMap::new();
        while rd.peek().is_some_and(|l| l.starts_with("meta ")) {
            let rest = rd.keyed("meta")?;
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.insert(k.to_string(), v.to_string());
        }

        let hyper = {
            let f: Vec<&str> = rd.keyed("hyper")?.split(' ').collect();
            if f.len() != 11 {
                return Err(rd.err("hyper needs 11 fields"));
            }
            HyperParams {
                num_clients: rd.num(f[0])?,
                samples_per_client: rd.num(f[1])?,
                total_iters: rd.num(f[2])?,
                local_iters: rd.num(f[3])?,
                clients_per_round: rd.num(f[4])?,
                batch_size: rd.num(f[5])?,
                learning_rate: rd.num(f[6])?,
                rho_sample: rd.num(f[7])?,
                rho_client: rd.num(f[8])?,
                seed: rd.num(f[9])?,
                storage: rd.mode(f[10])?,
            }
        };

        let (mode, local_iters) = {
            let f: Vec<&str> = rd.keyed("store")?.split(' ').collect();
            if f.len() != 2 {
                return Err(rd.err("store needs mode and E"));
            }
            (rd.mode(f[0])?, rd.num::<usize>(f[1])?)
        };
        let initial = {
            let l = rd.keyed("initial")?;
            ModelParams(rd.floats(l)?)
        };

        let n_rounds: usize = rd.parse_one("rounds")?;
        let mut rounds = Vec::with_capacity(n_rounds);
        for _ in 0..n_rounds {
            let l = rd.next()?;
            rounds.push(rd.round(l)?);
        }

        let n_clients: usize = rd.parse_one("clients")?;
        let mut client_records = BTreeMap::new();
        for _ in 0..n_clients {
            let f: Vec<&str> = rd.keyed("client")?.split(' ').collect();
            if f.len() != 2 {
                return Err(rd.err("client needs id and count"));
            }
            let k: ClientId = rd.num(f[0])?;
            let n: usize = rd.num(f[1])?;
            let mut recs = Vec::with_capacity(n);
            for _ in 0..n {
                let f: Vec<&str> = rd.keyed("rec")?.splitn(4, ' ').collect();
                if f.len() != 4 {
                    return Err(rd.err("rec needs 4 fields"));
                }
                recs.push(IterationRecord {
                    iteration: rd.num(f[0])?,
                    epoch: rd.num(f[1])?,
                    batch: rd.ints(f[2])?,
                    model: ModelParams(rd.floats(f[3])?),
                });
            }
            client_records.insert(k, recs);
        }

        let n_bits: usize = rd.parse_one("sample_bits")?;
        let mut sample_bits = BTreeMap::new();
        for _ in 0..n_bits {
            let rest = rd.keyed("bits")?;
            let (k, b) = rest.split_once(' ').ok_or_else(|| rd.err("bits needs client id"))?;
            sample_bits.insert(rd.num::<ClientId>(k)?, rd.bits(b)?);
        }
        let client_bits = {
            let l = rd.keyed("client_bits")?;
            rd.bits(l)?
        };
        let current_round = match rd.keyed("current")? {
            "-" => None,
            l => Some(rd.round(l)?),
        };
        let latest_global = match rd.keyed("latest")? {
            "-" => None,
            l => {
                let (r, m) = l
                    .split_once(' ')
                    .ok_or_else(|| rd.err("latest needs round and model"))?;
                Some((rd.num(r)?, ModelParams(rd.floats(m)?)))
            }
        };
        let last_iteration: HashMap<ClientId, usize> = {
            let l = rd.keyed("last_iteration")?;
            rd.pairs(l)?.into_iter().collect()
        };
        let n_early: usize = rd.parse_one("earliest_use")?;
        let mut earliest_use = HashMap::with_capacity(n_early);
        for _ in 0..n_early {
            let l = rd.next()?;
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 3 {
                return Err(rd.err("earliest_use entry needs client, uid, iteration"));
            }
            earliest_use.insert((rd.num::<ClientId>(f[0])?, rd.num::<Uid>(f[1])?), rd.num(f[2])?);
        }
        let earliest_round: HashMap<ClientId, usize> = {
            let l = rd.keyed("earliest_round")?;
            rd.pairs(l)?.into_iter().collect()
        };
        rd.expect_exact("end")?;

        let store = HistoryStore::from_parts(
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
        );
        Ok(Self {
            hyper,
            store,
            dataset_digest,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Loads and checks that the checkpoint was trained on `dataset`.
    pub fn load_for(path: impl AsRef<Path>, dataset: &FederatedDataset) -> Result<Self> {
        let c = Self::load(path)?;
        c.verify_dataset(dataset)?;
        Ok(c)
    }
}

fn floats(v: &[f64]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn ints<T: std::fmt::Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn pairs(v: &[(usize, usize)]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",")
}

fn round_line(r: &RoundRecord) -> String {
    format!(
        "round {} {} {} {} {}",
        r.round,
        r.start,
        r.epoch,
        ints(&r.clients),
        r.global.as_ref().map_or("-".into(), |g| floats(&g.0))
    )
}

fn bits_line(b: &InvolvementBits) -> String {
    let (pos, words) = b.to_parts();
    let pos: Vec<String> = pos.iter().map(|(u, p)| format!("{u}:{p}")).collect();
    format!(
        "{} {}",
        if pos.is_empty() { "-".into() } else { pos.join(",") },
        ints(words)
    )
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            line_no: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.line_no, msg)
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.lines.peek().map(|&(_, l)| l)
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l)
            }
            None => {
                self.line_no += 1;
                Err(self.err("unexpected end of checkpoint"))
            }
        }
    }

    fn expect_exact(&mut self, want: &str) -> Result<()> {
        let l = self.next()?;
        if l != want {
            return Err(self.err(format!("expected `{want}`, found `{l}`")));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        match l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(rest) => Ok(rest),
            None => Err(self.err(format!("expected `{key}` line, found `{l}`"))),
        }
    }

    fn parse_one<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        self.num(v)
    }

    fn num<T: FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn mode(&self, s: &str) -> Result<StorageMode> {
        StorageMode::parse(s).ok_or_else(|| self.err(format!("unknown storage mode `{s}`")))
    }

    fn list<T: FromStr>(&self, s: &str) -> Result<Vec<T>> {
        if s == "-" {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| self.num(x)).collect()
    }

    fn floats(&self, s: &str) -> Result<Vec<f64>> {
        self.list(s)
    }

    fn ints<T: FromStr>(&self, s: &str) -> Result<Vec<T>> {
        self.list(s)
    }

    fn pairs<A: FromStr, B: FromStr>(&self, s: &str) -> Result<Vec<(A, B)>> {
        if s == "-" {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|x| {
                let (a, b) = x.split_once(':').ok_or_else(|| self.err(format!("bad pair `{x}`")))?;
                Ok((self.num(a)?, self.num(b)?))
            })
            .collect()
    }

    fn round(&self, l: &str) -> Result<RoundRecord> {
        let f: Vec<&str> = l.split(' ').collect();
        if f.len() != 6 || f[0] != "round" {
            return Err(self.err(format!("bad round record `{l}`")));
        }
        Ok(RoundRecord {
            round: self.num(f[1])?,
            start: self.num(f[2])?,
            epoch: self.num(f[3])?,
            clients: self.ints(f[4])?,
            global: match f[5] {
                "-" => None,
                g => Some(ModelParams(self.floats(g)?)),
            },
        })
    }

    fn bits(&self, l: &str) -> Result<InvolvementBits> {
        let (pos, words) = l
            .split_once(' ')
            .ok_or_else(|| self.err("bits need positions and words"))?;
        Ok(InvolvementBits::from_parts(self.pairs(pos)?, self.ints(words)?))
    }
}
