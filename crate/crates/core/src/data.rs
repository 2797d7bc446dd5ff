//! Federated datasets, synthetic non-i.i.d. generation, and deletion.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

pub type ClientId = usize;
pub type Uid = u64;

/// Spacing between class means in feature space.
const CLASS_MEAN_SCALE: f64 = 2.0;

const FORMAT_TAG: &str = "fats-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub uid: Uid,
    pub label: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub points: Vec<DataPoint>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, uid: Uid) -> Option<usize> {
        self.points.iter().position(|p| p.uid == uid)
    }

    pub fn uids(&self) -> impl Iterator<Item = Uid> + '_ {
        self.points.iter().map(|p| p.uid)
    }
}

/// Clients are kept sorted by id; ids stay stable across deletions.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    clients: Vec<ClientDataset>,
    dim: usize,
    classes: usize,
    samples_per_client: usize,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub samples_per_client: usize,
    pub dim: usize,
    pub classes: usize,
    /// Dirichlet concentration of the per-client label proportions.
    pub beta: f64,
    pub seed: u64,
}

impl FederatedDataset {
    /// Builds a dataset from explicit client lists, validating ids and uids.
    pub fn new(
        mut clients: Vec<ClientDataset>,
        dim: usize,
        classes: usize,
        samples_per_client: usize,
        seed: u64,
    ) -> Result<Self> {
        clients.sort_by_key(|c| c.client_id);
        if clients.windows(2).any(|w| w[0].client_id == w[1].client_id) {
            return Err(Error::invalid("duplicate client id"));
        }
        let mut seen = HashSet::new();
        for c in &clients {
            for p in &c.points {
                if !seen.insert(p.uid) {
                    return Err(Error::invalid(format!("duplicate uid {}", p.uid)));
                }
                if p.features.len() != dim {
                    return Err(Error::invalid(format!(
                        "uid {} has {} features, expected {dim}",
                        p.uid,
                        p.features.len()
                    )));
                }
                if !p.label.is_finite() || p.features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("uid {} is not finite", p.uid)));
                }
            }
        }
        Ok(Self {
            clients,
            dim,
            classes,
            samples_per_client,
            seed,
        })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientDataset> {
        self.clients
            .binary_search_by_key(&id, |c| c.client_id)
            .ok()
            .map(|i| &self.clients[i])
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| c.client_id).collect()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_points(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }

    pub fn min_client_size(&self) -> usize {
        self.clients.iter().map(|c| c.len()).min().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-client sample count at generation time.
    pub fn samples_per_client(&self) -> usize {
        self.samples_per_client
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn all_uids(&self) -> HashSet<Uid> {
        self.clients.iter().flat_map(|c| c.uids()).collect()
    }

    pub fn owner_of(&self, uid: Uid) -> Option<ClientId> {
        self.clients
            .iter()
            .find(|c| c.position(uid).is_some())
            .map(|c| c.client_id)
    }

    /// Returns a copy with the point `uid` removed from client `client`.
    pub fn remove_sample(&self, client: ClientId, uid: Uid) -> Result<Self> {
        let idx = self
            .clients
            .binary_search_by_key(&client, |c| c.client_id)
            .map_err(|_| Error::ClientNotFound(client))?;
        let pos = self.clients[idx]
            .position(uid)
            .ok_or(Error::SampleNotFound { client, uid })?;
        let mut out = self.clone();
        out.clients[idx].points.remove(pos);
        Ok(out)
    }

    /// Returns a copy without client `client` and all of its points.
    pub fn remove_client(&self, client: ClientId) -> Result<Self> {
        let idx = self
            .clients
            .binary_search_by_key(&client, |c| c.client_id)
            .map_err(|_| Error::ClientNotFound(client))?;
        let mut out = self.clone();
        out.clients.remove(idx);
        Ok(out)
    }

    /// Canonical line-delimited export. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_TAG}");
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            self.clients.len(),
            self.samples_per_client,
            self.dim,
            self.classes,
            self.seed
        );
        for c in &self.clients {
            for p in &c.points {
                let _ = write!(s, "{},{},{:?}", c.client_id, p.uid, p.label);
                for x in &p.features {
                    let _ = write!(s, ",{x:?}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == FORMAT_TAG => {}
            _ => return Err(Error::parse(1, format!("expected `{FORMAT_TAG}`"))),
        }
        let (_, header) = lines.next().ok_or_else(|| Error::parse(2, "missing header"))?;
        let h: Vec<&str> = header.split(',').collect();
        if h.len() != 5 {
            return Err(Error::parse(2, "header must be M,N,p,classes,seed"));
        }
        let num = |i: usize| -> Result<u64> { h[i].trim().parse::<u64>().map_err(|e| Error::parse(2, e.to_string())) };
        let (m, n, dim, classes, seed) = (
            num(0)? as usize,
            num(1)? as usize,
            num(2)? as usize,
            num(3)? as usize,
            num(4)?,
        );

        let mut clients: Vec<ClientDataset> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + dim {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} fields, found {}", 3 + dim, fields.len()),
                ));
            }
            let client: ClientId = fields[0]
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::parse(lineno, e.to_string()))?;
            let uid: Uid = fields[1]
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::parse(lineno, e.to_string()))?;
            let float = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::parse(lineno, e.to_string())) };
            let label = float(fields[2])?;
            let features = fields[3..].iter().map(|s| float(s)).collect::<Result<Vec<_>>>()?;
            let point = DataPoint { uid, label, features };
            match clients.last_mut() {
                Some(c) if c.client_id == client => c.points.push(point),
                Some(c) if c.client_id > client => {
                    return Err(Error::parse(lineno, "client records out of order"));
                }
                _ => clients.push(ClientDataset {
                    client_id: client,
                    points: vec![point],
                }),
            }
        }
        if clients.len() != m {
            return Err(Error::parse(
                2,
                format!("header declares {m} clients, found {}", clients.len()),
            ));
        }
        Self::new(clients, dim, classes, n, seed)
    }

    /// 64-bit FNV-1a over the canonical export.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generates `clients × samples_per_client` points. Each client's label
/// proportions come from a symmetric Dirichlet(beta); features are
/// unit-variance Gaussians around a per-class mean on a scaled simplex.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    let SyntheticSpec {
        clients,
        samples_per_client: n,
        dim,
        classes,
        beta,
        seed,
    } = *spec;
    if clients == 0 || n == 0 || dim == 0 || classes == 0 {
        return Err(Error::invalid("clients, samples, dim and classes must be >= 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;

    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut mu = vec![0.0; dim];
            mu[c % dim] = CLASS_MEAN_SCALE * (1 + c / dim) as f64;
            mu
        })
        .collect();

    let mut out = Vec::with_capacity(clients);
    for k in 0..clients {
        let mut rng = StreamKey::new(seed, Purpose::DataGeneration).client(k as u64).rng();
        let mut props: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every gamma draw underflowed: collapse onto one class.
            let c = rng.random_range(0..classes);
            props = (0..classes).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
        }

        let mut labels = Vec::with_capacity(n);
        for (c, count) in largest_remainder(&props, n).into_iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, count));
        }
        labels.shuffle(&mut rng);

        let points = labels
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let features = means[c]
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                DataPoint {
                    uid: (k * n + i) as Uid,
                    label: c as f64,
                    features,
                }
            })
            .collect();
        out.push(ClientDataset { client_id: k, points });
    }
    FederatedDataset::new(out, dim, classes, n, seed)
}

/// Integer counts summing to `total` that are each within one of
/// `total * p`.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Empirical label proportions of one client.
pub fn label_histogram(client: &ClientDataset, classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for p in &client.points {
        let c = p.label as usize;
        if c < classes {
            h[c] += 1.0;
        }
    }
    let n = client.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Sample,
    Client,
}

impl RequestKind {
    pub fn name(self) -> &'static str {
        match self {
            RequestKind::Sample => "sample",
            RequestKind::Client => "client",
        }
    }
}

/// A deletion request issued at iteration `issue_iteration` (`t_u`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnlearnRequest {
    pub kind: RequestKind,
    pub client: ClientId,
    /// Present for sample requests only.
    pub uid: Option<Uid>,
    pub issue_iteration: usize,
}

impl UnlearnRequest {
    pub fn sample(client: ClientId, uid: Uid, issue_iteration: usize) -> Self {
        Self {
            kind: RequestKind::Sample,
            client,
            uid: Some(uid),
            issue_iteration,
        }
    }

    pub fn client(client: ClientId, issue_iteration: usize) -> Self {
        Self {
            kind: RequestKind::Client,
            client,
            uid: None,
            issue_iteration,
        }
    }

    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if self.issue_iteration == 0 || self.issue_iteration > total_iters {
            return Err(Error::invalid(format!(
                "issue iteration {} outside [1, {total_iters}]",
                self.issue_iteration
            )));
        }
        match (self.kind, self.uid) {
            (RequestKind::Sample, None) => Err(Error::invalid("sample request without uid")),
            (RequestKind::Client, Some(_)) => Err(Error::invalid("client request with uid")),
            _ => Ok(()),
        }
    }

    /// `kind client uid|- t_u`
    pub fn to_line(&self) -> String {
        let uid = self.uid.map_or("-".to_string(), |u| u.to_string());
        format!("{} {} {} {}", self.kind.name(), self.client, uid, self.issue_iteration)
    }
}

/// Parses one request per line; blank lines and `#` comments are skipped.
pub fn parse_requests(text: &str) -> Result<Vec<UnlearnRequest>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::parse(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::parse(i + 1, format!("bad number `{s}`")))
        };
        let client = num(f[1])? as ClientId;
        let t_u = num(f[3])? as usize;
        let req = match (f[0], f[2]) {
            ("sample", "-") => return Err(Error::parse(i + 1, "sample request needs a uid")),
            ("sample", u) => UnlearnRequest::sample(client, num(u)?, t_u),
            ("client", "-") => UnlearnRequest::client(client, t_u),
            ("client", _) => return Err(Error::parse(i + 1, "client request takes `-` as uid")),
            (k, _) => return Err(Error::parse(i + 1, format!("unknown request kind `{k}`"))),
        };
        out.push(req);
    }
    Ok(out)
}
