//! Smooth point-wise losses with exact gradients, and estimators for the
//! smoothness, local-variance and heterogeneity constants that govern
//! convergence.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, DataPoint, FederatedDataset};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

/// Guard on the squared norm of the mean gradient in [`gradient_diversity`].
pub const DIVERSITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ModelParams {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub trait LossModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    fn point_loss(&self, theta: &[f64], x: &DataPoint) -> f64;

    /// Adds `scale * grad f(theta; x)` into `out`.
    fn add_point_grad(&self, theta: &[f64], x: &DataPoint, scale: f64, out: &mut [f64]);

    fn point_grad(&self, theta: &[f64], x: &DataPoint) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        self.add_point_grad(theta, x, 1.0, &mut g);
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Linear regression: `f(theta; x) = (theta . x - y)^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct LeastSquares {
    pub dim: usize,
}

impl LossModel for LeastSquares {
    fn name(&self) -> &'static str {
        "least_squares"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn point_loss(&self, theta: &[f64], x: &DataPoint) -> f64 {
        let r = dot(theta, &x.features) - x.label;
        0.5 * r * r
    }

    fn add_point_grad(&self, theta: &[f64], x: &DataPoint, scale: f64, out: &mut [f64]) {
        let r = (dot(theta, &x.features) - x.label) * scale;
        for (o, xi) in out.iter_mut().zip(&x.features) {
            *o += r * xi;
        }
    }
}

/// Binary logistic regression on the label parity:
/// `f = log(1 + e^z) - y z` with `z = theta . x`, `y = label mod 2`.
#[derive(Debug, Clone, Copy)]
pub struct Logistic {
    pub dim: usize,
}

fn parity(label: f64) -> f64 {
    (label.round() as i64).rem_euclid(2) as f64
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LossModel for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn point_loss(&self, theta: &[f64], x: &DataPoint) -> f64 {
        let z = dot(theta, &x.features);
        softplus(z) - parity(x.label) * z
    }

    fn add_point_grad(&self, theta: &[f64], x: &DataPoint, scale: f64, out: &mut [f64]) {
        let z = dot(theta, &x.features);
        let r = (sigmoid(z) - parity(x.label)) * scale;
        for (o, xi) in out.iter_mut().zip(&x.features) {
            *o += r * xi;
        }
    }
}

/// Mean estimation: `f(theta; x) = ||theta - x||^2 / 2`. Exactly 1-smooth.
#[derive(Debug, Clone, Copy)]
pub struct Centroid {
    pub dim: usize,
}

impl LossModel for Centroid {
    fn name(&self) -> &'static str {
        "centroid"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn point_loss(&self, theta: &[f64], x: &DataPoint) -> f64 {
        theta
            .iter()
            .zip(&x.features)
            .map(|(t, v)| 0.5 * (t - v) * (t - v))
            .sum()
    }

    fn add_point_grad(&self, theta: &[f64], x: &DataPoint, scale: f64, out: &mut [f64]) {
        for ((o, t), v) in out.iter_mut().zip(theta).zip(&x.features) {
            *o += scale * (t - v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LeastSquares,
    Logistic,
    Centroid,
}

impl LossKind {
    pub fn build(self, dim: usize) -> Box<dyn LossModel> {
        match self {
            LossKind::LeastSquares => Box::new(LeastSquares { dim }),
            LossKind::Logistic => Box::new(Logistic { dim }),
            LossKind::Centroid => Box::new(Centroid { dim }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::LeastSquares => "least_squares",
            LossKind::Logistic => "logistic",
            LossKind::Centroid => "centroid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "least_squares" | "quadratic" => Some(LossKind::LeastSquares),
            "logistic" => Some(LossKind::Logistic),
            "centroid" => Some(LossKind::Centroid),
            _ => None,
        }
    }
}

/// Mean gradient over `batch`, summed in the order given.
pub fn minibatch_grad(model: &dyn LossModel, theta: &[f64], batch: &[&DataPoint]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty mini-batch"));
    }
    let mut g = vec![0.0; theta.len()];
    for x in batch {
        model.add_point_grad(theta, x, 1.0, &mut g);
    }
    let inv = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

pub fn full_local_grad(model: &dyn LossModel, theta: &[f64], client: &ClientDataset) -> Result<Vec<f64>> {
    let batch: Vec<&DataPoint> = client.points.iter().collect();
    minibatch_grad(model, theta, &batch)
}

pub fn local_loss(model: &dyn LossModel, theta: &[f64], client: &ClientDataset) -> f64 {
    let n = client.len().max(1) as f64;
    client.points.iter().map(|x| model.point_loss(theta, x)).sum::<f64>() / n
}

/// Gradient of `F = (1/M) sum_k F_k` at a common `theta`, clients taken in
/// ascending id order.
pub fn global_grad(model: &dyn LossModel, theta: &[f64], dataset: &FederatedDataset) -> Result<Vec<f64>> {
    let m = dataset.num_clients();
    if m == 0 {
        return Err(Error::invalid("dataset has no clients"));
    }
    let mut g = vec![0.0; theta.len()];
    for c in dataset.clients() {
        let gk = full_local_grad(model, theta, c)?;
        g.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / m as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

pub fn global_loss(model: &dyn LossModel, theta: &[f64], dataset: &FederatedDataset) -> f64 {
    let m = dataset.num_clients().max(1) as f64;
    dataset
        .clients()
        .iter()
        .map(|c| local_loss(model, theta, c))
        .sum::<f64>()
        / m
}

/// `(mean of squared norms) / (squared norm of the mean)`; at least 1.
pub fn gradient_diversity(local_grads: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = local_grads.first() else {
        return Err(Error::invalid("no gradients"));
    };
    let m = local_grads.len() as f64;
    let mut mean = vec![0.0; first.len()];
    let mut sq = 0.0;
    for g in local_grads {
        sq += norm_sq(g);
        mean.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let denom = norm_sq(&mean);
    if denom < DIVERSITY_EPS {
        return Err(Error::DivergedDiversity(denom));
    }
    Ok((sq / m) / denom)
}

/// Diversity of all clients' full local gradients at a common `theta`.
pub fn diversity_at(model: &dyn LossModel, theta: &[f64], dataset: &FederatedDataset) -> Result<f64> {
    let grads = dataset
        .clients()
        .iter()
        .map(|c| full_local_grad(model, theta, c))
        .collect::<Result<Vec<_>>>()?;
    gradient_diversity(&grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrCondition {
    pub holds: bool,
    /// Left side of `-eta/2 + eta^3 L^2 lambda E(E-1) + eta^2 lambda L / 2 < 0`.
    pub margin: f64,
}

pub fn check_lr_condition(eta: f64, l_hat: f64, lambda_hat: f64, e: usize) -> LrCondition {
    let e = e as f64;
    let margin =
        -eta / 2.0 + eta.powi(3) * l_hat * l_hat * lambda_hat * e * (e - 1.0) + eta * eta * lambda_hat * l_hat / 2.0;
    LrCondition {
        holds: margin < 0.0,
        margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AssumptionEstimates {
    pub l_hat: f64,
    pub g_hat: f64,
    pub lambda_hat: f64,
}

/// Running maximum of observed gradient diversity.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiversityTracker {
    max: Option<f64>,
}

impl DiversityTracker {
    pub fn observe(&mut self, lambda: f64) {
        self.max = Some(self.max.map_or(lambda, |m| m.max(lambda)));
    }

    pub fn lambda_hat(&self) -> Option<f64> {
        self.max
    }
}

/// Lower-bounds the smoothness of `F` by the largest ratio
/// `||grad F(a) - grad F(b)|| / ||a - b||` over random pairs, each refined
/// by repeatedly stepping along the previous gradient difference.
pub fn estimate_smoothness(
    model: &dyn LossModel,
    dataset: &FederatedDataset,
    seed: u64,
    pairs: usize,
    refine_steps: usize,
) -> Result<f64> {
    let d = model.dim();
    let mut rng = StreamKey::new(seed, Purpose::Estimation).step(1).rng();
    let mut best = 0.0f64;
    for _ in 0..pairs.max(1) {
        let base: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let g0 = global_grad(model, &base, dataset)?;
        for _ in 0..=refine_steps {
            let n = norm_sq(&dir).sqrt();
            if n == 0.0 || !n.is_finite() {
                break;
            }
            dir.iter_mut().for_each(|v| *v *= 1e-2 / n);
            let probe: Vec<f64> = base.iter().zip(&dir).map(|(a, b)| a + b).collect();
            let g1 = global_grad(model, &probe, dataset)?;
            let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
            best = best.max(norm_sq(&diff).sqrt() / norm_sq(&dir).sqrt());
            dir = diff;
        }
    }
    Ok(best)
}

/// `G_hat = sqrt(b * E||g_tilde - g||^2)`, maximized over clients, with the
/// expectation replaced by an average over `draws` random mini-batches.
pub fn estimate_local_variance(
    model: &dyn LossModel,
    dataset: &FederatedDataset,
    theta: &[f64],
    b: usize,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in dataset.clients() {
        if c.len() < b || b == 0 {
            return Err(Error::InfeasibleBatch {
                client: c.client_id,
                available: c.len(),
                batch: b,
            });
        }
        let full = full_local_grad(model, theta, c)?;
        let mut rng = StreamKey::new(seed, Purpose::Estimation)
            .step(2)
            .client(c.client_id as u64)
            .rng();
        let mut acc = 0.0;
        for _ in 0..draws.max(1) {
            let idx = index::sample(&mut rng, c.len(), b);
            let batch: Vec<&DataPoint> = idx.iter().map(|i| &c.points[i]).collect();
            let g = minibatch_grad(model, theta, &batch)?;
            acc += g.iter().zip(&full).map(|(a, f)| (a - f) * (a - f)).sum::<f64>();
        }
        worst = worst.max(b as f64 * acc / draws.max(1) as f64);
    }
    Ok(worst.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn pt(uid: u64, label: f64, features: Vec<f64>) -> DataPoint {
        DataPoint { uid, label, features }
    }

    #[test]
    fn symmetric_batch_has_zero_gradient() {
        let m = Centroid { dim: 1 };
        let a = pt(0, 0.0, vec![0.0]);
        let b = pt(1, 0.0, vec![2.0]);
        let g = minibatch_grad(&m, &[1.0], &[&a, &b]).unwrap();
        assert_eq!(g, vec![0.0]);
        assert_eq!(m.point_grad(&[1.0], &a), vec![1.0]);
        assert_eq!(m.point_grad(&[1.0], &b), vec![-1.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = Centroid { dim: 1 };
        assert!(matches!(
            minibatch_grad(&m, &[1.0], &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn full_batch_equals_full_local_grad() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 2,
            samples_per_client: 9,
            dim: 3,
            classes: 4,
            beta: 0.5,
            seed: 5,
        })
        .unwrap();
        let m = LeastSquares { dim: 3 };
        let theta = [0.3, -0.2, 0.5];
        let c = &d.clients()[1];
        let batch: Vec<&DataPoint> = c.points.iter().collect();
        assert_eq!(
            minibatch_grad(&m, &theta, &batch).unwrap(),
            full_local_grad(&m, &theta, c).unwrap()
        );
    }

    #[test]
    fn logistic_two_point_batch_matches_finite_differences() {
        let m = Logistic { dim: 2 };
        let a = pt(0, 1.0, vec![0.7, -1.2]);
        let b = pt(1, 2.0, vec![-0.4, 0.9]);
        let theta = [0.25, -0.6];
        let g = minibatch_grad(&m, &theta, &[&a, &b]).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let f = |t: &[f64]| 0.5 * (m.point_loss(t, &a) + m.point_loss(t, &b));
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn global_grad_cases() {
        let mk = |k: usize, vals: &[f64]| ClientDataset {
            client_id: k,
            points: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| pt((k * 10 + i) as u64, 0.0, vec![v]))
                .collect(),
        };
        let m = Centroid { dim: 1 };
        let single = FederatedDataset::new(vec![mk(0, &[1.0, 3.0])], 1, 1, 2, 0).unwrap();
        assert_eq!(
            global_grad(&m, &[0.5], &single).unwrap(),
            full_local_grad(&m, &[0.5], &single.clients()[0]).unwrap()
        );
        let two = FederatedDataset::new(vec![mk(0, &[0.0, 0.0]), mk(1, &[2.0, 2.0])], 1, 1, 2, 0).unwrap();
        assert_eq!(global_grad(&m, &[1.0], &two).unwrap(), vec![0.0]);
        // Client order given to the constructor does not matter.
        let swapped = FederatedDataset::new(vec![mk(1, &[2.0, 2.0]), mk(0, &[0.0, 0.0])], 1, 1, 2, 0).unwrap();
        let g1 = global_grad(&m, &[0.3], &two).unwrap();
        let g2 = global_grad(&m, &[0.3], &swapped).unwrap();
        assert_eq!(g1[0].to_bits(), g2[0].to_bits());
    }

    #[test]
    fn global_grad_matches_direct_summation() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 4,
            samples_per_client: 7,
            dim: 3,
            classes: 3,
            beta: 1.0,
            seed: 2,
        })
        .unwrap();
        let m = Logistic { dim: 3 };
        let theta = [0.1, 0.2, -0.3];
        let g = global_grad(&m, &theta, &d).unwrap();
        let mut direct = [0.0; 3];
        let total = d.num_points() as f64;
        for c in d.clients() {
            for x in &c.points {
                m.add_point_grad(&theta, x, 1.0 / total, &mut direct);
            }
        }
        for i in 0..3 {
            assert!((g[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_examples() {
        let v = vec![0.3, -1.0, 2.0];
        assert_eq!(gradient_diversity(&[v.clone(), v.clone(), v]).unwrap(), 1.0);
        let lam = gradient_diversity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((lam - 2.0).abs() < 1e-15);
        assert!(matches!(
            gradient_diversity(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
            Err(Error::DivergedDiversity(_))
        ));
        assert!(gradient_diversity(&[]).is_err());
    }

    #[test]
    fn lr_condition_examples() {
        assert!(check_lr_condition(1e-6, 3.0, 5.0, 10).holds);
        let c = check_lr_condition(1.0, 1.0, 1.0, 10);
        assert!(!c.holds);
        assert!((c.margin - 90.0).abs() < 1e-12);
        // E = 1 reduces to eta * lambda * L < 1.
        for (eta, l, lam) in [(0.5, 1.0, 1.9), (0.5, 1.0, 2.1), (0.1, 3.0, 3.0), (0.1, 3.0, 3.5)] {
            let c = check_lr_condition(eta, l, lam, 1);
            assert_eq!(c.holds, eta * lam * l < 1.0, "{eta} {l} {lam}");
        }
    }

    #[test]
    fn tracker_keeps_running_max() {
        let mut t = DiversityTracker::default();
        assert_eq!(t.lambda_hat(), None);
        for x in [1.5, 3.0, 2.0] {
            t.observe(x);
        }
        assert_eq!(t.lambda_hat(), Some(3.0));
    }

    #[test]
    fn local_variance_is_zero_for_full_batch() {
        let d = generate_synthetic(&SyntheticSpec {
            clients: 3,
            samples_per_client: 6,
            dim: 2,
            classes: 2,
            beta: 1.0,
            seed: 1,
        })
        .unwrap();
        let m = LeastSquares { dim: 2 };
        let g = estimate_local_variance(&m, &d, &[0.1, 0.1], 6, 0, 5).unwrap();
        assert!(g < 1e-12);
        let g = estimate_local_variance(&m, &d, &[0.1, 0.1], 2, 0, 50).unwrap();
        assert!(g > 0.0);
        assert!(estimate_local_variance(&m, &d, &[0.1, 0.1], 7, 0, 5).is_err());
    }
}
