//! Hyperparameters and the derivation of per-round client count `K` and
//! mini-batch size `b` from the two stability budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    /// Every selection, mini-batch and model is kept; enables partial retraining.
    #[default]
    FullHistory,
    /// Only involvement bits, earliest-use indices and the current model.
    Compact,
}

impl StorageMode {
    pub fn name(self) -> &'static str {
        match self {
            StorageMode::FullHistory => "full_history",
            StorageMode::Compact => "compact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_history" | "full" => Some(StorageMode::FullHistory),
            "compact" => Some(StorageMode::Compact),
            _ => None,
        }
    }
}

/// Integer `(K, b)` together with the budgets they actually realize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSizes {
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub realized_rho_sample: f64,
    pub realized_rho_client: f64,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// `rho_C = K*T/(E*M)` for the given population.
pub fn realized_rho_client(k: usize, t: usize, e: usize, m: usize) -> f64 {
    (k * t) as f64 / (e * m) as f64
}

/// `rho_S = b*K*T/(M*N)` for the given population.
pub fn realized_rho_sample(b: usize, k: usize, t: usize, m: usize, n: usize) -> f64 {
    (b * k * t) as f64 / (m * n) as f64
}

/// Computes `K = round(rho_C*E*M/T)` (at least 1) and the mini-batch size
/// that targets `rho_S` given that rounded `K`, i.e. `round(rho_S*M*N/(K*T))`
/// clamped to `[1, N]`. When `K` needs no rounding this is exactly
/// `rho_S*N/(rho_C*E)`.
pub fn derive_sampling_sizes(
    rho_sample: f64,
    rho_client: f64,
    m: usize,
    n: usize,
    t: usize,
    e: usize,
) -> Result<SamplingSizes> {
    for (name, rho) in [("rho_sample", rho_sample), ("rho_client", rho_client)] {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::invalid(format!("{name} must lie in (0, 1], got {rho}")));
        }
    }
    if m == 0 || n == 0 || t == 0 || e == 0 {
        return Err(Error::invalid("M, N, T and E must be >= 1"));
    }
    if !t.is_multiple_of(e) {
        return Err(Error::invalid(format!("T = {t} is not a multiple of E = {e}")));
    }

    let k_exact = rho_client * (e * m) as f64 / t as f64;
    let k = round_half_up(k_exact).max(1);
    let b_exact = rho_sample * (m * n) as f64 / (k * t) as f64;
    if b_exact > n as f64 {
        return Err(Error::InfeasibleBudget {
            batch: b_exact,
            local: n,
        });
    }
    let b = round_half_up(b_exact).clamp(1, n);

    Ok(SamplingSizes {
        clients_per_round: k,
        batch_size: b,
        realized_rho_sample: realized_rho_sample(b, k, t, m, n),
        realized_rho_client: realized_rho_client(k, t, e, m),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// M
    pub num_clients: usize,
    /// N
    pub samples_per_client: usize,
    /// T
    pub total_iters: usize,
    /// E
    pub local_iters: usize,
    /// K
    pub clients_per_round: usize,
    /// b
    pub batch_size: usize,
    /// eta
    pub learning_rate: f64,
    pub rho_sample: f64,
    pub rho_client: f64,
    pub seed: u64,
    #[serde(default)]
    pub storage: StorageMode,
}

impl HyperParams {
    /// Explicit `(K, b)`; the budgets are set to the values they realize.
    #[allow(clippy::too_many_arguments)]
    pub fn explicit(
        m: usize,
        n: usize,
        t: usize,
        e: usize,
        k: usize,
        b: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let h = Self {
            num_clients: m,
            samples_per_client: n,
            total_iters: t,
            local_iters: e,
            clients_per_round: k,
            batch_size: b,
            learning_rate,
            rho_sample: if m * n > 0 {
                realized_rho_sample(b, k, t, m, n)
            } else {
                0.0
            },
            rho_client: if e * m > 0 {
                realized_rho_client(k, t, e, m)
            } else {
                0.0
            },
            seed,
            storage: StorageMode::FullHistory,
        };
        h.validate()?;
        Ok(h)
    }

    /// `(K, b)` derived from the requested budgets.
    #[allow(clippy::too_many_arguments)]
    pub fn from_budgets(
        m: usize,
        n: usize,
        t: usize,
        e: usize,
        rho_sample: f64,
        rho_client: f64,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = derive_sampling_sizes(rho_sample, rho_client, m, n, t, e)?;
        let h = Self {
            num_clients: m,
            samples_per_client: n,
            total_iters: t,
            local_iters: e,
            clients_per_round: s.clients_per_round,
            batch_size: s.batch_size,
            learning_rate,
            rho_sample,
            rho_client,
            seed,
            storage: StorageMode::FullHistory,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn with_storage(mut self, storage: StorageMode) -> Self {
        self.storage = storage;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_learning_rate(mut self, eta: f64) -> Self {
        self.learning_rate = eta;
        self
    }

    pub fn rounds(&self) -> usize {
        self.total_iters / self.local_iters
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.samples_per_client == 0 {
            return Err(Error::invalid("M and N must be >= 1"));
        }
        if self.local_iters == 0 || self.total_iters == 0 {
            return Err(Error::invalid("T and E must be >= 1"));
        }
        if !self.total_iters.is_multiple_of(self.local_iters) {
            return Err(Error::invalid(format!(
                "T = {} is not a multiple of E = {}",
                self.total_iters, self.local_iters
            )));
        }
        if self.clients_per_round == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size > self.samples_per_client {
            return Err(Error::invalid(format!(
                "b = {} must lie in [1, N = {}]",
                self.batch_size, self.samples_per_client
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Budgets realized by the integer `(K, b)` on a population of `m`
    /// clients with `n` points each (pass current sizes after deletions).
    pub fn realized_rho(&self, m: usize, n: usize) -> (f64, f64) {
        (
            realized_rho_sample(self.batch_size, self.clients_per_round, self.total_iters, m, n),
            realized_rho_client(self.clients_per_round, self.total_iters, self.local_iters, m),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_row_values() {
        let s = derive_sampling_sizes(0.25, 0.5, 300, 200, 300, 10).unwrap();
        assert_eq!(s.clients_per_round, 5);
        assert_eq!(s.batch_size, 10);
        assert!((s.realized_rho_client - 0.5).abs() < 1e-12);
        assert!((s.realized_rho_sample - 0.25).abs() < 1e-12);
    }

    #[test]
    fn full_participation_single_round() {
        for m in [1, 3, 17, 64] {
            let s = derive_sampling_sizes(0.1, 1.0, m, 50, 20, 20).unwrap();
            assert_eq!(s.clients_per_round, m);
        }
    }

    #[test]
    fn full_batch_limit() {
        // rho_S = bKT/(MN) = 1 with K = M forces b = N only when T = 1.
        let s = derive_sampling_sizes(1.0, 1.0, 5, 12, 1, 1).unwrap();
        assert_eq!(s.clients_per_round, 5);
        assert_eq!(s.batch_size, 12);
    }

    #[test]
    fn infeasible_budget() {
        // K = 1 after clamping; b = rho_S*M*N/(K*T) = 1*10*4/(1*2) = 20 > 4
        let err = derive_sampling_sizes(1.0, 0.05, 10, 4, 2, 1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { local: 4, .. }));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(derive_sampling_sizes(0.0, 0.5, 2, 2, 2, 1).is_err());
        assert!(derive_sampling_sizes(0.5, 1.5, 2, 2, 2, 1).is_err());
        assert!(derive_sampling_sizes(0.5, 0.5, 2, 2, 3, 2).is_err());
    }

    #[test]
    fn explicit_micro_config() {
        let h = HyperParams::explicit(2, 2, 2, 1, 1, 1, 0.1, 0).unwrap();
        assert_eq!(h.rounds(), 2);
        assert!((h.rho_sample - 0.5).abs() < 1e-15);
        assert!((h.rho_client - 1.0).abs() < 1e-15);
        assert!(HyperParams::explicit(2, 2, 2, 1, 1, 3, 0.1, 0).is_err());
        assert!(HyperParams::explicit(2, 2, 2, 1, 0, 1, 0.1, 0).is_err());
        assert!(HyperParams::explicit(2, 2, 2, 1, 1, 1, 0.0, 0).is_err());
    }

    #[test]
    fn realized_budget_after_deletion() {
        let h = HyperParams::explicit(2, 2, 2, 1, 1, 1, 0.1, 0).unwrap();
        let (s, c) = h.realized_rho(1, 2);
        assert!((s - 1.0).abs() < 1e-15);
        assert!((c - 2.0).abs() < 1e-15);
    }

    proptest! {
        // Rounding slack over the integer grid M, N, T, E <= 64, whenever
        // neither K nor b had to be clamped up to 1.
        #[test]
        fn rounding_slack_is_bounded(
            m in 1usize..=64, n in 1usize..=64, r_raw in 0usize..64, e in 1usize..=64,
            rs in 1u32..=100, rc in 1u32..=100,
        ) {
            let r = 1 + r_raw % (64 / e);
            let t = r * e;
            let rho_s = rs as f64 / 100.0;
            let rho_c = rc as f64 / 100.0;
            let k_exact = rho_c * (e * m) as f64 / t as f64;
            prop_assume!(k_exact >= 0.5);
            match derive_sampling_sizes(rho_s, rho_c, m, n, t, e) {
                Ok(s) => {
                    let k = s.clients_per_round;
                    let b_exact = rho_s * (m * n) as f64 / (k * t) as f64;
                    prop_assume!(b_exact >= 0.5);
                    let tol = 1e-12;
                    prop_assert!(s.realized_rho_client <= rho_c * (1.0 + 1.0 / k as f64) + tol);
                    prop_assert!(
                        s.realized_rho_sample <= rho_s * (1.0 + 1.0 / s.batch_size as f64) + tol
                    );
                    prop_assert!(s.batch_size >= 1 && s.batch_size <= n);
                }
                Err(Error::InfeasibleBudget { .. }) => {}
                Err(other) => prop_assert!(false, "unexpected {other}"),
            }
        }
    }
}
