//! FedAvg aggregation and the monitor's verify-then-reward gate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::Address;
use crate::dataset::Samples;
use crate::digest::Hash32;
use crate::ledger::{Chain, LedgerError, TxPayload};
use crate::model::ModelWeights;

pub const REWARD_AMOUNT: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error("no updates to aggregate")]
    EmptyUpdates,
    #[error("dimension mismatch: worker {worker_id} has {got} weights, expected {expected}")]
    DimensionMismatch {
        worker_id: usize,
        expected: usize,
        got: usize,
    },
    #[error("worker {0} reported zero training samples")]
    ZeroSamples(usize),
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("unknown weighting {0:?} (expected sample_proportional, paper_literal or uniform)")]
    UnknownWeighting(String),
}

/// How worker updates are weighted in the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `n_i / Σ n_j`
    #[default]
    SampleProportional,
    /// `n_i / K`; coefficients generally do not sum to one.
    PaperLiteral,
    /// `1 / K`
    Uniform,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::SampleProportional => "sample_proportional",
            Weighting::PaperLiteral => "paper_literal",
            Weighting::Uniform => "uniform",
        }
    }

    /// Coefficient for each entry of `counts`, in order.
    pub fn coefficients(self, counts: &[usize]) -> Vec<f64> {
        let k = counts.len() as f64;
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&n| match self {
                Weighting::SampleProportional => n as f64 / total as f64,
                Weighting::PaperLiteral => n as f64 / k,
                Weighting::Uniform => 1.0 / k,
            })
            .collect()
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Weighting {
    type Err = FederationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Weighting::SampleProportional,
            Weighting::PaperLiteral,
            Weighting::Uniform,
        ]
        .into_iter()
        .find(|w| w.name() == s)
        .ok_or_else(|| FederationError::UnknownWeighting(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub workers: usize,
    pub weighting: Weighting,
    pub rounds_max: usize,
    /// Stop once the global validation RMSE moves less than this for three rounds running.
    pub convergence_tol: f64,
    pub validation_fraction: f64,
    /// Verify the candidate merged into the global model instead of alone. Not supported yet.
    pub verify_merged: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            weighting: Weighting::SampleProportional,
            rounds_max: 20,
            convergence_tol: 0.01,
            validation_fraction: 0.1,
            verify_merged: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: &str| Err(FederationError::InvalidConfig(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return bad("convergence_tol must be non-negative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.verify_merged {
            return bad("verify_merged is not supported; the monitor evaluates candidates alone");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub worker_id: usize,
    pub weights: ModelWeights,
    pub n_samples: usize,
}

/// Coordinate-wise weighted mean of `(w, bias)`. Terms are summed in
/// `worker_id` order, so the result does not depend on the order of `updates`.
pub fn aggregate(
    updates: &[Update],
    weighting: Weighting,
) -> Result<ModelWeights, FederationError> {
    let first = updates.first().ok_or(FederationError::EmptyUpdates)?;
    let d = first.weights.dim();
    for u in updates {
        if u.weights.dim() != d {
            return Err(FederationError::DimensionMismatch {
                worker_id: u.worker_id,
                expected: d,
                got: u.weights.dim(),
            });
        }
        if u.n_samples == 0 {
            return Err(FederationError::ZeroSamples(u.worker_id));
        }
    }
    let mut ordered: Vec<&Update> = updates.iter().collect();
    ordered.sort_by_cached_key(|u| (u.worker_id, u.n_samples, u.weights.to_bytes()));
    let counts: Vec<usize> = ordered.iter().map(|u| u.n_samples).collect();
    let coefs = weighting.coefficients(&counts);
    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    for (u, c) in ordered.iter().zip(&coefs) {
        for (acc, v) in w.iter_mut().zip(&u.weights.w) {
            *acc += c * v;
        }
        bias += c * u.weights.bias;
    }
    Ok(ModelWeights::new(w, bias))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub worker_id: usize,
    pub accepted: bool,
    /// Validation RMSE of the incumbent global model.
    pub rmse_before: f64,
    /// Validation RMSE of the candidate.
    pub rmse_after: f64,
    pub reward_tx_id: Option<Hash32>,
}

/// Accepts the candidate only if it strictly lowers validation RMSE. A
/// candidate that cannot be evaluated is rejected with an infinite RMSE.
pub fn verify_update(
    worker_id: usize,
    candidate: &ModelWeights,
    incumbent: &ModelWeights,
    validation: &Samples,
    cap: f64,
) -> VerificationVerdict {
    let score = |m: &ModelWeights| {
        m.evaluate(validation, cap)
            .ok()
            .filter(|r| r.is_finite())
            .unwrap_or(f64::INFINITY)
    };
    let rmse_before = score(incumbent);
    let rmse_after = score(candidate);
    VerificationVerdict {
        worker_id,
        accepted: rmse_after < rmse_before,
        rmse_before,
        rmse_after,
        reward_tx_id: None,
    }
}

/// Queues a one-token treasury transfer to an accepted worker and records
/// its id on the verdict. Rejected verdicts submit nothing.
pub fn reward_accepted(
    verdict: &mut VerificationVerdict,
    chain: &mut Chain,
) -> Result<Option<Hash32>, LedgerError> {
    if !verdict.accepted {
        return Ok(None);
    }
    let treasury = chain.state().treasury;
    let id = chain.submit(
        treasury,
        TxPayload::TokenTransfer {
            recipient: Address::worker(verdict.worker_id),
            amount: REWARD_AMOUNT,
        },
    )?;
    verdict.reward_tx_id = Some(id);
    Ok(Some(id))
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub round: usize,
    pub worker_id: usize,
    pub accepted: bool,
    pub rmse_before: f64,
    pub rmse_after: f64,
    pub global_rmse: f64,
    pub tokens_total: u64,
}

pub fn write_run_log(path: &Path, rows: &[RunLogRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "round",
            "worker_id",
            "accepted",
            "rmse_before",
            "rmse_after",
            "global_rmse",
            "tokens_total",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_log(path: &Path) -> csv::Result<Vec<RunLogRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::ContractState;
    use crate::ledger::{ChainConfig, MinerId};
    use proptest::prelude::{prop_assert_eq, proptest, Strategy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upd(worker_id: usize, w: Vec<f64>, bias: f64, n: usize) -> Update {
        Update {
            worker_id,
            weights: ModelWeights::new(w, bias),
            n_samples: n,
        }
    }

    fn fast_chain() -> Chain {
        Chain::new(
            ChainConfig {
                difficulty: 4,
                ..ChainConfig::default()
            },
            ContractState::default(),
        )
        .unwrap()
    }

    fn validation_set() -> Samples {
        let mut s = Samples::with_capacity(2, 50);
        for i in 0..50 {
            let x = [i as f64 / 10.0 - 2.5, ((i * 7) % 11) as f64 / 5.0 - 1.0];
            s.push(&x, 60.0 + 10.0 * x[0] - 4.0 * x[1]);
        }
        s
    }

    #[test]
    fn single_update_is_identity() {
        let u = upd(1, vec![0.3, -0.7], 12.5, 40);
        assert_eq!(
            aggregate(std::slice::from_ref(&u), Weighting::SampleProportional).unwrap(),
            u.weights
        );
    }

    #[test]
    fn symmetric_pair_averages() {
        let a = upd(1, vec![0.0, 0.0], 0.0, 1);
        let b = upd(2, vec![1.0, 1.0], 0.0, 1);
        assert_eq!(
            aggregate(&[a, b], Weighting::SampleProportional).unwrap().w,
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn weighted_by_sample_count() {
        let a = upd(1, vec![0.0], 0.0, 1);
        let b = upd(2, vec![4.0], 0.0, 3);
        assert_eq!(
            aggregate(&[a, b], Weighting::SampleProportional).unwrap().w,
            vec![3.0]
        );
    }

    #[test]
    fn paper_literal_need_not_be_convex() {
        let a = upd(1, vec![1.0], 1.0, 10);
        let b = upd(2, vec![1.0], 1.0, 30);
        let m = aggregate(&[a, b], Weighting::PaperLiteral).unwrap();
        assert_eq!(m.w, vec![20.0]);
        assert_eq!(m.bias, 20.0);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(
            aggregate(&[], Weighting::Uniform),
            Err(FederationError::EmptyUpdates)
        );
        let a = upd(1, vec![1.0], 0.0, 1);
        let b = upd(2, vec![1.0, 2.0], 0.0, 1);
        assert!(matches!(
            aggregate(&[a.clone(), b], Weighting::Uniform),
            Err(FederationError::DimensionMismatch { worker_id: 2, .. })
        ));
        let z = upd(3, vec![1.0], 0.0, 0);
        assert_eq!(
            aggregate(&[a, z], Weighting::Uniform),
            Err(FederationError::ZeroSamples(3))
        );
    }

    #[test]
    fn weighting_names_roundtrip() {
        for w in [
            Weighting::SampleProportional,
            Weighting::PaperLiteral,
            Weighting::Uniform,
        ] {
            assert_eq!(w.name().parse::<Weighting>().unwrap(), w);
        }
        assert!("fedprox".parse::<Weighting>().is_err());
    }

    /// Weighted mean written as numerator over denominator, no shared code.
    fn brute_force(updates: &[Update], weighting: Weighting) -> Vec<f64> {
        let d = updates[0].weights.w.len();
        let k = updates.len() as f64;
        let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        (0..=d)
            .map(|j| {
                let coord = |u: &Update| {
                    if j < d {
                        u.weights.w[j]
                    } else {
                        u.weights.bias
                    }
                };
                match weighting {
                    Weighting::SampleProportional => {
                        updates
                            .iter()
                            .map(|u| u.n_samples as f64 * coord(u))
                            .sum::<f64>()
                            / total
                    }
                    Weighting::PaperLiteral => {
                        updates
                            .iter()
                            .map(|u| u.n_samples as f64 * coord(u))
                            .sum::<f64>()
                            / k
                    }
                    Weighting::Uniform => updates.iter().map(coord).sum::<f64>() / k,
                }
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let d = rng.random_range(1..=4);
            let updates: Vec<Update> = (1..=k)
                .map(|i| {
                    upd(
                        i,
                        (0..d).map(|_| rng.random_range(-10.0..10.0)).collect(),
                        rng.random_range(-100.0..100.0),
                        rng.random_range(1..5000),
                    )
                })
                .collect();
            for weighting in [
                Weighting::SampleProportional,
                Weighting::PaperLiteral,
                Weighting::Uniform,
            ] {
                let got = aggregate(&updates, weighting).unwrap();
                let want = brute_force(&updates, weighting);
                let scale = if weighting == Weighting::PaperLiteral {
                    want.iter().fold(1.0f64, |a, b| a.max(b.abs()))
                } else {
                    1.0
                };
                for (a, b) in got.w.iter().chain(std::iter::once(&got.bias)).zip(&want) {
                    assert!((a - b).abs() <= 1e-12 * scale, "{weighting}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn equal_candidate_rejected() {
        let s = validation_set();
        let m = ModelWeights::new(vec![5.0, -1.0], 55.0);
        let v = verify_update(1, &m, &m, &s, 125.0);
        assert!(!v.accepted);
        assert_eq!(v.rmse_before, v.rmse_after);
    }

    #[test]
    fn exploding_candidate_rejected() {
        let s = validation_set();
        let incumbent = ModelWeights::new(vec![0.0, 0.0], 60.0);
        let huge = ModelWeights::new(vec![1e6, 1e6], 1e6);
        let v = verify_update(2, &huge, &incumbent, &s, 125.0);
        assert!(v.rmse_after > v.rmse_before);
        assert!(!v.accepted);
        let wrong_dim = ModelWeights::new(vec![0.0], 60.0);
        assert!(!verify_update(2, &wrong_dim, &incumbent, &s, 125.0).accepted);
    }

    #[test]
    fn further_training_is_accepted() {
        use crate::model::{train_local, TrainConfig};
        let s = validation_set();
        let incumbent = ModelWeights::new(vec![0.0, 0.0], 60.0);
        let mut nearby = Samples::with_capacity(2, 50);
        for i in 0..50 {
            let x = [i as f64 / 10.0 - 2.45, ((i * 3) % 11) as f64 / 5.0 - 1.0];
            nearby.push(&x, 60.0 + 10.0 * x[0] - 4.0 * x[1]);
        }
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 10,
            epsilon: 0.5,
            batch_size: 8,
            ..Default::default()
        };
        let candidate = train_local(&incumbent, &nearby, &cfg).unwrap().weights;
        let v = verify_update(3, &candidate, &incumbent, &s, 125.0);
        assert!(v.rmse_after < v.rmse_before, "{v:?}");
        assert!(v.accepted);
        assert_eq!(v, verify_update(3, &candidate, &incumbent, &s, 125.0));
    }

    #[test]
    fn rewards_follow_verdicts() {
        let mut chain = fast_chain();
        let mut rejected = VerificationVerdict {
            worker_id: 1,
            accepted: false,
            rmse_before: 1.0,
            rmse_after: 2.0,
            reward_tx_id: None,
        };
        assert_eq!(reward_accepted(&mut rejected, &mut chain).unwrap(), None);
        assert_eq!(chain.mempool_len(), 0);
        for worker_id in 1..=3 {
            let mut v = VerificationVerdict {
                worker_id,
                accepted: true,
                rmse_before: 2.0,
                rmse_after: 1.0,
                reward_tx_id: None,
            };
            let id = reward_accepted(&mut v, &mut chain).unwrap();
            assert_eq!(v.reward_tx_id, id);
            assert!(id.is_some());
        }
        chain.mine_block(MinerId(1), 4).unwrap();
        assert_eq!(chain.state().total_minted, 3);
        assert_eq!(chain.state().balance_of(&Address::worker(2)), 1);
        assert_eq!(chain.state().balance_of(&Address::worker(4)), 0);
    }

    #[test]
    fn run_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_log.csv");
        let rows = vec![
            RunLogRow {
                round: 1,
                worker_id: 1,
                accepted: true,
                rmse_before: 40.5,
                rmse_after: 30.25,
                global_rmse: 29.0,
                tokens_total: 1,
            },
            RunLogRow {
                round: 1,
                worker_id: 2,
                accepted: false,
                rmse_before: 40.5,
                rmse_after: 41.0,
                global_rmse: 29.0,
                tokens_total: 1,
            },
        ];
        write_run_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "round,worker_id,accepted,rmse_before,rmse_after,global_rmse,tokens_total\n"
        ));
        assert_eq!(read_run_log(&path).unwrap(), rows);
        write_run_log(&path, &[]).unwrap();
        assert!(read_run_log(&path).unwrap().is_empty());
    }

    #[test]
    fn config_checks() {
        assert!(FederationConfig::default().validate().is_ok());
        assert!(FederationConfig {
            workers: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FederationConfig {
            validation_fraction: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FederationConfig {
            convergence_tol: f64::INFINITY,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(FederationConfig {
            verify_merged: true,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn updates_strategy() -> impl Strategy<Value = Vec<Update>> {
        (1usize..=5, 1usize..=4).prop_flat_map(|(k, d)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(-1e3f64..1e3, d),
                    -1e3f64..1e3,
                    1usize..10_000,
                ),
                k,
            )
            .prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (w, b, n))| upd(i + 1, w, b, n))
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(updates in updates_strategy(), seed in 0u64..1000) {
            let mut shuffled = updates.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for weighting in [Weighting::SampleProportional, Weighting::PaperLiteral, Weighting::Uniform] {
                prop_assert_eq!(
                    aggregate(&updates, weighting).unwrap().to_bytes(),
                    aggregate(&shuffled, weighting).unwrap().to_bytes()
                );
            }
        }

        #[test]
        fn identical_updates_fixed_point(w in proptest::collection::vec(-1e3f64..1e3, 1..5), ns in proptest::collection::vec(1usize..100, 1..6)) {
            let updates: Vec<Update> = ns.iter().enumerate().map(|(i, &n)| upd(i + 1, w.clone(), 3.5, n)).collect();
            for weighting in [Weighting::SampleProportional, Weighting::Uniform] {
                let m = aggregate(&updates, weighting).unwrap();
                for (a, b) in m.w.iter().zip(&w) {
                    proptest::prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
        }
    }
}
