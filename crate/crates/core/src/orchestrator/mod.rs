//! The federated round loop: local training, encrypted anchoring, mining,
//! monitor verification, rewards, aggregation and publication.
//!
//! All ledger and contract mutation happens on the calling thread; only local
//! training and candidate verification fan out across workers.

mod config;
pub mod report;

pub use config::{RunConfig, ScheduleKind};
pub use report::{report, PredictionRow, RunSummary};

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::{BlobStore, ContentHash};
use crate::contract::{Address, ContractState};
use crate::crypto::{self, Ciphertext, KeyPair, PrivateKey};
use crate::dataset::{
    self, compute_rul_labels, normalize, partition_workers, split_validation, synth, DataError,
    Dataset, FeatureMap, NormStats, Samples, WorkerShard, FEATURE_COUNT,
};
use crate::digest::{derive_seed, Hash32};
use crate::federation::{
    aggregate, reward_accepted, verify_update, write_run_log, RunLogRow, Update,
    VerificationVerdict,
};
use crate::ledger::{Chain, ChainConfig, MinerPool, TxPayload};
use crate::model::{rmse, train_local, ModelWeights, TrainConfig};

pub(crate) const SEED_SPLIT: u64 = 1;
pub(crate) const SEED_PARTITION: u64 = 2;
pub(crate) const SEED_KEYS: u64 = 3;
pub(crate) const SEED_INIT: u64 = 4;
pub(crate) const SEED_TRAIN: u64 = 5;
pub(crate) const SEED_ENCRYPT: u64 = 6;
pub(crate) const SEED_MINERS: u64 = 7;
pub(crate) const SEED_SYNTH: u64 = 8;
const CONVERGENCE_STREAK: usize = 3;

pub const RUN_LOG_FILE: &str = "run_log.csv";
pub const CHAIN_FILE: &str = "chain.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const ROUNDS_FILE: &str = "rounds.json";
pub const WEIGHTS_FILE: &str = "global_weights.fcw";
pub const CONFIG_FILE: &str = "config.toml";
pub const PUBLIC_KEY_FILE: &str = "operator.pub";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const BLOBS_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("round {round} aborted at step '{step}': {message}")]
    Step {
        round: usize,
        step: &'static str,
        message: String,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{context}: {message}")]
    Output { context: String, message: String },
}

impl OrchestratorError {
    /// Process exit code: 1 usage, 2 data, 3 run aborted.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) => 1,
            OrchestratorError::Data(_) | OrchestratorError::MissingArtifact(_) => 2,
            OrchestratorError::Step { .. } | OrchestratorError::Output { .. } => 3,
        }
    }
}

fn output_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> OrchestratorError {
    let context = context.into();
    move |e| OrchestratorError::Output {
        context,
        message: e.to_string(),
    }
}

/// Loads the configured subset, synthesizing it first when allowed.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset), OrchestratorError> {
    if !config.subset.present_in(&config.data_dir) {
        if !config.synthesize_missing {
            let (train, _, _) = config.subset.paths(&config.data_dir);
            return Err(DataError::Io {
                path: train,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "subset files not found"),
            }
            .into());
        }
        synth::write_subset(
            &config.data_dir,
            config.subset,
            derive_seed(config.seed, &[SEED_SYNTH]),
        )?;
    }
    Ok(dataset::load_subset(
        &config.data_dir,
        config.subset,
        &FeatureMap::default(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub worker_id: usize,
    pub local_hash: ContentHash,
    pub tx_id: Hash32,
    pub n_samples: usize,
    pub verdict: VerificationVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub workers: Vec<WorkerEntry>,
    pub global_hash: ContentHash,
    /// True when every update was rejected and the incumbent was re-published.
    pub carried_forward: bool,
    pub global_validation_rmse: f64,
    pub global_test_rmse: f64,
    pub heights: Vec<u64>,
}

impl RoundRecord {
    pub fn accepted(&self) -> usize {
        self.workers.iter().filter(|w| w.verdict.accepted).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    RoundsMax,
    Aborted,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::RoundsMax => "rounds_max",
            StopReason::Aborted => "aborted",
        }
    }
}

struct WorkerData {
    shard: WorkerShard,
    samples: Samples,
}

/// A fully prepared federation: data views, keys, storage and chain.
pub struct Simulation {
    config: RunConfig,
    workers: Vec<WorkerData>,
    validation: Samples,
    test: Dataset,
    norm: NormStats,
    keys: KeyPair,
    blobs: BlobStore,
    chain: Chain,
    miners: MinerPool,
    enc_rng: ChaCha20Rng,
    global: ModelWeights,
    global_hash: ContentHash,
    initial_validation_rmse: f64,
    initial_test_rmse: f64,
    records: Vec<RoundRecord>,
}

impl Simulation {
    /// Labels and normalizes the data, fixes validation and worker shards,
    /// derives keys and mines genesis. The initial global model is stored in
    /// the blob store and recorded in the genesis contract state.
    pub fn new(
        config: RunConfig,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let cap = config.rul_cap;
        let labeled = compute_rul_labels(train, cap);
        let norm = NormStats::fit(&labeled);
        let train = normalize(&labeled, &norm);
        let test = normalize(test, &norm);

        let (val_units, rest) = split_validation(
            &train,
            config.federation.validation_fraction,
            derive_seed(config.seed, &[SEED_SPLIT]),
        )?;
        let pool = train.subset(&rest);
        let shards = partition_workers(
            &pool,
            config.workers(),
            derive_seed(config.seed, &[SEED_PARTITION]),
        )?;
        let validation = train.subset(&val_units);
        let workers = shards
            .into_iter()
            .map(|shard| {
                let samples = pool.subset(&shard.units).samples();
                WorkerData { shard, samples }
            })
            .collect();

        let keys = match &config.private_key {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
                let private: PrivateKey = text
                    .parse()
                    .map_err(|e: crypto::CryptoError| OrchestratorError::Config(e.to_string()))?;
                KeyPair {
                    public: private.public_key(),
                    private,
                }
            }
            None => {
                crypto::generate_keypair(config.rsa_bits, derive_seed(config.seed, &[SEED_KEYS]))
                    .map_err(|e| OrchestratorError::Config(e.to_string()))?
            }
        };

        let cap_f = f64::from(cap);
        let global = ModelWeights::init(
            FEATURE_COUNT,
            derive_seed(config.seed, &[SEED_INIT]),
            Some(validation.mean_label()),
        );
        let validation = validation.samples();
        let blobs = BlobStore::new();
        let setup = |step: &'static str| {
            move |e: String| OrchestratorError::Step {
                round: 0,
                step,
                message: e,
            }
        };
        let global_hash = blobs
            .put(&global.to_bytes())
            .map_err(|e| setup("store initial global")(e.to_string()))?;
        let mut genesis = ContractState::default();
        genesis
            .apply_publish_global(genesis.monitor, global_hash, 0)
            .map_err(|e| setup("record initial global")(e.to_string()))?;
        let chain = Chain::new(
            ChainConfig {
                capacity: config.block_capacity,
                difficulty: config.difficulty,
                ..ChainConfig::default()
            },
            genesis,
        )
        .map_err(|e| setup("mine genesis")(e.to_string()))?;

        let initial_validation_rmse = global
            .evaluate(&validation, cap_f)
            .map_err(|e| setup("evaluate initial global")(e.to_string()))?;
        let initial_test_rmse = last_cycle_rmse(&global, &test, cap_f)
            .map_err(|e| setup("evaluate initial global")(e.to_string()))?;
        Ok(Self {
            miners: MinerPool::new(config.miners, config.schedule()),
            enc_rng: ChaCha20Rng::seed_from_u64(derive_seed(config.seed, &[SEED_ENCRYPT])),
            config,
            workers,
            validation,
            test,
            norm,
            keys,
            blobs,
            chain,
            global,
            global_hash,
            initial_validation_rmse,
            initial_test_rmse,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn global(&self) -> &ModelWeights {
        &self.global
    }

    pub fn global_hash(&self) -> ContentHash {
        self.global_hash
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn shards(&self) -> Vec<&WorkerShard> {
        self.workers.iter().map(|w| &w.shard).collect()
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn validation_set(&self) -> &Samples {
        &self.validation
    }

    pub fn initial_validation_rmse(&self) -> f64 {
        self.initial_validation_rmse
    }

    pub fn initial_test_rmse(&self) -> f64 {
        self.initial_test_rmse
    }

    fn cap(&self) -> f64 {
        f64::from(self.config.rul_cap)
    }

    fn mine_pending(
        &mut self,
        round: usize,
        step: &'static str,
        heights: &mut Vec<u64>,
    ) -> Result<(), OrchestratorError> {
        let mined = self
            .chain
            .mine_all(&mut self.miners, self.config.difficulty)
            .map_err(|e| OrchestratorError::Step {
                round,
                step,
                message: e.to_string(),
            })?;
        heights.extend(mined);
        Ok(())
    }

    /// Executes one synchronous round and returns its audit record.
    pub fn run_round(&mut self) -> Result<RoundRecord, OrchestratorError> {
        let round = self.records.len() + 1;
        let fail = |step: &'static str| {
            move |e: String| OrchestratorError::Step {
                round,
                step,
                message: e,
            }
        };
        let cap = self.cap();
        let mut heights = Vec::new();

        // Local training from the adopted global weights.
        let base_cfg = self.config.train;
        let seed = self.config.seed;
        let start = self.global.clone();
        let trained: Vec<(usize, ModelWeights, usize)> = self
            .workers
            .par_iter()
            .map(|w| {
                let cfg = TrainConfig {
                    seed: derive_seed(seed, &[SEED_TRAIN, w.shard.worker_id as u64, round as u64]),
                    ..base_cfg
                };
                train_local(&start, &w.samples, &cfg)
                    .map(|out| (w.shard.worker_id, out.weights, w.samples.len()))
                    .map_err(|e| format!("worker {}: {e}", w.shard.worker_id))
            })
            .collect::<Result<_, _>>()
            .map_err(fail("local training"))?;

        // Store, encrypt and anchor each update.
        let mut entries = Vec::with_capacity(trained.len());
        for (worker_id, weights, n) in &trained {
            let hash = self
                .blobs
                .put(&weights.to_bytes())
                .map_err(|e| fail("store local weights")(e.to_string()))?;
            let ct = crypto::encrypt(
                hash.render().as_bytes(),
                &self.keys.public,
                &mut self.enc_rng,
            )
            .map_err(|e| fail("encrypt hash link")(e.to_string()))?;
            let tx_id = self
                .chain
                .submit(
                    Address::worker(*worker_id),
                    TxPayload::UpdateModelHash {
                        ciphertext: ct.to_bytes(),
                    },
                )
                .map_err(|e| fail("submit update")(e.to_string()))?;
            if self.config.mine_per_upload {
                self.mine_pending(round, "mine uploads", &mut heights)?;
            }
            entries.push((*worker_id, hash, tx_id, *n));
        }
        self.mine_pending(round, "mine uploads", &mut heights)?;

        // The monitor resolves each on-chain link and verifies the candidate.
        let mut candidates = Vec::with_capacity(entries.len());
        for &(worker_id, _, _, n) in &entries {
            let weights = self
                .fetch_update(worker_id, round as u64)
                .map_err(fail("fetch update"))?;
            candidates.push((worker_id, weights, n));
        }
        let incumbent = self.global.clone();
        let validation = &self.validation;
        let mut verdicts: Vec<VerificationVerdict> = candidates
            .par_iter()
            .map(|(worker_id, w, _)| verify_update(*worker_id, w, &incumbent, validation, cap))
            .collect();

        for v in &mut verdicts {
            reward_accepted(v, &mut self.chain)
                .map_err(|e| fail("submit reward")(e.to_string()))?;
        }

        let accepted: Vec<Update> = candidates
            .iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.accepted)
            .map(|((worker_id, weights, n), _)| Update {
                worker_id: *worker_id,
                weights: weights.clone(),
                n_samples: *n,
            })
            .collect();
        let carried_forward = accepted.is_empty();
        let next = if carried_forward {
            incumbent
        } else {
            aggregate(&accepted, self.config.federation.weighting)
                .map_err(|e| fail("aggregate")(e.to_string()))?
        };
        if !next.is_finite() {
            return Err(fail("aggregate")(
                "aggregated weights are not finite".into(),
            ));
        }

        let global_hash = self
            .blobs
            .put(&next.to_bytes())
            .map_err(|e| fail("store global weights")(e.to_string()))?;
        let monitor = self.chain.state().monitor;
        self.chain
            .submit(monitor, TxPayload::PublishGlobalModel { hash: global_hash })
            .map_err(|e| fail("publish global")(e.to_string()))?;
        self.mine_pending(round, "mine rewards and publish", &mut heights)?;

        // Workers adopt whatever the chain says is the current global model.
        let published = *self
            .chain
            .state()
            .global_model_history
            .last()
            .ok_or_else(|| fail("adopt global")("no published global model".into()))?;
        let bytes = self
            .blobs
            .get(&published)
            .map_err(|e| fail("adopt global")(e.to_string()))?;
        self.global =
            ModelWeights::from_bytes(&bytes).map_err(|e| fail("adopt global")(e.to_string()))?;
        self.global_hash = published;

        let global_validation_rmse = self
            .global
            .evaluate(&self.validation, cap)
            .map_err(|e| fail("evaluate global")(e.to_string()))?;
        let global_test_rmse = last_cycle_rmse(&self.global, &self.test, cap)
            .map_err(|e| fail("evaluate global")(e.to_string()))?;
        let record = RoundRecord {
            round,
            workers: entries
                .into_iter()
                .zip(verdicts)
                .map(
                    |((worker_id, local_hash, tx_id, n_samples), verdict)| WorkerEntry {
                        worker_id,
                        local_hash,
                        tx_id,
                        n_samples,
                        verdict,
                    },
                )
                .collect(),
            global_hash: published,
            carried_forward,
            global_validation_rmse,
            global_test_rmse,
            heights,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Reads the worker's upload for `index` from contract state, decrypts the
    /// link and loads the weights it names.
    fn fetch_update(&self, worker_id: usize, index: u64) -> Result<ModelWeights, String> {
        let address = Address::worker(worker_id);
        let stored = self
            .chain
            .state()
            .get_model_hash(&address, index)
            .map_err(|e| format!("worker {worker_id}: {e}"))?;
        let bytes = hex::decode(stored).map_err(|e| e.to_string())?;
        let ct = Ciphertext::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let link = crypto::decrypt(&ct, &self.keys.private).map_err(|e| e.to_string())?;
        let hash: ContentHash = std::str::from_utf8(&link)
            .map_err(|e| e.to_string())?
            .parse()
            .map_err(|e: crate::blobstore::BlobError| e.to_string())?;
        let blob = self.blobs.get(&hash).map_err(|e| e.to_string())?;
        ModelWeights::from_bytes(&blob).map_err(|e| e.to_string())
    }

    /// Runs rounds until convergence or `rounds_max`. A round error is
    /// returned alongside the rounds completed so far.
    pub fn run_rounds(&mut self) -> (StopReason, Option<OrchestratorError>) {
        let fed = self.config.federation;
        let mut previous = self.initial_validation_rmse;
        let mut streak = 0;
        for _ in 0..fed.rounds_max {
            let record = match self.run_round() {
                Ok(r) => r,
                Err(e) => return (StopReason::Aborted, Some(e)),
            };
            if !fed.convergence_tol.is_finite() {
                return (StopReason::Converged, None);
            }
            if (record.global_validation_rmse - previous).abs() < fed.convergence_tol {
                streak += 1;
            } else {
                streak = 0;
            }
            previous = record.global_validation_rmse;
            if streak >= CONVERGENCE_STREAK {
                return (StopReason::Converged, None);
            }
        }
        (StopReason::RoundsMax, None)
    }

    pub fn run_log_rows(&self) -> Vec<RunLogRow> {
        let mut tokens = 0;
        let mut rows = Vec::new();
        for r in &self.records {
            tokens += r.accepted() as u64;
            for w in &r.workers {
                rows.push(RunLogRow {
                    round: r.round,
                    worker_id: w.worker_id,
                    accepted: w.verdict.accepted,
                    rmse_before: w.verdict.rmse_before,
                    rmse_after: w.verdict.rmse_after,
                    global_rmse: r.global_validation_rmse,
                    tokens_total: tokens,
                });
            }
        }
        rows
    }

    pub fn predictions(&self) -> Vec<PredictionRow> {
        prediction_rows(&self.global, &self.test, self.cap())
    }

    pub fn summary(&self, stop: StopReason, error: Option<&OrchestratorError>) -> RunSummary {
        let state = self.chain.state();
        RunSummary {
            subset: self.config.subset,
            workers: self.config.workers(),
            seed: self.config.seed,
            rounds_completed: self.records.len(),
            stop_reason: stop.name().to_string(),
            error: error.map(|e| e.to_string()),
            initial_test_rmse: self.initial_test_rmse,
            round1_test_rmse: self.records.first().map(|r| r.global_test_rmse),
            final_test_rmse: self
                .records
                .last()
                .map_or(self.initial_test_rmse, |r| r.global_test_rmse),
            final_validation_rmse: self
                .records
                .last()
                .map_or(self.initial_validation_rmse, |r| r.global_validation_rmse),
            accepted_updates: self.records.iter().map(RoundRecord::accepted).sum(),
            tokens_minted: state.total_minted,
            blocks: self.chain.blocks().len(),
            global_hash: self.global_hash,
            balances: (1..=self.config.workers())
                .map(|id| (id, state.balance_of(&Address::worker(id))))
                .collect(),
        }
    }

    /// Writes every run artifact into `dir`.
    pub fn write_outputs(
        &self,
        dir: &Path,
        stop: StopReason,
        error: Option<&OrchestratorError>,
    ) -> Result<RunSummary, OrchestratorError> {
        let io = |what: &str| output_err(format!("writing {what}"));
        fs::create_dir_all(dir).map_err(io("output directory"))?;
        write_run_log(&dir.join(RUN_LOG_FILE), &self.run_log_rows()).map_err(|e| {
            OrchestratorError::Output {
                context: format!("writing {RUN_LOG_FILE}"),
                message: e.to_string(),
            }
        })?;
        fs::write(dir.join(CHAIN_FILE), self.chain.export_json()).map_err(io(CHAIN_FILE))?;
        fs::write(
            dir.join(ROUNDS_FILE),
            serde_json::to_string_pretty(&self.records).expect("round records serialize"),
        )
        .map_err(io(ROUNDS_FILE))?;
        fs::write(dir.join(WEIGHTS_FILE), self.global.to_bytes()).map_err(io(WEIGHTS_FILE))?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml()).map_err(io(CONFIG_FILE))?;
        fs::write(dir.join(PUBLIC_KEY_FILE), self.keys.public.to_string())
            .map_err(io(PUBLIC_KEY_FILE))?;
        self.blobs
            .dump(&dir.join(BLOBS_DIR))
            .map_err(|e| OrchestratorError::Output {
                context: format!("writing {BLOBS_DIR}"),
                message: e.to_string(),
            })?;
        report::write_predictions(&dir.join(PREDICTIONS_DIR), &self.predictions())?;
        let summary = self.summary(stop, error);
        fs::write(dir.join(SUMMARY_FILE), summary.render()).map_err(io(SUMMARY_FILE))?;
        Ok(summary)
    }
}

/// RMSE at the last observed cycle of each unit against its recorded RUL.
pub fn last_cycle_rmse(
    weights: &ModelWeights,
    test: &Dataset,
    cap: f64,
) -> Result<f64, crate::model::ModelError> {
    let s = test.last_cycle_samples();
    rmse(&weights.predict(&s, cap)?, &s.y)
}

/// One row per observed test cycle; `actual_rul` is the uncapped truth.
pub fn prediction_rows(weights: &ModelWeights, test: &Dataset, cap: f64) -> Vec<PredictionRow> {
    test.units
        .iter()
        .flat_map(|u| {
            u.cycles
                .iter()
                .zip(&u.features)
                .zip(&u.labels)
                .map(move |((&cycle, x), &y)| PredictionRow {
                    unit: u.unit_id,
                    cycle,
                    actual_rul: y,
                    predicted_rul: weights.score(x).clamp(0.0, cap),
                })
        })
        .collect()
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
    pub output_dir: PathBuf,
}

/// Loads data, runs the federation and writes all outputs. Outputs are
/// written even when a round aborts; the error is returned afterwards.
pub fn run(config: RunConfig) -> Result<RunOutcome, OrchestratorError> {
    config.validate()?;
    let (train, test) = load_data(&config)?;
    run_with_data(config, &train, &test)
}

pub fn run_with_data(
    config: RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutcome, OrchestratorError> {
    let output_dir = config.output_dir.clone();
    let mut sim = Simulation::new(config, train, test)?;
    let (stop, error) = sim.run_rounds();
    let summary = sim.write_outputs(&output_dir, stop, error.as_ref())?;
    if let Some(e) = error {
        return Err(e);
    }
    Ok(RunOutcome {
        summary,
        records: sim.records,
        output_dir,
    })
}
