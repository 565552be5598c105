//! Run configuration and its flat TOML file form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::crypto::{DEFAULT_KEY_BITS, MAX_KEY_BITS, MIN_KEY_BITS};
use crate::dataset::{Subset, DEFAULT_RUL_CAP};
use crate::federation::{FederationConfig, Weighting};
use crate::ledger::{MinerSchedule, DEFAULT_BLOCK_CAPACITY, DEFAULT_DIFFICULTY};
use crate::model::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub subset: Subset,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub difficulty: u32,
    pub block_capacity: usize,
    pub rsa_bits: usize,
    /// Load the operator key from this file instead of deriving one from `seed`.
    pub private_key: Option<PathBuf>,
    pub rul_cap: u32,
    pub miners: u32,
    pub miner_schedule: ScheduleKind,
    /// Mine after every upload instead of once after all uploads.
    pub mine_per_upload: bool,
    /// Generate synthetic source files when `data_dir` lacks the subset.
    pub synthesize_missing: bool,
    pub train: TrainConfig,
    pub federation: FederationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        FlatConfig::default().into()
    }
}

impl RunConfig {
    pub fn workers(&self) -> usize {
        self.federation.workers
    }

    pub fn schedule(&self) -> MinerSchedule {
        match self.miner_schedule {
            ScheduleKind::RoundRobin => MinerSchedule::RoundRobin,
            ScheduleKind::Random => MinerSchedule::Random {
                seed: crate::digest::derive_seed(self.seed, &[super::SEED_MINERS]),
            },
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        self.train
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.federation
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if !self.rsa_bits.is_multiple_of(2)
            || !(MIN_KEY_BITS..=MAX_KEY_BITS).contains(&self.rsa_bits)
        {
            return bad(format!(
                "rsa_bits must be even and within {MIN_KEY_BITS}..={MAX_KEY_BITS}"
            ));
        }
        if self.difficulty > 64 {
            return bad("difficulty above 64 bits is not practical".into());
        }
        if self.block_capacity == 0 {
            return bad("block_capacity must be positive".into());
        }
        if self.rul_cap == 0 {
            return bad("rul_cap must be positive".into());
        }
        if self.miners == 0 {
            return bad("miners must be at least 1".into());
        }
        Ok(())
    }

    /// Parses a flat TOML document; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, OrchestratorError> {
        let flat: FlatConfig =
            toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let mut config: RunConfig = flat.into();
        if let Some(base) = base {
            for p in [&mut config.data_dir, &mut config.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(p) = config.private_key.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&FlatConfig::from(self.clone())).expect("config serializes")
    }
}

/// On-disk layout: every key at top level.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlatConfig {
    subset: Subset,
    data_dir: PathBuf,
    output_dir: PathBuf,
    seed: u64,
    difficulty: u32,
    block_capacity: usize,
    rsa_bits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    private_key: Option<PathBuf>,
    rul_cap: u32,
    miners: u32,
    miner_schedule: ScheduleKind,
    mine_per_upload: bool,
    synthesize_missing: bool,
    learning_rate: f64,
    epochs: usize,
    epsilon: f64,
    reg_lambda: f64,
    batch_size: usize,
    workers: usize,
    weighting: Weighting,
    rounds_max: usize,
    convergence_tol: f64,
    validation_fraction: f64,
    verify_merged: bool,
}

impl Default for FlatConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FederationConfig::default();
        Self {
            subset: Subset::FD001,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/latest"),
            seed: 42,
            difficulty: DEFAULT_DIFFICULTY,
            block_capacity: DEFAULT_BLOCK_CAPACITY,
            rsa_bits: DEFAULT_KEY_BITS,
            private_key: None,
            rul_cap: DEFAULT_RUL_CAP,
            miners: 3,
            miner_schedule: ScheduleKind::RoundRobin,
            mine_per_upload: false,
            synthesize_missing: false,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            epsilon: t.epsilon,
            reg_lambda: t.reg_lambda,
            batch_size: t.batch_size,
            workers: f.workers,
            weighting: f.weighting,
            rounds_max: f.rounds_max,
            convergence_tol: f.convergence_tol,
            validation_fraction: f.validation_fraction,
            verify_merged: f.verify_merged,
        }
    }
}

impl From<FlatConfig> for RunConfig {
    fn from(f: FlatConfig) -> Self {
        Self {
            subset: f.subset,
            data_dir: f.data_dir,
            output_dir: f.output_dir,
            seed: f.seed,
            difficulty: f.difficulty,
            block_capacity: f.block_capacity,
            rsa_bits: f.rsa_bits,
            private_key: f.private_key,
            rul_cap: f.rul_cap,
            miners: f.miners,
            miner_schedule: f.miner_schedule,
            mine_per_upload: f.mine_per_upload,
            synthesize_missing: f.synthesize_missing,
            train: TrainConfig {
                learning_rate: f.learning_rate,
                epochs: f.epochs,
                epsilon: f.epsilon,
                reg_lambda: f.reg_lambda,
                batch_size: f.batch_size,
                seed: 0,
            },
            federation: FederationConfig {
                workers: f.workers,
                weighting: f.weighting,
                rounds_max: f.rounds_max,
                convergence_tol: f.convergence_tol,
                validation_fraction: f.validation_fraction,
                verify_merged: f.verify_merged,
            },
        }
    }
}

impl From<RunConfig> for FlatConfig {
    fn from(c: RunConfig) -> Self {
        Self {
            subset: c.subset,
            data_dir: c.data_dir,
            output_dir: c.output_dir,
            seed: c.seed,
            difficulty: c.difficulty,
            block_capacity: c.block_capacity,
            rsa_bits: c.rsa_bits,
            private_key: c.private_key,
            rul_cap: c.rul_cap,
            miners: c.miners,
            miner_schedule: c.miner_schedule,
            mine_per_upload: c.mine_per_upload,
            synthesize_missing: c.synthesize_missing,
            learning_rate: c.train.learning_rate,
            epochs: c.train.epochs,
            epsilon: c.train.epsilon,
            reg_lambda: c.train.reg_lambda,
            batch_size: c.train.batch_size,
            workers: c.federation.workers,
            weighting: c.federation.weighting,
            rounds_max: c.federation.rounds_max,
            convergence_tol: c.federation.convergence_tol,
            validation_fraction: c.federation.validation_fraction,
            verify_merged: c.federation.verify_merged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.workers(), 4);
        assert_eq!(c.federation.rounds_max, 20);
        assert_eq!(c.difficulty, 12);
        assert_eq!(c.rsa_bits, 1024);
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let text = "subset = \"FD003\"\nworkers = 2\nconvergence_tol = inf\nweighting = \"uniform\"\ndata_dir = \"cmapss\"\n";
        let c = RunConfig::from_toml(text, Some(Path::new("/base"))).unwrap();
        assert_eq!(c.subset, Subset::FD003);
        assert_eq!(c.workers(), 2);
        assert!(c.federation.convergence_tol.is_infinite());
        assert_eq!(c.federation.weighting, Weighting::Uniform);
        assert_eq!(c.data_dir, PathBuf::from("/base/cmapss"));
        let again = RunConfig::from_toml(&c.to_toml(), None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        assert!(matches!(
            RunConfig::from_toml("workerz = 3", None),
            Err(OrchestratorError::Config(_))
        ));
        assert!(RunConfig::from_toml("workers = 0", None).is_err());
        assert!(RunConfig::from_toml("rsa_bits = 1000.5", None).is_err());
        assert!(RunConfig::from_toml("rsa_bits = 256", None).is_err());
        assert!(RunConfig::from_toml("weighting = \"median\"", None).is_err());
    }
}
