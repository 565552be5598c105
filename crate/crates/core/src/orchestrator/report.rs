//! Run summaries, prediction CSVs and the multi-run report table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{OrchestratorError, CHAIN_FILE, PREDICTIONS_DIR, SUMMARY_FILE};
use crate::blobstore::ContentHash;
use crate::contract::Address;
use crate::dataset::Subset;
use crate::ledger::ChainExport;
use crate::model::rmse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub unit: u32,
    pub cycle: u32,
    pub actual_rul: f64,
    pub predicted_rul: f64,
}

fn csv_err(context: String) -> impl FnOnce(csv::Error) -> OrchestratorError {
    move |e| OrchestratorError::Output {
        context,
        message: e.to_string(),
    }
}

pub fn prediction_file(unit: u32) -> String {
    format!("unit_{unit}.csv")
}

/// Writes one CSV per unit into `dir`, replacing any previous files.
pub fn write_predictions(dir: &Path, rows: &[PredictionRow]) -> Result<(), OrchestratorError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| OrchestratorError::Output {
            context: format!("clearing {}", dir.display()),
            message: e.to_string(),
        })?;
    }
    fs::create_dir_all(dir).map_err(|e| OrchestratorError::Output {
        context: format!("creating {}", dir.display()),
        message: e.to_string(),
    })?;
    let mut by_unit: BTreeMap<u32, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_unit.entry(r.unit).or_default().push(r);
    }
    for (unit, rows) in by_unit {
        let path = dir.join(prediction_file(unit));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(path.display().to_string()))?;
        for r in rows {
            w.serialize(r)
                .map_err(csv_err(path.display().to_string()))?;
        }
        w.flush().map_err(|e| OrchestratorError::Output {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Reads every `unit_*.csv` in `dir`, ordered by unit then cycle.
pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRow>, OrchestratorError> {
    let entries = fs::read_dir(dir)
        .map_err(|_| OrchestratorError::MissingArtifact(dir.display().to_string()))?;
    let mut rows = Vec::new();
    for entry in entries.flatten() {
        let path = entry.path();
        let is_unit = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("unit_") && n.ends_with(".csv"));
        if !is_unit {
            continue;
        }
        let mut reader =
            csv::Reader::from_path(&path).map_err(csv_err(path.display().to_string()))?;
        for row in reader.deserialize() {
            rows.push(row.map_err(csv_err(path.display().to_string()))?);
        }
    }
    rows.sort_by_key(|r: &PredictionRow| (r.unit, r.cycle));
    Ok(rows)
}

/// RMSE over the last recorded cycle of each unit.
pub fn rmse_from_predictions(rows: &[PredictionRow]) -> Option<f64> {
    let mut last: BTreeMap<u32, &PredictionRow> = BTreeMap::new();
    for r in rows {
        let slot = last.entry(r.unit).or_insert(r);
        if r.cycle > slot.cycle {
            *slot = r;
        }
    }
    let (pred, actual): (Vec<f64>, Vec<f64>) = last
        .values()
        .map(|r| (r.predicted_rul, r.actual_rul))
        .unzip();
    rmse(&pred, &actual).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub subset: Subset,
    pub workers: usize,
    pub seed: u64,
    pub rounds_completed: usize,
    pub stop_reason: String,
    pub error: Option<String>,
    pub initial_test_rmse: f64,
    pub round1_test_rmse: Option<f64>,
    pub final_test_rmse: f64,
    pub final_validation_rmse: f64,
    pub accepted_updates: usize,
    pub tokens_minted: u64,
    pub blocks: usize,
    pub global_hash: ContentHash,
    /// `(worker_id, balance)`.
    pub balances: Vec<(usize, u64)>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        line("subset", self.subset.to_string());
        line("workers", self.workers.to_string());
        line("seed", self.seed.to_string());
        line("rounds_completed", self.rounds_completed.to_string());
        line("stop_reason", self.stop_reason.clone());
        if let Some(e) = &self.error {
            line("error", e.clone());
        }
        line(
            "initial_test_rmse",
            format!("{:.4}", self.initial_test_rmse),
        );
        if let Some(r) = self.round1_test_rmse {
            line("round1_test_rmse", format!("{r:.4}"));
        }
        line("final_test_rmse", format!("{:.4}", self.final_test_rmse));
        line(
            "final_validation_rmse",
            format!("{:.4}", self.final_validation_rmse),
        );
        line("accepted_updates", self.accepted_updates.to_string());
        line("tokens_minted", self.tokens_minted.to_string());
        line("blocks", self.blocks.to_string());
        line("global_hash", self.global_hash.render());
        for (id, balance) in &self.balances {
            line(
                &format!("balance.worker{id}"),
                format!("{balance} {}", Address::worker(*id)),
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once(": ")).collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| format!("summary lacks {k}"))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad {k}: {v:?}"))
        }
        let mut balances = Vec::new();
        for (k, v) in &map {
            if let Some(id) = k.strip_prefix("balance.worker") {
                let amount = v.split_whitespace().next().unwrap_or("");
                balances.push((num(k, id)?, num(k, amount)?));
            }
        }
        balances.sort_unstable();
        Ok(Self {
            subset: get("subset")?
                .parse()
                .map_err(|e: crate::dataset::DataError| e.to_string())?,
            workers: num("workers", get("workers")?)?,
            seed: num("seed", get("seed")?)?,
            rounds_completed: num("rounds_completed", get("rounds_completed")?)?,
            stop_reason: get("stop_reason")?.to_string(),
            error: map.get("error").map(|s| s.to_string()),
            initial_test_rmse: num("initial_test_rmse", get("initial_test_rmse")?)?,
            round1_test_rmse: map
                .get("round1_test_rmse")
                .map(|v| num("round1_test_rmse", v))
                .transpose()?,
            final_test_rmse: num("final_test_rmse", get("final_test_rmse")?)?,
            final_validation_rmse: num("final_validation_rmse", get("final_validation_rmse")?)?,
            accepted_updates: num("accepted_updates", get("accepted_updates")?)?,
            tokens_minted: num("tokens_minted", get("tokens_minted")?)?,
            blocks: num("blocks", get("blocks")?)?,
            global_hash: get("global_hash")?
                .parse()
                .map_err(|e: crate::blobstore::BlobError| e.to_string())?,
            balances,
        })
    }
}

/// Everything `report` reads back from one run directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub predictions: Vec<PredictionRow>,
    pub chain: ChainExport,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self, OrchestratorError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|_| {
                OrchestratorError::MissingArtifact(dir.join(name).display().to_string())
            })
        };
        let summary =
            RunSummary::parse(&read(SUMMARY_FILE)?).map_err(|e| OrchestratorError::Output {
                context: dir.join(SUMMARY_FILE).display().to_string(),
                message: e,
            })?;
        let chain =
            ChainExport::from_json(&read(CHAIN_FILE)?).map_err(|e| OrchestratorError::Output {
                context: dir.join(CHAIN_FILE).display().to_string(),
                message: e.to_string(),
            })?;
        let predictions = read_predictions(&dir.join(PREDICTIONS_DIR))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            summary,
            predictions,
            chain,
        })
    }

    pub fn recomputed_rmse(&self) -> Option<f64> {
        rmse_from_predictions(&self.predictions)
    }

    /// Worker balances according to the exported final contract state.
    pub fn chain_balances(&self) -> Vec<(usize, u64)> {
        (1..=self.summary.workers)
            .map(|id| (id, self.chain.final_state.balance_of(&Address::worker(id))))
            .collect()
    }
}

/// Renders a table over `dirs`: per-run RMSE recomputed from the prediction
/// CSVs, token balances checked against the chain export, and a per-subset
/// mean RMSE.
pub fn report(dirs: &[PathBuf]) -> Result<String, OrchestratorError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<6} {:>3} {:>6} {:>10} {:>10} {:>7} {:>7} {:>7}",
        "run", "subset", "K", "rounds", "round1", "final", "tokens", "blocks", "ledger"
    );
    let mut per_subset: BTreeMap<Subset, Vec<f64>> = BTreeMap::new();
    for dir in dirs {
        let a = RunArtifacts::load(dir)?;
        let final_rmse = a.recomputed_rmse().unwrap_or(f64::NAN);
        let consistent = a.chain_balances() == a.summary.balances
            && a.chain.final_state.total_minted == a.summary.tokens_minted;
        per_subset
            .entry(a.summary.subset)
            .or_default()
            .push(final_rmse);
        let name = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let _ = writeln!(
            out,
            "{:<28} {:<6} {:>3} {:>6} {:>10} {:>10.4} {:>7} {:>7} {:>7}",
            name,
            a.summary.subset,
            a.summary.workers,
            a.summary.rounds_completed,
            a.summary
                .round1_test_rmse
                .map_or("-".to_string(), |r| format!("{r:.4}")),
            final_rmse,
            a.summary.tokens_minted,
            a.chain.blocks.len(),
            if consistent { "ok" } else { "MISMATCH" },
        );
        for (id, balance) in a.chain_balances() {
            let _ = writeln!(
                out,
                "    worker {id} {}: {balance} tokens",
                Address::worker(id)
            );
        }
    }
    let _ = writeln!(out, "\n{:<6} {:>5} {:>10}", "subset", "runs", "mean_rmse");
    for (subset, values) in per_subset {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let _ = writeln!(out, "{:<6} {:>5} {:>10.4}", subset, values.len(), mean);
    }
    Ok(out)
}
