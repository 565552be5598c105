use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fedchain::blobstore::{BlobStore, ContentHash};
use fedchain::contract::Address;
use fedchain::crypto;
use fedchain::dataset::{self, synth, FeatureMap, NormStats, Subset, DEFAULT_RUL_CAP};
use fedchain::ledger::{event_counts, ChainExport};
use fedchain::model::ModelWeights;
use fedchain::orchestrator::{self, report, OrchestratorError, RunConfig};

#[derive(Parser)]
#[command(
    name = "fedchain",
    version,
    about = "Blockchain-anchored federated RUL prediction simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, ingest or describe CMAPSS data.
    #[command(subcommand)]
    Data(DataCmd),
    /// Operator key management.
    #[command(subcommand)]
    Keys(KeysCmd),
    /// Run a full federation from a config file.
    Run(RunArgs),
    /// Inspect or validate an exported chain.
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Query contract state from an exported chain.
    #[command(subcommand)]
    Contract(ContractCmd),
    /// Evaluate stored weights.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Content-addressed blob store.
    #[command(subcommand)]
    Blob(BlobCmd),
    /// Summarize one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long, default_value = "FD001")]
    subset: Subset,
    #[arg(long, default_value = "data")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write synthetic CMAPSS-format files.
    Synth {
        /// Subset name, or "all".
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long, default_value = "data")]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate, label and normalize a subset into a JSON cache.
    Ingest {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RUL_CAP)]
        rul_cap: u32,
    },
    /// Print per-feature moments of the training split.
    Stats {
        #[command(flatten)]
        source: SourceArgs,
    },
}

#[derive(Subcommand)]
enum KeysCmd {
    /// Write `<out>.pub` and `<out>.key`.
    Generate {
        #[arg(long, default_value_t = crypto::DEFAULT_KEY_BITS)]
        bits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "operator")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Mine a block after every upload.
    #[arg(long)]
    mine_per_upload: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ChainCmd {
    Inspect {
        #[arg(long, default_value = "chain.json")]
        file: PathBuf,
        #[arg(long)]
        height: Option<u64>,
    },
    Validate {
        #[arg(long, default_value = "chain.json")]
        file: PathBuf,
    },
}

#[derive(Args)]
struct AddressArgs {
    #[arg(long, default_value = "chain.json")]
    chain: PathBuf,
    /// Account address (0x...).
    #[arg(long, conflicts_with = "worker")]
    address: Option<Address>,
    /// Worker id, resolved to its address.
    #[arg(long)]
    worker: Option<usize>,
}

impl AddressArgs {
    fn resolve(&self) -> anyhow::Result<Address> {
        match (self.address, self.worker) {
            (Some(a), _) => Ok(a),
            (None, Some(id)) => Ok(Address::worker(id)),
            (None, None) => Err(Usage("one of --address or --worker is required".into()).into()),
        }
    }
}

#[derive(Subcommand)]
enum ContractCmd {
    Balance(AddressArgs),
    Uploads {
        #[command(flatten)]
        who: AddressArgs,
        #[arg(long)]
        index: Option<u64>,
    },
    History {
        #[arg(long, default_value = "chain.json")]
        chain: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// RMSE on the test split plus per-unit prediction CSVs.
    Eval {
        /// Content hash of the weight blob.
        #[arg(long)]
        weights: ContentHash,
        #[arg(long, default_value = "blobs")]
        blobs: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = DEFAULT_RUL_CAP)]
        rul_cap: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BlobCmd {
    Put {
        #[arg(long, default_value = "blobs")]
        dir: PathBuf,
        file: PathBuf,
    },
    Get {
        #[arg(long, default_value = "blobs")]
        dir: PathBuf,
        hash: ContentHash,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Data-layer failure (exit 2).
#[derive(Debug)]
struct DataFailure(String);

impl std::fmt::Display for DataFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataFailure {}

fn data_err(e: impl std::fmt::Display) -> anyhow::Error {
    DataFailure(e.to_string()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<OrchestratorError>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if err.downcast_ref::<DataFailure>().is_some()
        || err.downcast_ref::<dataset::DataError>().is_some()
    {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Data(cmd) => data(cmd),
        Command::Keys(KeysCmd::Generate { bits, seed, out }) => {
            let keys = crypto::generate_keypair(bits, seed).map_err(|e| Usage(e.to_string()))?;
            let public = out.with_extension("pub");
            let private = out.with_extension("key");
            fs::write(&public, keys.public.to_string())
                .with_context(|| public.display().to_string())?;
            fs::write(&private, keys.private.to_string())
                .with_context(|| private.display().to_string())?;
            println!(
                "wrote {} and {} ({bits}-bit)",
                public.display(),
                private.display()
            );
            Ok(())
        }
        Command::Run(args) => run(args),
        Command::Chain(cmd) => chain(cmd),
        Command::Contract(cmd) => contract(cmd),
        Command::Model(ModelCmd::Eval {
            weights,
            blobs,
            source,
            rul_cap,
            out,
        }) => eval(weights, &blobs, &source, rul_cap, out),
        Command::Blob(cmd) => blob(cmd),
        Command::Report { runs } => {
            print!("{}", report(&runs)?);
            Ok(())
        }
    }
}

fn load_source(source: &SourceArgs) -> anyhow::Result<(dataset::Dataset, dataset::Dataset)> {
    dataset::load_subset(&source.dir, source.subset, &FeatureMap::default()).map_err(data_err)
}

fn data(cmd: DataCmd) -> anyhow::Result<()> {
    match cmd {
        DataCmd::Synth { subset, dir, seed } => {
            let subsets = if subset.eq_ignore_ascii_case("all") {
                Subset::ALL.to_vec()
            } else {
                vec![subset.parse::<Subset>().map_err(|e| Usage(e.to_string()))?]
            };
            for s in subsets {
                synth::write_subset(&dir, s, seed).map_err(data_err)?;
                println!("wrote synthetic {s} to {}", dir.display());
            }
            Ok(())
        }
        DataCmd::Ingest {
            source,
            out,
            rul_cap,
        } => {
            let (train, test) = load_source(&source)?;
            let labeled = dataset::compute_rul_labels(&train, rul_cap);
            let stats = NormStats::fit(&labeled);
            let cache = serde_json::json!({
                "subset": source.subset,
                "rul_cap": rul_cap,
                "train": dataset::normalize(&labeled, &stats),
                "test": dataset::normalize(&test, &stats),
            });
            fs::write(&out, serde_json::to_string(&cache)?)
                .with_context(|| out.display().to_string())?;
            println!(
                "{}: {} train units ({} rows), {} test units ({} rows) -> {}",
                source.subset,
                train.units.len(),
                train.row_count(),
                test.units.len(),
                test.row_count(),
                out.display()
            );
            Ok(())
        }
        DataCmd::Stats { source } => {
            let (train, test) = load_source(&source)?;
            let stats = NormStats::fit(&train);
            println!(
                "{}: train {} units / {} rows, test {} units / {} rows",
                source.subset,
                train.units.len(),
                train.row_count(),
                test.units.len(),
                test.row_count()
            );
            println!(
                "{:>7} {:>6} {:>14} {:>12}",
                "feature", "column", "mean", "std"
            );
            for (k, col) in dataset::DEFAULT_FEATURE_COLUMNS.iter().enumerate() {
                println!(
                    "{:>7} {:>6} {:>14.4} {:>12.6}",
                    k + 1,
                    col,
                    stats.mean[k],
                    stats.std[k]
                );
            }
            Ok(())
        }
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if args.mine_per_upload {
        config.mine_per_upload = true;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        config.federation.rounds_max = rounds;
    }
    if let Some(out) = args.output {
        config.output_dir = out;
    }
    let started = std::time::Instant::now();
    let outcome = orchestrator::run(config)?;
    for r in &outcome.records {
        println!(
            "round {:>3}: accepted {}/{}  validation {:>8.4}  test {:>8.4}{}",
            r.round,
            r.accepted(),
            r.workers.len(),
            r.global_validation_rmse,
            r.global_test_rmse,
            if r.carried_forward {
                "  (carried forward)"
            } else {
                ""
            }
        );
    }
    print!("{}", outcome.summary.render());
    println!("elapsed_seconds: {:.1}", started.elapsed().as_secs_f64());
    println!("outputs: {}", outcome.output_dir.display());
    Ok(())
}

fn read_export(path: &Path) -> anyhow::Result<ChainExport> {
    let text =
        fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    ChainExport::from_json(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn chain(cmd: ChainCmd) -> anyhow::Result<()> {
    match cmd {
        ChainCmd::Inspect { file, height } => {
            let export = read_export(&file)?;
            match height {
                Some(h) => {
                    let block = export.blocks.get(h as usize).ok_or_else(|| {
                        Usage(format!(
                            "no block at height {h} (tip is {})",
                            export.blocks.len() - 1
                        ))
                    })?;
                    print!("{block}");
                }
                None => {
                    for block in &export.blocks {
                        print!("{block}");
                    }
                }
            }
            Ok(())
        }
        ChainCmd::Validate { file } => {
            let export = read_export(&file)?;
            let report = export.validate();
            match report.failure {
                None => {
                    let (uploads, mints, publishes) = event_counts(&report.replayed_state);
                    println!(
                        "valid: {} blocks, {} uploads, {} rewards, {} publishes",
                        report.blocks_checked, uploads, mints, publishes
                    );
                    Ok(())
                }
                Some(f) => Err(data_err(format!("invalid chain: {f}"))),
            }
        }
    }
}

fn contract(cmd: ContractCmd) -> anyhow::Result<()> {
    match cmd {
        ContractCmd::Balance(who) => {
            let state = read_export(&who.chain)?.final_state;
            let address = who.resolve()?;
            println!("{address}: {}", state.balance_of(&address));
            Ok(())
        }
        ContractCmd::Uploads { who, index } => {
            let state = read_export(&who.chain)?.final_state;
            let address = who.resolve()?;
            match index {
                Some(i) => println!(
                    "{i}: {}",
                    state.get_model_hash(&address, i).map_err(data_err)?
                ),
                None => {
                    println!("{address}: {} uploads", state.upload_count(&address));
                    if let Some(entries) = state.model_hashes.get(&address) {
                        for (i, link) in entries {
                            println!("{i}: {link}");
                        }
                    }
                }
            }
            Ok(())
        }
        ContractCmd::History { chain } => {
            let state = read_export(&chain)?.final_state;
            for (i, hash) in state.global_model_history.iter().enumerate() {
                println!("{:>4} {hash}", i + 1);
            }
            Ok(())
        }
    }
}

fn eval(
    weights: ContentHash,
    blobs: &Path,
    source: &SourceArgs,
    rul_cap: u32,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let store = BlobStore::load(blobs).map_err(data_err)?;
    let bytes = store.get(&weights).map_err(data_err)?;
    let model = ModelWeights::from_bytes(&bytes).map_err(data_err)?;
    let (train, test) = load_source(source)?;
    let stats = NormStats::fit(&dataset::compute_rul_labels(&train, rul_cap));
    let test = dataset::normalize(&test, &stats);
    let cap = f64::from(rul_cap);
    let rmse = orchestrator::last_cycle_rmse(&model, &test, cap).map_err(data_err)?;
    println!(
        "{} test RMSE (last cycle per unit): {rmse:.4}",
        source.subset
    );
    if let Some(dir) = out {
        orchestrator::report::write_predictions(
            &dir,
            &orchestrator::prediction_rows(&model, &test, cap),
        )?;
        println!("predictions: {}", dir.display());
    }
    Ok(())
}

fn blob(cmd: BlobCmd) -> anyhow::Result<()> {
    match cmd {
        BlobCmd::Put { dir, file } => {
            let store = if dir.exists() {
                BlobStore::load(&dir).map_err(data_err)?
            } else {
                BlobStore::new()
            };
            let payload =
                fs::read(&file).map_err(|e| data_err(format!("{}: {e}", file.display())))?;
            let hash = store.put(&payload).map_err(data_err)?;
            store.dump(&dir).map_err(data_err)?;
            println!("{hash}");
            Ok(())
        }
        BlobCmd::Get { dir, hash, out } => {
            let store = BlobStore::load(&dir).map_err(data_err)?;
            let payload = store.get(&hash).map_err(data_err)?;
            fs::write(&out, payload).with_context(|| out.display().to_string())?;
            Ok(())
        }
    }
}
