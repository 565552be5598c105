//! Blockchain-anchored federated learning for turbofan remaining-useful-life
//! prognostics.
//!
//! Workers fit linear ε-insensitive regressors on private CMAPSS shards, store
//! their weights in a content-addressed blob store, and anchor RSA-encrypted
//! hash links on a proof-of-work chain through a small contract state machine.
//! A monitor verifies every update against a held-out validation set, mints a
//! token for each accepted one, and publishes the FedAvg aggregate back to the
//! workers. Everything runs in one process and is fully determined by a seed.

pub mod blobstore;
pub mod contract;
pub mod crypto;
pub mod dataset;
pub mod digest;
pub mod federation;
pub mod ledger;
pub mod model;
pub mod orchestrator;

pub use blobstore::{BlobStore, ContentHash};
pub use contract::{Address, ContractState};
pub use crypto::{Ciphertext, KeyPair, PrivateKey, PublicKey};
pub use ledger::{Block, Chain, Transaction};
pub use model::{ModelWeights, TrainConfig};
