//! Model-hash registry and token ledger contract.
//!
//! Mirrors a small Solidity contract: each sender's uploads live at indices
//! `1, 2, 3, ...` (the next index is always the current count plus one), the
//! zero address may not write, reads are unguarded. On top of that registry sit
//! a token balance table, where transfers out of the treasury mint new supply,
//! and an append-only history of published global models. State changes only
//! through the `apply_*` methods, which either succeed and emit exactly one
//! event or fail and leave the state untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::blobstore::ContentHash;
use crate::digest::sha256;

pub const ADDRESS_LEN: usize = 20;

/// Account identifier, rendered as `0x` plus 40 hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub const ZERO: Address = Address([0; ADDRESS_LEN]);

    /// Deterministic address derived from a human label.
    pub fn from_label(label: &str) -> Self {
        let digest = sha256(label.as_bytes());
        let mut out = [0u8; ADDRESS_LEN];
        out.copy_from_slice(&digest[..ADDRESS_LEN]);
        Self(out)
    }

    pub fn treasury() -> Self {
        Self::from_label("fedchain/treasury")
    }

    pub fn monitor() -> Self {
        Self::from_label("fedchain/monitor")
    }

    pub fn worker(worker_id: usize) -> Self {
        Self::from_label(&format!("fedchain/worker/{worker_id}"))
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({self})")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed address {0:?}")]
pub struct AddressParseError(String);

impl FromStr for Address {
    type Err = AddressParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s
            .strip_prefix("0x")
            .ok_or_else(|| AddressParseError(s.to_string()))?;
        let mut out = [0u8; ADDRESS_LEN];
        hex::decode_to_slice(body, &mut out).map_err(|_| AddressParseError(s.to_string()))?;
        Ok(Self(out))
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContractError {
    #[error("Invalid address")]
    ZeroAddress,
    #[error("empty model hash payload")]
    EmptyPayload,
    #[error("no model hash for {address} at index {index}")]
    NotFound { address: Address, index: u64 },
    #[error("insufficient balance: {address} holds {balance}, needs {amount}")]
    InsufficientBalance {
        address: Address,
        balance: u64,
        amount: u64,
    },
    #[error("unauthorized mint from {0}")]
    UnauthorizedMint(Address),
    #[error("unauthorized publisher {0}")]
    UnauthorizedPublisher(Address),
    #[error("token supply overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum Event {
    ModelUploaded {
        sender: Address,
        index: u64,
        height: u64,
    },
    RewardMinted {
        to: Address,
        amount: u64,
        height: u64,
    },
    TokensTransferred {
        from: Address,
        to: Address,
        amount: u64,
        height: u64,
    },
    GlobalPublished {
        hash: ContentHash,
        round: u64,
        height: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractState {
    pub monitor: Address,
    pub treasury: Address,
    /// `address -> index -> stored link`, indices starting at 1.
    pub model_hashes: BTreeMap<Address, BTreeMap<u64, String>>,
    pub upload_counts: BTreeMap<Address, u64>,
    pub balances: BTreeMap<Address, u64>,
    pub total_minted: u64,
    pub global_model_history: Vec<ContentHash>,
    pub event_log: Vec<Event>,
}

impl Default for ContractState {
    fn default() -> Self {
        Self::new(Address::monitor(), Address::treasury())
    }
}

impl ContractState {
    pub fn new(monitor: Address, treasury: Address) -> Self {
        Self {
            monitor,
            treasury,
            model_hashes: BTreeMap::new(),
            upload_counts: BTreeMap::new(),
            balances: BTreeMap::new(),
            total_minted: 0,
            global_model_history: Vec::new(),
            event_log: Vec::new(),
        }
    }

    /// Stores `link` at the sender's next index.
    fn store_link(&mut self, sender: Address, link: String) -> u64 {
        let count = self.upload_counts.entry(sender).or_insert(0);
        let index = *count + 1;
        *count = index;
        self.model_hashes
            .entry(sender)
            .or_default()
            .insert(index, link);
        index
    }

    pub fn apply_update_model_hash(
        &mut self,
        sender: Address,
        payload: &[u8],
        height: u64,
    ) -> Result<Event, ContractError> {
        if sender.is_zero() {
            return Err(ContractError::ZeroAddress);
        }
        if payload.is_empty() {
            return Err(ContractError::EmptyPayload);
        }
        let index = self.store_link(sender, hex::encode(payload));
        Ok(self.emit(Event::ModelUploaded {
            sender,
            index,
            height,
        }))
    }

    pub fn get_model_hash(&self, address: &Address, index: u64) -> Result<&str, ContractError> {
        self.model_hashes
            .get(address)
            .and_then(|m| m.get(&index))
            .map(String::as_str)
            .ok_or(ContractError::NotFound {
                address: *address,
                index,
            })
    }

    /// Latest upload of `address`, if any.
    pub fn latest_model_hash(&self, address: &Address) -> Option<(u64, &str)> {
        self.model_hashes
            .get(address)
            .and_then(|m| m.last_key_value())
            .map(|(i, s)| (*i, s.as_str()))
    }

    /// Moves `amount` tokens. Transfers out of the treasury mint new supply;
    /// the zero address cannot originate a transfer.
    pub fn apply_token_transfer(
        &mut self,
        from: Address,
        to: Address,
        amount: u64,
        height: u64,
    ) -> Result<Option<Event>, ContractError> {
        if from.is_zero() {
            return Err(ContractError::UnauthorizedMint(from));
        }
        if to.is_zero() {
            return Err(ContractError::ZeroAddress);
        }
        if from == self.treasury {
            if amount == 0 {
                return Ok(None);
            }
            let supply = self
                .total_minted
                .checked_add(amount)
                .ok_or(ContractError::Overflow)?;
            self.total_minted = supply;
            *self.balances.entry(to).or_insert(0) += amount;
            return Ok(Some(self.emit(Event::RewardMinted { to, amount, height })));
        }
        let balance = self.balance_of(&from);
        if balance < amount {
            return Err(ContractError::InsufficientBalance {
                address: from,
                balance,
                amount,
            });
        }
        if amount == 0 || from == to {
            return Ok(None);
        }
        self.balances.insert(from, balance - amount);
        *self.balances.entry(to).or_insert(0) += amount;
        Ok(Some(self.emit(Event::TokensTransferred {
            from,
            to,
            amount,
            height,
        })))
    }

    pub fn apply_publish_global(
        &mut self,
        sender: Address,
        hash: ContentHash,
        height: u64,
    ) -> Result<Event, ContractError> {
        if sender != self.monitor {
            return Err(ContractError::UnauthorizedPublisher(sender));
        }
        self.store_link(sender, hash.render());
        self.global_model_history.push(hash);
        let round = self.global_model_history.len() as u64;
        Ok(self.emit(Event::GlobalPublished {
            hash,
            round,
            height,
        }))
    }

    pub fn balance_of(&self, address: &Address) -> u64 {
        self.balances.get(address).copied().unwrap_or(0)
    }

    pub fn upload_count(&self, address: &Address) -> u64 {
        self.upload_counts.get(address).copied().unwrap_or(0)
    }

    pub fn total_balance(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn count_events(&self, pred: impl Fn(&Event) -> bool) -> usize {
        self.event_log.iter().filter(|e| pred(e)).count()
    }

    /// Checks the registry and token invariants, returning the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (address, count) in &self.upload_counts {
            let indices: Vec<u64> = self
                .model_hashes
                .get(address)
                .map(|m| m.keys().copied().collect())
                .unwrap_or_default();
            let expected: Vec<u64> = (1..=*count).collect();
            if indices != expected {
                return Err(format!(
                    "{address}: indices {indices:?} do not form 1..={count}"
                ));
            }
        }
        if self
            .model_hashes
            .keys()
            .any(|a| !self.upload_counts.contains_key(a))
        {
            return Err("model hashes stored without an upload count".into());
        }
        if self.total_balance() != self.total_minted {
            return Err(format!(
                "balances sum to {} but {} tokens were minted",
                self.total_balance(),
                self.total_minted
            ));
        }
        Ok(())
    }

    fn emit(&mut self, event: Event) -> Event {
        self.event_log.push(event.clone());
        event
    }
}
