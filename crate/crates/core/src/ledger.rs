//! Simulated proof-of-work chain.
//!
//! Transactions queue in a FIFO mempool. Mining drains up to `capacity` of
//! them into a block, searches nonces upward from zero until the header hash
//! has `difficulty` leading zero bits, appends the block and applies its
//! transactions to the contract state. Timestamps are a logical tick, so the
//! same inputs always produce the same block. A transaction that violates a
//! contract guard is still committed but marked failed and changes nothing.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::ContentHash;
use crate::contract::{Address, ContractError, ContractState, Event};
use crate::digest::{hex_bytes, sha256_parts, Hash32};

pub const DEFAULT_DIFFICULTY: u32 = 12;
pub const DEFAULT_BLOCK_CAPACITY: usize = 64;
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("duplicate transaction {0}")]
    DuplicateTransaction(Hash32),
    #[error("bad nonce for {sender}: expected {expected}, got {got}")]
    BadNonce {
        sender: Address,
        expected: u64,
        got: u64,
    },
    #[error("transaction id {0} does not match its contents")]
    MalformedTransaction(Hash32),
    #[error("mempool is empty and empty blocks are disabled")]
    EmptyMempool,
    #[error("no nonce below {budget} meets difficulty {difficulty}")]
    NonceBudgetExhausted { budget: u64, difficulty: u32 },
    #[error("difficulty {0} exceeds 256 bits")]
    BadDifficulty(u32),
    #[error("chain import failed validation: {0}")]
    InvalidImport(ValidationFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MinerId(pub u32);

impl fmt::Display for MinerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TxPayload {
    UpdateModelHash {
        #[serde(with = "hex_bytes")]
        ciphertext: Vec<u8>,
    },
    PublishGlobalModel {
        hash: ContentHash,
    },
    TokenTransfer {
        recipient: Address,
        amount: u64,
    },
}

impl TxPayload {
    fn tag(&self) -> u8 {
        match self {
            TxPayload::UpdateModelHash { .. } => 1,
            TxPayload::PublishGlobalModel { .. } => 2,
            TxPayload::TokenTransfer { .. } => 3,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TxPayload::UpdateModelHash { .. } => "UpdateModelHash",
            TxPayload::PublishGlobalModel { .. } => "PublishGlobalModel",
            TxPayload::TokenTransfer { .. } => "TokenTransfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: Address,
    pub nonce: u64,
    pub payload: TxPayload,
    pub tx_id: Hash32,
}

impl Transaction {
    pub fn new(sender: Address, nonce: u64, payload: TxPayload) -> Self {
        let mut tx = Self {
            sender,
            nonce,
            payload,
            tx_id: Hash32::ZERO,
        };
        tx.tx_id = Hash32::of(&tx.canonical_bytes());
        tx
    }

    /// `tag | sender | nonce (LE) | payload`, with variable-length payloads
    /// prefixed by a little-endian u32 length.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(self.payload.tag());
        out.extend_from_slice(&self.sender.0);
        out.extend_from_slice(&self.nonce.to_le_bytes());
        match &self.payload {
            TxPayload::UpdateModelHash { ciphertext } => {
                out.extend_from_slice(&(ciphertext.len() as u32).to_le_bytes());
                out.extend_from_slice(ciphertext);
            }
            TxPayload::PublishGlobalModel { hash } => out.extend_from_slice(hash.as_bytes()),
            TxPayload::TokenTransfer { recipient, amount } => {
                out.extend_from_slice(&recipient.0);
                out.extend_from_slice(&amount.to_le_bytes());
            }
        }
        out
    }

    pub fn id_is_valid(&self) -> bool {
        Hash32::of(&self.canonical_bytes()) == self.tx_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Hash32,
    pub tx_root: Hash32,
    pub miner: MinerId,
    pub timestamp: u64,
    pub difficulty: u32,
    pub nonce: u64,
}

impl BlockHeader {
    /// Header bytes without the trailing nonce.
    fn prefix_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.prev_hash.0);
        out.extend_from_slice(&self.tx_root.0);
        out.extend_from_slice(&self.miner.0.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.extend_from_slice(&self.difficulty.to_le_bytes());
        out
    }

    pub fn hash(&self) -> Hash32 {
        Hash32(sha256_parts([
            self.prefix_bytes().as_slice(),
            &self.nonce.to_le_bytes(),
        ]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub hash: Hash32,
    pub transactions: Vec<Transaction>,
}

/// Digest over the ordered transaction ids.
pub fn tx_root(transactions: &[Transaction]) -> Hash32 {
    Hash32(sha256_parts(transactions.iter().map(|t| &t.tx_id.0[..])))
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "block {} {}", h.height, self.hash)?;
        writeln!(f, "  prev       {}", h.prev_hash)?;
        writeln!(f, "  tx_root    {}", h.tx_root)?;
        writeln!(f, "  miner      {}", h.miner)?;
        writeln!(f, "  timestamp  {}", h.timestamp)?;
        writeln!(f, "  difficulty {}", h.difficulty)?;
        writeln!(f, "  nonce      {}", h.nonce)?;
        writeln!(f, "  txs        {}", self.transactions.len())?;
        for tx in &self.transactions {
            let detail = match &tx.payload {
                TxPayload::UpdateModelHash { ciphertext } => {
                    format!("{} ciphertext bytes", ciphertext.len())
                }
                TxPayload::PublishGlobalModel { hash } => hash.render(),
                TxPayload::TokenTransfer { recipient, amount } => {
                    format!("{amount} -> {recipient}")
                }
            };
            writeln!(
                f,
                "    {} {:<18} from {} nonce {} ({detail})",
                &tx.tx_id.to_string()[..16],
                tx.payload.kind_name(),
                tx.sender,
                tx.nonce
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Applied,
    Failed(ContractError),
}

/// Applies one committed transaction to the contract.
pub fn apply_transaction(state: &mut ContractState, tx: &Transaction, height: u64) -> TxStatus {
    let result = match &tx.payload {
        TxPayload::UpdateModelHash { ciphertext } => state
            .apply_update_model_hash(tx.sender, ciphertext, height)
            .map(|_| ()),
        TxPayload::PublishGlobalModel { hash } => state
            .apply_publish_global(tx.sender, *hash, height)
            .map(|_| ()),
        TxPayload::TokenTransfer { recipient, amount } => state
            .apply_token_transfer(tx.sender, *recipient, *amount, height)
            .map(|_| ()),
    };
    match result {
        Ok(()) => TxStatus::Applied,
        Err(e) => TxStatus::Failed(e),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub capacity: usize,
    pub difficulty: u32,
    /// Upper bound on nonces tried per block.
    pub nonce_budget: u64,
    pub allow_empty_blocks: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_BLOCK_CAPACITY,
            difficulty: DEFAULT_DIFFICULTY,
            nonce_budget: u64::MAX,
            allow_empty_blocks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub height: u64,
    pub reason: String,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "height {}: {}", self.height, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub blocks_checked: usize,
    pub failure: Option<ValidationFailure>,
    /// Contract state after replaying every valid block.
    pub replayed_state: ContractState,
    pub receipts: Vec<Vec<TxStatus>>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    config: ChainConfig,
    blocks: Vec<Block>,
    mempool: VecDeque<Transaction>,
    state: ContractState,
    receipts: Vec<Vec<TxStatus>>,
    next_nonce: BTreeMap<Address, u64>,
    seen: HashSet<Hash32>,
    genesis_state: ContractState,
}

impl Chain {
    /// Creates a chain and mines its empty genesis block with miner `M0`.
    pub fn new(config: ChainConfig, genesis_state: ContractState) -> Result<Self, LedgerError> {
        let mut chain = Self {
            config,
            blocks: Vec::new(),
            mempool: VecDeque::new(),
            state: genesis_state.clone(),
            receipts: Vec::new(),
            next_nonce: BTreeMap::new(),
            seen: HashSet::new(),
            genesis_state,
        };
        let difficulty = chain.config.difficulty;
        chain.seal(Vec::new(), MinerId(0), difficulty)?;
        Ok(chain)
    }

    pub fn with_defaults() -> Self {
        Self::new(ChainConfig::default(), ContractState::default()).expect("default genesis mines")
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis is always present")
    }

    pub fn height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }

    pub fn receipts(&self) -> &[Vec<TxStatus>] {
        &self.receipts
    }

    pub fn mempool(&self) -> impl Iterator<Item = &Transaction> {
        self.mempool.iter()
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    /// Next nonce `sender` must use, counting pending transactions.
    pub fn next_nonce(&self, sender: &Address) -> u64 {
        self.next_nonce.get(sender).copied().unwrap_or(0)
    }

    pub fn submit_transaction(&mut self, tx: Transaction) -> Result<Hash32, LedgerError> {
        if !tx.id_is_valid() {
            return Err(LedgerError::MalformedTransaction(tx.tx_id));
        }
        if self.seen.contains(&tx.tx_id) {
            return Err(LedgerError::DuplicateTransaction(tx.tx_id));
        }
        let expected = self.next_nonce(&tx.sender);
        if tx.nonce != expected {
            return Err(LedgerError::BadNonce {
                sender: tx.sender,
                expected,
                got: tx.nonce,
            });
        }
        self.next_nonce.insert(tx.sender, expected + 1);
        self.seen.insert(tx.tx_id);
        let id = tx.tx_id;
        self.mempool.push_back(tx);
        Ok(id)
    }

    /// Builds the next transaction for `sender` with the correct nonce and submits it.
    pub fn submit(&mut self, sender: Address, payload: TxPayload) -> Result<Hash32, LedgerError> {
        let tx = Transaction::new(sender, self.next_nonce(&sender), payload);
        self.submit_transaction(tx)
    }

    pub fn mine_block(&mut self, miner: MinerId, difficulty: u32) -> Result<&Block, LedgerError> {
        if self.mempool.is_empty() && !self.config.allow_empty_blocks {
            return Err(LedgerError::EmptyMempool);
        }
        let take = self.mempool.len().min(self.config.capacity);
        let txs: Vec<Transaction> = self.mempool.iter().take(take).cloned().collect();
        self.seal(txs, miner, difficulty)?;
        self.mempool.drain(..take);
        Ok(self.tip())
    }

    /// Mines until the mempool is empty, returning the heights produced.
    pub fn mine_all(
        &mut self,
        miners: &mut MinerPool,
        difficulty: u32,
    ) -> Result<Vec<u64>, LedgerError> {
        let mut heights = Vec::new();
        while !self.mempool.is_empty() {
            heights.push(
                self.mine_block(miners.next_miner(), difficulty)?
                    .header
                    .height,
            );
        }
        Ok(heights)
    }

    fn seal(
        &mut self,
        transactions: Vec<Transaction>,
        miner: MinerId,
        difficulty: u32,
    ) -> Result<(), LedgerError> {
        let (height, prev_hash) = match self.blocks.last() {
            Some(tip) => (tip.header.height + 1, tip.hash),
            None => (0, Hash32::ZERO),
        };
        let mut header = BlockHeader {
            height,
            prev_hash,
            tx_root: tx_root(&transactions),
            miner,
            timestamp: height,
            difficulty,
            nonce: 0,
        };
        let (nonce, hash) = search_nonce(&header, self.config.nonce_budget)?;
        header.nonce = nonce;
        let statuses = transactions
            .iter()
            .map(|tx| apply_transaction(&mut self.state, tx, height))
            .collect();
        self.receipts.push(statuses);
        self.blocks.push(Block {
            header,
            hash,
            transactions,
        });
        Ok(())
    }

    pub fn validate(&self) -> ValidationReport {
        validate_chain(&self.blocks, &self.genesis_state, self.config.capacity)
    }

    pub fn export(&self) -> ChainExport {
        ChainExport {
            version: EXPORT_VERSION,
            config: self.config.clone(),
            genesis_state: self.genesis_state.clone(),
            blocks: self.blocks.clone(),
            final_state: self.state.clone(),
        }
    }

    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("chain export serializes")
    }

    /// Rebuilds a chain from an export after full validation.
    pub fn import(export: ChainExport) -> Result<Self, LedgerError> {
        let report = export.validate();
        if let Some(failure) = report.failure {
            return Err(LedgerError::InvalidImport(failure));
        }
        let mut next_nonce = BTreeMap::new();
        let mut seen = HashSet::new();
        for tx in export.blocks.iter().flat_map(|b| &b.transactions) {
            next_nonce.insert(tx.sender, tx.nonce + 1);
            seen.insert(tx.tx_id);
        }
        Ok(Self {
            config: export.config,
            blocks: export.blocks,
            mempool: VecDeque::new(),
            state: report.replayed_state,
            receipts: report.receipts,
            next_nonce,
            seen,
            genesis_state: export.genesis_state,
        })
    }
}

/// Lowest nonce whose header hash meets the header's difficulty.
pub fn search_nonce(header: &BlockHeader, budget: u64) -> Result<(u64, Hash32), LedgerError> {
    if header.difficulty > 256 {
        return Err(LedgerError::BadDifficulty(header.difficulty));
    }
    let prefix = header.prefix_bytes();
    for nonce in 0..budget {
        let hash = Hash32(sha256_parts([prefix.as_slice(), &nonce.to_le_bytes()]));
        if hash.leading_zero_bits() >= header.difficulty {
            return Ok((nonce, hash));
        }
    }
    Err(LedgerError::NonceBudgetExhausted {
        budget,
        difficulty: header.difficulty,
    })
}

/// Full validation: linkage, proof of work, transaction ids and root, nonce
/// order, capacity, and a replay of every transaction from `genesis_state`.
/// Stops at the first failing height.
pub fn validate_chain(
    blocks: &[Block],
    genesis_state: &ContractState,
    capacity: usize,
) -> ValidationReport {
    let mut state = genesis_state.clone();
    let mut receipts = Vec::new();
    let mut seen = HashSet::new();
    let mut nonces: BTreeMap<Address, u64> = BTreeMap::new();
    let mut failure = None;
    let mut checked = 0;
    let mut prev: Option<&Block> = None;

    'blocks: for (index, block) in blocks.iter().enumerate() {
        let height = index as u64;
        let fail = |reason: String| Some(ValidationFailure { height, reason });
        let h = &block.header;
        if h.height != height {
            failure = fail(format!("header height {} at position {index}", h.height));
            break;
        }
        let expected_prev = prev.map_or(Hash32::ZERO, |p| p.hash);
        if h.prev_hash != expected_prev {
            failure = fail("prev_hash does not link to the previous block".into());
            break;
        }
        if h.hash() != block.hash {
            failure = fail("header does not hash to the recorded block hash".into());
            break;
        }
        if h.difficulty > 256 || block.hash.leading_zero_bits() < h.difficulty {
            failure = fail(format!("hash misses difficulty {}", h.difficulty));
            break;
        }
        if let Some(p) = prev {
            if h.timestamp <= p.header.timestamp {
                failure = fail("timestamp does not advance".into());
                break;
            }
        }
        if block.transactions.len() > capacity {
            failure = fail(format!(
                "{} transactions exceed capacity {capacity}",
                block.transactions.len()
            ));
            break;
        }
        for tx in &block.transactions {
            if !tx.id_is_valid() {
                failure = fail(format!("transaction {} does not match its id", tx.tx_id));
                break 'blocks;
            }
            if !seen.insert(tx.tx_id) {
                failure = fail(format!("duplicate transaction {}", tx.tx_id));
                break 'blocks;
            }
            let expected = nonces.entry(tx.sender).or_insert(0);
            if tx.nonce != *expected {
                failure = fail(format!(
                    "nonce {} from {} (expected {})",
                    tx.nonce, tx.sender, expected
                ));
                break 'blocks;
            }
            *expected += 1;
        }
        if tx_root(&block.transactions) != h.tx_root {
            failure = fail("tx_root does not match the transaction list".into());
            break;
        }
        let statuses = block
            .transactions
            .iter()
            .map(|tx| apply_transaction(&mut state, tx, height))
            .collect();
        if let Err(reason) = state.check_invariants() {
            failure = fail(format!("contract invariant broken: {reason}"));
            break;
        }
        receipts.push(statuses);
        checked += 1;
        prev = Some(block);
    }
    if failure.is_none() && blocks.is_empty() {
        failure = Some(ValidationFailure {
            height: 0,
            reason: "chain has no genesis block".into(),
        });
    }
    ValidationReport {
        blocks_checked: checked,
        failure,
        replayed_state: state,
        receipts,
    }
}

/// JSON document holding a full chain plus the genesis and final contract state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainExport {
    pub version: u32,
    pub config: ChainConfig,
    pub genesis_state: ContractState,
    pub blocks: Vec<Block>,
    pub final_state: ContractState,
}

impl ChainExport {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain export serializes")
    }

    /// Validates the blocks and checks that replay reproduces `final_state`.
    pub fn validate(&self) -> ValidationReport {
        let mut report = validate_chain(&self.blocks, &self.genesis_state, self.config.capacity);
        if report.failure.is_none() && report.replayed_state != self.final_state {
            report.failure = Some(ValidationFailure {
                height: self.blocks.len().saturating_sub(1) as u64,
                reason: "replayed contract state differs from the recorded final state".into(),
            });
        }
        report
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| &b.transactions)
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.transactions()
            .filter(|t| t.payload.kind_name() == kind)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MinerSchedule {
    RoundRobin,
    Random { seed: u64 },
}

/// Picks which miner seals the next block.
#[derive(Debug, Clone)]
pub struct MinerPool {
    miners: Vec<MinerId>,
    schedule: MinerSchedule,
    turn: usize,
    rng: ChaCha8Rng,
}

impl MinerPool {
    /// Miners `M1..=Mcount`.
    pub fn new(count: u32, schedule: MinerSchedule) -> Self {
        let count = count.max(1);
        let seed = match schedule {
            MinerSchedule::Random { seed } => seed,
            MinerSchedule::RoundRobin => 0,
        };
        Self {
            miners: (1..=count).map(MinerId).collect(),
            schedule,
            turn: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_miner(&mut self) -> MinerId {
        let index = match self.schedule {
            MinerSchedule::RoundRobin => self.turn % self.miners.len(),
            MinerSchedule::Random { .. } => self.rng.random_range(0..self.miners.len()),
        };
        self.turn += 1;
        self.miners[index]
    }
}

/// Counts the contract events a replay produced, by kind.
pub fn event_counts(state: &ContractState) -> (usize, usize, usize) {
    let uploads = state.count_events(|e| matches!(e, Event::ModelUploaded { .. }));
    let mints = state.count_events(|e| matches!(e, Event::RewardMinted { .. }));
    let publishes = state.count_events(|e| matches!(e, Event::GlobalPublished { .. }));
    (uploads, mints, publishes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(difficulty: u32) -> Chain {
        Chain::new(
            ChainConfig {
                difficulty,
                ..ChainConfig::default()
            },
            ContractState::default(),
        )
        .unwrap()
    }

    fn upload(sender: Address, nonce: u64) -> Transaction {
        Transaction::new(
            sender,
            nonce,
            TxPayload::UpdateModelHash {
                ciphertext: vec![1, 2, 3, nonce as u8],
            },
        )
    }

    #[test]
    fn duplicate_submission_rejected() {
        let mut c = chain(0);
        let tx = upload(Address::worker(1), 0);
        c.submit_transaction(tx.clone()).unwrap();
        assert_eq!(
            c.submit_transaction(tx.clone()),
            Err(LedgerError::DuplicateTransaction(tx.tx_id))
        );
        c.mine_block(MinerId(1), 0).unwrap();
        // still a duplicate once committed
        assert!(matches!(
            c.submit_transaction(tx),
            Err(LedgerError::DuplicateTransaction(_))
        ));
    }

    #[test]
    fn nonce_gap_rejected() {
        let mut c = chain(0);
        assert_eq!(
            c.submit_transaction(upload(Address::worker(1), 5)),
            Err(LedgerError::BadNonce {
                sender: Address::worker(1),
                expected: 0,
                got: 5
            })
        );
        assert_eq!(c.mempool_len(), 0);
    }

    #[test]
    fn submit_grows_mempool() {
        let mut c = chain(0);
        c.submit_transaction(upload(Address::worker(1), 0)).unwrap();
        assert_eq!(c.mempool_len(), 1);
        c.submit_transaction(upload(Address::worker(1), 1)).unwrap();
        assert_eq!(c.mempool_len(), 2);
        assert_eq!(c.next_nonce(&Address::worker(1)), 2);
    }

    #[test]
    fn tampered_id_rejected() {
        let mut c = chain(0);
        let mut tx = upload(Address::worker(1), 0);
        tx.nonce = 1;
        assert!(matches!(
            c.submit_transaction(tx),
            Err(LedgerError::MalformedTransaction(_))
        ));
    }

    #[test]
    fn zero_difficulty_takes_nonce_zero() {
        let mut c = chain(0);
        let block = c.mine_block(MinerId(1), 0).unwrap();
        assert_eq!(block.header.nonce, 0);
        assert_eq!(c.blocks()[0].header.nonce, 0);
    }

    #[test]
    fn difficulty_eight_gives_zero_first_byte() {
        let mut c = chain(8);
        c.submit_transaction(upload(Address::worker(1), 0)).unwrap();
        let block = c.mine_block(MinerId(2), 8).unwrap().clone();
        assert_eq!(block.header.hash().0[0], 0);
        assert_eq!(block.hash, block.header.hash());
        // lowest qualifying nonce
        let mut probe = block.header.clone();
        for n in 0..block.header.nonce {
            probe.nonce = n;
            assert!(probe.hash().0[0] != 0);
        }
    }

    #[test]
    fn mining_drains_fifo() {
        let mut c = chain(4);
        let ids: Vec<_> = (0..3)
            .map(|i| c.submit_transaction(upload(Address::worker(i), 0)).unwrap())
            .collect();
        let block = c.mine_block(MinerId(1), 4).unwrap();
        let got: Vec<_> = block.transactions.iter().map(|t| t.tx_id).collect();
        assert_eq!(got, ids);
        assert_eq!(c.mempool_len(), 0);
        assert_eq!(c.state().upload_count(&Address::worker(2)), 1);
    }

    #[test]
    fn capacity_limits_block() {
        let mut c = Chain::new(
            ChainConfig {
                capacity: 2,
                difficulty: 0,
                ..ChainConfig::default()
            },
            ContractState::default(),
        )
        .unwrap();
        for n in 0..5 {
            c.submit_transaction(upload(Address::worker(1), n)).unwrap();
        }
        let mut pool = MinerPool::new(2, MinerSchedule::RoundRobin);
        let heights = c.mine_all(&mut pool, 0).unwrap();
        assert_eq!(heights, vec![1, 2, 3]);
        let sizes: Vec<_> = c.blocks().iter().map(|b| b.transactions.len()).collect();
        assert_eq!(sizes, vec![0, 2, 2, 1]);
        let nonces: Vec<_> = c
            .blocks()
            .iter()
            .flat_map(|b| b.transactions.iter().map(|t| t.nonce))
            .collect();
        assert_eq!(nonces, vec![0, 1, 2, 3, 4]);
        let miners: Vec<_> = c.blocks()[1..].iter().map(|b| b.header.miner).collect();
        assert_eq!(miners, vec![MinerId(1), MinerId(2), MinerId(1)]);
    }

    #[test]
    fn empty_blocks_can_be_disabled() {
        let mut c = Chain::new(
            ChainConfig {
                allow_empty_blocks: false,
                difficulty: 0,
                ..ChainConfig::default()
            },
            ContractState::default(),
        )
        .unwrap();
        assert_eq!(
            c.mine_block(MinerId(1), 0).unwrap_err(),
            LedgerError::EmptyMempool
        );
    }

    #[test]
    fn nonce_budget_exhaustion_leaves_mempool() {
        let mut c = Chain::new(
            ChainConfig {
                nonce_budget: 4,
                difficulty: 0,
                ..ChainConfig::default()
            },
            ContractState::default(),
        )
        .unwrap();
        c.submit_transaction(upload(Address::worker(1), 0)).unwrap();
        assert_eq!(
            c.mine_block(MinerId(1), 40).unwrap_err(),
            LedgerError::NonceBudgetExhausted {
                budget: 4,
                difficulty: 40
            }
        );
        assert_eq!(c.mempool_len(), 1);
        assert_eq!(c.blocks().len(), 1);
    }

    #[test]
    fn failed_transactions_are_committed_without_effect() {
        let mut c = chain(0);
        c.submit(
            Address::ZERO,
            TxPayload::UpdateModelHash {
                ciphertext: vec![1],
            },
        )
        .unwrap();
        c.submit(
            Address::worker(1),
            TxPayload::PublishGlobalModel {
                hash: ContentHash::of(b"g"),
            },
        )
        .unwrap();
        c.mine_block(MinerId(1), 0).unwrap();
        assert_eq!(c.tip().transactions.len(), 2);
        assert_eq!(
            c.receipts()[1],
            vec![
                TxStatus::Failed(ContractError::ZeroAddress),
                TxStatus::Failed(ContractError::UnauthorizedPublisher(Address::worker(1)))
            ]
        );
        assert!(c.state().event_log.is_empty());
        assert!(c.validate().is_valid());
    }

    #[test]
    fn genesis_only_is_valid() {
        let c = chain(DEFAULT_DIFFICULTY);
        assert_eq!(c.blocks().len(), 1);
        assert_eq!(c.blocks()[0].header.prev_hash, Hash32::ZERO);
        let report = c.validate();
        assert!(report.is_valid());
        assert_eq!(report.blocks_checked, 1);
        assert!(!validate_chain(&[], &ContractState::default(), 64).is_valid());
    }

    #[test]
    fn ten_block_chain_validates_and_detects_tamper() {
        let mut c = chain(6);
        for n in 0..10 {
            c.submit_transaction(upload(Address::worker(1), n)).unwrap();
            c.mine_block(MinerId(1), 6).unwrap();
        }
        assert!(c.validate().is_valid());

        let mut blocks = c.blocks().to_vec();
        blocks[4].transactions[0].payload = TxPayload::UpdateModelHash {
            ciphertext: vec![9, 9],
        };
        let report = validate_chain(&blocks, &ContractState::default(), 64);
        assert_eq!(report.failure.unwrap().height, 4);

        let mut blocks = c.blocks().to_vec();
        blocks[7].header.timestamp += 1;
        let report = validate_chain(&blocks, &ContractState::default(), 64);
        assert_eq!(report.failure.unwrap().height, 7);
    }

    #[test]
    fn mining_is_deterministic() {
        let build = || {
            let mut c = chain(8);
            c.submit_transaction(upload(Address::worker(3), 0)).unwrap();
            c.mine_block(MinerId(2), 8).unwrap();
            c.export_json()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn export_import_roundtrip() {
        let mut c = chain(4);
        c.submit(
            Address::treasury(),
            TxPayload::TokenTransfer {
                recipient: Address::worker(1),
                amount: 1,
            },
        )
        .unwrap();
        c.mine_block(MinerId(1), 4).unwrap();
        let json = c.export_json();
        let export = ChainExport::from_json(&json).unwrap();
        let imported = Chain::import(export).unwrap();
        assert_eq!(imported.state(), c.state());
        assert_eq!(imported.export_json(), json);
        assert_eq!(imported.next_nonce(&Address::treasury()), 1);

        let mut bad = ChainExport::from_json(&json).unwrap();
        bad.final_state.total_minted = 5;
        assert!(matches!(
            Chain::import(bad),
            Err(LedgerError::InvalidImport(_))
        ));
    }

    #[test]
    fn random_schedule_is_seeded() {
        let picks = |seed| {
            let mut pool = MinerPool::new(5, MinerSchedule::Random { seed });
            (0..20).map(|_| pool.next_miner()).collect::<Vec<_>>()
        };
        assert_eq!(picks(1), picks(1));
        assert!(picks(1).iter().all(|m| (1..=5).contains(&m.0)));
    }
}
