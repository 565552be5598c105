//! Content-addressed blob store.
//!
//! Blobs are keyed by the SHA-256 of their bytes and rendered as `cid:<hex>`
//! links, which is the only thing that ever goes on-chain. The store is
//! in-process and keeps every blob for the lifetime of a run; it can be dumped
//! to and reloaded from a directory holding one file per blob.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::{sha256, DIGEST_LEN};

pub const CID_PREFIX: &str = "cid:";
/// Length of a rendered link: prefix plus 64 hex characters.
pub const CID_RENDERED_LEN: usize = CID_PREFIX.len() + 2 * DIGEST_LEN;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob not found: {0}")]
    NotFound(ContentHash),
    #[error("storage full: {needed} bytes requested, {available} of {budget} available")]
    StorageFull {
        needed: u64,
        available: u64,
        budget: u64,
    },
    #[error("malformed content hash {0:?}")]
    BadHash(String),
    #[error("blob file {name} does not match its content hash")]
    Corrupt { name: String },
    #[error("blob store I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// SHA-256 digest of a blob, rendered as `cid:` followed by lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; DIGEST_LEN]);

impl ContentHash {
    pub fn of(payload: &[u8]) -> Self {
        Self(sha256(payload))
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{CID_PREFIX}{}", hex::encode(self.0))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

impl FromStr for ContentHash {
    type Err = BlobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BlobError::BadHash(s.to_string());
        let body = s.strip_prefix(CID_PREFIX).ok_or_else(bad)?;
        if body.len() != 2 * DIGEST_LEN || body.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad());
        }
        let mut digest = [0u8; DIGEST_LEN];
        hex::decode_to_slice(body, &mut digest).map_err(|_| bad())?;
        Ok(Self(digest))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct BlobRecord {
    pub hash: ContentHash,
    pub payload: Arc<[u8]>,
    /// Logical tick at which the blob was first stored.
    pub stored_at: u64,
}

impl BlobRecord {
    pub fn verify(&self) -> bool {
        ContentHash::of(&self.payload) == self.hash
    }
}

#[derive(Default)]
struct Inner {
    blobs: HashMap<ContentHash, BlobRecord>,
    bytes_used: u64,
    tick: u64,
}

/// Thread-safe in-memory content-addressed store.
#[derive(Default)]
pub struct BlobStore {
    inner: Mutex<Inner>,
    budget: Option<u64>,
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that refuses puts once `budget` payload bytes are held.
    pub fn with_budget(budget: u64) -> Self {
        Self {
            inner: Mutex::default(),
            budget: Some(budget),
        }
    }

    pub fn put(&self, payload: &[u8]) -> Result<ContentHash, BlobError> {
        let hash = ContentHash::of(payload);
        let mut inner = self.inner.lock().expect("blob store lock poisoned");
        if inner.blobs.contains_key(&hash) {
            return Ok(hash);
        }
        let needed = payload.len() as u64;
        if let Some(budget) = self.budget {
            let available = budget.saturating_sub(inner.bytes_used);
            if needed > available {
                return Err(BlobError::StorageFull {
                    needed,
                    available,
                    budget,
                });
            }
        }
        let stored_at = inner.tick;
        inner.tick += 1;
        inner.bytes_used += needed;
        inner.blobs.insert(
            hash,
            BlobRecord {
                hash,
                payload: Arc::from(payload),
                stored_at,
            },
        );
        Ok(hash)
    }

    pub fn get(&self, hash: &ContentHash) -> Result<Vec<u8>, BlobError> {
        self.record(hash).map(|r| r.payload.to_vec())
    }

    pub fn record(&self, hash: &ContentHash) -> Result<BlobRecord, BlobError> {
        let inner = self.inner.lock().expect("blob store lock poisoned");
        inner
            .blobs
            .get(hash)
            .cloned()
            .ok_or(BlobError::NotFound(*hash))
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        let inner = self.inner.lock().expect("blob store lock poisoned");
        inner.blobs.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .expect("blob store lock poisoned")
            .blobs
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes_used(&self) -> u64 {
        self.inner
            .lock()
            .expect("blob store lock poisoned")
            .bytes_used
    }

    /// Hashes of all stored blobs, sorted.
    pub fn hashes(&self) -> Vec<ContentHash> {
        let inner = self.inner.lock().expect("blob store lock poisoned");
        let mut out: Vec<_> = inner.blobs.keys().copied().collect();
        out.sort();
        out
    }

    /// Writes every blob to `dir` as a file named by its rendered hash.
    pub fn dump(&self, dir: &Path) -> Result<(), BlobError> {
        fs::create_dir_all(dir)?;
        let inner = self.inner.lock().expect("blob store lock poisoned");
        for record in inner.blobs.values() {
            fs::write(dir.join(record.hash.render()), &record.payload)?;
        }
        Ok(())
    }

    /// Loads a directory written by [`BlobStore::dump`], rejecting files whose
    /// bytes do not hash to their name. Files without a `cid:` name are skipped.
    pub fn load(dir: &Path) -> Result<Self, BlobError> {
        let store = Self::new();
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Ok(expected) = name.parse::<ContentHash>() else {
                continue;
            };
            let payload = fs::read(entry.path())?;
            if store.put(&payload)? != expected {
                return Err(BlobError::Corrupt { name });
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn repeated_put_is_idempotent() {
        let store = BlobStore::new();
        let a = store.put(b"weights").unwrap();
        let b = store.put(b"weights").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 1);
        assert_eq!(store.bytes_used(), 7);
    }

    #[test]
    fn unknown_hash_is_not_found() {
        let store = BlobStore::new();
        let missing = ContentHash::of(b"never stored");
        assert!(matches!(store.get(&missing), Err(BlobError::NotFound(h)) if h == missing));
    }

    #[test]
    fn empty_payload_roundtrips() {
        let store = BlobStore::new();
        let h = store.put(&[]).unwrap();
        assert_eq!(store.get(&h).unwrap(), Vec::<u8>::new());
        // SHA-256 of the empty string
        assert_eq!(
            h.render(),
            "cid:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn budget_is_enforced() {
        let store = BlobStore::with_budget(10);
        store.put(&[1; 6]).unwrap();
        // a duplicate costs nothing
        store.put(&[1; 6]).unwrap();
        let err = store.put(&[2; 5]).unwrap_err();
        assert!(matches!(
            err,
            BlobError::StorageFull {
                needed: 5,
                available: 4,
                budget: 10
            }
        ));
        store.put(&[3; 4]).unwrap();
    }

    #[test]
    fn rendered_form_is_68_chars() {
        let h = ContentHash::of(b"x");
        let s = h.render();
        assert_eq!(s.len(), CID_RENDERED_LEN);
        assert_eq!(s.len(), 68);
        assert_eq!(s.parse::<ContentHash>().unwrap(), h);
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in [
            "",
            "cid:",
            "cid:zz",
            "sha:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
            "cid:E3B0C44298FC1C149AFBF4C8996FB92427AE41E4649B934CA495991B7852B855",
            "cid:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b85",
        ] {
            assert!(bad.parse::<ContentHash>().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn concurrent_identical_puts_share_one_entry() {
        let store = BlobStore::new();
        let hashes: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|_| s.spawn(|| store.put(b"same bytes").unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn dump_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::new();
        let a = store.put(b"alpha").unwrap();
        let b = store.put(b"beta").unwrap();
        store.dump(dir.path()).unwrap();
        let loaded = BlobStore::load(dir.path()).unwrap();
        assert_eq!(loaded.get(&a).unwrap(), b"alpha");
        assert_eq!(loaded.get(&b).unwrap(), b"beta");
        assert_eq!(loaded.hashes(), store.hashes());
    }

    #[test]
    fn load_rejects_mismatched_file() {
        let dir = tempfile::tempdir().unwrap();
        let name = ContentHash::of(b"original").render();
        std::fs::write(dir.path().join(name), b"forged").unwrap();
        assert!(matches!(
            BlobStore::load(dir.path()),
            Err(BlobError::Corrupt { .. })
        ));
    }

    proptest! {
        #[test]
        fn put_then_get_is_identity(payload in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let store = BlobStore::new();
            let h = store.put(&payload).unwrap();
            prop_assert_eq!(store.get(&h).unwrap(), payload.clone());
            prop_assert!(store.record(&h).unwrap().verify());
        }

        #[test]
        fn hash_is_independent_of_prior_contents(
            prior in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..8),
            payload in proptest::collection::vec(any::<u8>(), 0..256),
        ) {
            let store = BlobStore::new();
            for p in &prior {
                store.put(p).unwrap();
            }
            prop_assert_eq!(store.put(&payload).unwrap(), BlobStore::new().put(&payload).unwrap());
        }

        #[test]
        fn contents_depend_only_on_multiset(
            mut payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 1..10),
        ) {
            let forward = BlobStore::new();
            for p in &payloads {
                forward.put(p).unwrap();
            }
            payloads.reverse();
            let backward = BlobStore::new();
            for p in &payloads {
                backward.put(p).unwrap();
            }
            prop_assert_eq!(forward.hashes(), backward.hashes());
            prop_assert_eq!(forward.bytes_used(), backward.bytes_used());
        }
    }
}
