#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use fedchain::dataset::{synth, Subset};

/// Directory holding the FD001 source files: `CMAPSS_DIR` when it contains
/// them, otherwise a synthetic copy generated once per test process.
pub fn fd001_dir() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        if let Some(dir) = std::env::var_os("CMAPSS_DIR").map(PathBuf::from) {
            if Subset::FD001.present_in(&dir) {
                return dir;
            }
        }
        let dir = tempfile::Builder::new()
            .prefix("fedchain-fd001-")
            .tempdir()
            .expect("tempdir")
            .keep();
        synth::write_subset(&dir, Subset::FD001, 0).expect("synthetic FD001");
        dir
    })
    .clone()
}

pub fn data_source() -> &'static str {
    match std::env::var_os("CMAPSS_DIR") {
        Some(dir) if Subset::FD001.present_in(std::path::Path::new(&dir)) => "CMAPSS files",
        _ => "synthetic FD001",
    }
}

pub fn scratch() -> PathBuf {
    tempfile::Builder::new()
        .prefix("fedchain-run-")
        .tempdir()
        .expect("tempdir")
        .keep()
}

/// Finds any `needles` occurrence in `haystack` with a Rabin-Karp pass per
/// distinct needle length. Returns the index of the first needle found.
pub fn find_any(haystack: &[u8], needles: &[Vec<u8>]) -> Option<usize> {
    use std::collections::{BTreeMap, HashMap};
    const BASE: u64 = 1_000_003;
    let mut by_len: BTreeMap<usize, HashMap<u64, Vec<usize>>> = BTreeMap::new();
    let hash = |s: &[u8]| {
        s.iter().fold(0u64, |h, &b| {
            h.wrapping_mul(BASE).wrapping_add(u64::from(b))
        })
    };
    for (i, n) in needles.iter().enumerate() {
        if !n.is_empty() {
            by_len
                .entry(n.len())
                .or_default()
                .entry(hash(n))
                .or_default()
                .push(i);
        }
    }
    for (len, table) in by_len {
        if len > haystack.len() {
            continue;
        }
        let top = (1..len).fold(1u64, |p, _| p.wrapping_mul(BASE));
        let mut h = hash(&haystack[..len]);
        for start in 0..=haystack.len() - len {
            if start > 0 {
                h = h
                    .wrapping_sub(u64::from(haystack[start - 1]).wrapping_mul(top))
                    .wrapping_mul(BASE)
                    .wrapping_add(u64::from(haystack[start + len - 1]));
            }
            if let Some(ids) = table.get(&h) {
                if let Some(&id) = ids
                    .iter()
                    .find(|&&id| needles[id] == haystack[start..start + len])
                {
                    return Some(id);
                }
            }
        }
    }
    None
}
