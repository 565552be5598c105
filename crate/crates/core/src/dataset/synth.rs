//! Synthetic turbofan trajectories in the CMAPSS text layout.
//!
//! Used when the real benchmark files are not available. Each unit follows an
//! exponential wear curve from a small initial offset to failure; sensors move
//! along fixed drift directions with the approximate magnitudes and noise
//! levels of the real FD001 channels. FD002/FD004 draw every cycle from six
//! operating regimes, and FD003/FD004 give half the fleet a second fault mode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use super::{DataError, RawRecord, Subset};
use crate::digest::derive_seed;

/// (base, end-of-life drift, noise sd) per sensor.
const SENSORS: [(f64, f64, f64); 21] = [
    (518.67, 0.0, 0.0),
    (642.15, 1.7, 0.35),
    (1585.0, 20.0, 5.0),
    (1400.0, 30.0, 6.0),
    (14.62, 0.0, 0.0),
    (21.61, 0.0, 0.0),
    (554.4, -2.5, 0.6),
    (2388.05, 0.25, 0.06),
    (9050.0, 25.0, 8.0),
    (1.3, 0.0, 0.0),
    (47.3, 1.0, 0.22),
    (521.9, -2.4, 0.6),
    (2388.05, 0.25, 0.06),
    (8130.0, 20.0, 7.0),
    (8.41, 0.11, 0.03),
    (0.03, 0.0, 0.0),
    (392.0, 5.0, 1.3),
    (2388.0, 0.0, 0.0),
    (100.0, 0.0, 0.0),
    (38.95, -0.5, 0.15),
    (23.37, -0.3, 0.09),
];

/// Sensors whose drift reverses under the second fault mode.
const FLIPPED_IN_MODE_B: [usize; 5] = [2, 6, 11, 19, 20];

/// Operating regimes: settings and a multiplicative shift on sensor bases.
const REGIMES: [([f64; 3], f64); 6] = [
    ([0.0, 0.0, 100.0], 1.0),
    ([10.0, 0.25, 100.0], 0.96),
    ([20.0, 0.70, 100.0], 0.91),
    ([25.0, 0.62, 60.0], 0.82),
    ([35.0, 0.84, 100.0], 0.87),
    ([42.0, 0.84, 100.0], 0.85),
];

const MIN_LIFE: f64 = 128.0;
const MAX_LIFE: u32 = 362;
const MIN_TEST_RUL: u32 = 7;
const MAX_TEST_RUL: u32 = 145;
const MIN_OBSERVED: u32 = 31;

#[derive(Debug, Clone)]
pub struct SynthSubset {
    pub subset: Subset,
    pub train: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
    pub ruls: Vec<u32>,
}

impl SynthSubset {
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let (train, test, rul) = self.subset.paths(dir);
        let ruls: String = self.ruls.iter().map(|r| format!("{r}\n")).collect();
        for (path, body) in [
            (train, render_records(&self.train)),
            (test, render_records(&self.test)),
            (rul, ruls),
        ] {
            fs::write(&path, body).map_err(|source| DataError::Io { path, source })?;
        }
        Ok(())
    }
}

pub fn unit_counts(subset: Subset) -> (u32, u32) {
    match subset {
        Subset::FD001 => (100, 100),
        Subset::FD002 => (260, 259),
        Subset::FD003 => (100, 100),
        Subset::FD004 => (248, 249),
    }
}

fn multi_regime(subset: Subset) -> bool {
    matches!(subset, Subset::FD002 | Subset::FD004)
}

fn two_fault_modes(subset: Subset) -> bool {
    matches!(subset, Subset::FD003 | Subset::FD004)
}

struct UnitProfile {
    life: u32,
    kappa: f64,
    wear0: f64,
    offsets: [f64; 21],
    mode_b: bool,
}

fn draw_profile(rng: &mut ChaCha8Rng, subset: Subset) -> UnitProfile {
    let gamma = Gamma::new(2.0, 39.0).expect("valid gamma");
    let life = (MIN_LIFE + gamma.sample(rng))
        .round()
        .min(f64::from(MAX_LIFE)) as u32;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let offsets = std::array::from_fn(|s| 0.5 * SENSORS[s].2 * std_normal.sample(rng));
    UnitProfile {
        life,
        kappa: rng.random_range(3.0..4.5),
        wear0: rng.random_range(0.0..0.1),
        offsets,
        mode_b: two_fault_modes(subset) && rng.random_bool(0.5),
    }
}

fn trajectory(
    rng: &mut ChaCha8Rng,
    subset: Subset,
    unit_id: u32,
    p: &UnitProfile,
    cycles: u32,
) -> Vec<RawRecord> {
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let denom = p.kappa.exp() - 1.0;
    (1..=cycles)
        .map(|cycle| {
            let u = f64::from(cycle) / f64::from(p.life);
            let wear = p.wear0 + (1.0 - p.wear0) * ((p.kappa * u).exp() - 1.0) / denom;
            let (settings, shift) = if multi_regime(subset) {
                REGIMES[rng.random_range(0..REGIMES.len())]
            } else {
                REGIMES[0]
            };
            let op_settings = [
                settings[0] + 0.0022 * std_normal.sample(rng),
                settings[1] + 0.0003 * std_normal.sample(rng),
                settings[2],
            ];
            let sensors = std::array::from_fn(|s| {
                let (base, drift, noise) = SENSORS[s];
                let sign = if p.mode_b && FLIPPED_IN_MODE_B.contains(&s) {
                    -1.0
                } else {
                    1.0
                };
                let jitter = if noise > 0.0 {
                    noise * std_normal.sample(rng)
                } else {
                    0.0
                };
                round4(base * shift + p.offsets[s] + sign * drift * wear + jitter)
            });
            RawRecord {
                unit_id,
                cycle,
                op_settings: op_settings.map(round4),
                sensors,
            }
        })
        .collect()
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Deterministic for a given `(subset, seed)`.
pub fn generate(subset: Subset, seed: u64) -> SynthSubset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[subset as u64]));
    let (n_train, n_test) = unit_counts(subset);
    let mut train = Vec::new();
    for unit_id in 1..=n_train {
        let p = draw_profile(&mut rng, subset);
        train.extend(trajectory(&mut rng, subset, unit_id, &p, p.life));
    }
    let mut test = Vec::new();
    let mut ruls = Vec::with_capacity(n_test as usize);
    for unit_id in 1..=n_test {
        let p = draw_profile(&mut rng, subset);
        let rul = rng
            .random_range(MIN_TEST_RUL..=MAX_TEST_RUL)
            .min(p.life - MIN_OBSERVED);
        test.extend(trajectory(&mut rng, subset, unit_id, &p, p.life - rul));
        ruls.push(rul);
    }
    SynthSubset {
        subset,
        train,
        test,
        ruls,
    }
}

/// Writes all three files for `subset` into `dir`.
pub fn write_subset(dir: &Path, subset: Subset, seed: u64) -> Result<(), DataError> {
    generate(subset, seed).write(dir)
}

pub fn render_records(records: &[RawRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 140);
    for r in records {
        let _ = write!(out, "{} {}", r.unit_id, r.cycle);
        for v in r.op_settings.iter().chain(&r.sensors) {
            let _ = write!(out, " {v:.4}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_subset, parse_records, FeatureMap};

    #[test]
    fn fd001_shape() {
        let s = generate(Subset::FD001, 7);
        let units: std::collections::BTreeSet<u32> = s.train.iter().map(|r| r.unit_id).collect();
        assert_eq!(units.len(), 100);
        assert_eq!(s.ruls.len(), 100);
        assert!(s
            .ruls
            .iter()
            .all(|r| (MIN_TEST_RUL..=MAX_TEST_RUL).contains(r)));
        let mean_life = s.train.len() as f64 / 100.0;
        assert!((170.0..250.0).contains(&mean_life), "{mean_life}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = render_records(&generate(Subset::FD003, 1).test);
        let b = render_records(&generate(Subset::FD003, 1).test);
        let c = render_records(&generate(Subset::FD003, 2).test);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rendered_rows_reparse_exactly() {
        let s = generate(Subset::FD002, 3);
        let text = render_records(&s.train[..500]);
        assert_eq!(
            parse_records(&text, "synth").unwrap(),
            s.train[..500].to_vec()
        );
    }

    #[test]
    fn written_files_load() {
        let dir = tempfile::tempdir().unwrap();
        write_subset(dir.path(), Subset::FD004, 11).unwrap();
        assert!(Subset::FD004.present_in(dir.path()));
        let (train, test) = load_subset(dir.path(), Subset::FD004, &FeatureMap::default()).unwrap();
        assert_eq!(train.units.len(), 248);
        assert_eq!(test.units.len(), 249);
        assert!(test.units.iter().all(|u| u.len() >= MIN_OBSERVED as usize));
    }

    #[test]
    fn wear_moves_informative_sensors() {
        let s = generate(Subset::FD001, 5);
        let unit1: Vec<&RawRecord> = s.train.iter().filter(|r| r.unit_id == 1).collect();
        let head: f64 = unit1[..10].iter().map(|r| r.sensors[3]).sum::<f64>() / 10.0;
        let tail: f64 = unit1[unit1.len() - 10..]
            .iter()
            .map(|r| r.sensors[3])
            .sum::<f64>()
            / 10.0;
        assert!(tail - head > 15.0, "{head} -> {tail}");
    }
}
