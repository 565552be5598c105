//! RSA encryption of hash links.
//!
//! Keys are generated from a seeded ChaCha stream so test and simulation keys
//! are reproducible. Messages are padded with PKCS#1 v1.5 encryption padding
//! (block type 2), which is randomized and checked on decrypt; anything longer
//! than one padded block is split into chunks of `k - 11` bytes.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub const DEFAULT_KEY_BITS: usize = 1024;
pub const MIN_KEY_BITS: usize = 512;
pub const MAX_KEY_BITS: usize = 4096;
pub const DEFAULT_MAX_MESSAGE_LEN: usize = 4096;
const PUBLIC_EXPONENT: u32 = 65_537;
/// Rounds of Miller-Rabin; each round errs with probability at most 1/4.
const MILLER_RABIN_ROUNDS: usize = 40;
/// 0x00 0x02, at least eight nonzero padding bytes, 0x00 separator.
const PADDING_OVERHEAD: usize = 11;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid key size {0}: must be even and within {MIN_KEY_BITS}..={MAX_KEY_BITS}")]
    InvalidBits(usize),
    #[error("message of {len} bytes exceeds the {max}-byte limit")]
    MessageTooLong { len: usize, max: usize },
    #[error("ciphertext failed its integrity check (chunk {chunk})")]
    Integrity { chunk: usize },
    #[error("malformed ciphertext encoding")]
    MalformedCiphertext,
    #[error("malformed key file: {0}")]
    KeyFormat(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub e: BigUint,
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub n: BigUint,
    pub e: BigUint,
    pub d: BigUint,
    pub p: BigUint,
    pub q: BigUint,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({} bits)", self.n.bits())
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({} bits)", self.n.bits())
    }
}

impl PublicKey {
    pub fn bits(&self) -> usize {
        self.n.bits() as usize
    }

    /// Modulus length in bytes.
    pub fn size(&self) -> usize {
        self.bits().div_ceil(8)
    }

    /// Largest message slice that fits in one padded block.
    pub fn chunk_capacity(&self) -> usize {
        self.size() - PADDING_OVERHEAD
    }
}

impl PrivateKey {
    pub fn public_key(&self) -> PublicKey {
        PublicKey {
            n: self.n.clone(),
            e: self.e.clone(),
        }
    }

    pub fn size(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }

    fn raw_decrypt(&self, c: &BigUint) -> BigUint {
        // CRT: m = m2 + q * (qinv * (m1 - m2) mod p)
        let one = BigUint::one();
        let dp = &self.d % (&self.p - &one);
        let dq = &self.d % (&self.q - &one);
        let m1 = c.modpow(&dp, &self.p);
        let m2 = c.modpow(&dq, &self.q);
        let qinv = self.q.modinv(&self.p).expect("p and q are distinct primes");
        let diff = (&m1 + &self.p - (&m2 % &self.p)) % &self.p;
        let h = (qinv * diff) % &self.p;
        m2 + h * &self.q
    }
}

/// Encrypted message: one modulus-length block per chunk.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ciphertext {
    pub chunks: Vec<Vec<u8>>,
}

impl Ciphertext {
    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    /// Wire form: 2-byte big-endian block length, then the blocks back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        let block = self.chunks.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(2 + block * self.chunks.len());
        out.extend_from_slice(&(block as u16).to_be_bytes());
        for chunk in &self.chunks {
            out.extend_from_slice(chunk);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (len, body) = bytes
            .split_first_chunk::<2>()
            .ok_or(CryptoError::MalformedCiphertext)?;
        let block = u16::from_be_bytes(*len) as usize;
        if block == 0 || body.is_empty() || body.len() % block != 0 {
            return Err(CryptoError::MalformedCiphertext);
        }
        Ok(Self {
            chunks: body.chunks(block).map(<[u8]>::to_vec).collect(),
        })
    }
}

pub fn generate_keypair(bits: usize, seed: u64) -> Result<KeyPair, CryptoError> {
    generate_keypair_with_rng(bits, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn generate_keypair_with_rng<R: RngCore>(
    bits: usize,
    rng: &mut R,
) -> Result<KeyPair, CryptoError> {
    if !(MIN_KEY_BITS..=MAX_KEY_BITS).contains(&bits) || !bits.is_multiple_of(2) {
        return Err(CryptoError::InvalidBits(bits));
    }
    let e = BigUint::from(PUBLIC_EXPONENT);
    let one = BigUint::one();
    loop {
        let p = random_prime(bits / 2, &e, rng);
        let q = random_prime(bits / 2, &e, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        debug_assert_eq!(n.bits() as usize, bits);
        let lambda = (&p - &one).lcm(&(&q - &one));
        let Some(d) = e.modinv(&lambda) else {
            continue;
        };
        let (p, q) = if p > q { (p, q) } else { (q, p) };
        return Ok(KeyPair {
            public: PublicKey {
                n: n.clone(),
                e: e.clone(),
            },
            private: PrivateKey { n, e, d, p, q },
        });
    }
}

/// Random prime of exactly `bits` bits with its top two bits set, so the
/// product of two such primes has exactly `2 * bits` bits.
fn random_prime<R: RngCore>(bits: usize, e: &BigUint, rng: &mut R) -> BigUint {
    let one = BigUint::one();
    let mut buf = vec![0u8; bits.div_ceil(8)];
    loop {
        rng.fill_bytes(&mut buf);
        let mut candidate = BigUint::from_bytes_be(&buf);
        let excess = buf.len() * 8 - bits;
        candidate >>= excess;
        candidate.set_bit(bits as u64 - 1, true);
        candidate.set_bit(bits as u64 - 2, true);
        candidate.set_bit(0, true);
        if (&candidate - &one).gcd(e) != one {
            continue;
        }
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

pub fn is_probable_prime<R: RngCore>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    if n.is_even() {
        return *n == two;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().expect("n - 1 is nonzero");
    let d = &n_minus_one >> s;
    let byte_len = (n.bits() as usize).div_ceil(8);
    let mut buf = vec![0u8; byte_len];
    'witness: for _ in 0..rounds {
        // base in [2, n - 2]
        let a = loop {
            rng.fill_bytes(&mut buf);
            let a = BigUint::from_bytes_be(&buf) % n;
            if a >= two && a < n_minus_one {
                break a;
            }
        };
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

pub fn encrypt<R: RngCore>(
    message: &[u8],
    key: &PublicKey,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    encrypt_with_limit(message, key, DEFAULT_MAX_MESSAGE_LEN, rng)
}

pub fn encrypt_with_limit<R: RngCore>(
    message: &[u8],
    key: &PublicKey,
    max_len: usize,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    if message.len() > max_len {
        return Err(CryptoError::MessageTooLong {
            len: message.len(),
            max: max_len,
        });
    }
    let k = key.size();
    let capacity = key.chunk_capacity();
    let pieces: Vec<&[u8]> = if message.is_empty() {
        vec![message]
    } else {
        message.chunks(capacity).collect()
    };
    let chunks = pieces
        .into_iter()
        .map(|piece| {
            let block = pad_block(piece, k, rng);
            let m = BigUint::from_bytes_be(&block);
            let c = m.modpow(&key.e, &key.n);
            to_fixed_be(&c, k)
        })
        .collect();
    Ok(Ciphertext { chunks })
}

pub fn decrypt(ciphertext: &Ciphertext, key: &PrivateKey) -> Result<Vec<u8>, CryptoError> {
    let k = key.size();
    if ciphertext.chunks.is_empty() {
        return Err(CryptoError::MalformedCiphertext);
    }
    let mut out = Vec::new();
    for (index, chunk) in ciphertext.chunks.iter().enumerate() {
        if chunk.len() != k {
            return Err(CryptoError::Integrity { chunk: index });
        }
        let c = BigUint::from_bytes_be(chunk);
        if c >= key.n {
            return Err(CryptoError::Integrity { chunk: index });
        }
        let block = to_fixed_be(&key.raw_decrypt(&c), k);
        let piece = unpad_block(&block).ok_or(CryptoError::Integrity { chunk: index })?;
        out.extend_from_slice(piece);
    }
    Ok(out)
}

fn pad_block<R: RngCore>(piece: &[u8], k: usize, rng: &mut R) -> Vec<u8> {
    let pad_len = k - 3 - piece.len();
    let mut block = Vec::with_capacity(k);
    block.extend_from_slice(&[0x00, 0x02]);
    for _ in 0..pad_len {
        block.push(rng.random_range(1..=255u8));
    }
    block.push(0x00);
    block.extend_from_slice(piece);
    block
}

fn unpad_block(block: &[u8]) -> Option<&[u8]> {
    if block.len() < PADDING_OVERHEAD || block[0] != 0x00 || block[1] != 0x02 {
        return None;
    }
    let sep = block[2..].iter().position(|&b| b == 0)? + 2;
    if sep < 10 {
        return None;
    }
    Some(&block[sep + 1..])
}

fn to_fixed_be(value: &BigUint, len: usize) -> Vec<u8> {
    let bytes = value.to_bytes_be();
    let mut out = vec![0u8; len - bytes.len()];
    out.extend_from_slice(&bytes);
    out
}

// Key files are a few `field: hex` lines under a header naming the key kind.

const PUBLIC_HEADER: &str = "fedchain-rsa-public-key v1";
const PRIVATE_HEADER: &str = "fedchain-rsa-private-key v1";

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{PUBLIC_HEADER}")?;
        writeln!(f, "bits: {}", self.bits())?;
        writeln!(f, "n: {:x}", self.n)?;
        writeln!(f, "e: {:x}", self.e)
    }
}

impl fmt::Display for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{PRIVATE_HEADER}")?;
        writeln!(f, "bits: {}", self.n.bits())?;
        writeln!(f, "n: {:x}", self.n)?;
        writeln!(f, "e: {:x}", self.e)?;
        writeln!(f, "d: {:x}", self.d)?;
        writeln!(f, "p: {:x}", self.p)?;
        writeln!(f, "q: {:x}", self.q)
    }
}

fn parse_fields<'a>(text: &'a str, header: &str) -> Result<Vec<(&'a str, &'a str)>, CryptoError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(header) {
        return Err(CryptoError::KeyFormat(format!(
            "expected header {header:?}"
        )));
    }
    lines
        .map(|line| {
            line.split_once(':')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CryptoError::KeyFormat(format!("bad line {line:?}")))
        })
        .collect()
}

fn hex_field(fields: &[(&str, &str)], name: &str) -> Result<BigUint, CryptoError> {
    let value = fields
        .iter()
        .find(|(k, _)| *k == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| CryptoError::KeyFormat(format!("missing field {name}")))?;
    BigUint::parse_bytes(value.as_bytes(), 16)
        .ok_or_else(|| CryptoError::KeyFormat(format!("field {name} is not hex")))
}

fn check_bits(fields: &[(&str, &str)], n: &BigUint) -> Result<(), CryptoError> {
    if let Some((_, bits)) = fields.iter().find(|(k, _)| *k == "bits") {
        let bits: u64 = bits
            .parse()
            .map_err(|_| CryptoError::KeyFormat("bits is not an integer".into()))?;
        if bits != n.bits() {
            return Err(CryptoError::KeyFormat(format!(
                "declared {bits} bits but modulus has {}",
                n.bits()
            )));
        }
    }
    Ok(())
}

impl FromStr for PublicKey {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = parse_fields(s, PUBLIC_HEADER)?;
        let n = hex_field(&fields, "n")?;
        check_bits(&fields, &n)?;
        Ok(Self {
            n,
            e: hex_field(&fields, "e")?,
        })
    }
}

impl FromStr for PrivateKey {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = parse_fields(s, PRIVATE_HEADER)?;
        let key = Self {
            n: hex_field(&fields, "n")?,
            e: hex_field(&fields, "e")?,
            d: hex_field(&fields, "d")?,
            p: hex_field(&fields, "p")?,
            q: hex_field(&fields, "q")?,
        };
        check_bits(&fields, &key.n)?;
        if &key.p * &key.q != key.n {
            return Err(CryptoError::KeyFormat("p * q does not equal n".into()));
        }
        Ok(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyPair {
        static KEYS: OnceLock<KeyPair> = OnceLock::new();
        KEYS.get_or_init(|| generate_keypair(1024, 7).unwrap())
    }

    #[test]
    fn modulus_has_requested_bits() {
        assert_eq!(keys().public.bits(), 1024);
        assert_eq!(keys().public.size(), 128);
        assert_eq!(generate_keypair(512, 3).unwrap().public.bits(), 512);
    }

    #[test]
    fn same_seed_same_keys() {
        assert_eq!(
            generate_keypair(512, 11).unwrap(),
            generate_keypair(512, 11).unwrap()
        );
        assert_ne!(
            generate_keypair(512, 11).unwrap().public,
            generate_keypair(512, 12).unwrap().public
        );
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(generate_keypair(511, 1), Err(CryptoError::InvalidBits(511)));
        assert_eq!(generate_keypair(256, 1), Err(CryptoError::InvalidBits(256)));
        assert_eq!(generate_keypair(513, 1), Err(CryptoError::InvalidBits(513)));
        assert_eq!(
            generate_keypair(8192, 1),
            Err(CryptoError::InvalidBits(8192))
        );
    }

    #[test]
    fn private_exponent_inverts_public() {
        let kp = keys();
        let m = BigUint::from(0x1234_5678u64);
        let c = m.modpow(&kp.public.e, &kp.public.n);
        assert_eq!(kp.private.raw_decrypt(&c), m);
        assert_eq!(c.modpow(&kp.private.d, &kp.private.n), m);
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let naive = |n: u32| {
            n >= 2
                && (2..)
                    .take_while(|d| d * d <= n)
                    .all(|d| !n.is_multiple_of(d))
        };
        for n in 0u32..3000 {
            assert_eq!(
                is_probable_prime(&BigUint::from(n), 20, &mut rng),
                naive(n),
                "{n}"
            );
        }
        // Carmichael numbers
        for n in [561u32, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&BigUint::from(n), 20, &mut rng));
        }
    }

    #[test]
    fn link_roundtrips_in_one_chunk() {
        let kp = keys();
        let link = crate::blobstore::ContentHash::of(b"weights").render();
        assert_eq!(link.len(), 68);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ct = encrypt(link.as_bytes(), &kp.public, &mut rng).unwrap();
        assert_eq!(ct.chunk_count(), 1);
        assert_eq!(decrypt(&ct, &kp.private).unwrap(), link.as_bytes());
    }

    #[test]
    fn empty_message_roundtrips() {
        let kp = keys();
        let ct = encrypt(b"", &kp.public, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(ct.chunk_count(), 1);
        assert!(decrypt(&ct, &kp.private).unwrap().is_empty());
    }

    #[test]
    fn long_messages_are_chunked() {
        let kp = keys();
        let msg: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        let ct = encrypt(&msg, &kp.public, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ct.chunk_count(), 1000usize.div_ceil(117));
        assert!(ct.chunks.iter().all(|c| c.len() == 128));
        assert_eq!(decrypt(&ct, &kp.private).unwrap(), msg);
    }

    #[test]
    fn too_long_is_rejected() {
        let kp = keys();
        let msg = vec![0u8; DEFAULT_MAX_MESSAGE_LEN + 1];
        assert_eq!(
            encrypt(&msg, &kp.public, &mut ChaCha20Rng::seed_from_u64(4)),
            Err(CryptoError::MessageTooLong {
                len: 4097,
                max: 4096
            })
        );
        assert!(
            encrypt_with_limit(b"abc", &kp.public, 2, &mut ChaCha20Rng::seed_from_u64(4)).is_err()
        );
    }

    #[test]
    fn padding_is_randomized() {
        let kp = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = encrypt(b"same", &kp.public, &mut rng).unwrap();
        let b = encrypt(b"same", &kp.public, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_key_fails() {
        let kp = keys();
        let other = generate_keypair(1024, 8).unwrap();
        let ct = encrypt(b"cid:abc", &kp.public, &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        assert!(matches!(
            decrypt(&ct, &other.private),
            Err(CryptoError::Integrity { chunk: 0 })
        ));
    }

    #[test]
    fn chunk_at_or_above_modulus_is_rejected() {
        let kp = keys();
        let ct = Ciphertext {
            chunks: vec![to_fixed_be(&kp.public.n, 128)],
        };
        assert!(matches!(
            decrypt(&ct, &kp.private),
            Err(CryptoError::Integrity { .. })
        ));
    }

    #[test]
    fn wire_roundtrip_and_malformed() {
        let kp = keys();
        let msg = vec![9u8; 300];
        let ct = encrypt(&msg, &kp.public, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let wire = ct.to_bytes();
        assert_eq!(wire.len(), 2 + 3 * 128);
        assert_eq!(Ciphertext::from_bytes(&wire).unwrap(), ct);
        assert!(Ciphertext::from_bytes(&wire[..wire.len() - 1]).is_err());
        assert!(Ciphertext::from_bytes(&[0]).is_err());
        assert!(Ciphertext::from_bytes(&[0, 0, 1]).is_err());
    }

    #[test]
    fn key_files_roundtrip() {
        let kp = keys();
        let public: PublicKey = kp.public.to_string().parse().unwrap();
        let private: PrivateKey = kp.private.to_string().parse().unwrap();
        assert_eq!(public, kp.public);
        assert_eq!(private, kp.private);
        assert_eq!(private.public_key(), kp.public);
        assert!("garbage".parse::<PublicKey>().is_err());
        let broken = kp.private.to_string().replace("q: ", "q: 1");
        assert!(broken.parse::<PrivateKey>().is_err());
    }
}
