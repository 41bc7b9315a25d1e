//! Per-key-identifier encryption of 16-byte code blocks, tweaked by the
//! host-physical block address.
//!
//! The construction is a 4-round Feistel network over SHA-256: an exact
//! keyed permutation per (key, tweak) whose wrong-key output is
//! indistinguishable from random bytes for the purposes of this simulator.
//! Resistance against cryptanalysis by the simulator's own author is not a
//! goal; pseudorandom garbling is.

use alloc::collections::BTreeMap;
use core::fmt;

use sha2::{Digest, Sha256};

pub const BLOCK_SIZE: usize = 16;

/// Key identifier. 0 is the systemwide default key (data, unprotected code).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub u16);

impl KeyId {
    pub const DEFAULT: KeyId = KeyId(0);
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key{}", self.0)
    }
}

/// Root key material for the engine's internal key table. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret([u8; 32]);

impl MasterSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"cfisim-master-secret");
        h.update(seed.to_le_bytes());
        Self(h.finalize().into())
    }

    pub fn into_bytes(self) -> [u8; 32] {
        self.0
    }
}

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Redacted by design.
        write!(f, "MasterSecret(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct CipherKey([u8; 32]);

impl fmt::Debug for CipherKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CipherKey(..)")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyIdOutOfRange {
    pub kid: u16,
    pub capacity: u32,
}

impl fmt::Display for KeyIdOutOfRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "key id {} outside capacity {}",
            self.kid, self.capacity
        )
    }
}

impl core::error::Error for KeyIdOutOfRange {}

/// Derives the cipher key for a key identifier, rejecting unprovisionable
/// identifiers.
pub fn derive_key(
    master: &MasterSecret,
    kid: KeyId,
    capacity: u32,
) -> Result<CipherKey, KeyIdOutOfRange> {
    if u32::from(kid.0) >= capacity {
        return Err(KeyIdOutOfRange {
            kid: kid.0,
            capacity,
        });
    }
    Ok(derive_key_raw(master, kid))
}

fn derive_key_raw(master: &MasterSecret, kid: KeyId) -> CipherKey {
    let mut h = Sha256::new();
    h.update(b"cfisim-key");
    h.update(master.0);
    h.update(u32::from(kid.0).to_le_bytes());
    CipherKey(h.finalize().into())
}

fn round_output(key: &CipherKey, tweak: u64, round: u8, half: [u8; 8]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(b"cfisim-round");
    h.update(key.0);
    h.update(tweak.to_le_bytes());
    h.update([round]);
    h.update(half);
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn xor8(a: [u8; 8], b: [u8; 8]) -> [u8; 8] {
    let mut out = [0u8; 8];
    for i in 0..8 {
        out[i] = a[i] ^ b[i];
    }
    out
}

const ROUNDS: u8 = 4;

pub fn encrypt_with_key(key: &CipherKey, tweak: u64, block: [u8; BLOCK_SIZE]) -> [u8; BLOCK_SIZE] {
    let mut left: [u8; 8] = block[..8].try_into().unwrap();
    let mut right: [u8; 8] = block[8..].try_into().unwrap();
    for round in 0..ROUNDS {
        let next_right = xor8(left, round_output(key, tweak, round, right));
        left = right;
        right = next_right;
    }
    let mut out = [0u8; BLOCK_SIZE];
    out[..8].copy_from_slice(&left);
    out[8..].copy_from_slice(&right);
    out
}

pub fn decrypt_with_key(key: &CipherKey, tweak: u64, block: [u8; BLOCK_SIZE]) -> [u8; BLOCK_SIZE] {
    let mut left: [u8; 8] = block[..8].try_into().unwrap();
    let mut right: [u8; 8] = block[8..].try_into().unwrap();
    for round in (0..ROUNDS).rev() {
        let prev_left = xor8(right, round_output(key, tweak, round, left));
        right = left;
        left = prev_left;
    }
    let mut out = [0u8; BLOCK_SIZE];
    out[..8].copy_from_slice(&left);
    out[8..].copy_from_slice(&right);
    out
}

/// The encryption engine: key table plus block cipher. Key derivation is
/// cached; the engine accepts any 16-bit key identifier at the datapath
/// (fault-garbled identifiers decrypt to garbage rather than erroring) while
/// provisioning paths bound identifiers by `capacity` explicitly.
#[derive(Clone, Debug)]
pub struct CryptoEngine {
    master: MasterSecret,
    capacity: u32,
    keys: BTreeMap<u16, CipherKey>,
}

impl CryptoEngine {
    pub fn new(master: MasterSecret, capacity: u32) -> Self {
        Self {
            master,
            capacity,
            keys: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    fn key(&mut self, kid: KeyId) -> CipherKey {
        if let Some(k) = self.keys.get(&kid.0) {
            return *k;
        }
        let k = derive_key_raw(&self.master, kid);
        self.keys.insert(kid.0, k);
        k
    }

    pub fn encrypt_block(&mut self, kid: KeyId, tweak: u64, block: [u8; BLOCK_SIZE]) -> [u8; BLOCK_SIZE] {
        let key = self.key(kid);
        encrypt_with_key(&key, tweak, block)
    }

    pub fn decrypt_block(&mut self, kid: KeyId, tweak: u64, block: [u8; BLOCK_SIZE]) -> [u8; BLOCK_SIZE] {
        let key = self.key(kid);
        decrypt_with_key(&key, tweak, block)
    }
}
