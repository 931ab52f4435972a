//! Hashing, canonical byte encoding, and the pluggable signature scheme.
//!
//! Every digest in the system is 32 bytes. Canonical encoding rules:
//! integers are big-endian fixed width, variable-length byte strings and
//! UTF-8 strings carry a u32 length prefix, digests are written raw.

use rand::RngCore;
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;

pub type Digest = [u8; DIGEST_LEN];

pub const ZERO_DIGEST: Digest = [0u8; DIGEST_LEN];

pub fn sha256(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

pub fn digest_hex(d: &Digest) -> String {
    hex::encode(d)
}

pub fn digest_from_hex(s: &str) -> Result<Digest, WireError> {
    let bytes = hex::decode(s.trim()).map_err(|_| WireError::BadHex)?;
    if bytes.len() != DIGEST_LEN {
        return Err(WireError::BadLength);
    }
    let mut d = ZERO_DIGEST;
    d.copy_from_slice(&bytes);
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("invalid hex")]
    BadHex,
    #[error("bad field length")]
    BadLength,
    #[error("invalid utf-8 string")]
    BadUtf8,
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("trailing bytes after record")]
    Trailing,
}

/// Canonical encoder. Field order is fixed by each type's `encode` impl.
#[derive(Default)]
pub struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    pub fn new() -> Self {
        Enc { buf: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Enc { buf: Vec::with_capacity(n) }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn digest(&mut self, d: &Digest) {
        self.buf.extend_from_slice(d);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-based decoder matching `Enc`.
pub struct Dec<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Dec { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.data.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let s = self.take(4)?;
        Ok(u32::from_be_bytes(s.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        let s = self.take(8)?;
        Ok(u64::from_be_bytes(s.try_into().unwrap()))
    }

    pub fn digest(&mut self) -> Result<Digest, WireError> {
        let s = self.take(DIGEST_LEN)?;
        let mut d = ZERO_DIGEST;
        d.copy_from_slice(s);
        Ok(d)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        let b = self.bytes()?;
        String::from_utf8(b).map_err(|_| WireError::BadUtf8)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

/// Verification/signing key pair. Key content is scheme-specific.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: Vec<u8>,
    pub private: Vec<u8>,
}

/// Signature scheme interface. Implementations must be deterministic
/// given the same key and message.
pub trait SignatureScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(&self, rng: &mut dyn RngCore) -> KeyPair;
    fn sign(&self, private: &[u8], msg: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
}

/// Keyed-hash stand-in scheme for large simulations. The public and
/// private halves are the same 32 random bytes; a signature is
/// sha256(key || msg). Anyone holding the public key could forge, so this
/// is only suitable where all parties are simulated honestly.
pub struct MacScheme;

impl SignatureScheme for MacScheme {
    fn name(&self) -> &'static str {
        "mac"
    }

    fn generate(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut key = vec![0u8; 32];
        rng.fill_bytes(&mut key);
        KeyPair { public: key.clone(), private: key }
    }

    fn sign(&self, private: &[u8], msg: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(private);
        h.update(msg);
        h.finalize().to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        self.sign(public, msg) == sig
    }
}

/// Ed25519 via ed25519-dalek. Private key is the 32-byte seed.
pub struct Ed25519Scheme;

impl SignatureScheme for Ed25519Scheme {
    fn name(&self) -> &'static str {
        "ed25519"
    }

    fn generate(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        KeyPair {
            public: sk.verifying_key().to_bytes().to_vec(),
            private: seed.to_vec(),
        }
    }

    fn sign(&self, private: &[u8], msg: &[u8]) -> Vec<u8> {
        let seed: [u8; 32] = private.try_into().expect("ed25519 private key is 32 bytes");
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        use ed25519_dalek::Signer as _;
        sk.sign(msg).to_bytes().to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let Ok(pk_bytes): Result<[u8; 32], _> = public.try_into() else {
            return false;
        };
        let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk_bytes) else {
            return false;
        };
        let Ok(sig_bytes): Result<[u8; 64], _> = sig.try_into() else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        vk.verify_strict(msg, &sig).is_ok()
    }
}
