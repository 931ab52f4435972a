//! Transactions, signer signatures, and blocks, with their canonical
//! encodings and digests.

use crate::crypto::{sha256, Dec, Digest, Enc, KeyPair, SignatureScheme, WireError, ZERO_DIGEST};

/// A fiat-denominated transfer between two network IDs, signed by both
/// parties. `tx_id` is the hash of the core fields; both signatures cover
/// the tx_id followed by those fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub tx_id: Digest,
    pub sender: Digest,
    pub recipient: Digest,
    pub amount: u64,
    pub fee: u64,
    pub timestamp_ms: u64,
    pub purpose: String,
    pub chain_id: String,
    pub sender_sig: Vec<u8>,
    pub recipient_sig: Vec<u8>,
}

impl Transaction {
    fn core_bytes(
        sender: &Digest,
        recipient: &Digest,
        amount: u64,
        fee: u64,
        timestamp_ms: u64,
        purpose: &str,
        chain_id: &str,
    ) -> Vec<u8> {
        let mut e = Enc::new();
        e.digest(sender);
        e.digest(recipient);
        e.u64(amount);
        e.u64(fee);
        e.u64(timestamp_ms);
        e.str(purpose);
        e.str(chain_id);
        e.finish()
    }

    pub fn compute_tx_id(
        sender: &Digest,
        recipient: &Digest,
        amount: u64,
        fee: u64,
        timestamp_ms: u64,
        purpose: &str,
        chain_id: &str,
    ) -> Digest {
        sha256(&Self::core_bytes(sender, recipient, amount, fee, timestamp_ms, purpose, chain_id))
    }

    /// Hash of the core fields as carried by this transaction. Equals
    /// `tx_id` for honestly built transactions; a mismatch under an equal
    /// tx_id is the double-spend marker.
    pub fn content_digest(&self) -> Digest {
        sha256(&Self::core_bytes(
            &self.sender,
            &self.recipient,
            self.amount,
            self.fee,
            self.timestamp_ms,
            &self.purpose,
            &self.chain_id,
        ))
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.digest(&self.tx_id);
        e.raw(&Self::core_bytes(
            &self.sender,
            &self.recipient,
            self.amount,
            self.fee,
            self.timestamp_ms,
            &self.purpose,
            &self.chain_id,
        ));
        e.finish()
    }

    /// Builds and doubly signs a transaction.
    #[allow(clippy::too_many_arguments)]
    pub fn new_signed(
        scheme: &dyn SignatureScheme,
        sender_key: &KeyPair,
        recipient_key: &KeyPair,
        sender: Digest,
        recipient: Digest,
        amount: u64,
        fee: u64,
        timestamp_ms: u64,
        purpose: &str,
        chain_id: &str,
    ) -> Transaction {
        let tx_id =
            Self::compute_tx_id(&sender, &recipient, amount, fee, timestamp_ms, purpose, chain_id);
        let mut tx = Transaction {
            tx_id,
            sender,
            recipient,
            amount,
            fee,
            timestamp_ms,
            purpose: purpose.to_string(),
            chain_id: chain_id.to_string(),
            sender_sig: Vec::new(),
            recipient_sig: Vec::new(),
        };
        let msg = tx.signing_bytes();
        tx.sender_sig = scheme.sign(&sender_key.private, &msg);
        tx.recipient_sig = scheme.sign(&recipient_key.private, &msg);
        tx
    }

    /// Full structural check: tx_id matches the core fields, amount is
    /// positive, and both signatures verify.
    pub fn verify(
        &self,
        scheme: &dyn SignatureScheme,
        sender_public: &[u8],
        recipient_public: &[u8],
    ) -> bool {
        if self.amount == 0 || self.tx_id != self.content_digest() {
            return false;
        }
        let msg = self.signing_bytes();
        scheme.verify(sender_public, &msg, &self.sender_sig)
            && scheme.verify(recipient_public, &msg, &self.recipient_sig)
    }

    /// Encoding with signature fields omitted; the input to `hash_transactions`.
    pub fn encode_sig_free(&self, e: &mut Enc) {
        e.digest(&self.tx_id);
        e.digest(&self.sender);
        e.digest(&self.recipient);
        e.u64(self.amount);
        e.u64(self.fee);
        e.u64(self.timestamp_ms);
        e.str(&self.purpose);
        e.str(&self.chain_id);
    }

    pub fn encode(&self, e: &mut Enc) {
        self.encode_sig_free(e);
        e.bytes(&self.sender_sig);
        e.bytes(&self.recipient_sig);
    }

    pub fn decode(d: &mut Dec) -> Result<Transaction, WireError> {
        Ok(Transaction {
            tx_id: d.digest()?,
            sender: d.digest()?,
            recipient: d.digest()?,
            amount: d.u64()?,
            fee: d.u64()?,
            timestamp_ms: d.u64()?,
            purpose: d.str()?,
            chain_id: d.str()?,
            sender_sig: d.bytes()?,
            recipient_sig: d.bytes()?,
        })
    }

    /// Canonical wire length in bytes.
    pub fn canonical_len(&self) -> usize {
        let mut e = Enc::new();
        self.encode(&mut e);
        e.len()
    }
}

/// Digest over an ordered transaction list with all signatures omitted.
/// Order is significant; the empty list hashes the bare count prefix.
pub fn hash_transactions(tx_list: &[Transaction]) -> Digest {
    let mut e = Enc::new();
    e.u32(tx_list.len() as u32);
    for tx in tx_list {
        tx.encode_sig_free(&mut e);
    }
    sha256(&e.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignerSignature {
    pub signer: Digest,
    pub signature: Vec<u8>,
    /// ID-space distance between this signer and its selection target.
    pub distance: u64,
}

impl SignerSignature {
    pub fn encode(&self, e: &mut Enc) {
        e.digest(&self.signer);
        e.bytes(&self.signature);
        e.u64(self.distance);
    }

    pub fn decode(d: &mut Dec) -> Result<SignerSignature, WireError> {
        Ok(SignerSignature {
            signer: d.digest()?,
            signature: d.bytes()?,
            distance: d.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub tx_list: Vec<Transaction>,
    pub tx_digest: Digest,
    pub timestamp_ms: u64,
    pub required_signers: u32,
    pub signer_sigs: Vec<SignerSignature>,
    pub merger: Digest,
    pub merger_distance: u64,
    pub merger_sig: Vec<u8>,
}

impl Block {
    pub fn genesis() -> Block {
        Block {
            height: 0,
            prev_hash: ZERO_DIGEST,
            tx_list: Vec::new(),
            tx_digest: hash_transactions(&[]),
            timestamp_ms: 0,
            required_signers: 0,
            signer_sigs: Vec::new(),
            merger: ZERO_DIGEST,
            merger_distance: 0,
            merger_sig: Vec::new(),
        }
    }

    /// The message each signer signs: header fields plus the transaction
    /// digest. Transaction content is bound through `tx_digest`.
    pub fn signing_digest(&self) -> Digest {
        let mut e = Enc::new();
        e.u64(self.height);
        e.digest(&self.prev_hash);
        e.digest(&self.tx_digest);
        e.u64(self.timestamp_ms);
        e.u32(self.required_signers);
        e.digest(&self.merger);
        e.u64(self.merger_distance);
        sha256(&e.finish())
    }

    /// Everything except the merger signature; the message the merger signs.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.u64(self.height);
        e.digest(&self.prev_hash);
        e.u32(self.tx_list.len() as u32);
        for tx in &self.tx_list {
            tx.encode(&mut e);
        }
        e.digest(&self.tx_digest);
        e.u64(self.timestamp_ms);
        e.u32(self.required_signers);
        e.u32(self.signer_sigs.len() as u32);
        for s in &self.signer_sigs {
            s.encode(&mut e);
        }
        e.digest(&self.merger);
        e.u64(self.merger_distance);
        e.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.raw(&self.body_bytes());
        e.bytes(&self.merger_sig);
        e.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Block, WireError> {
        let mut d = Dec::new(data);
        let height = d.u64()?;
        let prev_hash = d.digest()?;
        let n_tx = d.u32()? as usize;
        let mut tx_list = Vec::with_capacity(n_tx);
        for _ in 0..n_tx {
            tx_list.push(Transaction::decode(&mut d)?);
        }
        let tx_digest = d.digest()?;
        let timestamp_ms = d.u64()?;
        let required_signers = d.u32()?;
        let n_sigs = d.u32()? as usize;
        let mut signer_sigs = Vec::with_capacity(n_sigs);
        for _ in 0..n_sigs {
            signer_sigs.push(SignerSignature::decode(&mut d)?);
        }
        let merger = d.digest()?;
        let merger_distance = d.u64()?;
        let merger_sig = d.bytes()?;
        d.expect_end()?;
        Ok(Block {
            height,
            prev_hash,
            tx_list,
            tx_digest,
            timestamp_ms,
            required_signers,
            signer_sigs,
            merger,
            merger_distance,
            merger_sig,
        })
    }

    /// Block identity: hash of the full canonical encoding.
    pub fn digest(&self) -> Digest {
        sha256(&self.encode())
    }
}
