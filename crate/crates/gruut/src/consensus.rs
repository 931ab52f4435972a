//! Merger and signer node state machines: transaction intake, block
//! drafting, signature gathering with substitution, the ordered signer
//! checks, misbehavior reports, and quality-based broadcast delay.

use crate::chain::block::{hash_transactions, Block, SignerSignature, Transaction};
use crate::chain::tree::Violation;
use crate::crypto::{Dec, Digest, Enc, KeyPair, SignatureScheme, WireError};
use crate::selection::Metric;
use crate::KeyDirectory;
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use std::collections::{BTreeMap, BTreeSet};

pub const WIRE_TX: u8 = 1;
pub const WIRE_SIGN_REQ: u8 = 2;
pub const WIRE_SIGN_RESP: u8 = 3;
pub const WIRE_BLOCK: u8 = 4;
pub const WIRE_REPORT: u8 = 5;

/// A merger's request for one signer's signature on a block draft. The
/// signer recomputes the signing digest from these fields rather than
/// trusting a precomputed one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignRequest {
    pub height: u64,
    pub prev_hash: Digest,
    pub tx_list: Vec<Transaction>,
    pub tx_digest: Digest,
    pub timestamp_ms: u64,
    pub required_signers: u32,
    pub merger: Digest,
    pub merger_distance: u64,
    pub signer: Digest,
    pub slot_index: u32,
    pub slot_distance: u64,
}

impl SignRequest {
    pub fn signing_digest(&self) -> Digest {
        let scaffold = Block {
            height: self.height,
            prev_hash: self.prev_hash,
            tx_list: Vec::new(),
            tx_digest: self.tx_digest,
            timestamp_ms: self.timestamp_ms,
            required_signers: self.required_signers,
            signer_sigs: Vec::new(),
            merger: self.merger,
            merger_distance: self.merger_distance,
            merger_sig: Vec::new(),
        };
        scaffold.signing_digest()
    }

    fn encode(&self, e: &mut Enc) {
        e.u64(self.height);
        e.digest(&self.prev_hash);
        e.u32(self.tx_list.len() as u32);
        for tx in &self.tx_list {
            tx.encode(e);
        }
        e.digest(&self.tx_digest);
        e.u64(self.timestamp_ms);
        e.u32(self.required_signers);
        e.digest(&self.merger);
        e.u64(self.merger_distance);
        e.digest(&self.signer);
        e.u32(self.slot_index);
        e.u64(self.slot_distance);
    }

    fn decode(d: &mut Dec) -> Result<SignRequest, WireError> {
        let height = d.u64()?;
        let prev_hash = d.digest()?;
        let n = d.u32()? as usize;
        let mut tx_list = Vec::with_capacity(n);
        for _ in 0..n {
            tx_list.push(Transaction::decode(d)?);
        }
        Ok(SignRequest {
            height,
            prev_hash,
            tx_list,
            tx_digest: d.digest()?,
            timestamp_ms: d.u64()?,
            required_signers: d.u32()?,
            merger: d.digest()?,
            merger_distance: d.u64()?,
            signer: d.digest()?,
            slot_index: d.u32()?,
            slot_distance: d.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// The draft's parent block is not known to the signer yet.
    UnknownParent,
    /// The draft's height is at or before the signer's join height.
    PredatesJoin,
    /// The draft's height is already finalized from the signer's view.
    StaleHeight { finalized_height: u64 },
    /// The signer already signed a different draft at this height.
    AlreadyVotedHeight { other: Digest },
    /// A transaction in the draft was already signed into another block.
    AlreadySigned { tx_id: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    Timestamp {
        draft: Digest,
        timestamp_ms: u64,
        median_ms: u64,
        local_ms: u64,
    },
    DoubleSpend {
        tx_id: Digest,
        original_block: Digest,
        conflicting_block: Digest,
        sender: Digest,
        merger: Digest,
    },
}

impl Evidence {
    fn encode(&self, e: &mut Enc) {
        match self {
            Evidence::Timestamp { draft, timestamp_ms, median_ms, local_ms } => {
                e.u8(1);
                e.digest(draft);
                e.u64(*timestamp_ms);
                e.u64(*median_ms);
                e.u64(*local_ms);
            }
            Evidence::DoubleSpend { tx_id, original_block, conflicting_block, sender, merger } => {
                e.u8(2);
                e.digest(tx_id);
                e.digest(original_block);
                e.digest(conflicting_block);
                e.digest(sender);
                e.digest(merger);
            }
        }
    }

    fn decode(d: &mut Dec) -> Result<Evidence, WireError> {
        match d.u8()? {
            1 => Ok(Evidence::Timestamp {
                draft: d.digest()?,
                timestamp_ms: d.u64()?,
                median_ms: d.u64()?,
                local_ms: d.u64()?,
            }),
            2 => Ok(Evidence::DoubleSpend {
                tx_id: d.digest()?,
                original_block: d.digest()?,
                conflicting_block: d.digest()?,
                sender: d.digest()?,
                merger: d.digest()?,
            }),
            t => Err(WireError::UnknownTag(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Signed { signature: Vec<u8>, distance: u64 },
    Rejected { reason: RejectReason },
    Reported { violation: Violation, evidence: Evidence },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignResponse {
    pub signer: Digest,
    pub height: u64,
    /// Signing digest of the draft this responds to.
    pub draft: Digest,
    pub verdict: Verdict,
}

fn violation_tag(v: Violation) -> u8 {
    match v {
        Violation::BadLinkage => 1,
        Violation::InsufficientSignatures => 2,
        Violation::DuplicateSigner => 3,
        Violation::BadSignature => 4,
        Violation::DoubleSpend => 5,
        Violation::TimestampOutOfRange => 6,
        Violation::IneligibleMerger => 7,
    }
}

fn violation_from_tag(t: u8) -> Result<Violation, WireError> {
    Ok(match t {
        1 => Violation::BadLinkage,
        2 => Violation::InsufficientSignatures,
        3 => Violation::DuplicateSigner,
        4 => Violation::BadSignature,
        5 => Violation::DoubleSpend,
        6 => Violation::TimestampOutOfRange,
        7 => Violation::IneligibleMerger,
        _ => return Err(WireError::UnknownTag(t)),
    })
}

impl SignResponse {
    fn encode(&self, e: &mut Enc) {
        e.digest(&self.signer);
        e.u64(self.height);
        e.digest(&self.draft);
        match &self.verdict {
            Verdict::Signed { signature, distance } => {
                e.u8(1);
                e.bytes(signature);
                e.u64(*distance);
            }
            Verdict::Rejected { reason } => {
                e.u8(2);
                match reason {
                    RejectReason::UnknownParent => e.u8(1),
                    RejectReason::PredatesJoin => e.u8(2),
                    RejectReason::StaleHeight { finalized_height } => {
                        e.u8(3);
                        e.u64(*finalized_height);
                    }
                    RejectReason::AlreadyVotedHeight { other } => {
                        e.u8(4);
                        e.digest(other);
                    }
                    RejectReason::AlreadySigned { tx_id } => {
                        e.u8(5);
                        e.digest(tx_id);
                    }
                }
            }
            Verdict::Reported { violation, evidence } => {
                e.u8(3);
                e.u8(violation_tag(*violation));
                evidence.encode(e);
            }
        }
    }

    fn decode(d: &mut Dec) -> Result<SignResponse, WireError> {
        let signer = d.digest()?;
        let height = d.u64()?;
        let draft = d.digest()?;
        let verdict = match d.u8()? {
            1 => Verdict::Signed { signature: d.bytes()?, distance: d.u64()? },
            2 => {
                let reason = match d.u8()? {
                    1 => RejectReason::UnknownParent,
                    2 => RejectReason::PredatesJoin,
                    3 => RejectReason::StaleHeight { finalized_height: d.u64()? },
                    4 => RejectReason::AlreadyVotedHeight { other: d.digest()? },
                    5 => RejectReason::AlreadySigned { tx_id: d.digest()? },
                    t => return Err(WireError::UnknownTag(t)),
                };
                Verdict::Rejected { reason }
            }
            3 => Verdict::Reported {
                violation: violation_from_tag(d.u8()?)?,
                evidence: Evidence::decode(d)?,
            },
            t => return Err(WireError::UnknownTag(t)),
        };
        Ok(SignResponse { signer, height, draft, verdict })
    }
}

/// Misbehavior broadcast consumed by all mergers for blacklisting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub reporter: Digest,
    pub violation: Violation,
    pub evidence: Evidence,
}

impl Report {
    fn encode(&self, e: &mut Enc) {
        e.digest(&self.reporter);
        e.u8(violation_tag(self.violation));
        self.evidence.encode(e);
    }

    fn decode(d: &mut Dec) -> Result<Report, WireError> {
        Ok(Report {
            reporter: d.digest()?,
            violation: violation_from_tag(d.u8()?)?,
            evidence: Evidence::decode(d)?,
        })
    }
}

/// The protocol's wire messages: a type byte followed by the canonical
/// body serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Tx(Transaction),
    SignReq(SignRequest),
    SignResp(SignResponse),
    Block(Block),
    Report(Report),
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Tx(_) => WIRE_TX,
            Message::SignReq(_) => WIRE_SIGN_REQ,
            Message::SignResp(_) => WIRE_SIGN_RESP,
            Message::Block(_) => WIRE_BLOCK,
            Message::Report(_) => WIRE_REPORT,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.u8(self.type_byte());
        match self {
            Message::Tx(tx) => tx.encode(&mut e),
            Message::SignReq(r) => r.encode(&mut e),
            Message::SignResp(r) => r.encode(&mut e),
            Message::Block(b) => e.raw(&b.encode()),
            Message::Report(r) => r.encode(&mut e),
        }
        e.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Message, WireError> {
        let mut d = Dec::new(data);
        let msg = match d.u8()? {
            WIRE_TX => Message::Tx(Transaction::decode(&mut d)?),
            WIRE_SIGN_REQ => Message::SignReq(SignRequest::decode(&mut d)?),
            WIRE_SIGN_RESP => Message::SignResp(SignResponse::decode(&mut d)?),
            WIRE_BLOCK => return Ok(Message::Block(Block::decode(&data[1..])?)),
            WIRE_REPORT => Message::Report(Report::decode(&mut d)?),
            t => return Err(WireError::UnknownTag(t)),
        };
        d.expect_end()?;
        Ok(msg)
    }
}

/// Parent-hash index of observed block headers; enough context for the
/// signer timestamp check without storing bodies.
#[derive(Debug, Default, Clone)]
pub struct HeaderStore {
    entries: BTreeMap<Digest, (Digest, u64, u64)>,
}

impl HeaderStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, digest: Digest, parent: Digest, height: u64, timestamp_ms: u64) {
        self.entries.insert(digest, (parent, height, timestamp_ms));
    }

    pub fn insert_block(&mut self, block: &Block) {
        self.insert(block.digest(), block.prev_hash, block.height, block.timestamp_ms);
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.entries.contains_key(digest)
    }

    pub fn height(&self, digest: &Digest) -> Option<u64> {
        self.entries.get(digest).map(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Timestamps of up to `n` ancestors starting at `from` inclusive,
    /// stopping at unknown parents or height zero.
    pub fn recent_timestamps(&self, from: &Digest, n: usize) -> Vec<u64> {
        let mut out = Vec::with_capacity(n);
        let mut cur = *from;
        while out.len() < n {
            let Some((parent, height, ts)) = self.entries.get(&cur) else { break };
            out.push(*ts);
            if *height == 0 {
                break;
            }
            cur = *parent;
        }
        out
    }
}

pub const TIMESTAMP_ANCESTORS: usize = 11;
pub const TIMESTAMP_SKEW_MS: u64 = 60_000;

/// Signer-side state: what it has signed, where it has voted, and the
/// headers it has seen.
pub struct SignerNode {
    pub id: Digest,
    keypair: KeyPair,
    pub join_height: u64,
    pub last_finalized_signed_height: u64,
    /// signing digest → (height, tx ids carried). Never shrinks.
    signed_log: BTreeMap<Digest, (u64, Vec<Digest>)>,
    /// tx id → (content digest, draft it was signed into).
    tx_signed: BTreeMap<Digest, (Digest, Digest)>,
    /// height → draft signed at that height (one vote per height).
    voted: BTreeMap<u64, Digest>,
    pub headers: HeaderStore,
}

impl SignerNode {
    pub fn new(id: Digest, keypair: KeyPair, join_height: u64, genesis: &Block) -> Self {
        let mut headers = HeaderStore::new();
        headers.insert_block(genesis);
        SignerNode {
            id,
            keypair,
            join_height,
            last_finalized_signed_height: 0,
            signed_log: BTreeMap::new(),
            tx_signed: BTreeMap::new(),
            voted: BTreeMap::new(),
            headers,
        }
    }

    pub fn note_finalized(&mut self, height: u64) {
        if height > self.last_finalized_signed_height {
            self.last_finalized_signed_height = height;
        }
    }

    pub fn on_block(&mut self, block: &Block) {
        self.headers.insert_block(block);
    }

    pub fn signed_log(&self) -> &BTreeMap<Digest, (u64, Vec<Digest>)> {
        &self.signed_log
    }

    /// Runs the ordered validation checks and answers with a verdict.
    pub fn handle_request(
        &mut self,
        scheme: &dyn SignatureScheme,
        req: &SignRequest,
        now_ms: u64,
    ) -> SignResponse {
        let draft = req.signing_digest();
        let respond = |verdict: Verdict| SignResponse {
            signer: self.id,
            height: req.height,
            draft,
            verdict,
        };

        if !self.headers.contains(&req.prev_hash) {
            return respond(Verdict::Rejected { reason: RejectReason::UnknownParent });
        }

        // check 1: timestamp past the ancestor median and within local skew
        let mut ts = self.headers.recent_timestamps(&req.prev_hash, TIMESTAMP_ANCESTORS);
        ts.sort_unstable();
        let median = ts[ts.len() / 2];
        if req.timestamp_ms <= median || req.timestamp_ms > now_ms + TIMESTAMP_SKEW_MS {
            return respond(Verdict::Reported {
                violation: Violation::TimestampOutOfRange,
                evidence: Evidence::Timestamp {
                    draft,
                    timestamp_ms: req.timestamp_ms,
                    median_ms: median,
                    local_ms: now_ms,
                },
            });
        }

        // check 2: the block must postdate this signer's join
        if req.height <= self.join_height {
            return respond(Verdict::Rejected { reason: RejectReason::PredatesJoin });
        }

        // check 3: never sign at or below the finalized height
        if req.height <= self.last_finalized_signed_height {
            return respond(Verdict::Rejected {
                reason: RejectReason::StaleHeight {
                    finalized_height: self.last_finalized_signed_height,
                },
            });
        }

        // one vote per height: a different draft at a height already voted
        // is turned away with the competing draft as evidence
        if let Some(other) = self.voted.get(&req.height) {
            if *other != draft {
                return respond(Verdict::Rejected {
                    reason: RejectReason::AlreadyVotedHeight { other: *other },
                });
            }
        }

        for tx in &req.tx_list {
            let content = tx.content_digest();
            if let Some((prev_content, prev_block)) = self.tx_signed.get(&tx.tx_id) {
                if *prev_block == draft {
                    continue;
                }
                if *prev_content == content {
                    // check 4: same transaction already carried elsewhere
                    return respond(Verdict::Rejected {
                        reason: RejectReason::AlreadySigned { tx_id: tx.tx_id },
                    });
                }
                // check 5: same id, different content — a double spend
                return respond(Verdict::Reported {
                    violation: Violation::DoubleSpend,
                    evidence: Evidence::DoubleSpend {
                        tx_id: tx.tx_id,
                        original_block: *prev_block,
                        conflicting_block: draft,
                        sender: tx.sender,
                        merger: req.merger,
                    },
                });
            }
        }

        let signature = scheme.sign(&self.keypair.private, &draft);
        let tx_ids: Vec<Digest> = req.tx_list.iter().map(|t| t.tx_id).collect();
        for tx in &req.tx_list {
            self.tx_signed.insert(tx.tx_id, (tx.content_digest(), draft));
        }
        self.signed_log.insert(draft, (req.height, tx_ids));
        self.voted.insert(req.height, draft);
        SignResponse {
            signer: self.id,
            height: req.height,
            draft,
            verdict: Verdict::Signed { signature, distance: req.slot_distance },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftTimeouts {
    pub signer_timeout_ms: u64,
    pub evidence_timeout_ms: u64,
    pub max_substitutions: u32,
}

impl Default for DraftTimeouts {
    fn default() -> Self {
        DraftTimeouts {
            signer_timeout_ms: 2_000,
            evidence_timeout_ms: 1_500,
            max_substitutions: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotState {
    Waiting { deadline_ms: u64 },
    /// A signer claims a competing draft exists; hold until the deadline
    /// for the competing block to arrive before substituting.
    AwaitingEvidence { deadline_ms: u64, other: Digest },
    NeedsAssign,
    Signed(SignerSignature),
}

#[derive(Debug, Clone)]
pub struct DraftSlot {
    pub index: u32,
    pub target: Digest,
    pub current: Digest,
    pub distance: u64,
    pub state: SlotState,
    pub substitutions: u32,
    pub tried: Vec<Digest>,
}

#[derive(Debug, Clone)]
pub struct PendingDraft {
    pub draft_id: u64,
    pub height: u64,
    pub prev_hash: Digest,
    pub tx_list: Vec<Transaction>,
    pub tx_digest: Digest,
    pub timestamp_ms: u64,
    pub required_signers: u32,
    pub merger_distance: u64,
    pub signing_digest: Digest,
    pub slots: Vec<DraftSlot>,
}

impl PendingDraft {
    fn request_for(&self, merger: Digest, slot: &DraftSlot) -> SignRequest {
        SignRequest {
            height: self.height,
            prev_hash: self.prev_hash,
            tx_list: self.tx_list.clone(),
            tx_digest: self.tx_digest,
            timestamp_ms: self.timestamp_ms,
            required_signers: self.required_signers,
            merger,
            merger_distance: self.merger_distance,
            signer: slot.current,
            slot_index: slot.index,
            slot_distance: slot.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftParams {
    pub height: u64,
    pub prev_hash: Digest,
    pub timestamp_ms: u64,
    pub merger_distance: u64,
    /// Slot-ordered (signer, distance) pairs from signer-group selection.
    pub signers: Vec<(Digest, u64)>,
    pub tx_target: usize,
    /// Per-transaction amount ceiling (the e·TA limit).
    pub single_cap: u64,
    /// Whole-block amount ceiling (the TA limit).
    pub total_cap: u64,
}

#[derive(Debug)]
pub enum RespOutcome {
    /// Response did not match an open slot (stale, duplicate, or forged).
    Ignored,
    /// Signature accepted; more slots still open.
    Recorded,
    /// All slots signed; the assembled and merger-signed block.
    Completed(Box<Block>),
    /// Slot rejected; the caller picks the next-nearest substitute.
    NeedSubstitute { draft_id: u64, slot: u32 },
    /// Slot held pending arrival of a claimed competing block.
    AwaitingEvidence { draft_id: u64, slot: u32 },
    /// A double-spend report names this draft; it is discarded.
    DraftAborted { draft_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickEvent {
    NeedSubstitute { draft_id: u64, slot: u32 },
}

#[derive(Debug)]
pub enum SubstituteOutcome {
    Request(SignRequest),
    /// The slot resolved on its own (e.g. a late signature landed).
    NotNeeded,
    /// Substitution budget exhausted; the draft is dropped.
    DraftAbandoned { height: u64 },
}

/// Merger-side state: the transaction pool, the in-flight draft, and the
/// blacklist learned from misbehavior reports.
pub struct MergerNode {
    pub id: Digest,
    keypair: KeyPair,
    pub join_height: u64,
    pub last_produced_height: Option<u64>,
    mempool: BTreeMap<(u64, Digest), Transaction>,
    mempool_ids: BTreeSet<Digest>,
    /// ids of transactions carried by accepted blocks
    included_ids: BTreeSet<Digest>,
    blacklist: BTreeSet<Digest>,
    drafts: Vec<PendingDraft>,
    next_draft_id: u64,
    pub dropped_invalid: u64,
    pub dropped_blacklisted: u64,
    pub dropped_over_cap: u64,
}

impl MergerNode {
    pub fn new(id: Digest, keypair: KeyPair, join_height: u64) -> Self {
        MergerNode {
            id,
            keypair,
            join_height,
            last_produced_height: None,
            mempool: BTreeMap::new(),
            mempool_ids: BTreeSet::new(),
            included_ids: BTreeSet::new(),
            blacklist: BTreeSet::new(),
            drafts: Vec::new(),
            next_draft_id: 0,
            dropped_invalid: 0,
            dropped_blacklisted: 0,
            dropped_over_cap: 0,
        }
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn has_draft(&self) -> bool {
        !self.drafts.is_empty()
    }

    pub fn is_blacklisted(&self, id: &Digest) -> bool {
        self.blacklist.contains(id)
    }

    /// Admits a broadcast transaction into the mempool if it verifies, the
    /// sender is in good standing, and it is not already pooled or chained.
    pub fn ingest_tx(&mut self, tx: Transaction, keys: &KeyDirectory) -> bool {
        if self.mempool_ids.contains(&tx.tx_id) || self.included_ids.contains(&tx.tx_id) {
            return false;
        }
        if self.blacklist.contains(&tx.sender) {
            self.dropped_blacklisted += 1;
            return false;
        }
        let ok = match (keys.get(&tx.sender), keys.get(&tx.recipient)) {
            (Some(sk), Some(rk)) => tx.verify(keys.scheme(), sk, rk),
            _ => false,
        };
        if !ok {
            self.dropped_invalid += 1;
            return false;
        }
        self.mempool_ids.insert(tx.tx_id);
        self.mempool.insert((tx.timestamp_ms, tx.tx_id), tx);
        true
    }

    /// Oldest-first pick respecting the per-transaction and whole-block
    /// amount caps. Over-cap singles can never fit and are evicted.
    fn pick_txs(&mut self, target: usize, single_cap: u64, total_cap: u64) -> Vec<Transaction> {
        let mut picked = Vec::with_capacity(target);
        let mut total: u128 = 0;
        let mut evict = Vec::new();
        for (key, tx) in &self.mempool {
            if picked.len() >= target {
                break;
            }
            if self.blacklist.contains(&tx.sender) || self.included_ids.contains(&tx.tx_id) {
                evict.push(*key);
                continue;
            }
            if tx.amount > single_cap {
                evict.push(*key);
                self.dropped_over_cap += 1;
                continue;
            }
            if total + tx.amount as u128 > total_cap as u128 {
                continue;
            }
            total += tx.amount as u128;
            picked.push(tx.clone());
        }
        for key in evict {
            if let Some(tx) = self.mempool.remove(&key) {
                self.mempool_ids.remove(&tx.tx_id);
            }
        }
        picked
    }

    /// Assembles a draft and the first round of signature requests.
    /// Returns nothing when no admissible transactions are available.
    pub fn build_draft(
        &mut self,
        params: DraftParams,
        timeouts: DraftTimeouts,
        now_ms: u64,
    ) -> Option<(u64, Vec<SignRequest>)> {
        let tx_list = self.pick_txs(params.tx_target, params.single_cap, params.total_cap);
        if tx_list.is_empty() {
            return None;
        }
        let tx_digest = hash_transactions(&tx_list);
        let draft_id = self.next_draft_id;
        self.next_draft_id += 1;
        let slots: Vec<DraftSlot> = params
            .signers
            .iter()
            .enumerate()
            .map(|(i, (signer, distance))| DraftSlot {
                index: i as u32 + 1,
                target: *signer,
                current: *signer,
                distance: *distance,
                state: SlotState::Waiting { deadline_ms: now_ms + timeouts.signer_timeout_ms },
                substitutions: 0,
                tried: Vec::new(),
            })
            .collect();
        let mut draft = PendingDraft {
            draft_id,
            height: params.height,
            prev_hash: params.prev_hash,
            tx_list,
            tx_digest,
            timestamp_ms: params.timestamp_ms,
            required_signers: params.signers.len() as u32,
            merger_distance: params.merger_distance,
            signing_digest: [0; 32],
            slots,
        };
        draft.signing_digest = draft.request_for(self.id, &draft.slots[0]).signing_digest();
        let requests: Vec<SignRequest> =
            draft.slots.iter().map(|s| draft.request_for(self.id, s)).collect();
        self.drafts.push(draft);
        Some((draft_id, requests))
    }

    pub fn draft(&self, draft_id: u64) -> Option<&PendingDraft> {
        self.drafts.iter().find(|d| d.draft_id == draft_id)
    }

    /// Signers already used by a draft (current and exhausted), which a
    /// substitute pick must avoid.
    pub fn draft_exclusions(&self, draft_id: u64) -> BTreeSet<Digest> {
        let mut out = BTreeSet::new();
        if let Some(d) = self.drafts.iter().find(|d| d.draft_id == draft_id) {
            for s in &d.slots {
                out.insert(s.current);
                out.extend(s.tried.iter().copied());
            }
        }
        out
    }

    pub fn on_sign_response(
        &mut self,
        resp: &SignResponse,
        keys: &KeyDirectory,
        timeouts: DraftTimeouts,
        now_ms: u64,
    ) -> RespOutcome {
        let Some(di) = self.drafts.iter().position(|d| d.signing_digest == resp.draft) else {
            return RespOutcome::Ignored;
        };
        let draft_id = self.drafts[di].draft_id;
        let Some(si) = self.drafts[di].slots.iter().position(|s| {
            s.current == resp.signer && !matches!(s.state, SlotState::Signed(_))
        }) else {
            return RespOutcome::Ignored;
        };

        match &resp.verdict {
            Verdict::Signed { signature, distance } => {
                if !keys.verify(&resp.signer, &resp.draft, signature) {
                    return RespOutcome::Ignored;
                }
                let slot = &mut self.drafts[di].slots[si];
                slot.state = SlotState::Signed(SignerSignature {
                    signer: resp.signer,
                    signature: signature.clone(),
                    distance: *distance,
                });
                if self.drafts[di]
                    .slots
                    .iter()
                    .all(|s| matches!(s.state, SlotState::Signed(_)))
                {
                    let draft = self.drafts.remove(di);
                    let block = self.assemble(draft, keys.scheme());
                    self.last_produced_height = Some(block.height);
                    return RespOutcome::Completed(Box::new(block));
                }
                RespOutcome::Recorded
            }
            Verdict::Rejected { reason } => {
                let slot = &mut self.drafts[di].slots[si];
                if !matches!(slot.state, SlotState::Waiting { .. }) {
                    return RespOutcome::Ignored;
                }
                if let RejectReason::AlreadyVotedHeight { other } = reason {
                    // hold the slot: either the competing block shows up and
                    // this draft is dropped, or the deadline substitutes
                    slot.state = SlotState::AwaitingEvidence {
                        deadline_ms: now_ms + timeouts.evidence_timeout_ms,
                        other: *other,
                    };
                    return RespOutcome::AwaitingEvidence { draft_id, slot: si as u32 + 1 };
                }
                slot.tried.push(slot.current);
                slot.state = SlotState::NeedsAssign;
                RespOutcome::NeedSubstitute { draft_id, slot: si as u32 + 1 }
            }
            Verdict::Reported { violation, evidence } => {
                if *violation == Violation::DoubleSpend {
                    if let Evidence::DoubleSpend { sender, merger, .. } = evidence {
                        self.blacklist.insert(*sender);
                        if *merger != self.id {
                            self.blacklist.insert(*merger);
                        }
                    }
                    self.drafts.remove(di);
                    return RespOutcome::DraftAborted { draft_id };
                }
                // a timestamp report voids the draft as well: every honest
                // signer applies the same rule, so retrying is pointless
                self.drafts.remove(di);
                RespOutcome::DraftAborted { draft_id }
            }
        }
    }

    fn assemble(&self, draft: PendingDraft, scheme: &dyn SignatureScheme) -> Block {
        let signer_sigs: Vec<SignerSignature> = draft
            .slots
            .into_iter()
            .map(|s| match s.state {
                SlotState::Signed(sig) => sig,
                _ => unreachable!("assemble called with open slots"),
            })
            .collect();
        let mut block = Block {
            height: draft.height,
            prev_hash: draft.prev_hash,
            tx_list: draft.tx_list,
            tx_digest: draft.tx_digest,
            timestamp_ms: draft.timestamp_ms,
            required_signers: draft.required_signers,
            signer_sigs,
            merger: self.id,
            merger_distance: draft.merger_distance,
            merger_sig: Vec::new(),
        };
        block.merger_sig = scheme.sign(&self.keypair.private, &block.body_bytes());
        block
    }

    /// Expires slot deadlines. Waiting past deadline and evidence windows
    /// that lapsed both turn into substitution needs.
    pub fn tick(&mut self, now_ms: u64) -> Vec<TickEvent> {
        let mut events = Vec::new();
        for d in &mut self.drafts {
            for s in &mut d.slots {
                let expired = match &s.state {
                    SlotState::Waiting { deadline_ms } => *deadline_ms <= now_ms,
                    SlotState::AwaitingEvidence { deadline_ms, .. } => *deadline_ms <= now_ms,
                    _ => false,
                };
                if expired {
                    s.tried.push(s.current);
                    s.state = SlotState::NeedsAssign;
                    events.push(TickEvent::NeedSubstitute {
                        draft_id: d.draft_id,
                        slot: s.index,
                    });
                }
            }
        }
        events
    }

    /// Points a slot at the next-nearest signer the caller selected.
    pub fn substitute(
        &mut self,
        draft_id: u64,
        slot: u32,
        signer: Digest,
        distance: u64,
        timeouts: DraftTimeouts,
        now_ms: u64,
    ) -> SubstituteOutcome {
        let Some(di) = self.drafts.iter().position(|d| d.draft_id == draft_id) else {
            return SubstituteOutcome::DraftAbandoned { height: 0 };
        };
        let height = self.drafts[di].height;
        let Some(si) = self.drafts[di].slots.iter().position(|s| s.index == slot) else {
            return SubstituteOutcome::DraftAbandoned { height };
        };
        if matches!(self.drafts[di].slots[si].state, SlotState::Signed(_)) {
            return SubstituteOutcome::NotNeeded;
        }
        if self.drafts[di].slots[si].substitutions >= timeouts.max_substitutions {
            self.drafts.remove(di);
            return SubstituteOutcome::DraftAbandoned { height };
        }
        let merger = self.id;
        let d = &mut self.drafts[di];
        let s = &mut d.slots[si];
        s.current = signer;
        s.distance = distance;
        s.substitutions += 1;
        s.state = SlotState::Waiting { deadline_ms: now_ms + timeouts.signer_timeout_ms };
        let req = d.request_for(merger, &d.slots[si]);
        SubstituteOutcome::Request(req)
    }

    /// Records an accepted block: its transactions leave the pool for good
    /// and any draft at or below its height is dropped (the race is lost or
    /// the chain moved on). Returns the abandoned draft ids.
    pub fn on_block_accepted(&mut self, block: &Block) -> Vec<u64> {
        for tx in &block.tx_list {
            self.included_ids.insert(tx.tx_id);
            if self.mempool_ids.remove(&tx.tx_id) {
                self.mempool.remove(&(tx.timestamp_ms, tx.tx_id));
            }
        }
        if block.merger == self.id {
            self.last_produced_height =
                Some(self.last_produced_height.map_or(block.height, |h| h.max(block.height)));
        }
        let mut dropped = Vec::new();
        self.drafts.retain(|d| {
            if d.height <= block.height {
                dropped.push(d.draft_id);
                false
            } else {
                true
            }
        });
        dropped
    }

    /// Applies a misbehavior broadcast: blacklist and, if the report names
    /// one of this merger's drafts, abort it.
    pub fn on_report(&mut self, report: &Report) -> Option<u64> {
        let Evidence::DoubleSpend { sender, merger, conflicting_block, .. } = &report.evidence
        else {
            return None;
        };
        if report.violation == Violation::DoubleSpend {
            self.blacklist.insert(*sender);
            if *merger != self.id {
                self.blacklist.insert(*merger);
            }
        }
        if let Some(di) = self
            .drafts
            .iter()
            .position(|d| d.signing_digest == *conflicting_block)
        {
            let id = self.drafts[di].draft_id;
            self.drafts.remove(di);
            return Some(id);
        }
        None
    }
}

/// Broadcast hold-down proportional to signer group quality: better (lower)
/// quality groups publish sooner.
pub fn broadcast_delay_ms(k_delay_ms: u64, quality: &Ratio<BigInt>) -> u64 {
    if quality.is_zero() {
        return 0;
    }
    let scaled = quality * BigInt::from(k_delay_ms);
    scaled.floor().to_integer().to_u64().unwrap_or(u64::MAX)
}

/// Quality of the signer set actually carried by a block, on the same
/// [0, 1) scale as selection-time group quality.
pub fn block_quality(block: &Block, metric: Metric) -> Ratio<BigInt> {
    if block.signer_sigs.is_empty() {
        return Ratio::zero();
    }
    let sum: u64 = block.signer_sigs.iter().map(|s| s.distance).sum();
    let denom = BigInt::from(metric.max_value() + 1) * BigInt::from(block.signer_sigs.len() as u64);
    Ratio::new(BigInt::from(sum), denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha256, MacScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    struct Net {
        keys: KeyDirectory,
        genesis: Block,
        merger: MergerNode,
        signers: Vec<SignerNode>,
        senders: Vec<(Digest, KeyPair)>,
    }

    fn setup(n_signers: usize, n_senders: usize) -> Net {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut keys = KeyDirectory::new(Arc::new(MacScheme));
        let genesis = Block::genesis();

        let mk = MacScheme.generate(&mut rng);
        let mid = sha256(b"merger-0");
        keys.insert(mid, mk.public.clone());
        let merger = MergerNode::new(mid, mk, 0);

        let mut signers = Vec::new();
        for i in 0..n_signers {
            let kp = MacScheme.generate(&mut rng);
            let id = sha256(format!("signer-{i}").as_bytes());
            keys.insert(id, kp.public.clone());
            signers.push(SignerNode::new(id, kp, 0, &genesis));
        }
        let mut senders = Vec::new();
        for i in 0..n_senders {
            let kp = MacScheme.generate(&mut rng);
            let id = sha256(format!("account-{i}").as_bytes());
            keys.insert(id, kp.public.clone());
            senders.push((id, kp));
        }
        Net { keys, genesis, merger, signers, senders }
    }

    fn mk_tx(net: &Net, from: usize, to: usize, amount: u64, ts: u64) -> Transaction {
        Transaction::new_signed(
            &MacScheme,
            &net.senders[from].1,
            &net.senders[to].1,
            net.senders[from].0,
            net.senders[to].0,
            amount,
            1,
            ts,
            "pay",
            "main",
        )
    }

    fn draft_params(net: &Net, ts: u64) -> DraftParams {
        DraftParams {
            height: 1,
            prev_hash: net.genesis.digest(),
            timestamp_ms: ts,
            merger_distance: 7,
            signers: net.signers.iter().map(|s| (s.id, 3)).collect(),
            tx_target: 100,
            single_cap: u64::MAX,
            total_cap: u64::MAX,
        }
    }

    #[test]
    fn wire_roundtrip_every_message_type() {
        let net = setup(1, 2);
        let tx = mk_tx(&net, 0, 1, 500, 1000);
        let req = SignRequest {
            height: 3,
            prev_hash: sha256(b"p"),
            tx_list: vec![tx.clone()],
            tx_digest: hash_transactions(&[tx.clone()]),
            timestamp_ms: 9,
            required_signers: 5,
            merger: sha256(b"m"),
            merger_distance: 11,
            signer: sha256(b"s"),
            slot_index: 2,
            slot_distance: 13,
        };
        let resp = SignResponse {
            signer: sha256(b"s"),
            height: 3,
            draft: sha256(b"d"),
            verdict: Verdict::Rejected {
                reason: RejectReason::AlreadyVotedHeight { other: sha256(b"o") },
            },
        };
        let report = Report {
            reporter: sha256(b"r"),
            violation: Violation::DoubleSpend,
            evidence: Evidence::DoubleSpend {
                tx_id: sha256(b"t"),
                original_block: sha256(b"b1"),
                conflicting_block: sha256(b"b2"),
                sender: sha256(b"x"),
                merger: sha256(b"m"),
            },
        };
        let mut block = net.genesis.clone();
        block.merger_sig = vec![9, 9, 9];

        for msg in [
            Message::Tx(tx),
            Message::SignReq(req),
            Message::SignResp(resp),
            Message::Block(block),
            Message::Report(report),
        ] {
            let bytes = msg.encode();
            assert_eq!(Message::decode(&bytes).unwrap(), msg);
        }
        assert!(Message::decode(&[77]).is_err());
    }

    #[test]
    fn full_draft_cycle_produces_valid_block() {
        let mut net = setup(3, 4);
        let now = 10_000;
        for i in 0..3 {
            let tx = mk_tx(&net, i, i + 1, 100 + i as u64, 1000 + i as u64);
            assert!(net.merger.ingest_tx(tx, &net.keys));
        }
        assert_eq!(net.merger.mempool_len(), 3);

        let (_, requests) = net
            .merger
            .build_draft(draft_params(&net, now), DraftTimeouts::default(), now)
            .unwrap();
        assert_eq!(requests.len(), 3);

        let mut completed = None;
        for (i, req) in requests.iter().enumerate() {
            let resp = net.signers[i].handle_request(&MacScheme, req, now);
            assert!(matches!(resp.verdict, Verdict::Signed { .. }), "{:?}", resp.verdict);
            match net.merger.on_sign_response(&resp, &net.keys, DraftTimeouts::default(), now) {
                RespOutcome::Recorded => {}
                RespOutcome::Completed(b) => completed = Some(*b),
                other => panic!("unexpected outcome {other:?}"),
            }
        }
        let block = completed.expect("block should complete on last signature");
        assert_eq!(block.height, 1);
        assert_eq!(block.signer_sigs.len(), 3);
        assert_eq!(block.tx_list.len(), 3);
        assert_eq!(net.merger.last_produced_height, Some(1));

        // the assembled block passes structural validation
        let tree = crate::BlockTree::new(
            Arc::new(net.genesis.clone()),
            10,
            Ratio::new(BigInt::from(1), BigInt::from(2)),
            None,
        );
        let report = tree.validate_block(&block, &net.keys, now);
        assert!(report.is_ok(), "{report:?}");

        // signed work is logged and the pool drains on acceptance
        assert_eq!(net.signers[0].signed_log().len(), 1);
        net.merger.on_block_accepted(&block);
        assert_eq!(net.merger.mempool_len(), 0);
    }

    #[test]
    fn check_order_timestamp_beats_join() {
        let mut net = setup(1, 2);
        // signer joined at height 5, and the draft timestamp is also absurd;
        // the timestamp check fires first
        net.signers[0].join_height = 5;
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (_, reqs) = net
            .merger
            .build_draft(draft_params(&net, 500_000), DraftTimeouts::default(), 1_000)
            .unwrap();
        let resp = net.signers[0].handle_request(&MacScheme, &reqs[0], 1_000);
        match resp.verdict {
            Verdict::Reported { violation, .. } => {
                assert_eq!(violation, Violation::TimestampOutOfRange)
            }
            other => panic!("expected timestamp report, got {other:?}"),
        }

        // with a sane timestamp the join check surfaces
        let (_, reqs) = net
            .merger
            .build_draft(draft_params(&net, 1_000), DraftTimeouts::default(), 1_000)
            .unwrap();
        let resp = net.signers[0].handle_request(&MacScheme, &reqs[0], 1_000);
        assert!(matches!(
            resp.verdict,
            Verdict::Rejected { reason: RejectReason::PredatesJoin }
        ));
    }

    #[test]
    fn stale_height_rejected() {
        let mut net = setup(1, 2);
        net.signers[0].note_finalized(4);
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (_, reqs) = net
            .merger
            .build_draft(draft_params(&net, 2_000), DraftTimeouts::default(), 2_000)
            .unwrap();
        let resp = net.signers[0].handle_request(&MacScheme, &reqs[0], 2_000);
        assert!(matches!(
            resp.verdict,
            Verdict::Rejected { reason: RejectReason::StaleHeight { finalized_height: 4 } }
        ));
    }

    #[test]
    fn one_vote_per_height_with_idempotent_resign() {
        let mut net = setup(1, 3);
        let tx_a = mk_tx(&net, 0, 1, 100, 1000);
        let tx_b = mk_tx(&net, 1, 2, 200, 1001);

        let mk_req = |tx: &Transaction, ts: u64| SignRequest {
            height: 1,
            prev_hash: net.genesis.digest(),
            tx_list: vec![tx.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(tx)),
            timestamp_ms: ts,
            required_signers: 1,
            merger: net.merger.id,
            merger_distance: 0,
            signer: net.signers[0].id,
            slot_index: 1,
            slot_distance: 0,
        };
        let req_a = mk_req(&tx_a, 2_000);
        let req_b = mk_req(&tx_b, 2_001);

        let first = net.signers[0].handle_request(&MacScheme, &req_a, 2_000);
        assert!(matches!(first.verdict, Verdict::Signed { .. }));

        // competing draft at the same height names the earlier vote
        let second = net.signers[0].handle_request(&MacScheme, &req_b, 2_001);
        match second.verdict {
            Verdict::Rejected { reason: RejectReason::AlreadyVotedHeight { other } } => {
                assert_eq!(other, req_a.signing_digest());
            }
            other => panic!("expected vote conflict, got {other:?}"),
        }

        // re-asking for the same draft just signs again
        let again = net.signers[0].handle_request(&MacScheme, &req_a, 2_002);
        assert!(matches!(again.verdict, Verdict::Signed { .. }));
    }

    #[test]
    fn already_signed_tx_at_other_height() {
        let mut net = setup(1, 2);
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        let genesis_digest = net.genesis.digest();

        let req1 = SignRequest {
            height: 1,
            prev_hash: genesis_digest,
            tx_list: vec![tx.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(&tx)),
            timestamp_ms: 2_000,
            required_signers: 1,
            merger: net.merger.id,
            merger_distance: 0,
            signer: net.signers[0].id,
            slot_index: 1,
            slot_distance: 0,
        };
        let resp = net.signers[0].handle_request(&MacScheme, &req1, 2_000);
        assert!(matches!(resp.verdict, Verdict::Signed { .. }));

        // pretend a block at height 1 extends the chain, then the same tx
        // shows up again at height 2
        let b1 = Block {
            height: 1,
            prev_hash: genesis_digest,
            tx_list: vec![],
            tx_digest: hash_transactions(&[]),
            timestamp_ms: 2_000,
            required_signers: 0,
            signer_sigs: vec![],
            merger: net.merger.id,
            merger_distance: 0,
            merger_sig: vec![],
        };
        net.signers[0].on_block(&b1);
        let req2 = SignRequest {
            height: 2,
            prev_hash: b1.digest(),
            timestamp_ms: 3_000,
            ..req1.clone()
        };
        let resp = net.signers[0].handle_request(&MacScheme, &req2, 3_000);
        assert!(matches!(
            resp.verdict,
            Verdict::Rejected { reason: RejectReason::AlreadySigned { .. } }
        ));
    }

    #[test]
    fn double_spend_reported_and_blacklisted() {
        let mut net = setup(1, 3);
        let tx1 = mk_tx(&net, 0, 1, 100, 1000);
        // same core fields except the recipient: same sender "source", forked
        // content. Forge the id so both claim the same identity.
        let mut tx2 = mk_tx(&net, 0, 2, 100, 1000);
        tx2.tx_id = tx1.tx_id;

        let genesis_digest = net.genesis.digest();
        let base = SignRequest {
            height: 1,
            prev_hash: genesis_digest,
            tx_list: vec![tx1.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(&tx1)),
            timestamp_ms: 2_000,
            required_signers: 1,
            merger: net.merger.id,
            merger_distance: 0,
            signer: net.signers[0].id,
            slot_index: 1,
            slot_distance: 0,
        };
        let resp = net.signers[0].handle_request(&MacScheme, &base, 2_000);
        assert!(matches!(resp.verdict, Verdict::Signed { .. }));

        let b1 = Block {
            height: 1,
            prev_hash: genesis_digest,
            tx_list: vec![],
            tx_digest: hash_transactions(&[]),
            timestamp_ms: 2_000,
            required_signers: 0,
            signer_sigs: vec![],
            merger: net.merger.id,
            merger_distance: 0,
            merger_sig: vec![],
        };
        net.signers[0].on_block(&b1);
        let conflicting = SignRequest {
            height: 2,
            prev_hash: b1.digest(),
            tx_list: vec![tx2.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(&tx2)),
            timestamp_ms: 3_000,
            ..base.clone()
        };
        let resp = net.signers[0].handle_request(&MacScheme, &conflicting, 3_000);
        let (violation, evidence) = match resp.verdict {
            Verdict::Reported { violation, evidence } => (violation, evidence),
            other => panic!("expected report, got {other:?}"),
        };
        assert_eq!(violation, Violation::DoubleSpend);
        let Evidence::DoubleSpend { tx_id, original_block, conflicting_block, sender, .. } =
            evidence.clone()
        else {
            panic!("wrong evidence shape");
        };
        assert_eq!(tx_id, tx1.tx_id);
        assert_eq!(original_block, base.signing_digest());
        assert_eq!(conflicting_block, conflicting.signing_digest());
        assert_eq!(sender, net.senders[0].0);

        // the report reaches a merger: sender blacklisted, and a fresh tx
        // from the same sender is now refused
        let report = Report {
            reporter: net.signers[0].id,
            violation,
            evidence,
        };
        net.merger.on_report(&report);
        assert!(net.merger.is_blacklisted(&net.senders[0].0));
        let tx3 = mk_tx(&net, 0, 1, 50, 5000);
        assert!(!net.merger.ingest_tx(tx3, &net.keys));
        assert_eq!(net.merger.dropped_blacklisted, 1);
    }

    #[test]
    fn double_spend_report_aborts_matching_draft() {
        let mut net = setup(2, 3);
        let now = 5_000;
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (draft_id, reqs) = net
            .merger
            .build_draft(draft_params(&net, now), DraftTimeouts::default(), now)
            .unwrap();
        let draft_digest = reqs[0].signing_digest();

        let resp = SignResponse {
            signer: net.signers[0].id,
            height: 1,
            draft: draft_digest,
            verdict: Verdict::Reported {
                violation: Violation::DoubleSpend,
                evidence: Evidence::DoubleSpend {
                    tx_id: sha256(b"t"),
                    original_block: sha256(b"elsewhere"),
                    conflicting_block: draft_digest,
                    sender: net.senders[0].0,
                    merger: net.merger.id,
                },
            },
        };
        match net.merger.on_sign_response(&resp, &net.keys, DraftTimeouts::default(), now) {
            RespOutcome::DraftAborted { draft_id: id } => assert_eq!(id, draft_id),
            other => panic!("expected abort, got {other:?}"),
        }
        assert!(!net.merger.has_draft());
        assert!(net.merger.is_blacklisted(&net.senders[0].0));
    }

    #[test]
    fn timeout_substitution_completes_block() {
        let mut net = setup(3, 4);
        let now = 5_000;
        let timeouts = DraftTimeouts::default();
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (draft_id, reqs) = net
            .merger
            .build_draft(
                DraftParams {
                    signers: vec![(net.signers[0].id, 3), (net.signers[1].id, 4)],
                    ..draft_params(&net, now)
                },
                timeouts,
                now,
            )
            .unwrap();

        // slot 1 answers; slot 2 stays silent past its deadline
        let r0 = net.signers[0].handle_request(&MacScheme, &reqs[0], now);
        assert!(matches!(
            net.merger.on_sign_response(&r0, &net.keys, timeouts, now),
            RespOutcome::Recorded
        ));
        assert!(net.merger.tick(now + 100).is_empty());
        let events = net.merger.tick(now + timeouts.signer_timeout_ms);
        assert_eq!(events, vec![TickEvent::NeedSubstitute { draft_id, slot: 2 }]);

        let exclusions = net.merger.draft_exclusions(draft_id);
        assert!(exclusions.contains(&net.signers[0].id));
        assert!(exclusions.contains(&net.signers[1].id));

        // caller picks signer 2 as the substitute
        let later = now + timeouts.signer_timeout_ms;
        let req = match net.merger.substitute(draft_id, 2, net.signers[2].id, 9, timeouts, later) {
            SubstituteOutcome::Request(r) => r,
            other => panic!("expected request, got {other:?}"),
        };
        assert_eq!(req.signer, net.signers[2].id);
        let r2 = net.signers[2].handle_request(&MacScheme, &req, later);
        match net.merger.on_sign_response(&r2, &net.keys, timeouts, later) {
            RespOutcome::Completed(b) => {
                assert_eq!(b.signer_sigs.len(), 2);
                assert_eq!(b.signer_sigs[1].signer, net.signers[2].id);
                assert_eq!(b.signer_sigs[1].distance, 9);
            }
            other => panic!("expected completion, got {other:?}"),
        }
    }

    #[test]
    fn substitution_budget_abandons_draft() {
        let mut net = setup(1, 2);
        let now = 5_000;
        let timeouts = DraftTimeouts { max_substitutions: 1, ..DraftTimeouts::default() };
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (draft_id, _) = net
            .merger
            .build_draft(draft_params(&net, now), timeouts, now)
            .unwrap();
        match net.merger.substitute(draft_id, 1, sha256(b"x"), 1, timeouts, now) {
            SubstituteOutcome::Request(_) => {}
            other => panic!("first substitution should pass, got {other:?}"),
        }
        match net.merger.substitute(draft_id, 1, sha256(b"y"), 1, timeouts, now) {
            SubstituteOutcome::DraftAbandoned { height } => assert_eq!(height, 1),
            other => panic!("expected abandonment, got {other:?}"),
        }
        assert!(!net.merger.has_draft());
    }

    #[test]
    fn vote_conflict_holds_then_substitutes() {
        let mut net = setup(2, 3);
        let now = 5_000;
        let timeouts = DraftTimeouts::default();
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx, &net.keys);
        let (draft_id, reqs) = net
            .merger
            .build_draft(
                DraftParams {
                    signers: vec![(net.signers[0].id, 3)],
                    ..draft_params(&net, now)
                },
                timeouts,
                now,
            )
            .unwrap();

        let resp = SignResponse {
            signer: net.signers[0].id,
            height: 1,
            draft: reqs[0].signing_digest(),
            verdict: Verdict::Rejected {
                reason: RejectReason::AlreadyVotedHeight { other: sha256(b"rival") },
            },
        };
        assert!(matches!(
            net.merger.on_sign_response(&resp, &net.keys, timeouts, now),
            RespOutcome::AwaitingEvidence { slot: 1, .. }
        ));
        // nothing expires before the evidence window lapses
        assert!(net.merger.tick(now + timeouts.evidence_timeout_ms - 1).is_empty());
        let events = net.merger.tick(now + timeouts.evidence_timeout_ms);
        assert_eq!(events, vec![TickEvent::NeedSubstitute { draft_id, slot: 1 }]);
    }

    #[test]
    fn accepted_block_drops_race_losing_drafts() {
        let mut net = setup(1, 3);
        let now = 5_000;
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        net.merger.ingest_tx(tx.clone(), &net.keys);
        net.merger
            .build_draft(draft_params(&net, now), DraftTimeouts::default(), now)
            .unwrap();
        assert!(net.merger.has_draft());

        let rival = Block {
            height: 1,
            prev_hash: net.genesis.digest(),
            tx_list: vec![tx.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(&tx)),
            timestamp_ms: now,
            required_signers: 0,
            signer_sigs: vec![],
            merger: sha256(b"rival-merger"),
            merger_distance: 0,
            merger_sig: vec![],
        };
        let dropped = net.merger.on_block_accepted(&rival);
        assert_eq!(dropped.len(), 1);
        assert!(!net.merger.has_draft());
        // the carried tx is permanently spoken for
        assert!(!net.merger.ingest_tx(tx, &net.keys));
    }

    #[test]
    fn ingest_validates_and_dedups() {
        let mut net = setup(1, 3);
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        assert!(net.merger.ingest_tx(tx.clone(), &net.keys));
        assert!(!net.merger.ingest_tx(tx.clone(), &net.keys), "duplicate ignored");
        assert_eq!(net.merger.mempool_len(), 1);

        let mut tampered = mk_tx(&net, 1, 2, 100, 1001);
        tampered.amount = 999;
        assert!(!net.merger.ingest_tx(tampered, &net.keys));
        assert_eq!(net.merger.dropped_invalid, 1);
    }

    #[test]
    fn draft_caps_enforced() {
        let mut net = setup(1, 4);
        let now = 5_000;
        // amounts: 600 over the single cap; 300 + 300 exceed the total cap
        for (i, amount) in [(0usize, 600u64), (1, 300), (2, 300)] {
            let tx = mk_tx(&net, i, 3, amount, 1000 + i as u64);
            assert!(net.merger.ingest_tx(tx, &net.keys));
        }
        let (_, reqs) = net
            .merger
            .build_draft(
                DraftParams {
                    single_cap: 500,
                    total_cap: 400,
                    ..draft_params(&net, now)
                },
                DraftTimeouts::default(),
                now,
            )
            .unwrap();
        let drafted = &reqs[0].tx_list;
        assert_eq!(drafted.len(), 1, "only the first in-cap tx fits the total");
        assert_eq!(drafted[0].amount, 300);
        assert_eq!(net.merger.dropped_over_cap, 1);
        // the over-cap tx is gone; the displaced one is still pooled
        assert_eq!(net.merger.mempool_len(), 2);
    }

    #[test]
    fn unknown_parent_rejected() {
        let mut net = setup(1, 2);
        let tx = mk_tx(&net, 0, 1, 100, 1000);
        let req = SignRequest {
            height: 2,
            prev_hash: sha256(b"never-seen"),
            tx_list: vec![tx.clone()],
            tx_digest: hash_transactions(std::slice::from_ref(&tx)),
            timestamp_ms: 2_000,
            required_signers: 1,
            merger: net.merger.id,
            merger_distance: 0,
            signer: net.signers[0].id,
            slot_index: 1,
            slot_distance: 0,
        };
        let resp = net.signers[0].handle_request(&MacScheme, &req, 2_000);
        assert!(matches!(
            resp.verdict,
            Verdict::Rejected { reason: RejectReason::UnknownParent }
        ));
    }

    #[test]
    fn quality_delay_scales() {
        let q = Ratio::new(BigInt::from(1), BigInt::from(4));
        assert_eq!(broadcast_delay_ms(500, &q), 125);
        assert_eq!(broadcast_delay_ms(500, &Ratio::zero()), 0);

        let mut block = Block::genesis();
        block.signer_sigs = vec![
            SignerSignature { signer: sha256(b"a"), signature: vec![], distance: 100 },
            SignerSignature { signer: sha256(b"b"), signature: vec![], distance: 156 },
        ];
        // (100 + 156) / (257 * 2) = 128/257
        let q = block_quality(&block, Metric::Hamming);
        assert_eq!(q, Ratio::new(BigInt::from(128), BigInt::from(257)));
        assert_eq!(block_quality(&Block::genesis(), Metric::Hamming), Ratio::zero());
    }
}
