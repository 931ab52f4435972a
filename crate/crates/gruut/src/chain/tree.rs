//! Block-tree maintenance: insertion, validation, weights, fork choice,
//! and finalization.

use super::block::{hash_transactions, Block, Transaction};
use crate::crypto::{Digest, SignatureScheme};
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::Zero;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    BadLinkage,
    InsufficientSignatures,
    DuplicateSigner,
    BadSignature,
    DoubleSpend,
    TimestampOutOfRange,
    IneligibleMerger,
}

/// Outcome of block validation. Violations are data, not failures; a block
/// is acceptable iff the report is empty. `IneligibleMerger` is appended by
/// the consensus layer, which knows the selection context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, v: Violation) -> bool {
        self.violations.contains(&v)
    }

    fn push(&mut self, v: Violation) {
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum InsertError {
    #[error("parent block not present")]
    UnknownParent,
    #[error("block conflicts with the finalized prefix")]
    FinalityViolation,
    #[error("block already present")]
    DuplicateBlock,
    #[error("height does not extend parent")]
    BadHeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("tip not present in tree")]
pub struct UnknownTip;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ChainParseError {
    pub line: usize,
    pub msg: String,
}

pub const CHAIN_HEADER_PREFIX: &str = "#gruut-chain v1";

/// Maps network IDs to verification keys for signature checking.
pub struct KeyDirectory {
    scheme: Arc<dyn SignatureScheme>,
    keys: BTreeMap<Digest, Vec<u8>>,
}

impl KeyDirectory {
    pub fn new(scheme: Arc<dyn SignatureScheme>) -> Self {
        KeyDirectory { scheme, keys: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: Digest, public_key: Vec<u8>) {
        self.keys.insert(id, public_key);
    }

    pub fn get(&self, id: &Digest) -> Option<&[u8]> {
        self.keys.get(id).map(|k| k.as_slice())
    }

    pub fn scheme(&self) -> &dyn SignatureScheme {
        self.scheme.as_ref()
    }

    pub fn verify(&self, id: &Digest, msg: &[u8], sig: &[u8]) -> bool {
        match self.keys.get(id) {
            Some(pk) => self.scheme.verify(pk, msg, sig),
            None => false,
        }
    }
}

struct NodeEntry {
    block: Arc<Block>,
    parent: Digest,
    live: bool,
}

/// All observed blocks with fork structure, weights, and finalization
/// state. Mutations are `&mut self` and therefore serialized; reads of a
/// snapshot may be shared.
pub struct BlockTree {
    nodes: BTreeMap<Digest, NodeEntry>,
    children: BTreeMap<Digest, Vec<Digest>>,
    genesis: Digest,
    finalized_head: Digest,
    confirmation_depth: u64,
    alpha: Ratio<BigInt>,
    finalized_path: Vec<Digest>,
    finalized_set: BTreeSet<Digest>,
    /// Ledger state through the finalized head; present only when the tree
    /// was built with initial balances (ledger tracking).
    ledger: Option<Ledger>,
}

struct Ledger {
    balances: BTreeMap<Digest, i128>,
    spent: BTreeSet<Digest>,
}

impl BlockTree {
    /// `initial_balances`: Some enables double-spend and balance tracking
    /// (seeded from these accounts); None keeps the tree structural-only.
    pub fn new(
        genesis: Arc<Block>,
        confirmation_depth: u64,
        alpha: Ratio<BigInt>,
        initial_balances: Option<BTreeMap<Digest, i128>>,
    ) -> Self {
        assert_eq!(genesis.height, 0, "genesis must be at height zero");
        let gd = genesis.digest();
        let mut nodes = BTreeMap::new();
        nodes.insert(gd, NodeEntry { block: genesis, parent: gd, live: true });
        BlockTree {
            nodes,
            children: BTreeMap::new(),
            genesis: gd,
            finalized_head: gd,
            confirmation_depth,
            alpha,
            finalized_path: vec![gd],
            finalized_set: BTreeSet::from([gd]),
            ledger: initial_balances.map(|balances| Ledger { balances, spent: BTreeSet::new() }),
        }
    }

    pub fn genesis(&self) -> Digest {
        self.genesis
    }

    pub fn finalized_head(&self) -> Digest {
        self.finalized_head
    }

    pub fn confirmation_depth(&self) -> u64 {
        self.confirmation_depth
    }

    pub fn alpha(&self) -> &Ratio<BigInt> {
        &self.alpha
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.nodes.contains_key(digest)
    }

    pub fn block(&self, digest: &Digest) -> Option<&Arc<Block>> {
        self.nodes.get(digest).map(|n| &n.block)
    }

    pub fn height_of(&self, digest: &Digest) -> Option<u64> {
        self.nodes.get(digest).map(|n| n.block.height)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn finalized_path(&self) -> &[Digest] {
        &self.finalized_path
    }

    /// Finalized account balances; empty when ledger tracking is off.
    pub fn finalized_balances(&self) -> BTreeMap<Digest, i128> {
        self.ledger.as_ref().map(|l| l.balances.clone()).unwrap_or_default()
    }

    /// Walks up to `n` ancestors starting from `from` inclusive,
    /// most recent first.
    pub fn ancestors(&self, from: &Digest, n: usize) -> Vec<Arc<Block>> {
        let mut out = Vec::with_capacity(n);
        let mut cur = *from;
        while out.len() < n {
            let Some(entry) = self.nodes.get(&cur) else { break };
            out.push(entry.block.clone());
            if cur == self.genesis {
                break;
            }
            cur = entry.parent;
        }
        out
    }

    pub fn insert(&mut self, block: Arc<Block>) -> Result<Digest, InsertError> {
        let digest = block.digest();
        if self.nodes.contains_key(&digest) {
            return Err(InsertError::DuplicateBlock);
        }
        let parent = block.prev_hash;
        let Some(parent_entry) = self.nodes.get(&parent) else {
            return Err(InsertError::UnknownParent);
        };
        if block.height != parent_entry.block.height + 1 {
            return Err(InsertError::BadHeight);
        }
        let parent_finalized = self.finalized_set.contains(&parent);
        if parent_finalized && parent != self.finalized_head {
            return Err(InsertError::FinalityViolation);
        }
        if !parent_finalized && !parent_entry.live {
            return Err(InsertError::FinalityViolation);
        }
        self.nodes.insert(digest, NodeEntry { block, parent, live: true });
        let siblings = self.children.entry(parent).or_default();
        let pos = siblings.binary_search(&digest).unwrap_err();
        siblings.insert(pos, digest);
        Ok(digest)
    }

    /// Per-block weight contribution: the signature count minus
    /// alpha * (merger distance + signer distances) / ((participants) * 2^256),
    /// where participants counts the signers plus the merger.
    fn block_weight(block: &Block, alpha: &Ratio<BigInt>) -> Ratio<BigInt> {
        let sigs = BigInt::from(block.signer_sigs.len() as u64);
        let dist_sum: u64 = block.merger_distance
            + block.signer_sigs.iter().map(|s| s.distance).sum::<u64>();
        if dist_sum == 0 {
            return Ratio::from_integer(sigs);
        }
        let participants = BigInt::from(block.signer_sigs.len() as u64 + 1);
        let denom = participants * (BigInt::from(1) << 256);
        Ratio::from_integer(sigs) - alpha * Ratio::new(BigInt::from(dist_sum), denom)
    }

    /// Accumulated weight of the segment between the finalized prefix
    /// (exclusive) and `tip` (inclusive).
    pub fn chain_weight(&self, tip: &Digest, alpha: &Ratio<BigInt>) -> Result<Ratio<BigInt>, UnknownTip> {
        if !self.nodes.contains_key(tip) {
            return Err(UnknownTip);
        }
        let mut sum = Ratio::zero();
        let mut cur = *tip;
        while !self.finalized_set.contains(&cur) {
            let entry = &self.nodes[&cur];
            sum += Self::block_weight(&entry.block, alpha);
            cur = entry.parent;
        }
        Ok(sum)
    }

    fn live_children(&self, of: &Digest) -> impl Iterator<Item = &Digest> {
        self.children
            .get(of)
            .into_iter()
            .flatten()
            .filter(|d| self.nodes[*d].live)
    }

    /// Subtree weights for every live block under the finalized head,
    /// computed in one post-order pass.
    fn subtree_weights(&self, alpha: &Ratio<BigInt>) -> BTreeMap<Digest, Ratio<BigInt>> {
        let mut weights: BTreeMap<Digest, Ratio<BigInt>> = BTreeMap::new();
        // stack of (digest, expanded)
        let mut stack: Vec<(Digest, bool)> = self
            .live_children(&self.finalized_head)
            .map(|d| (*d, false))
            .collect();
        while let Some((d, expanded)) = stack.pop() {
            if expanded {
                let mut w = Self::block_weight(&self.nodes[&d].block, alpha);
                for c in self.live_children(&d) {
                    w += weights[c].clone();
                }
                weights.insert(d, w);
            } else {
                stack.push((d, true));
                for c in self.live_children(&d) {
                    stack.push((*c, false));
                }
            }
        }
        weights
    }

    /// Greedy heaviest-subtree descent from the finalized head; stale
    /// siblings count toward their subtree. Ties break toward the smaller
    /// block digest.
    pub fn fork_choice(&self, alpha: &Ratio<BigInt>) -> Digest {
        let weights = self.subtree_weights(alpha);
        let mut cur = self.finalized_head;
        loop {
            // children lists are sorted ascending, so keeping the first
            // strictly-heaviest child breaks ties toward the smaller digest
            let mut best: Option<(&Ratio<BigInt>, Digest)> = None;
            for c in self.live_children(&cur) {
                let w = &weights[c];
                match &best {
                    Some((bw, _)) if w <= bw => {}
                    _ => best = Some((w, *c)),
                }
            }
            match best {
                Some((_, c)) => cur = c,
                None => return cur,
            }
        }
    }

    pub fn fork_choice_default(&self) -> Digest {
        self.fork_choice(&self.alpha.clone())
    }

    /// Blocks from genesis to the current fork-choice tip, in height order.
    pub fn canonical_path(&self) -> Vec<Digest> {
        let tip = self.fork_choice_default();
        let mut segment = Vec::new();
        let mut cur = tip;
        while cur != self.finalized_head {
            segment.push(cur);
            cur = self.nodes[&cur].parent;
        }
        let mut path = self.finalized_path.clone();
        segment.reverse();
        path.extend(segment);
        path
    }

    /// Finalizes every fork-choice-path block that has accumulated the
    /// confirmation depth, killing conflicting subtrees. Returns the newly
    /// finalized digests in height order.
    pub fn advance_finalization(&mut self) -> Vec<Digest> {
        let alpha = self.alpha.clone();
        let tip = self.fork_choice(&alpha);
        let tip_height = self.nodes[&tip].block.height;
        // path from head (exclusive) to tip
        let mut path = Vec::new();
        let mut cur = tip;
        while cur != self.finalized_head {
            path.push(cur);
            cur = self.nodes[&cur].parent;
        }
        path.reverse();

        let mut newly = Vec::new();
        for d in path {
            let h = self.nodes[&d].block.height;
            if tip_height - h < self.confirmation_depth {
                break;
            }
            self.finalize_step(d);
            newly.push(d);
        }
        newly
    }

    fn finalize_step(&mut self, next: Digest) {
        debug_assert_eq!(self.nodes[&next].parent, self.finalized_head);
        // kill conflicting sibling subtrees
        let siblings: Vec<Digest> = self
            .live_children(&self.finalized_head)
            .copied()
            .filter(|d| *d != next)
            .collect();
        for s in siblings {
            self.kill_subtree(s);
        }
        self.finalized_head = next;
        self.finalized_path.push(next);
        self.finalized_set.insert(next);
        if self.ledger.is_some() {
            let block = self.nodes[&next].block.clone();
            let ledger = self.ledger.as_mut().unwrap();
            for tx in &block.tx_list {
                apply_tx(&mut ledger.balances, tx, &block.merger);
                ledger.spent.insert(tx.tx_id);
            }
        }
    }

    fn kill_subtree(&mut self, root: Digest) {
        let mut stack = vec![root];
        while let Some(d) = stack.pop() {
            if let Some(e) = self.nodes.get_mut(&d) {
                e.live = false;
            }
            if let Some(cs) = self.children.get(&d) {
                stack.extend(cs.iter().copied());
            }
        }
    }

    /// Structural and ledger validation of a block against this tree.
    /// The producing merger's group eligibility is outside this tree's
    /// knowledge and is checked by the consensus layer.
    pub fn validate_block(&self, block: &Block, keys: &KeyDirectory, now_ms: u64) -> ValidationReport {
        let mut report = ValidationReport::default();
        let Some(parent) = self.nodes.get(&block.prev_hash) else {
            report.push(Violation::BadLinkage);
            return report;
        };
        if block.height != parent.block.height + 1 {
            report.push(Violation::BadLinkage);
        }
        if hash_transactions(&block.tx_list) != block.tx_digest {
            report.push(Violation::BadLinkage);
        }
        if (block.signer_sigs.len() as u32) < block.required_signers {
            report.push(Violation::InsufficientSignatures);
        }
        let mut seen = BTreeSet::new();
        for s in &block.signer_sigs {
            if !seen.insert(s.signer) {
                report.push(Violation::DuplicateSigner);
            }
        }
        let signing = block.signing_digest();
        for s in &block.signer_sigs {
            if !keys.verify(&s.signer, &signing, &s.signature) {
                report.push(Violation::BadSignature);
            }
        }
        if !keys.verify(&block.merger, &block.body_bytes(), &block.merger_sig) {
            report.push(Violation::BadSignature);
        }
        for tx in &block.tx_list {
            let ok = match (keys.get(&tx.sender), keys.get(&tx.recipient)) {
                (Some(sk), Some(rk)) => tx.verify(keys.scheme(), sk, rk),
                _ => false,
            };
            if !ok {
                report.push(Violation::BadSignature);
                break;
            }
        }
        if !self.timestamp_valid(block, now_ms) {
            report.push(Violation::TimestampOutOfRange);
        }
        if self.ledger.is_some() && !self.spend_valid(block) {
            report.push(Violation::DoubleSpend);
        }
        report
    }

    /// Median-of-recent-ancestors rule: the timestamp must exceed the
    /// median of the last 11 ancestors and stay within 60 s of local time.
    fn timestamp_valid(&self, block: &Block, now_ms: u64) -> bool {
        if block.timestamp_ms > now_ms + 60_000 {
            return false;
        }
        let mut ts: Vec<u64> = self
            .ancestors(&block.prev_hash, 11)
            .iter()
            .map(|b| b.timestamp_ms)
            .collect();
        if ts.is_empty() {
            return true;
        }
        ts.sort_unstable();
        let median = ts[ts.len() / 2];
        block.timestamp_ms > median
    }

    fn spend_valid(&self, block: &Block) -> bool {
        let ledger = self.ledger.as_ref().unwrap();
        // replay the unfinalized segment of the block's own branch
        let mut path = Vec::new();
        let mut cur = block.prev_hash;
        while !self.finalized_set.contains(&cur) {
            let entry = &self.nodes[&cur];
            path.push(entry.block.clone());
            cur = entry.parent;
        }
        path.reverse();

        let mut overlay: BTreeMap<Digest, i128> = BTreeMap::new();
        let mut path_spent: BTreeSet<Digest> = BTreeSet::new();
        let balance = |overlay: &BTreeMap<Digest, i128>, id: &Digest| -> i128 {
            overlay
                .get(id)
                .copied()
                .unwrap_or_else(|| ledger.balances.get(id).copied().unwrap_or(0))
        };
        for b in &path {
            for tx in &b.tx_list {
                path_spent.insert(tx.tx_id);
                let s = balance(&overlay, &tx.sender);
                overlay.insert(tx.sender, s - tx.amount as i128 - tx.fee as i128);
                let r = balance(&overlay, &tx.recipient);
                overlay.insert(tx.recipient, r + tx.amount as i128);
                let m = balance(&overlay, &b.merger);
                overlay.insert(b.merger, m + tx.fee as i128);
            }
        }
        for tx in &block.tx_list {
            if ledger.spent.contains(&tx.tx_id) || !path_spent.insert(tx.tx_id) {
                return false;
            }
            let s = balance(&overlay, &tx.sender);
            let needed = tx.amount as i128 + tx.fee as i128;
            if s < needed {
                return false;
            }
            overlay.insert(tx.sender, s - needed);
            let r = balance(&overlay, &tx.recipient);
            overlay.insert(tx.recipient, r + tx.amount as i128);
            let m = balance(&overlay, &block.merger);
            overlay.insert(block.merger, m + tx.fee as i128);
        }
        true
    }

    /// Balances after replaying the branch from genesis to `tip`.
    pub fn balances_at(&self, tip: &Digest) -> Option<BTreeMap<Digest, i128>> {
        let ledger = self.ledger.as_ref()?;
        if !self.nodes.contains_key(tip) {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = *tip;
        while !self.finalized_set.contains(&cur) {
            let entry = &self.nodes[&cur];
            path.push(entry.block.clone());
            cur = entry.parent;
        }
        path.reverse();
        let mut balances = ledger.balances.clone();
        for b in &path {
            for tx in &b.tx_list {
                apply_tx(&mut balances, tx, &b.merger);
            }
        }
        Some(balances)
    }

    /// Canonical chain as newline-delimited hex records under a versioned
    /// header naming the chain.
    pub fn export(&self, chain_id: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHAIN_HEADER_PREFIX} {chain_id}");
        for d in self.canonical_path() {
            let _ = writeln!(out, "{}", hex::encode(self.nodes[&d].block.encode()));
        }
        out
    }

    /// Parses an export, checking linkage and content digests. Returns the
    /// chain id and the blocks in height order (genesis first).
    pub fn import(text: &str) -> Result<(String, Vec<Block>), ChainParseError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(ChainParseError { line: 1, msg: "empty chain file".into() })?;
        let chain_id = header
            .strip_prefix(CHAIN_HEADER_PREFIX)
            .map(|rest| rest.trim().to_string())
            .filter(|id| !id.is_empty())
            .ok_or(ChainParseError {
                line: 1,
                msg: format!("expected header {CHAIN_HEADER_PREFIX:?} <chain_id>"),
            })?;
        let mut blocks: Vec<Block> = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bytes = hex::decode(line.trim())
                .map_err(|_| ChainParseError { line: line_no, msg: "bad hex".into() })?;
            let block = Block::decode(&bytes)
                .map_err(|e| ChainParseError { line: line_no, msg: format!("bad block: {e}") })?;
            if hash_transactions(&block.tx_list) != block.tx_digest {
                return Err(ChainParseError {
                    line: line_no,
                    msg: "transaction digest mismatch".into(),
                });
            }
            if let Some(prev) = blocks.last() {
                if block.prev_hash != prev.digest() || block.height != prev.height + 1 {
                    return Err(ChainParseError { line: line_no, msg: "broken linkage".into() });
                }
            } else if block.height != 0 {
                return Err(ChainParseError {
                    line: line_no,
                    msg: "first record must be the genesis block".into(),
                });
            }
            blocks.push(block);
        }
        if blocks.is_empty() {
            return Err(ChainParseError { line: 1, msg: "chain file has no blocks".into() });
        }
        Ok((chain_id, blocks))
    }
}

pub fn apply_tx(balances: &mut BTreeMap<Digest, i128>, tx: &Transaction, fee_recipient: &Digest) {
    *balances.entry(tx.sender).or_insert(0) -= tx.amount as i128 + tx.fee as i128;
    *balances.entry(tx.recipient).or_insert(0) += tx.amount as i128;
    *balances.entry(*fee_recipient).or_insert(0) += tx.fee as i128;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::block::SignerSignature;
    use crate::crypto::{sha256, MacScheme};
    use rand::SeedableRng;

    fn alpha_half() -> Ratio<BigInt> {
        Ratio::new(BigInt::from(1), BigInt::from(2))
    }

    /// Unsigned scaffold block for structure-only tests.
    fn bare_block(parent: &Block, sigs: usize, dist: u64, salt: u64) -> Arc<Block> {
        Arc::new(Block {
            height: parent.height + 1,
            prev_hash: parent.digest(),
            tx_list: Vec::new(),
            tx_digest: hash_transactions(&[]),
            timestamp_ms: parent.timestamp_ms + 1000 + salt,
            required_signers: sigs as u32,
            signer_sigs: (0..sigs)
                .map(|i| SignerSignature {
                    signer: sha256(&[salt as u8, i as u8]),
                    signature: vec![0; 32],
                    distance: dist,
                })
                .collect(),
            merger: sha256(&salt.to_be_bytes()),
            merger_distance: dist,
            merger_sig: Vec::new(),
        })
    }

    fn new_tree(r: u64) -> (BlockTree, Arc<Block>) {
        let genesis = Arc::new(Block::genesis());
        let tree = BlockTree::new(genesis.clone(), r, alpha_half(), None);
        (tree, genesis)
    }

    #[test]
    fn linear_chain_fork_choice_and_weight() {
        let (mut tree, genesis) = new_tree(10);
        let b1 = bare_block(&genesis, 5, 0, 1);
        let b2 = bare_block(&b1, 5, 0, 2);
        tree.insert(b1.clone()).unwrap();
        tree.insert(b2.clone()).unwrap();
        assert_eq!(tree.fork_choice_default(), b2.digest());
        let w = tree.chain_weight(&b2.digest(), &alpha_half()).unwrap();
        assert_eq!(w, Ratio::from_integer(BigInt::from(10)));
        // zero-distance single block is exactly its signature count
        let w1 = tree.chain_weight(&b1.digest(), &alpha_half()).unwrap();
        assert_eq!(w1, Ratio::from_integer(BigInt::from(5)));
    }

    #[test]
    fn heavier_fork_wins_with_zero_alpha() {
        let (mut tree, genesis) = new_tree(10);
        let zero = Ratio::zero();
        // fork A: 2 blocks x 5 sigs; fork B: 3 blocks x 4 sigs
        let a1 = bare_block(&genesis, 5, 0, 10);
        let a2 = bare_block(&a1, 5, 0, 11);
        let b1 = bare_block(&genesis, 4, 0, 20);
        let b2 = bare_block(&b1, 4, 0, 21);
        let b3 = bare_block(&b2, 4, 0, 22);
        for b in [&a1, &a2, &b1, &b2, &b3] {
            tree.insert((*b).clone()).unwrap();
        }
        assert_eq!(
            tree.chain_weight(&a2.digest(), &zero).unwrap(),
            Ratio::from_integer(BigInt::from(10))
        );
        assert_eq!(
            tree.chain_weight(&b3.digest(), &zero).unwrap(),
            Ratio::from_integer(BigInt::from(12))
        );
        assert_eq!(tree.fork_choice(&zero), b3.digest());
    }

    #[test]
    fn distance_penalty_flips_choice_at_large_alpha() {
        let (mut tree, genesis) = new_tree(10);
        // same counts; fork B carries distance, fork A does not
        let a1 = bare_block(&genesis, 5, 0, 30);
        let b1 = bare_block(&genesis, 5, 200, 40);
        tree.insert(a1.clone()).unwrap();
        tree.insert(b1.clone()).unwrap();
        // alpha scaled so B's penalty exceeds 2: penalty = alpha * 1200/(6*2^256)
        let alpha = Ratio::new(BigInt::from(3) * (BigInt::from(1) << 256), BigInt::from(100));
        let wa = tree.chain_weight(&a1.digest(), &alpha).unwrap();
        let wb = tree.chain_weight(&b1.digest(), &alpha).unwrap();
        assert_eq!(wa, Ratio::from_integer(BigInt::from(5)));
        assert!(wa.clone() - wb.clone() > Ratio::from_integer(BigInt::from(2)));
        assert_eq!(tree.fork_choice(&alpha), a1.digest());
    }

    #[test]
    fn ghost_prefers_heavier_subtree_over_longest_chain() {
        let (mut tree, genesis) = new_tree(10);
        let zero = Ratio::zero();
        // child A carries 9 alone; child B has 5 plus two uncles of 3 each
        let a = bare_block(&genesis, 9, 0, 50);
        let b = bare_block(&genesis, 5, 0, 60);
        let u1 = bare_block(&b, 3, 0, 61);
        let u2 = bare_block(&b, 3, 0, 62);
        for blk in [&a, &b, &u1, &u2] {
            tree.insert((*blk).clone()).unwrap();
        }
        let tip = tree.fork_choice(&zero);
        // descent goes through b (subtree 11 > 9) then its heavier child
        assert!(tip == u1.digest() || tip == u2.digest());
        let expected = u1.digest().min(u2.digest());
        assert_eq!(tip, expected, "equal children tie-break to smaller digest");
    }

    #[test]
    fn finalization_boundary() {
        let r = 10;
        let (mut tree, genesis) = new_tree(r);
        let mut prev = genesis.clone();
        let mut blocks = Vec::new();
        for i in 0..r {
            let b = bare_block(&prev, 1, 0, 100 + i);
            tree.insert(b.clone()).unwrap();
            blocks.push(b.clone());
            prev = b;
        }
        // chain of length R: nothing finalizes yet
        assert!(tree.advance_finalization().is_empty());
        let tip = bare_block(&prev, 1, 0, 200);
        tree.insert(tip.clone()).unwrap();
        // chain of length R+1: the genesis-adjacent block finalizes
        let newly = tree.advance_finalization();
        assert_eq!(newly, vec![blocks[0].digest()]);
        assert_eq!(tree.finalized_head(), blocks[0].digest());

        // a fork off genesis now conflicts with finality
        let evil = bare_block(&genesis, 3, 0, 300);
        assert_eq!(tree.insert(evil), Err(InsertError::FinalityViolation));
    }

    #[test]
    fn insert_errors() {
        let (mut tree, genesis) = new_tree(10);
        let b1 = bare_block(&genesis, 1, 0, 1);
        let orphan = bare_block(&b1, 1, 0, 2);
        assert_eq!(tree.insert(orphan.clone()), Err(InsertError::UnknownParent));
        tree.insert(b1.clone()).unwrap();
        tree.insert(orphan).unwrap();
        assert_eq!(tree.insert(b1), Err(InsertError::DuplicateBlock));
        let mut bad = (*bare_block(&genesis, 1, 0, 9)).clone();
        bad.height = 5;
        assert_eq!(tree.insert(Arc::new(bad)), Err(InsertError::BadHeight));
    }

    #[test]
    fn unknown_tip_weight() {
        let (tree, _) = new_tree(10);
        assert_eq!(tree.chain_weight(&sha256(b"nope"), &Ratio::zero()), Err(UnknownTip));
    }

    #[test]
    fn export_import_roundtrip() {
        let (mut tree, genesis) = new_tree(10);
        let b1 = bare_block(&genesis, 2, 1, 70);
        let b2 = bare_block(&b1, 2, 1, 71);
        tree.insert(b1).unwrap();
        tree.insert(b2).unwrap();
        let text = tree.export("main");
        let (chain_id, blocks) = BlockTree::import(&text).unwrap();
        assert_eq!(chain_id, "main");
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].height, 0);
        assert_eq!(blocks[2].height, 2);

        let e = BlockTree::import("#gruut-chain v2 x\n").unwrap_err();
        assert_eq!(e.line, 1);
        let mut broken: Vec<&str> = text.lines().collect();
        broken.swap(1, 2);
        let joined = broken.join("\n");
        assert!(BlockTree::import(&joined).is_err());
    }

    #[test]
    fn ledger_double_spend_detection() {
        let scheme = Arc::new(MacScheme);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ka = MacScheme.generate(&mut rng);
        let kb = MacScheme.generate(&mut rng);
        let a = sha256(b"a");
        let b = sha256(b"b");
        let mut keys = KeyDirectory::new(scheme.clone());
        keys.insert(a, ka.public.clone());
        keys.insert(b, kb.public.clone());

        let genesis = Arc::new(Block::genesis());
        let balances = BTreeMap::from([(a, 1000i128), (b, 0i128)]);
        let mut tree = BlockTree::new(genesis.clone(), 10, alpha_half(), Some(balances));

        let tx = Transaction::new_signed(&MacScheme, &ka, &kb, a, b, 900, 10, 5000, "x", "main");
        let mk_block = |parent: &Block, txs: Vec<Transaction>, salt: u64| -> Block {
            Block {
                height: parent.height + 1,
                prev_hash: parent.digest(),
                tx_digest: hash_transactions(&txs),
                tx_list: txs,
                timestamp_ms: parent.timestamp_ms + 1000 + salt,
                required_signers: 0,
                signer_sigs: Vec::new(),
                merger: a,
                merger_distance: 0,
                merger_sig: MacScheme.sign(&ka.private, &[]),
            }
        };
        let mut b1 = mk_block(&genesis, vec![tx.clone()], 0);
        b1.merger_sig = MacScheme.sign(&ka.private, &b1.body_bytes());
        let report = tree.validate_block(&b1, &keys, 10_000);
        assert!(report.is_ok(), "{report:?}");
        tree.insert(Arc::new(b1.clone())).unwrap();

        // spending the same tx again in a descendant is a double spend
        let mut b2 = mk_block(&b1, vec![tx.clone()], 1);
        b2.merger_sig = MacScheme.sign(&ka.private, &b2.body_bytes());
        let report = tree.validate_block(&b2, &keys, 20_000);
        assert!(report.contains(Violation::DoubleSpend));

        // so is overdrawing the remaining balance
        let tx2 = Transaction::new_signed(&MacScheme, &ka, &kb, a, b, 500, 0, 6000, "y", "main");
        let mut b3 = mk_block(&b1, vec![tx2], 2);
        b3.merger_sig = MacScheme.sign(&ka.private, &b3.body_bytes());
        let report = tree.validate_block(&b3, &keys, 20_000);
        assert!(report.contains(Violation::DoubleSpend));
    }

    #[test]
    fn validation_catches_structural_faults() {
        let (tree, genesis) = new_tree(10);
        let scheme: Arc<dyn SignatureScheme> = Arc::new(MacScheme);
        let keys = KeyDirectory::new(scheme);

        // insufficient signatures: requires 2, carries 1; unknown keys also
        // surface as bad signatures
        let mut b = (*bare_block(&genesis, 1, 0, 5)).clone();
        b.required_signers = 2;
        let report = tree.validate_block(&b, &keys, 10_000);
        assert!(report.contains(Violation::InsufficientSignatures));
        assert!(report.contains(Violation::BadSignature));

        // duplicate signer entries
        let mut b = (*bare_block(&genesis, 2, 0, 6)).clone();
        b.signer_sigs[1].signer = b.signer_sigs[0].signer;
        assert!(tree.validate_block(&b, &keys, 10_000).contains(Violation::DuplicateSigner));

        // timestamp too far in the future
        let mut b = (*bare_block(&genesis, 1, 0, 7)).clone();
        b.timestamp_ms = 100_000;
        let report = tree.validate_block(&b, &keys, 0);
        assert!(report.contains(Violation::TimestampOutOfRange));

        // timestamp not past the ancestor median (genesis sits at zero)
        let mut b = (*bare_block(&genesis, 1, 0, 8)).clone();
        b.timestamp_ms = 0;
        let report = tree.validate_block(&b, &keys, 10_000);
        assert!(report.contains(Violation::TimestampOutOfRange));
    }
}
