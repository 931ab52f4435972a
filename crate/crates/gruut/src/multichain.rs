//! Parallel local chains: inter-chain transfers with exchange rates,
//! hot/cold migration with late claims, and linear TPS extrapolation.

use crate::chain::block::{hash_transactions, Block, SignerSignature, Transaction};
use crate::chain::tree::{BlockTree, KeyDirectory};
use crate::crypto::{digest_hex, sha256, Digest, Enc, KeyPair, MacScheme, SignatureScheme};
use crate::econ::ratio_to_decimal;
use crate::selection::{
    select_merger_group, select_signer_group, Metric, Roster, RosterEntry,
};
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Hot,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MultichainError {
    #[error("unknown chain")]
    UnknownChain,
    #[error("unknown account on chain")]
    UnknownAccount,
    #[error("chain is cold and accepts no new blocks")]
    ChainCold,
    #[error("sender balance does not cover amount plus fee")]
    InsufficientBalance,
    #[error("destination chain unavailable")]
    DestinationUnavailable,
    #[error("migration target already carries state")]
    NonEmptyTarget,
    #[error("balance already claimed from the cold chain")]
    AlreadyClaimed,
    #[error("nothing to claim for this account")]
    NothingToClaim,
    #[error("block production failed: {0}")]
    Production(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferState {
    Initiated,
    /// Debit finalized on the source chain; credit still owed.
    SourceCommitted { src_block: Digest },
    Completed { src_block: Digest, dst_block: Digest },
    Failed { reason: MultichainError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterChainTransfer {
    pub transfer_id: Digest,
    pub src_chain: String,
    pub dst_chain: String,
    pub sender: Digest,
    pub recipient: Digest,
    pub amount_src: u64,
    pub exchange_rate: Ratio<BigInt>,
    pub state: TransferState,
}

/// Amount credited on the destination: floor(amount × rate).
pub fn converted_amount(amount: u64, rate: &Ratio<BigInt>) -> u64 {
    let scaled = Ratio::from_integer(BigInt::from(amount)) * rate;
    scaled.floor().to_integer().to_u64().unwrap_or(u64::MAX)
}

/// Linear throughput extrapolation: independent chains multiply.
pub fn aggregate_tps(per_chain_tps: &Ratio<BigInt>, n_chains: u64) -> Ratio<BigInt> {
    assert!(per_chain_tps > &Ratio::zero(), "throughput must be positive");
    assert!(n_chains > 0, "chain count must be positive");
    per_chain_tps * BigInt::from(n_chains)
}

/// One region's chain with its own roster, ledger, and a synchronous
/// production loop used to commit and finalize transactions on demand.
pub struct LocalChain {
    pub chain_id: String,
    pub tree: BlockTree,
    pub roster: Roster,
    pub status: ChainStatus,
    keys: KeyDirectory,
    member_keys: BTreeMap<Digest, KeyPair>,
    account_keys: BTreeMap<Digest, KeyPair>,
    s: u32,
    m: u32,
    t: usize,
    metric: Metric,
    clock_ms: u64,
    interval_ms: u64,
    rng: ChaCha8Rng,
    /// Accounts whose balances were already moved off this chain after it
    /// went cold.
    claimed: BTreeSet<Digest>,
    pub system_account: Digest,
    pub bridge_account: Digest,
}

const SYSTEM_SEED_BALANCE: i128 = 1 << 62;

impl LocalChain {
    /// Builds a chain with `n_members` producing members and the given
    /// user accounts funded at genesis.
    pub fn new(
        chain_id: &str,
        n_members: usize,
        s: u32,
        m: u32,
        r: u64,
        t: usize,
        accounts: &[(&str, u64)],
        seed: u64,
    ) -> Self {
        assert!(n_members as u32 >= s.max(m * 2), "roster too small for selection");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys = KeyDirectory::new(Arc::new(MacScheme));
        let mut member_keys = BTreeMap::new();
        let mut roster = Roster::new();
        for i in 0..n_members {
            let kp = MacScheme.generate(&mut rng);
            let id = sha256(format!("{chain_id}/member/{i}").as_bytes());
            keys.insert(id, kp.public.clone());
            member_keys.insert(id, kp);
            roster.insert(RosterEntry { network_id: id, join_height: 0, active: true });
        }

        let mut account_keys = BTreeMap::new();
        let mut balances = BTreeMap::new();
        let mut add_account = |label: &str,
                               balance: i128,
                               keys: &mut KeyDirectory,
                               account_keys: &mut BTreeMap<Digest, KeyPair>,
                               rng: &mut ChaCha8Rng|
         -> Digest {
            let kp = MacScheme.generate(rng);
            let id = sha256(format!("{chain_id}/account/{label}").as_bytes());
            keys.insert(id, kp.public.clone());
            account_keys.insert(id, kp);
            balances.insert(id, balance);
            id
        };
        let system_account =
            add_account("system", SYSTEM_SEED_BALANCE, &mut keys, &mut account_keys, &mut rng);
        let bridge_account =
            add_account("bridge", SYSTEM_SEED_BALANCE, &mut keys, &mut account_keys, &mut rng);
        for (label, amount) in accounts {
            add_account(label, *amount as i128, &mut keys, &mut account_keys, &mut rng);
        }

        let alpha = Ratio::new(BigInt::from(1), BigInt::from(2));
        let tree = BlockTree::new(Arc::new(Block::genesis()), r, alpha, Some(balances));
        LocalChain {
            chain_id: chain_id.to_string(),
            tree,
            roster,
            status: ChainStatus::Hot,
            keys,
            member_keys,
            account_keys,
            s,
            m,
            t,
            metric: Metric::Hamming,
            clock_ms: 0,
            interval_ms: 10_000,
            rng,
            claimed: BTreeSet::new(),
            system_account,
            bridge_account,
        }
    }

    pub fn account_id(&self, label: &str) -> Digest {
        sha256(format!("{}/account/{label}", self.chain_id).as_bytes())
    }

    pub fn has_account(&self, id: &Digest) -> bool {
        self.account_keys.contains_key(id)
    }

    /// Registers a fresh zero-balance account (e.g. a recipient that only
    /// ever receives).
    pub fn register_account(&mut self, label: &str) -> Digest {
        let id = self.account_id(label);
        if !self.account_keys.contains_key(&id) {
            let kp = MacScheme.generate(&mut self.rng);
            self.keys.insert(id, kp.public.clone());
            self.account_keys.insert(id, kp);
        }
        id
    }

    pub fn finalized_balance(&self, account: &Digest) -> i128 {
        self.tree.finalized_balances().get(account).copied().unwrap_or(0)
    }

    pub fn finalized_balances(&self) -> BTreeMap<Digest, i128> {
        self.tree.finalized_balances()
    }

    /// Nonzero user balances, excluding the chain's own system and bridge
    /// accounts.
    pub fn user_balances(&self) -> BTreeMap<Digest, i128> {
        self.tree
            .finalized_balances()
            .into_iter()
            .filter(|(id, bal)| {
                *bal != 0 && *id != self.system_account && *id != self.bridge_account
            })
            .collect()
    }

    /// Whether any block beyond genesis exists on the canonical path.
    pub fn has_state(&self) -> bool {
        self.tree.canonical_path().len() > 1
    }

    pub fn make_tx(
        &mut self,
        sender: &Digest,
        recipient: &Digest,
        amount: u64,
        fee: u64,
        purpose: &str,
    ) -> Result<Transaction, MultichainError> {
        let sk = self.account_keys.get(sender).ok_or(MultichainError::UnknownAccount)?;
        let rk = self.account_keys.get(recipient).ok_or(MultichainError::UnknownAccount)?;
        Ok(Transaction::new_signed(
            &MacScheme,
            sk,
            rk,
            *sender,
            *recipient,
            amount,
            fee,
            self.clock_ms + 1,
            purpose,
            &self.chain_id,
        ))
    }

    /// Produces one block carrying `txs` on the canonical tip, with real
    /// signer and merger selection, and advances finalization.
    pub fn produce_block(&mut self, txs: Vec<Transaction>) -> Result<Digest, MultichainError> {
        if self.status == ChainStatus::Cold {
            return Err(MultichainError::ChainCold);
        }
        let tip_digest = self.tree.fork_choice_default();
        let tip = self.tree.block(&tip_digest).expect("tip exists").clone();
        let height = tip.height + 1;
        let eligible = self.roster.eligible_at(height);

        let signer_sel = select_signer_group(&tip.tx_digest, self.s, &eligible, self.metric)
            .map_err(|_| MultichainError::Production("signer selection failed"))?;

        let recent = self.tree.ancestors(&tip_digest, self.m as usize);
        let mut prev_mergers: Vec<Digest> = recent.iter().map(|b| b.merger).collect();
        while prev_mergers.len() < self.m as usize {
            prev_mergers.push([0; 32]);
        }
        let history: Vec<Digest> = self
            .tree
            .ancestors(&tip_digest, self.t)
            .iter()
            .map(|b| b.tx_digest)
            .collect();
        let merger_sel =
            select_merger_group(&history, &prev_mergers, self.m, &eligible, self.metric)
                .map_err(|_| MultichainError::Production("merger selection failed"))?;

        // the producer is the first group member that did not produce any
        // of the last m−1 blocks
        let recency_window: BTreeSet<Digest> = recent
            .iter()
            .take(self.m.saturating_sub(1) as usize)
            .map(|b| b.merger)
            .collect();
        let (merger, merger_distance) = merger_sel
            .chosen
            .iter()
            .zip(&merger_sel.distances)
            .find(|(id, _)| !recency_window.contains(*id))
            .map(|(id, d)| (*id, *d))
            .ok_or(MultichainError::Production("no eligible merger"))?;

        self.clock_ms += self.interval_ms;
        let mut block = Block {
            height,
            prev_hash: tip_digest,
            tx_digest: hash_transactions(&txs),
            tx_list: txs,
            timestamp_ms: self.clock_ms,
            required_signers: self.s,
            signer_sigs: Vec::new(),
            merger,
            merger_distance,
            merger_sig: Vec::new(),
        };
        let signing = block.signing_digest();
        block.signer_sigs = signer_sel
            .chosen
            .iter()
            .zip(&signer_sel.distances)
            .map(|(id, dist)| SignerSignature {
                signer: *id,
                signature: MacScheme.sign(&self.member_keys[id].private, &signing),
                distance: *dist,
            })
            .collect();
        block.merger_sig = MacScheme.sign(&self.member_keys[&merger].private, &block.body_bytes());

        let report = self.tree.validate_block(&block, &self.keys, self.clock_ms);
        if !report.is_ok() {
            return Err(MultichainError::Production("self-produced block failed validation"));
        }
        let digest = self
            .tree
            .insert(Arc::new(block))
            .map_err(|_| MultichainError::Production("insert rejected"))?;
        self.tree.advance_finalization();
        Ok(digest)
    }

    /// Commits `txs` in one block and then extends the chain with empty
    /// blocks until that block finalizes.
    pub fn commit_finalized(&mut self, txs: Vec<Transaction>) -> Result<Digest, MultichainError> {
        let digest = self.produce_block(txs)?;
        for _ in 0..self.tree.confirmation_depth() {
            self.produce_block(Vec::new())?;
        }
        debug_assert!(self.tree.finalized_path().contains(&digest));
        Ok(digest)
    }
}

/// The coordinator holding every local chain and the durable transfer
/// journal.
pub struct MultichainNetwork {
    chains: BTreeMap<String, LocalChain>,
    transfers: BTreeMap<Digest, InterChainTransfer>,
    /// Fee fraction for intra-chain transactions; inter-chain pays double
    /// (one fee per chain involved).
    pub fee_fraction: Ratio<BigInt>,
}

pub const TRANSFER_JOURNAL_HEADER: &str =
    "transfer_id,src,dst,sender,recipient,amount,rate,state,src_block,dst_block";

impl MultichainNetwork {
    pub fn new(fee_fraction: Ratio<BigInt>) -> Self {
        MultichainNetwork {
            chains: BTreeMap::new(),
            transfers: BTreeMap::new(),
            fee_fraction,
        }
    }

    pub fn add_chain(&mut self, chain: LocalChain) {
        self.chains.insert(chain.chain_id.clone(), chain);
    }

    pub fn chain(&self, id: &str) -> Option<&LocalChain> {
        self.chains.get(id)
    }

    pub fn chain_mut(&mut self, id: &str) -> Option<&mut LocalChain> {
        self.chains.get_mut(id)
    }

    pub fn transfer(&self, id: &Digest) -> Option<&InterChainTransfer> {
        self.transfers.get(id)
    }

    pub fn transfers(&self) -> impl Iterator<Item = &InterChainTransfer> {
        self.transfers.values()
    }

    /// ceil(amount × fraction), in minor units.
    fn fee_for(&self, amount: u64, chains_involved: u32) -> u64 {
        let f = &self.fee_fraction * BigInt::from(chains_involved);
        let scaled = Ratio::from_integer(BigInt::from(amount)) * f;
        scaled.ceil().to_integer().to_u64().unwrap_or(u64::MAX)
    }

    pub fn intra_fee(&self, amount: u64) -> u64 {
        self.fee_for(amount, 1)
    }

    pub fn inter_fee(&self, amount: u64) -> u64 {
        self.fee_for(amount, 2)
    }

    pub fn transfer_id(
        src: &str,
        dst: &str,
        sender: &Digest,
        recipient: &Digest,
        amount: u64,
        rate: &Ratio<BigInt>,
        nonce: u64,
    ) -> Digest {
        let mut e = Enc::new();
        e.str(src);
        e.str(dst);
        e.digest(sender);
        e.digest(recipient);
        e.u64(amount);
        e.bytes(&rate.numer().to_signed_bytes_be());
        e.bytes(&rate.denom().to_signed_bytes_be());
        e.u64(nonce);
        sha256(&e.finish())
    }

    /// Two-phase inter-chain remittance. Retrying the same arguments (same
    /// nonce) never double-moves money: a Completed transfer is returned
    /// as-is and a parked one only re-attempts the credit phase.
    pub fn inter_chain_transfer(
        &mut self,
        src: &str,
        dst: &str,
        sender: &Digest,
        recipient: &Digest,
        amount: u64,
        rate: Ratio<BigInt>,
        nonce: u64,
    ) -> Result<InterChainTransfer, MultichainError> {
        let id = Self::transfer_id(src, dst, sender, recipient, amount, &rate, nonce);
        if let Some(existing) = self.transfers.get(&id) {
            match existing.state {
                TransferState::Completed { .. } => return Ok(existing.clone()),
                TransferState::SourceCommitted { .. } => return self.retry(&id),
                _ => {}
            }
        }

        let mut record = InterChainTransfer {
            transfer_id: id,
            src_chain: src.to_string(),
            dst_chain: dst.to_string(),
            sender: *sender,
            recipient: *recipient,
            amount_src: amount,
            exchange_rate: rate.clone(),
            state: TransferState::Initiated,
        };

        let fee = self.inter_fee(amount);
        let src_chain = match self.chains.get_mut(src) {
            Some(c) => c,
            None => {
                record.state = TransferState::Failed { reason: MultichainError::UnknownChain };
                self.transfers.insert(id, record.clone());
                return Err(MultichainError::UnknownChain);
            }
        };
        if src_chain.status == ChainStatus::Cold {
            record.state = TransferState::Failed { reason: MultichainError::ChainCold };
            self.transfers.insert(id, record.clone());
            return Err(MultichainError::ChainCold);
        }
        if src_chain.finalized_balance(sender) < amount as i128 + fee as i128 {
            record.state =
                TransferState::Failed { reason: MultichainError::InsufficientBalance };
            self.transfers.insert(id, record.clone());
            return Err(MultichainError::InsufficientBalance);
        }

        // phase 1: debit sender into the source bridge and finalize it
        let bridge = src_chain.bridge_account;
        let purpose = format!("icx-debit:{}", digest_hex(&id));
        let debit = src_chain.make_tx(sender, &bridge, amount, fee, &purpose)?;
        let src_block = src_chain.commit_finalized(vec![debit])?;
        record.state = TransferState::SourceCommitted { src_block };
        self.transfers.insert(id, record);

        self.retry(&id)
    }

    /// Drives a parked transfer through the credit phase. Safe to call any
    /// number of times.
    pub fn retry(&mut self, id: &Digest) -> Result<InterChainTransfer, MultichainError> {
        let record = self.transfers.get(id).ok_or(MultichainError::UnknownChain)?.clone();
        let TransferState::SourceCommitted { src_block } = record.state else {
            return Ok(record);
        };

        let fee = self.inter_fee(record.amount_src);
        let credit_amount = converted_amount(record.amount_src, &record.exchange_rate);
        let dst_ok = self
            .chains
            .get(&record.dst_chain)
            .map(|c| c.status == ChainStatus::Hot && c.has_account(&record.recipient))
            .unwrap_or(false);
        if !dst_ok {
            // debit stands; the transfer stays parked and retryable
            return Err(MultichainError::DestinationUnavailable);
        }
        let dst_chain = self.chains.get_mut(&record.dst_chain).unwrap();
        let bridge = dst_chain.bridge_account;
        let purpose = format!("icx-credit:{}:{}", digest_hex(id), digest_hex(&src_block));
        let credit = dst_chain.make_tx(&bridge, &record.recipient, credit_amount, fee, &purpose)?;
        let dst_block = dst_chain.commit_finalized(vec![credit])?;

        let record = self.transfers.get_mut(id).unwrap();
        record.state = TransferState::Completed { src_block, dst_block };
        Ok(record.clone())
    }

    /// Moves every nonzero user balance from `old` onto `new` via system
    /// transactions, then archives `old` as cold.
    pub fn migrate_hot_cold(
        &mut self,
        old_id: &str,
        new_id: &str,
    ) -> Result<MigrationReport, MultichainError> {
        self.migrate_selective(old_id, new_id, &BTreeSet::new())
    }

    /// Migration variant that leaves `held_back` accounts on the archive;
    /// their owners can collect later through `late_claim`.
    pub fn migrate_selective(
        &mut self,
        old_id: &str,
        new_id: &str,
        held_back: &BTreeSet<Digest>,
    ) -> Result<MigrationReport, MultichainError> {
        if !self.chains.contains_key(old_id) || !self.chains.contains_key(new_id) {
            return Err(MultichainError::UnknownChain);
        }
        {
            let new_chain = &self.chains[new_id];
            if new_chain.status == ChainStatus::Cold {
                return Err(MultichainError::ChainCold);
            }
            if new_chain.has_state() {
                return Err(MultichainError::NonEmptyTarget);
            }
        }
        let balances = self.chains[old_id].user_balances();
        let mut moved = Vec::new();
        for (account, balance) in &balances {
            if *balance <= 0 || held_back.contains(account) {
                continue;
            }
            self.migrate_account(old_id, new_id, account, *balance as u64)?;
            moved.push((*account, *balance as u64));
        }
        let old = self.chains.get_mut(old_id).unwrap();
        old.status = ChainStatus::Cold;
        for (account, _) in &moved {
            old.claimed.insert(*account);
        }
        Ok(MigrationReport { moved })
    }

    fn migrate_account(
        &mut self,
        old_id: &str,
        new_id: &str,
        account: &Digest,
        amount: u64,
    ) -> Result<Digest, MultichainError> {
        // carry the account's key over so it can transact on the new chain
        let kp = self.chains[old_id]
            .account_keys
            .get(account)
            .ok_or(MultichainError::UnknownAccount)?
            .clone();
        let new_chain = self.chains.get_mut(new_id).unwrap();
        if !new_chain.account_keys.contains_key(account) {
            new_chain.keys.insert(*account, kp.public.clone());
            new_chain.account_keys.insert(*account, kp);
        }
        let system = new_chain.system_account;
        let purpose = format!("migrate:{old_id}");
        let tx = new_chain.make_tx(&system, account, amount, 0, &purpose)?;
        new_chain.commit_finalized(vec![tx])
    }

    /// Releases a balance the migration missed (for example an account
    /// funded on the cold chain's final blocks) onto the new chain, once.
    pub fn late_claim(
        &mut self,
        old_id: &str,
        new_id: &str,
        account: &Digest,
    ) -> Result<Digest, MultichainError> {
        let old = self.chains.get(old_id).ok_or(MultichainError::UnknownChain)?;
        if old.status != ChainStatus::Cold {
            return Err(MultichainError::NothingToClaim);
        }
        if old.claimed.contains(account) {
            return Err(MultichainError::AlreadyClaimed);
        }
        let balance = old.finalized_balance(account);
        if balance <= 0 {
            return Err(MultichainError::NothingToClaim);
        }
        let block = self.migrate_account(old_id, new_id, account, balance as u64)?;
        self.chains.get_mut(old_id).unwrap().claimed.insert(*account);
        Ok(block)
    }

    /// Journal as CSV, one row per transfer in id order.
    pub fn journal_csv(&self) -> String {
        let mut out = String::from(TRANSFER_JOURNAL_HEADER);
        out.push('\n');
        for t in self.transfers.values() {
            let (state, src_block, dst_block) = match &t.state {
                TransferState::Initiated => ("initiated".to_string(), None, None),
                TransferState::SourceCommitted { src_block } => {
                    ("source_committed".to_string(), Some(*src_block), None)
                }
                TransferState::Completed { src_block, dst_block } => {
                    ("completed".to_string(), Some(*src_block), Some(*dst_block))
                }
                TransferState::Failed { reason } => {
                    (format!("failed:{reason:?}"), None, None)
                }
            };
            let fmt = |d: Option<Digest>| d.map(|d| digest_hex(&d)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                digest_hex(&t.transfer_id),
                t.src_chain,
                t.dst_chain,
                digest_hex(&t.sender),
                digest_hex(&t.recipient),
                t.amount_src,
                ratio_to_decimal(&t.exchange_rate, 9),
                state,
                fmt(src_block),
                fmt(dst_block),
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MigrationReport {
    pub moved: Vec<(Digest, u64)>,
}

impl MigrationReport {
    pub fn total(&self) -> u128 {
        self.moved.iter().map(|(_, a)| *a as u128).sum()
    }
}
