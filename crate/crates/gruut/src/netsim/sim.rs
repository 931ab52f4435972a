//! Event-driven simulation run: consensus node machines wired to the
//! overlay topology and the shared-bandwidth transfer engine.
//!
//! Time is integer milliseconds. A binary heap orders events by
//! (time, insertion sequence); every handler is deterministic, so the whole
//! run is a pure function of the config.
//!
//! Transactions travel as periodic batches from a random gateway node to
//! every merger. Blocks spread by announce-and-pull gossip: a node that
//! learns of a block from a neighbor pulls it once and then announces to
//! its own neighbors. Draft sign requests stream from the merger to each
//! selected signer as real transfers; the short signature responses are
//! priced analytically instead of occupying the transfer engine.
//!
//! Byte accounting is nominal: a transaction counts as `avg_tx_size` bytes
//! wherever it rides (batch, draft, block), while headers, signatures, and
//! framing count at their real encoded size. Digests and the replay log
//! always use the canonical encoding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use sha2::{Digest as Sha2Digest, Sha256};

use crate::chain::{Block, BlockTree, KeyDirectory, Transaction};
use crate::consensus::{
    block_quality, broadcast_delay_ms, DraftParams, DraftTimeouts, MergerNode, Message,
    RespOutcome, SignRequest, SignResponse, SignerNode, SubstituteOutcome, TickEvent,
};
use crate::crypto::{sha256, Digest, KeyPair, SignatureScheme};
use crate::selection::{
    nearest_excluding, select_signer_group, DifficultyState, Metric, Roster, RosterEntry,
    SelectionResult,
};

use super::fluid::FluidNet;
use super::topology::{build_topology, NodeClass, Topology};
use super::{SimConfig, SimError, SimMetrics};

/// Announce message size on the wire: frame, type, block digest, height.
const INV_BYTES: u64 = 41;
/// Pull request size: frame, type, block digest.
const GET_BYTES: u64 = 37;
/// Length prefix per framed message.
const FRAME_BYTES: usize = 4;

fn subseed(seed: u64, label: &str) -> [u8; 32] {
    let mut data = Vec::with_capacity(label.len() + 8);
    data.extend_from_slice(label.as_bytes());
    data.extend_from_slice(&seed.to_be_bytes());
    sha256(&data)
}

fn label_id(role: &str, i: u32) -> Digest {
    sha256(format!("gruut-sim/{role}/{i}").as_bytes())
}

fn median_ms(mut v: Vec<u64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Arrival times (ms, nondecreasing) of a Poisson process with the given
/// rate over [0, duration].
pub fn poisson_arrival_times(rate_per_ms: f64, duration_ms: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut out = Vec::new();
    if rate_per_ms <= 0.0 || duration_ms == 0 {
        return out;
    }
    let exp = Exp::new(rate_per_ms).expect("positive rate");
    let mut t = 0.0f64;
    loop {
        t += exp.sample(rng);
        if t > duration_ms as f64 {
            return out;
        }
        out.push(t as u64);
    }
}

enum Arrival {
    Batch { flush_ms: u64, txs: Vec<Transaction> },
    SignReq(Box<SignRequest>),
    SignResp(Box<SignResponse>),
    Block { idx: u32, from: u32 },
}

/// Fluid-flow payload: where the data lands and how long the path delay
/// keeps it in flight after the transfer itself finishes.
struct FlowDone {
    to: u32,
    latency_ms: u64,
    what: Arrival,
}

enum Ev {
    TxInject,
    BatchFlush,
    FlowWake { flow: usize, generation: u64 },
    Arrive { to: u32, what: Arrival },
    Offer { to: u32, from: u32, block: u32 },
    StartPull { from: u32, to: u32, block: u32 },
    DraftTimer { merger: u32 },
    DraftAttempt { merger: u32 },
    Broadcast { merger: u32, block: Box<Block> },
}

struct HeapEv {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for HeapEv {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for HeapEv {}
impl PartialOrd for HeapEv {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEv {
    // reversed so the max-heap pops the earliest (t, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

struct BlockInfo {
    block: Arc<Block>,
    digest: Digest,
    /// nominal transfer size
    bytes: u64,
    broadcast_ms: u64,
    receipts: u32,
    half_ms: Option<u64>,
}

struct MergerSt {
    node: MergerNode,
    tree: BlockTree,
    tip: Digest,
    difficulty: DifficultyState,
    last_interval_height: u64,
    /// tips this merger already drafted on (one attempt per adopted tip)
    attempted: BTreeSet<Digest>,
    /// (tip, earliest draft time): the rank stagger
    gate: Option<(Digest, u64)>,
    /// flush time of the batch that filled the pool to the draft target;
    /// the same batch crosses the threshold at every merger, giving open
    /// competition a shared clock to stagger against
    fill_anchor: Option<u64>,
    /// parent digest -> blocks waiting for it
    orphans: BTreeMap<Digest, Vec<u32>>,
}

struct SignerSt {
    node: SignerNode,
    max_seen_height: u64,
}

pub struct SimOutput {
    pub metrics: SimMetrics,
    /// Hex digest over the framed replay log (length-prefixed canonical
    /// message encodings in send order).
    pub replay_digest: String,
    pub replay_records: u64,
    /// Omniscient block tree over every broadcast block that passed
    /// acceptance; the source of the canonical chain and exports.
    pub oracle: BlockTree,
    pub canonical: Vec<Arc<Block>>,
    pub signer_roster: Roster,
    pub merger_roster: Roster,
    pub injected_txs: u64,
    pub final_signer_counts: Vec<u32>,
    /// Broadcast blocks that failed network acceptance.
    pub rejected_blocks: u64,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    topo: Topology,
    net: FluidNet<FlowDone>,
    up_caps: Vec<u64>,
    down_caps: Vec<u64>,
    heap: BinaryHeap<HeapEv>,
    seq: u64,
    now: u64,
    keys: KeyDirectory,
    mergers: Vec<MergerSt>,
    signers: Vec<SignerSt>,
    merger_ids: Vec<Digest>,
    id_to_node: BTreeMap<Digest, u32>,
    signer_roster: Roster,
    merger_roster: Roster,
    /// [merger][node] shortest-path latency
    merger_latency: Vec<Vec<u64>>,
    oracle: BlockTree,
    blocks: Vec<BlockInfo>,
    /// per node: indexes of blocks fully received
    seen: Vec<BTreeSet<u32>>,
    /// per node: indexes of blocks requested but not yet received
    pulling: Vec<BTreeSet<u32>>,
    accounts: Vec<(Digest, KeyPair)>,
    wl_rng: ChaCha8Rng,
    origin_rng: ChaCha8Rng,
    arrivals: Vec<u64>,
    next_arrival: usize,
    pending_txs: Vec<Transaction>,
    timeouts: DraftTimeouts,
    half_target: u32,
    total_bytes: u128,
    merger_block_bytes: u128,
    signer_sig_bytes: u128,
    injected_txs: u64,
    rejected_blocks: u64,
    replay: Sha256,
    replay_records: u64,
    wakes: Vec<super::fluid::Wake>,
}

pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    sim.prime();
    while let Some(he) = sim.heap.pop() {
        if he.t > cfg.duration {
            break;
        }
        sim.now = he.t;
        sim.dispatch(he.ev);
    }
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        let mut topo_rng = ChaCha8Rng::from_seed(subseed(cfg.seed, "gruut-sim/topology"));
        let topo = build_topology(
            cfg.n_mergers,
            cfg.n_signers,
            cfg.n_full,
            cfg.degree_merger,
            cfg.degree_signer,
            cfg.degree_full,
            cfg.base_latency,
            &mut topo_rng,
        )?;
        let n = topo.n_nodes() as usize;

        let mut up_caps = vec![0u64; n];
        let mut down_caps = vec![0u64; n];
        for i in 0..n {
            let (up, down) = match topo.class(i as u32) {
                NodeClass::Merger => (cfg.bw_merger, cfg.bw_merger),
                _ => (cfg.bw_up_signer_full, cfg.bw_down_signer_full),
            };
            up_caps[i] = up;
            down_caps[i] = down;
        }
        let net = FluidNet::new(up_caps.clone(), down_caps.clone());

        // Identities are fixed labels and keys come from a fixed stream, so
        // runs that differ only in mode or seed share the same membership.
        let mut key_rng = ChaCha8Rng::from_seed(sha256(b"gruut-sim/keys"));
        let mut keys = KeyDirectory::new(Arc::new(crate::crypto::MacScheme));
        let scheme = Arc::new(crate::crypto::MacScheme);
        let mut merger_ids = Vec::new();
        let mut merger_keys = Vec::new();
        for i in 0..cfg.n_mergers {
            let id = label_id("merger", i);
            let kp = scheme.generate(&mut key_rng);
            keys.insert(id, kp.public.clone());
            merger_ids.push(id);
            merger_keys.push(kp);
        }
        let mut signer_ids = Vec::new();
        let mut signer_keys = Vec::new();
        for i in 0..cfg.n_signers {
            let id = label_id("signer", i);
            let kp = scheme.generate(&mut key_rng);
            keys.insert(id, kp.public.clone());
            signer_ids.push(id);
            signer_keys.push(kp);
        }
        let mut accounts = Vec::new();
        for i in 0..cfg.n_accounts {
            let id = label_id("account", i);
            let kp = scheme.generate(&mut key_rng);
            keys.insert(id, kp.public.clone());
            accounts.push((id, kp));
        }

        let mut id_to_node = BTreeMap::new();
        for (i, id) in merger_ids.iter().enumerate() {
            id_to_node.insert(*id, i as u32);
        }
        for (i, id) in signer_ids.iter().enumerate() {
            id_to_node.insert(*id, cfg.n_mergers + i as u32);
        }

        let entry = |id: &Digest| RosterEntry { network_id: *id, join_height: 0, active: true };
        let merger_roster = Roster::from_entries(merger_ids.iter().map(entry));
        let signer_roster = Roster::from_entries(signer_ids.iter().map(entry));

        let genesis = Arc::new(Block::genesis());
        let alpha = Ratio::new(BigInt::from(cfg.alpha.0), BigInt::from(cfg.alpha.1));
        let oracle = BlockTree::new(genesis.clone(), cfg.r, alpha.clone(), None);
        let genesis_digest = genesis.digest();

        let mergers: Vec<MergerSt> = merger_ids
            .iter()
            .zip(merger_keys)
            .map(|(id, kp)| MergerSt {
                node: MergerNode::new(*id, kp, 0),
                tree: BlockTree::new(genesis.clone(), cfg.r, alpha.clone(), None),
                tip: genesis_digest,
                difficulty: DifficultyState::new(
                    cfg.s_initial,
                    cfg.target_interval,
                    cfg.difficulty_window,
                ),
                last_interval_height: 0,
                attempted: BTreeSet::new(),
                gate: None,
                fill_anchor: None,
                orphans: BTreeMap::new(),
            })
            .collect();
        let signers: Vec<SignerSt> = signer_ids
            .iter()
            .zip(signer_keys)
            .map(|(id, kp)| SignerSt {
                node: SignerNode::new(*id, kp, 0, &genesis),
                max_seen_height: 0,
            })
            .collect();

        let merger_latency: Vec<Vec<u64>> =
            (0..cfg.n_mergers).map(|i| topo.latency_from(i)).collect();

        let mut wl_rng = ChaCha8Rng::from_seed(subseed(cfg.seed, "gruut-sim/workload"));
        let arrivals = poisson_arrival_times(cfg.tx_rate(), cfg.duration, &mut wl_rng);
        let origin_rng = ChaCha8Rng::from_seed(subseed(cfg.seed, "gruut-sim/origins"));

        let timeouts = DraftTimeouts {
            signer_timeout_ms: cfg.signer_timeout_ms,
            evidence_timeout_ms: cfg.evidence_timeout_ms,
            max_substitutions: cfg.max_substitutions,
        };

        Ok(Sim {
            cfg,
            net,
            up_caps,
            down_caps,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            keys,
            mergers,
            signers,
            merger_ids,
            id_to_node,
            signer_roster,
            merger_roster,
            merger_latency,
            oracle,
            blocks: Vec::new(),
            seen: vec![BTreeSet::new(); n],
            pulling: vec![BTreeSet::new(); n],
            accounts,
            wl_rng,
            origin_rng,
            arrivals,
            next_arrival: 0,
            pending_txs: Vec::new(),
            timeouts,
            half_target: (topo.n_nodes() + 1) / 2,
            topo,
            total_bytes: 0,
            merger_block_bytes: 0,
            signer_sig_bytes: 0,
            injected_txs: 0,
            rejected_blocks: 0,
            replay: Sha256::new(),
            replay_records: 0,
            wakes: Vec::new(),
        })
    }

    fn prime(&mut self) {
        if let Some(&t0) = self.arrivals.first() {
            self.push(t0, Ev::TxInject);
        }
        if self.cfg.batch_flush_ms <= self.cfg.duration {
            self.push(self.cfg.batch_flush_ms, Ev::BatchFlush);
        }
    }

    fn push(&mut self, t: u64, ev: Ev) {
        self.heap.push(HeapEv { t, seq: self.seq, ev });
        self.seq += 1;
    }

    fn drain_wakes(&mut self) {
        while let Some(w) = self.wakes.pop() {
            self.push(w.at_ms, Ev::FlowWake { flow: w.flow, generation: w.generation });
        }
    }

    fn add_flow(&mut self, from: u32, to: u32, bytes: u64, payload: FlowDone) {
        self.net.add_flow(self.now, from, to, bytes, payload, &mut self.wakes);
        self.drain_wakes();
    }

    /// Appends one framed record to the running replay digest and returns
    /// the message's encoded length.
    fn log_message(&mut self, msg: &Message) -> usize {
        let body = msg.encode();
        self.replay.update((body.len() as u32).to_be_bytes());
        self.replay.update(&body);
        self.replay_records += 1;
        body.len()
    }

    /// Transfer size with each carried transaction priced at the nominal
    /// average instead of its canonical encoding.
    fn nominal_payload_bytes(&self, wire_len: usize, txs: &[Transaction]) -> u64 {
        let canon: usize = txs.iter().map(|t| t.canonical_len()).sum();
        (wire_len + FRAME_BYTES - canon) as u64 + txs.len() as u64 * self.cfg.avg_tx_size
    }

    /// Delivery delay for a message too small to contend for bandwidth.
    fn small_unicast_ms(&self, from: u32, to: u32, path_latency: u64, bytes: u64) -> u64 {
        let bps = self.up_caps[from as usize].min(self.down_caps[to as usize]);
        path_latency + (bytes * 8 * 1000).div_ceil(bps)
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::TxInject => self.inject_tx(),
            Ev::BatchFlush => self.flush_batches(),
            Ev::FlowWake { flow, generation } => {
                let done = self.net.on_wake(self.now, flow, generation, &mut self.wakes);
                self.drain_wakes();
                if let Some(c) = done {
                    let fd = c.payload;
                    let at = self.now + fd.latency_ms;
                    self.push(at, Ev::Arrive { to: fd.to, what: fd.what });
                }
            }
            Ev::Arrive { to, what } => self.arrive(to, what),
            Ev::Offer { to, from, block } => self.offer(to, from, block),
            Ev::StartPull { from, to, block } => self.start_pull(from, to, block),
            Ev::DraftTimer { merger } => self.draft_timer(merger as usize),
            Ev::DraftAttempt { merger } => self.maybe_draft(merger as usize),
            Ev::Broadcast { merger, block } => self.broadcast(merger as usize, *block),
        }
    }

    // ---- workload ----

    fn inject_tx(&mut self) {
        let n = self.accounts.len();
        let s = self.wl_rng.gen_range(0..n);
        let mut r = self.wl_rng.gen_range(0..n - 1);
        if r >= s {
            r += 1;
        }
        let amount = self.wl_rng.gen_range(1..=1000u64);
        let fee = 1 + amount / 100;
        let tx = Transaction::new_signed(
            self.keys.scheme(),
            &self.accounts[s].1,
            &self.accounts[r].1,
            self.accounts[s].0,
            self.accounts[r].0,
            amount,
            fee,
            self.now,
            "",
            "sim",
        );
        self.log_message(&Message::Tx(tx.clone()));
        self.injected_txs += 1;
        self.pending_txs.push(tx);
        self.next_arrival += 1;
        if let Some(&t) = self.arrivals.get(self.next_arrival) {
            self.push(t, Ev::TxInject);
        }
    }

    fn flush_batches(&mut self) {
        if !self.pending_txs.is_empty() {
            let txs = std::mem::take(&mut self.pending_txs);
            let origin = self.origin_rng.gen_range(self.cfg.n_mergers..self.topo.n_nodes());
            let bytes = 9 + txs.len() as u64 * self.cfg.avg_tx_size;
            let flush_ms = self.now;
            for m in 0..self.cfg.n_mergers {
                let lat = self.merger_latency[m as usize][origin as usize];
                self.total_bytes += bytes as u128;
                self.add_flow(
                    origin,
                    m,
                    bytes,
                    FlowDone {
                        to: m,
                        latency_ms: lat,
                        what: Arrival::Batch { flush_ms, txs: txs.clone() },
                    },
                );
            }
        }
        let next = self.now + self.cfg.batch_flush_ms;
        if next <= self.cfg.duration {
            self.push(next, Ev::BatchFlush);
        }
    }

    // ---- message arrivals ----

    fn arrive(&mut self, to: u32, what: Arrival) {
        match what {
            Arrival::Batch { flush_ms, txs } => {
                let m = to as usize;
                let before = self.mergers[m].node.mempool_len();
                for tx in txs {
                    self.mergers[m].node.ingest_tx(tx, &self.keys);
                }
                let target = self.cfg.tx_target();
                if before < target && self.mergers[m].node.mempool_len() >= target {
                    self.mergers[m].fill_anchor = Some(flush_ms);
                }
                self.maybe_draft(m);
            }
            Arrival::SignReq(req) => {
                let si = (to - self.cfg.n_mergers) as usize;
                let mi = self.id_to_node[&req.merger] as usize;
                let resp = self.signers[si].node.handle_request(self.keys.scheme(), &req, self.now);
                let msg = Message::SignResp(resp);
                let wire = self.log_message(&msg);
                let Message::SignResp(resp) = msg else { unreachable!() };
                let bytes = (wire + FRAME_BYTES) as u64;
                self.total_bytes += bytes as u128;
                self.signer_sig_bytes += bytes as u128;
                let path = self.merger_latency[mi][to as usize];
                let delay = self.cfg.sign_cost_ms + self.small_unicast_ms(to, mi as u32, path, bytes);
                self.push(self.now + delay, Ev::Arrive {
                    to: mi as u32,
                    what: Arrival::SignResp(Box::new(resp)),
                });
            }
            Arrival::SignResp(resp) => self.merger_response(to as usize, &resp),
            Arrival::Block { idx, from } => self.receive_block(to, idx, from),
        }
    }

    fn merger_response(&mut self, mi: usize, resp: &SignResponse) {
        let outcome = self.mergers[mi].node.on_sign_response(resp, &self.keys, self.timeouts, self.now);
        match outcome {
            RespOutcome::Ignored | RespOutcome::Recorded => {}
            RespOutcome::Completed(block) => {
                let quality = block_quality(&block, Metric::Hamming);
                let delay = self.cfg.sign_cost_ms + broadcast_delay_ms(self.cfg.k_delay, &quality);
                self.push(self.now + delay, Ev::Broadcast { merger: mi as u32, block });
            }
            RespOutcome::NeedSubstitute { draft_id, slot } => self.substitute(mi, draft_id, slot),
            RespOutcome::AwaitingEvidence { .. } => {
                let t = self.now + self.cfg.evidence_timeout_ms + 1;
                self.push(t, Ev::DraftTimer { merger: mi as u32 });
            }
            RespOutcome::DraftAborted { .. } => {}
        }
    }

    fn draft_timer(&mut self, mi: usize) {
        let events = self.mergers[mi].node.tick(self.now);
        for TickEvent::NeedSubstitute { draft_id, slot } in events {
            self.substitute(mi, draft_id, slot);
        }
    }

    fn substitute(&mut self, mi: usize, draft_id: u64, slot: u32) {
        let Some(d) = self.mergers[mi].node.draft(draft_id) else { return };
        let target = d.slots[(slot - 1) as usize].target;
        let height = d.height;
        let excluded: Vec<Digest> =
            self.mergers[mi].node.draft_exclusions(draft_id).into_iter().collect();
        let roster = self.signer_roster.eligible_at(height);
        let Some((candidate, distance)) =
            nearest_excluding(&roster, &target, Metric::Hamming, &excluded)
        else {
            return;
        };
        match self.mergers[mi].node.substitute(
            draft_id,
            slot,
            candidate,
            distance,
            self.timeouts,
            self.now,
        ) {
            SubstituteOutcome::Request(req) => {
                self.send_request(mi, req);
                let t = self.now + self.cfg.signer_timeout_ms + 1;
                self.push(t, Ev::DraftTimer { merger: mi as u32 });
            }
            SubstituteOutcome::NotNeeded | SubstituteOutcome::DraftAbandoned { .. } => {}
        }
    }

    fn send_request(&mut self, mi: usize, req: SignRequest) {
        let to = self.id_to_node[&req.signer];
        let msg = Message::SignReq(req);
        let wire = self.log_message(&msg);
        let Message::SignReq(req) = msg else { unreachable!() };
        let bytes = self.nominal_payload_bytes(wire, &req.tx_list);
        self.total_bytes += bytes as u128;
        self.merger_block_bytes += bytes as u128;
        let lat = self.merger_latency[mi][to as usize];
        self.add_flow(
            mi as u32,
            to,
            bytes,
            FlowDone { to, latency_ms: lat, what: Arrival::SignReq(Box::new(req)) },
        );
    }

    // ---- drafting ----

    fn maybe_draft(&mut self, mi: usize) {
        if self.mergers[mi].node.has_draft() {
            return;
        }
        let tip = self.mergers[mi].tip;
        if self.mergers[mi].attempted.contains(&tip) {
            return;
        }
        if self.mergers[mi].node.mempool_len() < self.cfg.tx_target() {
            return;
        }
        let (rank, merger_distance, slot_ms, base) = if self.cfg.legacy_open_competition {
            let rank = self.legacy_rank(&tip, mi);
            let base = self.mergers[mi].fill_anchor.unwrap_or(self.now);
            (rank, 0u64, self.cfg.legacy_stagger_ms, base)
        } else {
            let Some(sel) = Self::merger_group_for(
                &self.mergers[mi].tree,
                &tip,
                self.cfg,
                &self.merger_roster,
            ) else {
                return;
            };
            match sel.chosen.iter().position(|c| c == &self.merger_ids[mi]) {
                Some(r) => (r, sel.distances[r], self.cfg.rank_slot_ms, self.now),
                None => return,
            }
        };
        let ready = match self.mergers[mi].gate {
            Some((gate_tip, at)) if gate_tip == tip => at,
            _ => {
                let at = base + rank as u64 * slot_ms;
                self.mergers[mi].gate = Some((tip, at));
                at
            }
        };
        if self.now < ready {
            self.push(ready, Ev::DraftAttempt { merger: mi as u32 });
            return;
        }
        let (parent_tx_digest, height) = {
            let parent = self.mergers[mi].tree.block(&tip).expect("tip is in the tree");
            (parent.tx_digest, parent.height + 1)
        };
        let s_count = self.mergers[mi].difficulty.signer_count;
        let roster = self.signer_roster.eligible_at(height);
        let Ok(sel) = select_signer_group(&parent_tx_digest, s_count, &roster, Metric::Hamming)
        else {
            return;
        };
        let signers: Vec<(Digest, u64)> =
            sel.chosen.iter().copied().zip(sel.distances.iter().copied()).collect();
        let params = DraftParams {
            height,
            prev_hash: tip,
            timestamp_ms: self.now,
            merger_distance,
            signers,
            tx_target: self.cfg.tx_target(),
            single_cap: u64::MAX,
            total_cap: u64::MAX,
        };
        if let Some((_draft_id, requests)) =
            self.mergers[mi].node.build_draft(params, self.timeouts, self.now)
        {
            self.mergers[mi].attempted.insert(tip);
            for req in requests {
                self.send_request(mi, req);
            }
            let t = self.now + self.cfg.signer_timeout_ms + 1;
            self.push(t, Ev::DraftTimer { merger: mi as u32 });
        }
    }

    /// Position of this merger in the per-tip hash shuffle of all mergers.
    /// Used in open competition to stagger draft attempts so signature
    /// requests from racing producers do not interleave at shared signers.
    fn legacy_rank(&self, tip: &Digest, mi: usize) -> usize {
        let h = |id: &Digest| {
            let mut d = [0u8; 64];
            d[..32].copy_from_slice(tip);
            d[32..].copy_from_slice(id);
            sha256(&d)
        };
        let mine = h(&self.merger_ids[mi]);
        self.merger_ids.iter().filter(|id| h(id) < mine).count()
    }

    /// Merger-group selection for a child of `parent`, with producers of
    /// the last M-1 blocks on that branch excluded from the roster.
    fn merger_group_for(
        tree: &BlockTree,
        parent: &Digest,
        cfg: &SimConfig,
        merger_roster: &Roster,
    ) -> Option<SelectionResult> {
        super::expected_merger_group(tree, parent, cfg.t, cfg.m, merger_roster)
    }

    // ---- block lifecycle ----

    fn broadcast(&mut self, mi: usize, block: Block) {
        let msg = Message::Block(block);
        let wire = self.log_message(&msg);
        let Message::Block(block) = msg else { unreachable!() };
        let bytes = self.nominal_payload_bytes(wire, &block.tx_list);
        let digest = block.digest();
        let block = Arc::new(block);
        let idx = self.blocks.len() as u32;
        self.blocks.push(BlockInfo {
            block: block.clone(),
            digest,
            bytes,
            broadcast_ms: self.now,
            receipts: 0,
            half_ms: None,
        });
        let ok = Self::block_acceptable(
            &self.oracle,
            &block,
            &self.keys,
            self.now,
            self.cfg,
            &self.signer_roster,
            &self.merger_roster,
        ) && self.oracle.insert(block).is_ok();
        if ok {
            self.oracle.advance_finalization();
        } else {
            self.rejected_blocks += 1;
        }
        self.mark_received(mi as u32, idx);
        self.merger_accept(mi, idx);
        self.offer_neighbors(mi as u32, idx, u32::MAX);
    }

    fn mark_received(&mut self, node: u32, idx: u32) {
        self.seen[node as usize].insert(idx);
        let info = &mut self.blocks[idx as usize];
        info.receipts += 1;
        if info.receipts == self.half_target && info.half_ms.is_none() {
            info.half_ms = Some(self.now - info.broadcast_ms);
        }
    }

    fn offer_neighbors(&mut self, node: u32, idx: u32, except: u32) {
        let neighbors = self.topo.neighbors(node).to_vec();
        for nb in neighbors {
            if nb.node == except {
                continue;
            }
            self.total_bytes += INV_BYTES as u128;
            self.push(self.now + nb.latency_ms, Ev::Offer { to: nb.node, from: node, block: idx });
        }
    }

    fn offer(&mut self, to: u32, from: u32, idx: u32) {
        if self.seen[to as usize].contains(&idx) || self.pulling[to as usize].contains(&idx) {
            return;
        }
        self.pulling[to as usize].insert(idx);
        self.total_bytes += GET_BYTES as u128;
        let lat = self.topo.latency(to, from).expect("offers travel over edges");
        self.push(self.now + lat, Ev::StartPull { from, to, block: idx });
    }

    fn start_pull(&mut self, from: u32, to: u32, idx: u32) {
        let bytes = self.blocks[idx as usize].bytes;
        self.total_bytes += bytes as u128;
        if self.topo.class(from) == NodeClass::Merger {
            self.merger_block_bytes += bytes as u128;
        }
        let lat = self.topo.latency(from, to).expect("pulls travel over edges");
        self.add_flow(
            from,
            to,
            bytes,
            FlowDone { to, latency_ms: lat, what: Arrival::Block { idx, from } },
        );
    }

    fn receive_block(&mut self, to: u32, idx: u32, from: u32) {
        self.pulling[to as usize].remove(&idx);
        if self.seen[to as usize].contains(&idx) {
            return;
        }
        self.mark_received(to, idx);
        match self.topo.class(to) {
            NodeClass::Merger => self.merger_accept(to as usize, idx),
            NodeClass::Signer => {
                let si = (to - self.cfg.n_mergers) as usize;
                let block = self.blocks[idx as usize].block.clone();
                let st = &mut self.signers[si];
                st.node.on_block(&block);
                if block.height > st.max_seen_height {
                    st.max_seen_height = block.height;
                    st.node.note_finalized(block.height.saturating_sub(self.cfg.r));
                }
            }
            NodeClass::Full => {}
        }
        self.offer_neighbors(to, idx, from);
    }

    fn merger_accept(&mut self, mi: usize, first: u32) {
        let mut queue = vec![first];
        while let Some(i) = queue.pop() {
            let block = self.blocks[i as usize].block.clone();
            let digest = self.blocks[i as usize].digest;
            {
                let st = &mut self.mergers[mi];
                if st.tree.contains(&digest) {
                    continue;
                }
                if !st.tree.contains(&block.prev_hash) {
                    st.orphans.entry(block.prev_hash).or_default().push(i);
                    continue;
                }
                let ok = Self::block_acceptable(
                    &st.tree,
                    &block,
                    &self.keys,
                    self.now,
                    self.cfg,
                    &self.signer_roster,
                    &self.merger_roster,
                );
                if !ok || st.tree.insert(block.clone()).is_err() {
                    continue;
                }
                st.tree.advance_finalization();
                st.node.on_block_accepted(&block);
                if st.node.mempool_len() < self.cfg.tx_target() {
                    st.fill_anchor = None;
                }
                let tip = st.tree.fork_choice_default();
                if tip != st.tip {
                    st.tip = tip;
                    let h = st.tree.height_of(&tip).unwrap_or(0);
                    if h > st.last_interval_height {
                        let tip_block = st.tree.block(&tip).expect("tip is in the tree").clone();
                        if let Some(parent) = st.tree.block(&tip_block.prev_hash) {
                            st.difficulty.record_interval(
                                tip_block.timestamp_ms.saturating_sub(parent.timestamp_ms),
                            );
                            st.last_interval_height = h;
                            if st.difficulty.window_full() {
                                st.difficulty.adjust_difficulty();
                            }
                        }
                    }
                }
                if let Some(children) = st.orphans.remove(&digest) {
                    queue.extend(children);
                }
            }
            self.maybe_draft(mi);
        }
    }

    /// Network acceptance: structural validity always; under group
    /// selection additionally a bitwise replay of the signer group from the
    /// parent and membership of the producer in the merger group drawn
    /// with the last M-1 producers excluded.
    fn block_acceptable(
        tree: &BlockTree,
        block: &Block,
        keys: &KeyDirectory,
        now_ms: u64,
        cfg: &SimConfig,
        signer_roster: &Roster,
        merger_roster: &Roster,
    ) -> bool {
        if !tree.validate_block(block, keys, now_ms).is_ok() {
            return false;
        }
        if cfg.legacy_open_competition {
            return true;
        }
        let Some(parent) = tree.block(&block.prev_hash) else {
            return false;
        };
        let roster = signer_roster.eligible_at(block.height);
        let Ok(sel) =
            select_signer_group(&parent.tx_digest, block.required_signers, &roster, Metric::Hamming)
        else {
            return false;
        };
        if sel.chosen.len() != block.signer_sigs.len()
            || !sel.chosen.iter().zip(block.signer_sigs.iter()).all(|(c, s)| c == &s.signer)
        {
            return false;
        }
        let Some(group) = Self::merger_group_for(tree, &block.prev_hash, cfg, merger_roster) else {
            return false;
        };
        group.chosen.contains(&block.merger)
    }

    // ---- wrap-up ----

    fn finish(self) -> SimOutput {
        let canonical_digests = self.oracle.canonical_path();
        let canonical: Vec<Arc<Block>> = canonical_digests
            .iter()
            .map(|d| self.oracle.block(d).expect("canonical path is in the tree").clone())
            .collect();
        let n_canon = canonical.len().saturating_sub(1) as u64;
        let total_blocks = self.blocks.len() as u64;
        let stale_blocks = total_blocks.saturating_sub(n_canon);

        let (mean_block_interval, tps) = if canonical.len() >= 3 {
            let first = &canonical[1];
            let last = canonical.last().expect("nonempty");
            let span = last.timestamp_ms.saturating_sub(first.timestamp_ms);
            let txs: u64 = canonical[2..].iter().map(|b| b.tx_list.len() as u64).sum();
            let mean = span as f64 / (n_canon - 1) as f64;
            let tps =
                if span > 0 { Ratio::new(txs * 1000, span) } else { Ratio::from_integer(0) };
            (mean, tps)
        } else {
            (0.0, Ratio::from_integer(0))
        };

        let digest_to_idx: BTreeMap<Digest, usize> =
            self.blocks.iter().enumerate().map(|(i, b)| (b.digest, i)).collect();
        let halves: Vec<u64> = canonical
            .iter()
            .skip(1)
            .filter_map(|b| digest_to_idx.get(&b.digest()))
            .filter_map(|&i| self.blocks[i].half_ms)
            .collect();
        let median_half_propagation = median_ms(halves);

        let frac = |part: u128| {
            if self.total_bytes == 0 {
                0.0
            } else {
                part as f64 / self.total_bytes as f64
            }
        };
        let metrics = SimMetrics {
            mean_block_interval,
            tps,
            stale_block_rate: if total_blocks == 0 {
                0.0
            } else {
                stale_blocks as f64 / total_blocks as f64
            },
            median_half_propagation,
            merger_block_bytes_fraction: frac(self.merger_block_bytes),
            signer_sig_bytes_fraction: frac(self.signer_sig_bytes),
            total_blocks,
            stale_blocks,
        };

        let replay_digest = hex::encode(self.replay.finalize());
        SimOutput {
            metrics,
            replay_digest,
            replay_records: self.replay_records,
            canonical,
            oracle: self.oracle,
            signer_roster: self.signer_roster,
            merger_roster: self.merger_roster,
            injected_txs: self.injected_txs,
            final_signer_counts: self.mergers.iter().map(|m| m.difficulty.signer_count).collect(),
            rejected_blocks: self.rejected_blocks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SimConfig {
        SimConfig {
            seed,
            n_mergers: 3,
            n_signers: 10,
            n_full: 5,
            degree_full: 3,
            degree_signer: 3,
            degree_merger: 4,
            bw_down_signer_full: 20_000_000,
            bw_up_signer_full: 10_000_000,
            bw_merger: 50_000_000,
            base_latency: 5,
            target_block_size: 600,
            avg_tx_size: 150,
            s_initial: 2,
            m: 1,
            r: 3,
            t: 2,
            alpha: (1, 2),
            k_delay: 100,
            target_interval: 2_000,
            duration: 60_000,
            legacy_open_competition: false,
            difficulty_window: 10,
            rank_slot_ms: 300,
            legacy_stagger_ms: 300,
            batch_flush_ms: 100,
            sign_cost_ms: 1,
            signer_timeout_ms: 1_000,
            evidence_timeout_ms: 700,
            max_substitutions: 4,
            tx_rate_per_ms: None,
            n_accounts: 20,
        }
    }

    #[test]
    fn poisson_count_concentrates_around_rate_times_duration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let times = poisson_arrival_times(0.02, 1_000_000, &mut rng);
        let expected = 20_000.0f64;
        let sigma = expected.sqrt();
        assert!((times.len() as f64 - expected).abs() < 4.0 * sigma, "{} events", times.len());
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tiny_run_produces_a_steady_chain() {
        let out = run(&tiny(1)).unwrap();
        assert!(out.metrics.total_blocks >= 10, "{} blocks", out.metrics.total_blocks);
        assert!(out.canonical.len() >= 10);
        assert!(
            out.metrics.mean_block_interval > 1_500.0
                && out.metrics.mean_block_interval < 3_500.0,
            "interval {}",
            out.metrics.mean_block_interval
        );
        assert!(out.injected_txs > 50);
        assert!(out.replay_records > out.injected_txs);
        assert!(out.metrics.merger_block_bytes_fraction > 0.0);
        assert!(out.metrics.signer_sig_bytes_fraction > 0.0);
    }

    #[test]
    fn canonical_blocks_carry_exactly_the_draft_target() {
        let cfg = tiny(2);
        let out = run(&cfg).unwrap();
        for b in out.canonical.iter().skip(1) {
            assert_eq!(b.tx_list.len(), cfg.tx_target());
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let cfg = tiny(3);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.replay_digest, b.replay_digest);
        assert_eq!(a.replay_records, b.replay_records);
        assert_eq!(
            a.metrics.csv_row(cfg.target_block_size, cfg.seed),
            b.metrics.csv_row(cfg.target_block_size, cfg.seed)
        );
    }

    #[test]
    fn zero_rate_produces_no_blocks() {
        let mut cfg = tiny(4);
        cfg.tx_rate_per_ms = Some(0.0);
        let out = run(&cfg).unwrap();
        assert_eq!(out.metrics.total_blocks, 0);
        assert_eq!(out.injected_txs, 0);
        assert_eq!(out.metrics.tps, Ratio::from_integer(0));
        assert_eq!(out.canonical.len(), 1);
    }

    #[test]
    fn stale_accounting_is_consistent_in_both_modes() {
        for legacy in [false, true] {
            let mut cfg = tiny(5);
            cfg.legacy_open_competition = legacy;
            let out = run(&cfg).unwrap();
            let canon = out.canonical.len() as u64 - 1;
            assert_eq!(out.metrics.total_blocks, canon + out.metrics.stale_blocks);
            assert!(out.metrics.total_blocks > 0);
        }
    }
}
