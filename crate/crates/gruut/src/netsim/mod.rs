//! Deterministic discrete-event simulation of the full network: mergers,
//! signers, and full nodes exchanging protocol messages over a random
//! overlay with per-link latency and processor-shared bandwidth.
//!
//! Everything observable is a pure function of [`SimConfig`]: one master
//! seed fans out into independent streams for topology, workload, and
//! keys, the event queue breaks time ties by insertion sequence, and no
//! iteration order depends on hashing. Repeating a run reproduces the
//! metrics and the replay log bit for bit.

pub mod fluid;
pub mod sim;
pub mod topology;

pub use sim::{poisson_arrival_times, run, SimOutput};
pub use topology::{build_topology, NodeClass, Topology, TopologyError};

use crate::chain::BlockTree;
use crate::crypto::Digest;
use crate::selection::{select_merger_group, Metric, Roster, SelectionResult};
use num_rational::Ratio;
use num_traits::ToPrimitive;
use std::collections::BTreeSet;

/// The merger group allowed to extend `parent`: selection replayed from
/// the branch's recent history, with the producers of the previous m-1
/// blocks sat out for one round. Draft gating and block acceptance both
/// run this; the chain trace tool replays it when auditing an export.
pub fn expected_merger_group(
    tree: &BlockTree,
    parent: &Digest,
    t: u32,
    m: u32,
    merger_roster: &Roster,
) -> Option<SelectionResult> {
    let take = t.max(m) as usize;
    let ancestry = tree.ancestors(parent, take);
    if ancestry.is_empty() {
        return None;
    }
    let last_tx: Vec<Digest> = ancestry.iter().take(t as usize).map(|b| b.tx_digest).collect();
    let mut prev_producers: Vec<Digest> =
        ancestry.iter().take(m as usize).map(|b| b.merger).collect();
    prev_producers.resize(m as usize, [0u8; 32]);
    let recent: BTreeSet<Digest> = ancestry
        .iter()
        .take(m.saturating_sub(1) as usize)
        .map(|b| b.merger)
        .filter(|d| d != &[0u8; 32])
        .collect();
    let height = tree.height_of(parent)? + 1;
    let eligible = Roster::from_entries(
        merger_roster
            .eligible_at(height)
            .iter()
            .filter(|e| !recent.contains(&e.network_id))
            .cloned(),
    );
    select_merger_group(&last_tx, &prev_producers, m, &eligible, Metric::Hamming).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_mergers: u32,
    pub n_signers: u32,
    pub n_full: u32,
    pub degree_full: u32,
    pub degree_signer: u32,
    pub degree_merger: u32,
    /// bits per second
    pub bw_down_signer_full: u64,
    pub bw_up_signer_full: u64,
    pub bw_merger: u64,
    /// per-hop propagation delay center, ms; each link jitters in
    /// [0.5, 1.5) of this once at build time
    pub base_latency: u64,
    /// bytes
    pub target_block_size: u64,
    /// nominal bytes per transaction, the unit of all byte accounting
    pub avg_tx_size: u64,
    pub s_initial: u32,
    /// merger group size
    pub m: u32,
    /// confirmation depth
    pub r: u64,
    /// history length feeding merger-group targets
    pub t: u32,
    /// fork-choice distance-penalty coefficient as (numerator, denominator)
    pub alpha: (u64, u64),
    /// broadcast delay per unit of group quality, ms
    pub k_delay: u64,
    /// difficulty controller target, ms
    pub target_interval: u64,
    /// simulated ms
    pub duration: u64,

    // Engine knobs beyond the core parameter set. Defaults mirror the
    // protocol design constants; tests and scenarios may override them.
    /// Open racing: every merger competes and group checks are off.
    pub legacy_open_competition: bool,
    pub difficulty_window: usize,
    /// Stagger between ranked group members' draft attempts, ms.
    pub rank_slot_ms: u64,
    /// Stagger between open-competition draft attempts, ms. Racing
    /// mergers order themselves by a per-tip hash shuffle; the slot keeps
    /// their signature requests from interleaving at shared signers.
    pub legacy_stagger_ms: u64,
    /// Transaction submission batching period, ms.
    pub batch_flush_ms: u64,
    /// Per-signature compute cost, ms.
    pub sign_cost_ms: u64,
    pub signer_timeout_ms: u64,
    pub evidence_timeout_ms: u64,
    pub max_substitutions: u32,
    /// Transaction arrivals per simulated ms. None derives the rate from
    /// target_block_size / (avg_tx_size x target_interval), scaled a hair
    /// below critical so the pool cannot outrun block production.
    pub tx_rate_per_ms: Option<f64>,
    pub n_accounts: u32,
}

impl SimConfig {
    /// Reduced-scale counterpart of the 10K-node reference setup: same
    /// structure at a tenth the population, with degree and bandwidth
    /// targets scaled to match.
    pub fn desk_default(seed: u64) -> Self {
        SimConfig {
            seed,
            n_mergers: 10,
            n_signers: 500,
            n_full: 490,
            degree_full: 10,
            degree_signer: 20,
            degree_merger: 70,
            bw_down_signer_full: 39_000_000,
            bw_up_signer_full: 13_000_000,
            bw_merger: 150_000_000,
            base_latency: 50,
            target_block_size: 145_000,
            avg_tx_size: 150,
            s_initial: 5,
            m: 3,
            r: 10,
            t: 3,
            alpha: (1, 2),
            k_delay: 500,
            target_interval: 17_500,
            duration: 600_000,
            legacy_open_competition: false,
            difficulty_window: 180,
            rank_slot_ms: 3_000,
            legacy_stagger_ms: 600,
            batch_flush_ms: 500,
            sign_cost_ms: 1,
            signer_timeout_ms: 2_000,
            evidence_timeout_ms: 300,
            max_substitutions: 8,
            tx_rate_per_ms: None,
            n_accounts: 1_000,
        }
    }

    /// Transactions per simulated ms the workload generator injects.
    pub fn tx_rate(&self) -> f64 {
        match self.tx_rate_per_ms {
            Some(r) => r,
            None => {
                let per_block = self.target_block_size as f64 / self.avg_tx_size as f64;
                // 0.95: supply must stay marginally sub-critical or the
                // pool outruns production and intervals collapse.
                0.95 * per_block / self.target_interval as f64
            }
        }
    }

    /// Transactions per block draft.
    pub fn tx_target(&self) -> usize {
        (self.target_block_size / self.avg_tx_size).max(1) as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.n_mergers as u64 + self.n_signers as u64 + self.n_full as u64;
        if self.n_mergers == 0 || self.n_signers == 0 || self.n_full == 0 {
            return Err(SimError::InvalidConfig("node counts must be positive"));
        }
        if self.bw_down_signer_full == 0 || self.bw_up_signer_full == 0 || self.bw_merger == 0 {
            return Err(SimError::InvalidConfig("bandwidths must be positive"));
        }
        if self.avg_tx_size == 0 || self.avg_tx_size > self.target_block_size {
            return Err(SimError::InvalidConfig("need 0 < avg_tx_size <= target_block_size"));
        }
        if self.degree_full == 0 || self.degree_signer == 0 || self.degree_merger == 0 {
            return Err(SimError::InvalidConfig("degrees must be positive"));
        }
        if [self.degree_full, self.degree_signer, self.degree_merger]
            .iter()
            .any(|&d| d as u64 >= n)
        {
            return Err(SimError::InvalidConfig("degree targets exceed node count"));
        }
        if self.s_initial == 0 || self.s_initial > self.n_signers {
            return Err(SimError::InvalidConfig("need 1 <= S_initial <= n_signers"));
        }
        if self.m == 0 || self.m > self.n_mergers {
            return Err(SimError::InvalidConfig("need 1 <= M <= n_mergers"));
        }
        if self.r == 0 {
            return Err(SimError::InvalidConfig("confirmation depth must be positive"));
        }
        if self.alpha.1 == 0 {
            return Err(SimError::InvalidConfig("alpha denominator must be positive"));
        }
        if self.target_interval == 0 || self.duration == 0 {
            return Err(SimError::InvalidConfig("target_interval and duration must be positive"));
        }
        if self.difficulty_window == 0 {
            return Err(SimError::InvalidConfig("difficulty window must be positive"));
        }
        if self.batch_flush_ms == 0 {
            return Err(SimError::InvalidConfig("batch flush period must be positive"));
        }
        if self.n_accounts < 2 {
            return Err(SimError::InvalidConfig("need at least two accounts"));
        }
        if let Some(r) = self.tx_rate_per_ms {
            if !r.is_finite() || r < 0.0 {
                return Err(SimError::InvalidConfig("tx rate must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    InvalidConfig(&'static str),
    Topology(TopologyError),
}

impl std::fmt::Display for SimError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimError::InvalidConfig(msg) => write!(f, "invalid simulation config: {msg}"),
            SimError::Topology(e) => write!(f, "topology: {e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<TopologyError> for SimError {
    fn from(e: TopologyError) -> Self {
        SimError::Topology(e)
    }
}

/// Header for the per-run metrics CSV.
pub const METRICS_CSV_HEADER: &str =
    "block_size,interval_ms,tps,stale_rate,half_prop_ms,merger_frac,signer_frac,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    /// Mean spacing of canonical-chain timestamps, ms.
    pub mean_block_interval: f64,
    /// Canonical transactions per second.
    pub tps: Ratio<u64>,
    pub stale_block_rate: f64,
    /// Median over canonical blocks of the time from broadcast until half
    /// of all nodes hold the block, ms.
    pub median_half_propagation: f64,
    /// Share of all transferred bytes that mergers spent sending block
    /// data (drafts to signers and completed blocks).
    pub merger_block_bytes_fraction: f64,
    /// Share of all transferred bytes that signers spent on signatures.
    pub signer_sig_bytes_fraction: f64,
    pub total_blocks: u64,
    pub stale_blocks: u64,
}

impl SimMetrics {
    pub fn tps_f64(&self) -> f64 {
        self.tps.to_f64().unwrap_or(0.0)
    }

    /// One CSV data row under [`METRICS_CSV_HEADER`].
    pub fn csv_row(&self, block_size: u64, seed: u64) -> String {
        format!(
            "{},{:.3},{:.4},{:.6},{:.3},{:.6},{:.6},{}",
            block_size,
            self.mean_block_interval,
            self.tps_f64(),
            self.stale_block_rate,
            self.median_half_propagation,
            self.merger_block_bytes_fraction,
            self.signer_sig_bytes_fraction,
            seed,
        )
    }
}
