//! Hash-derived signer and merger group selection with closest-ID matching,
//! group quality scoring, and the signer-count difficulty controller.

use crate::crypto::{sha256, Digest, Enc, DIGEST_LEN};
use num_bigint::BigInt;
use num_rational::Ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Hamming,
    Euclidean,
    Manhattan,
}

impl Metric {
    /// Largest value the metric can take on a pair of 32-byte IDs.
    pub fn max_value(self) -> u64 {
        match self {
            Metric::Hamming => 8 * DIGEST_LEN as u64,
            // floor(255 * sqrt(32))
            Metric::Euclidean => isqrt(255 * 255 * DIGEST_LEN as u64),
            Metric::Manhattan => 255 * DIGEST_LEN as u64,
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "hamming" => Some(Metric::Hamming),
            "euclidean" => Some(Metric::Euclidean),
            "manhattan" => Some(Metric::Manhattan),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Hamming => "hamming",
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("inputs have different lengths")]
    LengthMismatch,
    #[error("roster has {have} eligible members, {need} required")]
    InsufficientRoster { have: usize, need: usize },
    #[error("selection result is empty")]
    EmptySelection,
}

fn isqrt(n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let mut x = (n as f64).sqrt() as u64;
    // float sqrt can be off by one either way on large inputs
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    while x * x > n {
        x -= 1;
    }
    x
}

/// Distance between two equal-length IDs under the chosen metric.
pub fn id_distance(a: &[u8], b: &[u8], metric: Metric) -> Result<u64, SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::LengthMismatch);
    }
    Ok(match metric {
        Metric::Hamming => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x ^ y).count_ones() as u64)
            .sum(),
        Metric::Manhattan => a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as i64 - *y as i64).unsigned_abs())
            .sum(),
        Metric::Euclidean => {
            let sq: u64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = *x as i64 - *y as i64;
                    (d * d) as u64
                })
                .sum();
            isqrt(sq)
        }
    })
}

pub fn digest_distance(a: &Digest, b: &Digest, metric: Metric) -> u64 {
    id_distance(a, b, metric).expect("digests have equal length")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub network_id: Digest,
    pub join_height: u64,
    pub active: bool,
}

/// Order-canonicalized membership list. Entries are kept sorted by
/// network_id so selection does not depend on insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roster {
    members: Vec<RosterEntry>,
}

impl Roster {
    pub fn new() -> Self {
        Roster { members: Vec::new() }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = RosterEntry>) -> Self {
        let mut r = Roster::new();
        for e in entries {
            r.insert(e);
        }
        r
    }

    /// Inserts or replaces the entry with the same network_id.
    pub fn insert(&mut self, entry: RosterEntry) {
        match self.members.binary_search_by(|m| m.network_id.cmp(&entry.network_id)) {
            Ok(i) => self.members[i] = entry,
            Err(i) => self.members.insert(i, entry),
        }
    }

    pub fn remove(&mut self, network_id: &Digest) -> bool {
        match self.members.binary_search_by(|m| m.network_id.cmp(network_id)) {
            Ok(i) => {
                self.members.remove(i);
                true
            }
            Err(_) => false,
        }
    }

    pub fn set_active(&mut self, network_id: &Digest, active: bool) -> bool {
        match self.members.binary_search_by(|m| m.network_id.cmp(network_id)) {
            Ok(i) => {
                self.members[i].active = active;
                true
            }
            Err(_) => false,
        }
    }

    pub fn contains(&self, network_id: &Digest) -> bool {
        self.members
            .binary_search_by(|m| m.network_id.cmp(network_id))
            .is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RosterEntry> {
        self.members.iter()
    }

    /// Members allowed to act on a block at `height`: active, and joined
    /// strictly before that height.
    pub fn eligible_at(&self, height: u64) -> Roster {
        Roster {
            members: self
                .members
                .iter()
                .filter(|m| m.active && m.join_height < height)
                .cloned()
                .collect(),
        }
    }

    fn active_members(&self) -> impl Iterator<Item = &RosterEntry> {
        self.members.iter().filter(|m| m.active)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub metric: Metric,
    /// Ideal hash-derived IDs, in slot order.
    pub targets: Vec<Digest>,
    /// Nearest distinct active roster member per target.
    pub chosen: Vec<Digest>,
    pub distances: Vec<u64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Nearest active member to `target` excluding `taken`, ties broken by
/// smaller network_id (IDs compare as big-endian integers).
pub fn nearest_excluding(
    roster: &Roster,
    target: &Digest,
    metric: Metric,
    taken: &[Digest],
) -> Option<(Digest, u64)> {
    let mut best: Option<(Digest, u64)> = None;
    for m in roster.active_members() {
        if taken.contains(&m.network_id) {
            continue;
        }
        let d = digest_distance(target, &m.network_id, metric);
        // Members are iterated in ascending ID order, so strict improvement
        // keeps the smaller ID on ties.
        match &best {
            Some((_, bd)) if d >= *bd => {}
            _ => best = Some((m.network_id, d)),
        }
    }
    best
}

fn choose_for_targets(
    targets: Vec<Digest>,
    roster: &Roster,
    metric: Metric,
) -> Result<SelectionResult, SelectionError> {
    let need = targets.len();
    let have = roster.active_members().count();
    if have < need {
        return Err(SelectionError::InsufficientRoster { have, need });
    }
    let mut chosen = Vec::with_capacity(need);
    let mut distances = Vec::with_capacity(need);
    for t in &targets {
        let (id, d) = nearest_excluding(roster, t, metric, &chosen)
            .expect("roster size checked above");
        chosen.push(id);
        distances.push(d);
    }
    Ok(SelectionResult { metric, targets, chosen, distances })
}

/// Signer target for slot `i` (1-based): H(be32(i) || prev_tx_digest).
pub fn signer_target(index: u32, prev_tx_digest: &Digest) -> Digest {
    let mut e = Enc::with_capacity(4 + DIGEST_LEN);
    e.u32(index);
    e.digest(prev_tx_digest);
    sha256(&e.finish())
}

/// Selects the signer group for a block whose parent carries
/// `prev_tx_digest`. Targets are slot-indexed hashes; each slot takes the
/// nearest active member not already chosen for an earlier slot.
pub fn select_signer_group(
    prev_tx_digest: &Digest,
    s: u32,
    roster: &Roster,
    metric: Metric,
) -> Result<SelectionResult, SelectionError> {
    let targets = (1..=s).map(|i| signer_target(i, prev_tx_digest)).collect();
    choose_for_targets(targets, roster, metric)
}

/// Merger target for slot `i` (1-based): the slot hash binds the matching
/// previous producer and a digest over the last `t` blocks' tx digests.
pub fn merger_target(index: u32, prev_merger: &Digest, history_digest: &Digest) -> Digest {
    let mut e = Enc::with_capacity(4 + 2 * DIGEST_LEN);
    e.u32(index);
    e.digest(prev_merger);
    e.digest(history_digest);
    sha256(&e.finish())
}

/// Digest over the tx digests of the last `t` blocks, most recent first.
pub fn merger_history_digest(last_tx_digests: &[Digest]) -> Digest {
    let mut e = Enc::with_capacity(last_tx_digests.len() * DIGEST_LEN);
    for d in last_tx_digests {
        e.digest(d);
    }
    sha256(&e.finish())
}

/// Selects the merger group. `last_tx_digests` holds the tx digests of the
/// last t blocks (most recent first); `prev_mergers` holds the producers of
/// recent blocks (most recent first) and is consumed index-aligned: slot i
/// binds prev_mergers[i-1].
pub fn select_merger_group(
    last_tx_digests: &[Digest],
    prev_mergers: &[Digest],
    m: u32,
    roster: &Roster,
    metric: Metric,
) -> Result<SelectionResult, SelectionError> {
    assert!(
        prev_mergers.len() >= m as usize,
        "need at least M previous producers (pad with the genesis producer)"
    );
    let hist = merger_history_digest(last_tx_digests);
    let targets = (1..=m)
        .map(|i| merger_target(i, &prev_mergers[(i - 1) as usize], &hist))
        .collect();
    choose_for_targets(targets, roster, metric)
}

/// Mean normalized selection distance in [0, 1); 0 is a perfect match.
/// Distances are normalized by (max metric value + 1) so the result stays
/// strictly below one even at the metric's maximum.
pub fn group_quality(result: &SelectionResult) -> Result<Ratio<BigInt>, SelectionError> {
    if result.is_empty() {
        return Err(SelectionError::EmptySelection);
    }
    let denom = BigInt::from(result.metric.max_value() + 1) * BigInt::from(result.len());
    let num: BigInt = result.distances.iter().map(|d| BigInt::from(*d)).sum();
    Ok(Ratio::new(num, denom))
}

/// Signer-count controller state. Block intervals accumulate in a bounded
/// window; when the window is full an adjustment rescales the signer count
/// toward the target interval and clears the window.
#[derive(Debug, Clone)]
pub struct DifficultyState {
    pub signer_count: u32,
    pub window: Vec<u64>,
    pub window_len: usize,
    pub target_interval_ms: u64,
}

pub const DEFAULT_DIFFICULTY_WINDOW: usize = 1800;

impl DifficultyState {
    pub fn new(signer_count: u32, target_interval_ms: u64, window_len: usize) -> Self {
        assert!(signer_count >= 1);
        assert!(window_len >= 1);
        DifficultyState {
            signer_count,
            window: Vec::with_capacity(window_len),
            window_len,
            target_interval_ms,
        }
    }

    pub fn record_interval(&mut self, interval_ms: u64) {
        if self.window.len() == self.window_len {
            self.window.remove(0);
        }
        self.window.push(interval_ms);
    }

    pub fn window_full(&self) -> bool {
        self.window.len() == self.window_len
    }

    /// Applies one adjustment if the window is full, returning the (possibly
    /// unchanged) signer count. S_new = max(1, round(S * target / mean)),
    /// rounding half away from zero in exact integer arithmetic.
    pub fn adjust_difficulty(&mut self) -> u32 {
        if !self.window_full() {
            return self.signer_count;
        }
        let n = self.window.len() as u128;
        let sum: u128 = self.window.iter().map(|&v| v as u128).sum();
        let new = if sum == 0 {
            // degenerate window of zero intervals: blocks infinitely fast
            u32::MAX
        } else {
            // round(S * target * n / sum) = floor((2*S*target*n + sum) / (2*sum))
            let num = 2 * self.signer_count as u128 * self.target_interval_ms as u128 * n + sum;
            let v = num / (2 * sum);
            u32::try_from(v).unwrap_or(u32::MAX)
        };
        self.signer_count = new.max(1);
        self.window.clear();
        self.signer_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(byte: u8) -> Digest {
        [byte; 32]
    }

    #[test]
    fn distance_identity_and_complement() {
        let a = d(0x5a);
        assert_eq!(digest_distance(&a, &a, Metric::Hamming), 0);
        assert_eq!(digest_distance(&a, &a, Metric::Euclidean), 0);
        assert_eq!(digest_distance(&a, &a, Metric::Manhattan), 0);
        assert_eq!(digest_distance(&d(0x00), &d(0xff), Metric::Hamming), 256);
        assert_eq!(digest_distance(&d(0x00), &d(0xff), Metric::Manhattan), 8160);
        assert_eq!(digest_distance(&d(0x00), &d(0xff), Metric::Euclidean), 1442);
    }

    #[test]
    fn metric_max_values() {
        assert_eq!(Metric::Hamming.max_value(), 256);
        assert_eq!(Metric::Euclidean.max_value(), 1442);
        assert_eq!(Metric::Manhattan.max_value(), 8160);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert_eq!(
            id_distance(&[0, 1], &[0, 1, 2], Metric::Hamming),
            Err(SelectionError::LengthMismatch)
        );
    }

    #[test]
    fn empty_selection_cases() {
        let roster = Roster::from_entries([RosterEntry {
            network_id: d(1),
            join_height: 0,
            active: true,
        }]);
        let r = select_signer_group(&d(9), 0, &roster, Metric::Hamming).unwrap();
        assert!(r.is_empty());
        assert_eq!(group_quality(&r), Err(SelectionError::EmptySelection));
    }

    #[test]
    fn selection_is_deterministic() {
        let roster = Roster::from_entries((0..8u8).map(|i| RosterEntry {
            network_id: d(i * 13),
            join_height: 0,
            active: true,
        }));
        let a = select_signer_group(&d(77), 4, &roster, Metric::Hamming).unwrap();
        let b = select_signer_group(&d(77), 4, &roster, Metric::Hamming).unwrap();
        assert_eq!(a, b);
        let all_distinct: std::collections::BTreeSet<_> = a.chosen.iter().collect();
        assert_eq!(all_distinct.len(), 4);
    }

    #[test]
    fn insufficient_roster() {
        let roster = Roster::from_entries([RosterEntry {
            network_id: d(1),
            join_height: 0,
            active: true,
        }]);
        assert_eq!(
            select_signer_group(&d(2), 3, &roster, Metric::Hamming),
            Err(SelectionError::InsufficientRoster { have: 1, need: 3 })
        );
    }

    #[test]
    fn eligibility_filters_join_height_and_active() {
        let roster = Roster::from_entries([
            RosterEntry { network_id: d(1), join_height: 0, active: true },
            RosterEntry { network_id: d(2), join_height: 5, active: true },
            RosterEntry { network_id: d(3), join_height: 0, active: false },
        ]);
        let at5 = roster.eligible_at(5);
        assert_eq!(at5.len(), 1);
        let at6 = roster.eligible_at(6);
        assert_eq!(at6.len(), 2);
    }

    #[test]
    fn forced_single_merger_choice() {
        let roster = Roster::from_entries([RosterEntry {
            network_id: d(42),
            join_height: 0,
            active: true,
        }]);
        let r = select_merger_group(&[d(1)], &[d(9)], 1, &roster, Metric::Hamming).unwrap();
        assert_eq!(r.chosen, vec![d(42)]);
        assert_eq!(r.distances[0], digest_distance(&r.targets[0], &d(42), Metric::Hamming));
    }

    #[test]
    fn quality_boundaries() {
        let r = SelectionResult {
            metric: Metric::Manhattan,
            targets: vec![d(0)],
            chosen: vec![d(0)],
            distances: vec![0],
        };
        assert_eq!(group_quality(&r).unwrap(), Ratio::from(BigInt::from(0)));
        let r2 = SelectionResult { distances: vec![8160], ..r };
        let q = group_quality(&r2).unwrap();
        assert_eq!(q, Ratio::new(BigInt::from(8160), BigInt::from(8161)));
        assert!(q < Ratio::from(BigInt::from(1)));
    }

    #[test]
    fn difficulty_fixed_point_and_scaling() {
        let mut st = DifficultyState::new(5, 17_500, 4);
        for _ in 0..4 {
            st.record_interval(17_500);
        }
        assert_eq!(st.adjust_difficulty(), 5);
        assert!(st.window.is_empty());

        // mean twice the target: 5 * 17500/35000 = 2.5 rounds away from zero to 3
        let mut st = DifficultyState::new(5, 17_500, 2);
        st.record_interval(35_000);
        st.record_interval(35_000);
        assert_eq!(st.adjust_difficulty(), 3);

        // floor at one signer
        let mut st = DifficultyState::new(1, 1_000, 2);
        st.record_interval(1_000_000);
        st.record_interval(1_000_000);
        assert_eq!(st.adjust_difficulty(), 1);
    }

    #[test]
    fn difficulty_partial_window_is_identity() {
        let mut st = DifficultyState::new(7, 17_500, 10);
        st.record_interval(1);
        assert_eq!(st.adjust_difficulty(), 7);
        assert_eq!(st.window.len(), 1);
    }

    #[test]
    fn isqrt_exact() {
        for n in 0..2000u64 {
            let r = isqrt(n);
            assert!(r * r <= n && (r + 1) * (r + 1) > n, "n={n}");
        }
        assert_eq!(isqrt(255 * 255 * 32), 1442);
    }
}
