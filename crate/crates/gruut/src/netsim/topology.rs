//! Random point-to-point overlay with per-class degree targets.
//!
//! Nodes are indexed by class: mergers first, then signers, then full
//! nodes. Edges come from a stub-matching pass (each node contributes as
//! many stubs as its class degree target), after which components are
//! bridged until the graph is connected. Every edge gets a fixed latency
//! drawn once at build time.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Merger,
    Signer,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyError {
    /// A class degree target is zero or cannot be met by the node count.
    InfeasibleDegrees,
}

impl std::fmt::Display for TopologyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyError::InfeasibleDegrees => write!(f, "degree targets infeasible for node counts"),
        }
    }
}

impl std::error::Error for TopologyError {}

#[derive(Debug, Clone)]
pub struct Topology {
    pub n_mergers: u32,
    pub n_signers: u32,
    pub n_full: u32,
    /// Adjacency lists sorted by neighbor id.
    pub adj: Vec<Vec<Neighbor>>,
    /// Undirected edge list, each pair stored as (smaller, larger).
    pub edges: Vec<(u32, u32)>,
}

impl Topology {
    pub fn n_nodes(&self) -> u32 {
        self.n_mergers + self.n_signers + self.n_full
    }

    pub fn class(&self, node: u32) -> NodeClass {
        if node < self.n_mergers {
            NodeClass::Merger
        } else if node < self.n_mergers + self.n_signers {
            NodeClass::Signer
        } else {
            NodeClass::Full
        }
    }

    pub fn neighbors(&self, node: u32) -> &[Neighbor] {
        &self.adj[node as usize]
    }

    pub fn latency(&self, a: u32, b: u32) -> Option<u64> {
        self.adj[a as usize]
            .binary_search_by(|n| n.node.cmp(&b))
            .ok()
            .map(|i| self.adj[a as usize][i].latency_ms)
    }

    pub fn mean_degree(&self, class: NodeClass) -> f64 {
        let mut sum = 0usize;
        let mut count = 0usize;
        for v in 0..self.n_nodes() {
            if self.class(v) == class {
                sum += self.adj[v as usize].len();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum as f64 / count as f64
        }
    }

    /// Single-source shortest path over edge latencies. Used for routing
    /// protocol unicasts that are not constrained to one overlay hop.
    pub fn latency_from(&self, src: u32) -> Vec<u64> {
        let n = self.n_nodes() as usize;
        let mut dist = vec![u64::MAX; n];
        dist[src as usize] = 0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push(std::cmp::Reverse((0u64, src)));
        while let Some(std::cmp::Reverse((d, v))) = heap.pop() {
            if d > dist[v as usize] {
                continue;
            }
            for nb in &self.adj[v as usize] {
                let nd = d + nb.latency_ms;
                if nd < dist[nb.node as usize] {
                    dist[nb.node as usize] = nd;
                    heap.push(std::cmp::Reverse((nd, nb.node)));
                }
            }
        }
        dist
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: u32) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, v: u32) -> u32 {
        let mut root = v;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = v;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra as usize] = rb;
        true
    }
}

/// Builds the overlay. Degrees are expected values: stub matching drops
/// self-loops and duplicate pairs, and connectivity repair adds a bridge
/// per isolated component, so realized means sit within a few percent of
/// the targets.
pub fn build_topology(
    n_mergers: u32,
    n_signers: u32,
    n_full: u32,
    degree_merger: u32,
    degree_signer: u32,
    degree_full: u32,
    base_latency_ms: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Topology, TopologyError> {
    let n = n_mergers + n_signers + n_full;
    if n < 2 {
        return Err(TopologyError::InfeasibleDegrees);
    }
    let class_degree = |v: u32| -> u32 {
        if v < n_mergers {
            degree_merger
        } else if v < n_mergers + n_signers {
            degree_signer
        } else {
            degree_full
        }
    };
    for v in 0..n {
        let d = class_degree(v);
        if d == 0 || d >= n {
            return Err(TopologyError::InfeasibleDegrees);
        }
    }

    let mut stubs: Vec<u32> = Vec::new();
    for v in 0..n {
        for _ in 0..class_degree(v) {
            stubs.push(v);
        }
    }
    if stubs.len() % 2 == 1 {
        stubs.pop();
    }
    stubs.shuffle(rng);

    let mut edge_set: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut uf = UnionFind::new(n);
    for pair in stubs.chunks_exact(2) {
        let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
        if a == b {
            continue;
        }
        if edge_set.insert((a, b)) {
            uf.union(a, b);
        }
    }

    // Stub matching collapses duplicate pairs, which starves the
    // highest-degree class once targets get close to the class size (at
    // hub scale a merger pair draws two-plus parallel stubs on average,
    // leaving mergers far short). First re-match the leftover demand
    // against itself, then lift what remains with degree-preserving
    // swaps: remove an edge (x, y) between two strangers of the short
    // node v and reconnect both ends through v. That raises deg(v) by
    // two, leaves x and y untouched, and keeps every previously
    // connected pair connected because x-v-y replaces x-y.
    let mut deg = vec![0u32; n as usize];
    for &(a, b) in &edge_set {
        deg[a as usize] += 1;
        deg[b as usize] += 1;
    }

    for _ in 0..10 {
        let mut pool: Vec<u32> = Vec::new();
        for v in 0..n {
            for _ in deg[v as usize]..class_degree(v) {
                pool.push(v);
            }
        }
        if pool.len() < 2 {
            break;
        }
        pool.shuffle(rng);
        let mut added = false;
        for pair in pool.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a == b {
                continue;
            }
            if edge_set.insert((a, b)) {
                uf.union(a, b);
                deg[a as usize] += 1;
                deg[b as usize] += 1;
                added = true;
            }
        }
        if !added {
            break;
        }
    }

    let deficient: Vec<u32> = (0..n).filter(|&v| deg[v as usize] < class_degree(v)).collect();
    if !deficient.is_empty() && !edge_set.is_empty() {
        let mut edge_vec: Vec<(u32, u32)> = edge_set.iter().copied().collect();
        for v in deficient {
            'swaps: while deg[v as usize] + 1 < class_degree(v) {
                for _ in 0..200 {
                    let i = rng.gen_range(0..edge_vec.len());
                    let (x, y) = edge_vec[i];
                    if x == v || y == v {
                        continue;
                    }
                    let ex = (v.min(x), v.max(x));
                    let ey = (v.min(y), v.max(y));
                    if edge_set.contains(&ex) || edge_set.contains(&ey) {
                        continue;
                    }
                    edge_vec.swap_remove(i);
                    edge_set.remove(&(x, y));
                    edge_set.insert(ex);
                    edge_set.insert(ey);
                    edge_vec.push(ex);
                    edge_vec.push(ey);
                    uf.union(v, x);
                    uf.union(v, y);
                    deg[v as usize] += 2;
                    continue 'swaps;
                }
                break; // no swappable edge in reach; accept the shortfall
            }
            if deg[v as usize] < class_degree(v) {
                // odd remainder: one plain edge to a random non-neighbor
                for _ in 0..50 {
                    let u = rng.gen_range(0..n);
                    if u == v {
                        continue;
                    }
                    let e = (v.min(u), v.max(u));
                    if edge_set.insert(e) {
                        edge_vec.push(e);
                        uf.union(v, u);
                        deg[v as usize] += 1;
                        deg[u as usize] += 1;
                        break;
                    }
                }
            }
        }
    }

    // Bridge remaining components into the component of node 0 through a
    // random member of each side.
    let roots: BTreeSet<u32> = (0..n).map(|v| uf.find(v)).collect();
    if roots.len() > 1 {
        let mut members: std::collections::BTreeMap<u32, Vec<u32>> = std::collections::BTreeMap::new();
        for v in 0..n {
            members.entry(uf.find(v)).or_default().push(v);
        }
        let main_root = uf.find(0);
        let main: Vec<u32> = members[&main_root].clone();
        for (root, group) in members {
            if root == main_root {
                continue;
            }
            loop {
                let a = main[rng.gen_range(0..main.len())];
                let b = group[rng.gen_range(0..group.len())];
                let e = (a.min(b), a.max(b));
                if edge_set.insert(e) {
                    uf.union(a, b);
                    break;
                }
            }
        }
    }

    let mut adj: Vec<Vec<Neighbor>> = vec![Vec::new(); n as usize];
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(edge_set.len());
    for &(a, b) in &edge_set {
        let jitter: f64 = rng.gen_range(0.5..1.5);
        let latency_ms = ((base_latency_ms as f64 * jitter).round() as u64).max(1);
        adj[a as usize].push(Neighbor { node: b, latency_ms });
        adj[b as usize].push(Neighbor { node: a, latency_ms });
        edges.push((a, b));
    }
    for list in &mut adj {
        list.sort_by_key(|nb| nb.node);
    }

    Ok(Topology { n_mergers, n_signers, n_full, adj, edges })
}
