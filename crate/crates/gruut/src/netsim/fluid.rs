//! Processor-sharing transfer engine.
//!
//! Every in-flight transfer is a fluid flow from one node's uplink to
//! another node's downlink. An interface divides its capacity equally
//! among the flows using it, and a flow moves at the smaller of its two
//! interface shares. Rates therefore change only when a flow starts or
//! finishes; between those instants progress is linear and exact.
//!
//! Work is tracked in millibits (bits x 1000) so that a rate in bits per
//! second is numerically a rate in millibits per millisecond, keeping all
//! arithmetic in integers.
//!
//! The engine does not own a clock. Callers feed it start requests and
//! wake-ups; it answers with the wake times it needs. A wake is stale if
//! the flow's rate changed after it was scheduled, which the generation
//! stamp detects.

struct Flow<T> {
    from: u32,
    to: u32,
    /// millibits still to move
    remaining: u128,
    /// bits per second == millibits per millisecond
    rate: u64,
    last_update_ms: u64,
    generation: u64,
    payload: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wake {
    pub at_ms: u64,
    pub flow: usize,
    pub generation: u64,
}

#[derive(Debug)]
pub struct Completed<T> {
    pub from: u32,
    pub to: u32,
    pub payload: T,
}

pub struct FluidNet<T> {
    up_cap: Vec<u64>,
    down_cap: Vec<u64>,
    flows: Vec<Option<Flow<T>>>,
    free: Vec<usize>,
    up_flows: Vec<Vec<usize>>,
    down_flows: Vec<Vec<usize>>,
    next_generation: u64,
}

impl<T> FluidNet<T> {
    pub fn new(up_cap_bps: Vec<u64>, down_cap_bps: Vec<u64>) -> Self {
        assert_eq!(up_cap_bps.len(), down_cap_bps.len());
        assert!(up_cap_bps.iter().chain(&down_cap_bps).all(|&c| c > 0));
        let n = up_cap_bps.len();
        FluidNet {
            up_cap: up_cap_bps,
            down_cap: down_cap_bps,
            flows: Vec::new(),
            free: Vec::new(),
            up_flows: vec![Vec::new(); n],
            down_flows: vec![Vec::new(); n],
            next_generation: 0,
        }
    }

    pub fn active(&self) -> usize {
        self.flows.iter().filter(|f| f.is_some()).count()
    }

    /// Starts a transfer of `bytes` from `from` to `to`, returning the flow
    /// id and appending the wake-ups the caller must schedule. Rates of
    /// flows sharing either interface are re-planned, so their previous
    /// wake-ups go stale.
    pub fn add_flow(
        &mut self,
        now_ms: u64,
        from: u32,
        to: u32,
        bytes: u64,
        payload: T,
        wakes: &mut Vec<Wake>,
    ) -> usize {
        assert_ne!(from, to, "flow endpoints must differ");
        let affected = self.interface_flows(from, to);
        for &id in &affected {
            self.settle(id, now_ms);
        }
        let flow = Flow {
            from,
            to,
            remaining: (bytes.max(1) as u128) * 8 * 1000,
            rate: 0,
            last_update_ms: now_ms,
            generation: 0,
            payload: Some(payload),
        };
        let id = match self.free.pop() {
            Some(id) => {
                self.flows[id] = Some(flow);
                id
            }
            None => {
                self.flows.push(Some(flow));
                self.flows.len() - 1
            }
        };
        self.up_flows[from as usize].push(id);
        self.down_flows[to as usize].push(id);
        for &fid in affected.iter().chain(std::iter::once(&id)) {
            self.replan(fid, now_ms, wakes);
        }
        id
    }

    /// Handles a scheduled wake-up. Returns the finished transfer when the
    /// wake is current, or None when it went stale (the flow re-planned or
    /// already finished). Completion frees the interfaces, so sharers are
    /// re-planned and new wake-ups appended.
    pub fn on_wake(
        &mut self,
        now_ms: u64,
        flow: usize,
        generation: u64,
        wakes: &mut Vec<Wake>,
    ) -> Option<Completed<T>> {
        match &self.flows.get(flow) {
            Some(Some(f)) if f.generation == generation => {}
            _ => return None,
        }
        self.settle(flow, now_ms);
        let f = self.flows[flow].as_mut().unwrap();
        if f.remaining > 0 {
            // Defensive: a current-generation wake lands exactly at the
            // projected completion, so nothing should remain.
            debug_assert!(false, "live wake with {} millibits left", f.remaining);
            self.replan(flow, now_ms, wakes);
            return None;
        }
        let (from, to) = (f.from, f.to);
        let payload = f.payload.take().unwrap();
        self.flows[flow] = None;
        self.free.push(flow);
        self.up_flows[from as usize].retain(|&id| id != flow);
        self.down_flows[to as usize].retain(|&id| id != flow);
        for id in self.interface_flows(from, to) {
            self.settle(id, now_ms);
            self.replan(id, now_ms, wakes);
        }
        Some(Completed { from, to, payload })
    }

    /// Distinct flows currently using `from`'s uplink or `to`'s downlink.
    fn interface_flows(&self, from: u32, to: u32) -> Vec<usize> {
        let mut ids: Vec<usize> = self.up_flows[from as usize]
            .iter()
            .chain(self.down_flows[to as usize].iter())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn settle(&mut self, id: usize, now_ms: u64) {
        let f = self.flows[id].as_mut().unwrap();
        let elapsed = now_ms - f.last_update_ms;
        if elapsed > 0 {
            f.remaining = f.remaining.saturating_sub(f.rate as u128 * elapsed as u128);
            f.last_update_ms = now_ms;
        }
    }

    fn replan(&mut self, id: usize, now_ms: u64, wakes: &mut Vec<Wake>) {
        let (from, to) = {
            let f = self.flows[id].as_ref().unwrap();
            (f.from, f.to)
        };
        let up_share = self.up_cap[from as usize] / self.up_flows[from as usize].len() as u64;
        let down_share = self.down_cap[to as usize] / self.down_flows[to as usize].len() as u64;
        // Starvation guard: a share rounded down to zero would never finish.
        let rate = up_share.min(down_share).max(1);
        self.next_generation += 1;
        let generation = self.next_generation;
        let f = self.flows[id].as_mut().unwrap();
        f.rate = rate;
        f.generation = generation;
        debug_assert_eq!(f.last_update_ms, now_ms);
        let ms_left = (f.remaining + rate as u128 - 1) / rate as u128;
        wakes.push(Wake { at_ms: now_ms + ms_left as u64, flow: id, generation });
    }
}
