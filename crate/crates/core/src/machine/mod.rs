//! Global clock, process interleaving and the transactional abort channel.
//!
//! The attacker drives the machine directly: each attacker operation first
//! lets every background process (victim, noise) run up to the cycle at
//! which the operation completes, then commits the operation. Background
//! processes are small state machines implementing [`Process`].
//!
//! A memory access is issued at some cycle, costs the latency of the level
//! that holds the line at issue time, and changes cache state when it
//! completes. Fills therefore become visible, and evict, only after the
//! memory latency has elapsed.

mod trace;
mod tx;

use std::any::Any;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cache_model::{AccessOutcome, CacheGeometry, GeometryError, Hierarchy, Level, LineAddr};

pub use trace::{EventKind, EventTrace, ProcessKind, TraceEvent};
pub use tx::{AbortInfo, AbortReason, Transaction, TxError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub geometry: CacheGeometry,
    /// Cycles from the conflicting eviction to the abort handler.
    pub abort_delivery_latency: u64,
    /// Cycles until a flush takes effect.
    pub flush_cycles: u64,
    /// Per-cycle hazard of a spontaneous abort while a transaction runs.
    pub spontaneous_abort_hazard: f64,
    pub attacker_core: usize,
    pub seed: u64,
    /// Maximum number of trace events kept; 0 disables tracing.
    pub trace_limit: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            geometry: CacheGeometry::default(),
            abort_delivery_latency: 180,
            flush_cycles: 10,
            spontaneous_abort_hazard: 0.0,
            attacker_core: 1,
            seed: 0,
            trace_limit: 0,
        }
    }
}

/// State that background processes may touch when they fire.
#[derive(Debug, Clone)]
pub struct Shared {
    pub hier: Hierarchy,
    pub tx: Transaction,
    abort_latency: u64,
    trace: EventTrace,
    tracing: bool,
}

impl Shared {
    /// Level that would serve `line` and the cycles the access takes.
    /// `l1_cost` replaces the L1 latency for pipelined victim loads.
    pub fn peek_cost(&self, core: usize, line: LineAddr, l1_cost: Option<u64>) -> (Level, u64) {
        let level = self.hier.peek(core, line);
        let cost = match (level, l1_cost) {
            (Level::L1, Some(c)) => c,
            _ => self.hier.geometry().latencies.of(level),
        };
        (level, cost)
    }

    pub fn commit_access(&mut self, now: u64, who: ProcessKind, core: usize, line: LineAddr) -> AccessOutcome {
        let outcome = self.hier.access(core, line);
        self.record(now, who, EventKind::Access, Some(line), Some(outcome.level_hit));
        if let Some(evicted) = outcome.evicted_l3_line {
            if let Some(info) = self.tx.check_abort(evicted, now, self.abort_latency) {
                self.record(info.timestamp, ProcessKind::Attacker, EventKind::Abort, Some(evicted), None);
            }
        }
        outcome
    }

    pub fn commit_flush(&mut self, now: u64, who: ProcessKind, line: LineAddr) {
        self.hier.flush(line);
        self.record(now, who, EventKind::Flush, Some(line), None);
    }

    pub fn note(&mut self, now: u64, who: ProcessKind, kind: EventKind) {
        self.record(now, who, kind, None, None);
    }

    fn record(&mut self, cycle: u64, process: ProcessKind, kind: EventKind, line: Option<LineAddr>, level: Option<Level>) {
        if !self.tracing {
            return;
        }
        let set_index = line.map(|l| self.hier.geometry().l3_set(l));
        self.trace.push(TraceEvent {
            cycle,
            process,
            kind,
            set_index,
            level,
        });
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }
}

pub trait Process: Any {
    fn kind(&self) -> ProcessKind;
    /// Cycle of the next event, `None` when the process is finished.
    fn next_event(&self) -> Option<u64>;
    fn fire(&mut self, now: u64, shared: &mut Shared);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Result of one attacker memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    /// Level that actually served the access when it completed.
    pub level: Level,
    /// Measured latency, as a timed load would see it.
    pub latency: u64,
    pub issued: u64,
    pub completed: u64,
    pub evicted_l3_line: Option<LineAddr>,
}

pub struct Machine {
    shared: Shared,
    now: u64,
    last_fired: u64,
    procs: Vec<Box<dyn Process>>,
    rng: ChaCha8Rng,
    hazard: f64,
    attacker_core: usize,
    flush_cycles: u64,
}

impl Machine {
    pub fn new(cfg: &MachineConfig) -> Result<Self, GeometryError> {
        let hier = Hierarchy::new(cfg.geometry.clone())?;
        assert!(cfg.attacker_core < hier.cores(), "attacker core out of range");
        Ok(Self {
            shared: Shared {
                hier,
                tx: Transaction::default(),
                abort_latency: cfg.abort_delivery_latency,
                trace: EventTrace::with_capacity_limit(cfg.trace_limit),
                tracing: cfg.trace_limit > 0,
            },
            now: 0,
            last_fired: 0,
            procs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7458_5f61_626f_7274),
            hazard: cfg.spontaneous_abort_hazard,
            attacker_core: cfg.attacker_core,
            flush_cycles: cfg.flush_cycles,
        })
    }

    pub fn add_process(&mut self, p: Box<dyn Process>) -> usize {
        self.procs.push(p);
        self.procs.len() - 1
    }

    pub fn process<T: Process>(&self) -> Option<&T> {
        self.procs.iter().find_map(|p| p.as_any().downcast_ref::<T>())
    }

    pub fn process_mut<T: Process>(&mut self) -> Option<&mut T> {
        self.procs.iter_mut().find_map(|p| p.as_any_mut().downcast_mut::<T>())
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn shared(&self) -> &Shared {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut Shared {
        &mut self.shared
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.shared.hier
    }

    pub fn geometry(&self) -> &CacheGeometry {
        self.shared.hier.geometry()
    }

    pub fn attacker_core(&self) -> usize {
        self.attacker_core
    }

    pub fn trace(&self) -> &EventTrace {
        &self.shared.trace
    }

    pub fn transaction(&self) -> &Transaction {
        &self.shared.tx
    }

    pub fn spontaneous_hazard(&self) -> f64 {
        self.hazard
    }

    /// Sets the spontaneous-abort hazard; an active transaction gets a fresh
    /// abort time drawn from the new rate.
    pub fn inject_spontaneous_abort(&mut self, rate_per_cycle: f64) {
        self.hazard = rate_per_cycle;
        if self.shared.tx.is_active() {
            let at = self.draw_spontaneous();
            self.shared.tx.reschedule_spontaneous(at);
        }
    }

    fn draw_spontaneous(&mut self) -> Option<u64> {
        if self.hazard <= 0.0 {
            return None;
        }
        let exp = Exp::new(self.hazard).expect("positive hazard");
        let wait: f64 = exp.sample(&mut self.rng);
        Some(self.now.saturating_add(wait.ceil() as u64))
    }

    fn next_background(&self) -> Option<(u64, ProcessKind, usize)> {
        self.procs
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.next_event().map(|t| (t, p.kind(), i)))
            .min()
    }

    fn fire(&mut self, idx: usize, t: u64) {
        debug_assert!(t >= self.last_fired, "clock went backwards");
        self.last_fired = t;
        self.procs[idx].fire(t, &mut self.shared);
    }

    /// Runs every background event ordered before `(t, before)`.
    fn advance_to(&mut self, t: u64, before: ProcessKind) {
        while let Some((et, kind, idx)) = self.next_background() {
            if (et, kind) >= (t, before) {
                break;
            }
            self.shared.tx.poll_spontaneous(et);
            self.fire(idx, et);
        }
        self.shared.tx.poll_spontaneous(t);
    }

    /// Runs the background processes alone until `end` (inclusive).
    pub fn run_until(&mut self, end: u64) -> &EventTrace {
        self.advance_to(end.saturating_add(1), ProcessKind::Victim);
        self.now = self.now.max(end);
        &self.shared.trace
    }

    pub fn wait_until(&mut self, t: u64) {
        if t > self.now {
            self.advance_to(t, ProcessKind::Attacker);
            self.now = t;
        }
    }

    pub fn spend(&mut self, cycles: u64) {
        let t = self.now + cycles;
        self.wait_until(t);
    }

    pub fn access(&mut self, line: LineAddr) -> Probe {
        let core = self.attacker_core;
        let (_, cost) = self.shared.peek_cost(core, line, None);
        let issued = self.now;
        let t = issued + cost;
        self.advance_to(t, ProcessKind::Attacker);
        let o = self.shared.commit_access(t, ProcessKind::Attacker, core, line);
        self.now = t;
        Probe {
            level: o.level_hit,
            latency: cost,
            issued,
            completed: t,
            evicted_l3_line: o.evicted_l3_line,
        }
    }

    pub fn flush(&mut self, line: LineAddr) {
        let t = self.now + self.flush_cycles;
        self.advance_to(t, ProcessKind::Attacker);
        self.shared.commit_flush(t, ProcessKind::Attacker, line);
        self.now = t;
    }

    pub fn tx_begin(&mut self) -> Result<(), TxError> {
        let at = self.draw_spontaneous();
        self.shared.tx.begin(at)
    }

    pub fn tx_read(&mut self, line: LineAddr) -> Result<Probe, TxError> {
        if !self.shared.tx.is_active() {
            return Err(TxError::Inactive);
        }
        let p = self.access(line);
        self.shared.tx.record_read(line)?;
        Ok(p)
    }

    pub fn tx_end(&mut self) -> Result<(), TxError> {
        self.shared.tx.end()
    }

    /// Idles inside the transaction until its abort reaches the handler or
    /// `deadline` passes.
    pub fn spin_until_abort(&mut self, deadline: u64) -> Option<AbortInfo> {
        loop {
            if !self.shared.tx.is_active() {
                let info = self.shared.tx.abort_info()?;
                let at = info.timestamp.max(self.now);
                if at > deadline {
                    self.wait_until(deadline);
                    return None;
                }
                self.wait_until(at);
                return Some(info);
            }
            match self.next_background() {
                Some((t, _, idx)) if t <= deadline => {
                    if self.shared.tx.poll_spontaneous(t).is_some() {
                        continue;
                    }
                    self.fire(idx, t);
                }
                _ => {
                    if self.shared.tx.poll_spontaneous(deadline).is_some() {
                        continue;
                    }
                    self.wait_until(deadline);
                    return None;
                }
            }
        }
    }
}
