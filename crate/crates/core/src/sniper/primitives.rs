use super::eviction::{plru_aware_order_from, EvictionSet};
use super::{ShootMethod, SniperError, Verdict};
use crate::cache_model::{Level, LineAddr, PlruSet};
use crate::machine::{AbortReason, Machine};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    /// Cycle at which the attacker learns of the victim access.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrimeReport {
    pub purge_passes: usize,
    /// Cycle at which the transaction (if any) began.
    pub tx_begun: Option<u64>,
    /// Cycle at which the last fill read completed.
    pub filled_at: Option<u64>,
    /// Re-touches that were served by a private cache instead of the L3.
    pub private_hits: usize,
}

const MAX_PURGE_PASSES: usize = 16;

/// Accesses the whole set until a pass completes without a memory access,
/// which leaves the L3 set holding attacker lines only.
pub fn purge(m: &mut Machine, es: &EvictionSet) -> Result<usize, SniperError> {
    for pass in 1..=MAX_PURGE_PASSES {
        let mut missed = false;
        for &l in &es.lines {
            missed |= m.access(l).level == Level::Mem;
        }
        if !missed {
            return Ok(pass);
        }
    }
    Err(SniperError::PurgeFailed)
}

fn read(m: &mut Machine, line: LineAddr, in_tx: bool) -> Option<Level> {
    if in_tx {
        m.tx_read(line).ok().map(|p| p.level)
    } else {
        Some(m.access(line).level)
    }
}

fn private_sets(m: &Machine, line: LineAddr) -> (PlruSet, PlruSet) {
    let g = m.geometry();
    let core = m.attacker_core();
    let h = m.hierarchy();
    let l1 = h
        .l1_set_state(core, g.set_index(Level::L1, line))
        .cloned()
        .unwrap_or_else(|| PlruSet::new(g.l1.ways));
    let l2 = h
        .l2_set_state(core, g.set_index(Level::L2, line))
        .cloned()
        .unwrap_or_else(|| PlruSet::new(g.l2.ways));
    (l1, l2)
}

/// Empties the set of foreign lines, then reads the eviction set in label
/// order so A lands in way 0. With `staged`, every line but A is touched
/// again through the L3, leaving A the only line at the insertion age.
/// With `in_tx` the reads happen inside a fresh transaction; the function
/// returns early if that transaction dies during priming.
pub fn prime(m: &mut Machine, es: &EvictionSet, staged: bool, in_tx: bool) -> Result<PrimeReport, SniperError> {
    let purge_passes = purge(m, es)?;
    for &l in &es.lines {
        m.flush(l);
    }
    if in_tx {
        if m.transaction().is_active() {
            m.tx_end()?;
        }
        m.tx_begin()?;
    }
    let mut report = PrimeReport {
        purge_passes,
        tx_begun: in_tx.then(|| m.now()),
        ..PrimeReport::default()
    };
    for &l in &es.lines {
        if read(m, l, in_tx).is_none() {
            return Ok(report);
        }
    }
    report.filled_at = Some(m.now());
    if staged {
        let (l1, l2) = private_sets(m, es.a());
        let order = plru_aware_order_from(&l1, &l2, es.rest())?;
        for l in order {
            match read(m, l, in_tx) {
                None => return Ok(report),
                Some(Level::L3) => {}
                Some(_) => report.private_hits += 1,
            }
        }
    }
    Ok(report)
}

/// Spins inside the primed transaction until it aborts or `deadline`.
pub fn await_abort(m: &mut Machine, deadline: u64) -> Result<DetectionEvent, SniperError> {
    match m.spin_until_abort(deadline) {
        None => Err(SniperError::NoDetection(deadline)),
        Some(info) if info.reason == AbortReason::Spontaneous => Err(SniperError::SpontaneousAbort(info.timestamp)),
        Some(info) => Ok(DetectionEvent { timestamp: info.timestamp }),
    }
}

/// Primes `es` inside a transaction and spins until it aborts.
pub fn aim_tsx(m: &mut Machine, es: &EvictionSet, staged: bool, deadline: u64) -> Result<DetectionEvent, SniperError> {
    prime(m, es, staged, true)?;
    await_abort(m, deadline)
}

/// Flush, count to `wait_limit`, timed reload; a fast reload is the
/// detection.
pub fn aim_flush_reload(m: &mut Machine, shared: LineAddr, wait_limit: u32, count_cycles: u64, deadline: u64) -> Result<DetectionEvent, SniperError> {
    let mem = m.geometry().latencies.mem;
    while m.now() < deadline {
        m.flush(shared);
        m.spend(wait_limit as u64 * count_cycles);
        let p = m.access(shared);
        if p.latency < mem {
            return Ok(DetectionEvent { timestamp: p.completed });
        }
    }
    Err(SniperError::NoDetection(deadline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shot {
    pub issued: u64,
    /// Cycle at which the target is out of the cache.
    pub effective: u64,
}

pub fn shoot(m: &mut Machine, method: ShootMethod, target: LineAddr, es: &EvictionSet) -> Result<Shot, SniperError> {
    let issued = m.now();
    match method {
        ShootMethod::Method1Flush => {
            m.flush(target);
            Ok(Shot { issued, effective: m.now() })
        }
        ShootMethod::Method2Access => {
            let p = m.access(es.a());
            if p.level != Level::Mem {
                return Err(SniperError::StagingBroken);
            }
            Ok(Shot { issued, effective: p.completed })
        }
    }
}

pub fn recover(m: &mut Machine, method: ShootMethod, target: LineAddr, es: &EvictionSet) -> Verdict {
    let mem = m.geometry().latencies.mem;
    match method {
        ShootMethod::Method1Flush => {
            if m.access(target).latency < mem {
                Verdict::Accessed
            } else {
                Verdict::NotAccessed
            }
        }
        ShootMethod::Method2Access => {
            if m.access(es.b()).level == Level::Mem {
                Verdict::Accessed
            } else {
                Verdict::NotAccessed
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_model::CacheGeometry;
    use crate::machine::MachineConfig;
    use crate::sniper::build_eviction_set;

    fn machine() -> Machine {
        Machine::new(&MachineConfig::default()).unwrap()
    }

    #[test]
    fn staged_prime_leaves_a_oldest() {
        let mut m = machine();
        let es = build_eviction_set(&CacheGeometry::default(), 40, 2);
        let r = prime(&mut m, &es, true, false).unwrap();
        assert_eq!(r.private_hits, 0);
        let set = m.hierarchy().l3_set_state(40).unwrap();
        assert_eq!(set.slot(0).unwrap().line, es.a());
        let ages = set.ages();
        assert_eq!(ages[0], Some(2));
        assert!(ages[1..].iter().all(|&a| a == Some(1)));
    }

    #[test]
    fn foreign_line_is_purged() {
        let mut m = machine();
        let g = CacheGeometry::default();
        let foreign = g.line_in_l3_set(40, 7);
        m.shared_mut().commit_access(0, crate::machine::ProcessKind::Victim, 0, foreign);
        let es = build_eviction_set(&g, 40, 2);
        prime(&mut m, &es, false, false).unwrap();
        assert!(!m.hierarchy().in_l3(foreign));
        assert!(!m.hierarchy().in_l1(0, foreign));
    }

    #[test]
    fn method2_on_absent_sacrificial_line_is_fine_and_hit_is_broken() {
        let mut m = machine();
        let es = build_eviction_set(&CacheGeometry::default(), 40, 2);
        let shot = shoot(&mut m, ShootMethod::Method2Access, LineAddr(1), &es).unwrap();
        assert_eq!(shot.effective - shot.issued, 200);
        assert_eq!(shoot(&mut m, ShootMethod::Method2Access, LineAddr(1), &es), Err(SniperError::StagingBroken));
    }

    #[test]
    fn method1_on_absent_line_is_a_noop() {
        let mut m = machine();
        let es = build_eviction_set(&CacheGeometry::default(), 40, 2);
        let before = m.hierarchy().clone();
        shoot(&mut m, ShootMethod::Method1Flush, LineAddr(123), &es).unwrap();
        assert_eq!(m.hierarchy().l3_set_state(123), before.l3_set_state(123));
        assert_eq!(recover(&mut m, ShootMethod::Method1Flush, LineAddr(123), &es), Verdict::NotAccessed);
    }
}
