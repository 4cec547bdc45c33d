use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache_model::{CacheGeometry, Hierarchy, Level, LineAddr, PlruSet};
use crate::machine::{Machine, MachineConfig, ProcessKind};
use crate::sniper::{build_eviction_set, plru_aware_order, prime, EvictionSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Counterexample or summary.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub suites: Vec<SuiteResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn dump_set(m: &Machine, set: u64, es: &EvictionSet) -> String {
    let mut s = String::new();
    if let Some(l3) = m.hierarchy().l3_set_state(set) {
        for (way, slot) in l3.slots().iter().enumerate() {
            match slot {
                Some(meta) => {
                    let name = es.lines.iter().position(|&l| l == meta.line).map_or_else(|| format!("{:#x}", meta.line.0), EvictionSet::label);
                    let _ = write!(s, "[{way}:{name}/{}]", meta.age);
                }
                None => {
                    let _ = write!(s, "[{way}:-]");
                }
            }
        }
    }
    s
}

/// Staging replay: stage the set, let the victim fill S (must evict A),
/// shoot A (must evict S), let the victim reload S (must evict B).
pub fn staging_replay(geometry: &CacheGeometry) -> SuiteResult {
    let name = "staging_replay".to_string();
    let cfg = MachineConfig {
        geometry: geometry.clone(),
        ..MachineConfig::default()
    };
    let mut m = match Machine::new(&cfg) {
        Ok(m) => m,
        Err(e) => return SuiteResult { name, passed: false, detail: e.to_string() },
    };
    let set = 0x40 % geometry.l3.sets as u64;
    let es = build_eviction_set(geometry, set, 7);
    let s_line = geometry.line_in_l3_set(set, 0x400);
    if let Err(e) = prime(&mut m, &es, true, false) {
        return SuiteResult { name, passed: false, detail: e.to_string() };
    }
    let staged = dump_set(&m, set, &es);
    let steps: [(&str, usize, LineAddr, Option<LineAddr>); 3] = [
        ("victim fill of S", 0, s_line, Some(es.a())),
        ("shoot of A", m.attacker_core(), es.a(), Some(s_line)),
        ("victim reload of S", 0, s_line, Some(es.b())),
    ];
    let mut trail = format!("staged {staged}");
    for (what, core, line, expect) in steps {
        let now = m.now();
        let out = m.shared_mut().commit_access(now, ProcessKind::Victim, core, line);
        let _ = write!(trail, "; after {what} {}", dump_set(&m, set, &es));
        if out.evicted_l3_line != expect {
            let got = out.evicted_l3_line.map_or("nothing".to_string(), |l| es.lines.iter().position(|&x| x == l).map_or_else(|| "S".to_string(), EvictionSet::label));
            return SuiteResult {
                name,
                passed: false,
                detail: format!("{what} evicted {got}; {trail}"),
            };
        }
    }
    SuiteResult { name, passed: true, detail: trail }
}

/// Sequential fill of an 8-way tree-PLRU set with 12 lines; which of the
/// first 8 survive.
pub fn plru_survivors() -> Vec<String> {
    let mut set = PlruSet::new(8);
    for i in 0..12u64 {
        set.access(LineAddr(i));
    }
    (0..8u64).filter(|&i| set.find(LineAddr(i)).is_some()).map(|i| EvictionSet::label(i as usize)).collect()
}

fn plru_suite(geometry: &CacheGeometry) -> SuiteResult {
    let survivors = plru_survivors();
    let expected = ["B", "D", "F", "H"];
    let mut detail = format!("survivors {{{}}}", survivors.join(","));
    let mut passed = survivors == expected;
    let es = build_eviction_set(geometry, 100 % geometry.l3.sets as u64, 4);
    match (Hierarchy::new(geometry.clone()), plru_aware_order(&es, geometry)) {
        (Ok(mut h), Ok(order)) => {
            for &l in &es.lines {
                h.access(1, l);
            }
            let levels: Vec<Level> = order.iter().map(|&l| h.access(1, l).level_hit).collect();
            let all_l3 = levels.iter().all(|&l| l == Level::L3);
            let _ = write!(detail, "; aware order of {} lines all L3: {all_l3}", order.len());
            if !all_l3 {
                let _ = write!(detail, " ({levels:?})");
            }
            passed &= all_l3;
        }
        (Err(e), _) => {
            passed = false;
            let _ = write!(detail, "; {e}");
        }
        (_, Err(e)) => {
            passed = false;
            let _ = write!(detail, "; {e}");
        }
    }
    SuiteResult {
        name: "plru_survivors".into(),
        passed,
        detail,
    }
}

/// Random accesses and flushes from every core into a few crowded sets;
/// after each operation no private line may be missing from the L3.
pub fn inclusivity_audit(geometry: &CacheGeometry, ops: usize, seed: u64) -> SuiteResult {
    let name = "inclusivity_audit".to_string();
    let mut h = match Hierarchy::new(geometry.clone()) {
        Ok(h) => h,
        Err(e) => return SuiteResult { name, passed: false, detail: e.to_string() },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cores = geometry.cores;
    for i in 0..ops {
        let set = rng.gen_range(0..4u64);
        let line = geometry.line_in_l3_set(set, rng.gen_range(0..40));
        if rng.gen_bool(0.05) {
            h.flush(line);
        } else {
            h.access(rng.gen_range(0..cores), line);
        }
        let v = h.inclusion_violations();
        if let Some(&(core, level, l)) = v.first() {
            return SuiteResult {
                name,
                passed: false,
                detail: format!("after op {i}: core {core} {level:?} holds {:#x} absent from L3", l.0),
            };
        }
    }
    SuiteResult {
        name,
        passed: true,
        detail: format!("{ops} operations, no violations"),
    }
}

/// Runs every suite on `geometry`, plus a negative control: with
/// insertion age 1 the staging replay must fail.
pub fn validate_policies(geometry: &CacheGeometry) -> ValidationReport {
    let mut suites = vec![staging_replay(geometry), plru_suite(geometry), inclusivity_audit(geometry, 20_000, 1)];
    let mut broken = geometry.clone();
    broken.policy.insertion_age = 1;
    let neg = staging_replay(&broken);
    suites.push(SuiteResult {
        name: "negative_control_insertion_age_1".into(),
        passed: !neg.passed,
        detail: if neg.passed {
            "staging replay unexpectedly succeeded".into()
        } else {
            format!("replay fails as expected: {}", neg.detail)
        },
    });
    ValidationReport { suites }
}
