//! Inclusive three-level cache hierarchy.
//!
//! Each core owns a private L1 and L2 (tree PLRU); all cores share one L3
//! slice managed with quad-age replacement. Only L3 inclusion is enforced:
//! a line leaving the L3 is back-invalidated from every private cache.

mod plru;
mod quad_age;


use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plru::PlruSet;
pub use quad_age::{HitUpdate, L3LineMeta, L3Set, QuadAgePolicy, MAX_AGE};

pub const LINE_SIZE: u64 = 64;
const OFFSET_BITS: u32 = 6;

/// Cache-line number (physical address divided by the line size).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineAddr(pub u64);

impl LineAddr {
    pub fn from_byte_addr(addr: u64) -> Self {
        Self(addr >> OFFSET_BITS)
    }

    pub fn byte_addr(self) -> u64 {
        self.0 << OFFSET_BITS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    Mem,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::Mem => "MEM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub sets: usize,
    pub ways: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    pub l1: u64,
    pub l2: u64,
    pub l3: u64,
    pub mem: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            l1: 4,
            l2: 12,
            l3: 40,
            mem: 200,
        }
    }
}

impl Latencies {
    pub fn of(&self, level: Level) -> u64 {
        match level {
            Level::L1 => self.l1,
            Level::L2 => self.l2,
            Level::L3 => self.l3,
            Level::Mem => self.mem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub l1: LevelGeometry,
    pub l2: LevelGeometry,
    pub l3: LevelGeometry,
    pub latencies: Latencies,
    pub policy: QuadAgePolicy,
    pub cores: usize,
}

impl Default for CacheGeometry {
    /// 32 KiB 8-way L1, 256 KiB 4-way L2, one 12-way LLC slice of 1024 sets.
    fn default() -> Self {
        Self {
            l1: LevelGeometry { sets: 64, ways: 8 },
            l2: LevelGeometry { sets: 1024, ways: 4 },
            l3: LevelGeometry { sets: 1024, ways: 12 },
            latencies: Latencies::default(),
            policy: QuadAgePolicy::default(),
            cores: 3,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("{level}: set count {sets} is not a power of two")]
    SetsNotPowerOfTwo { level: &'static str, sets: usize },
    #[error("{level}: way count must be at least 1")]
    NoWays { level: &'static str },
    #[error("{level}: tree PLRU needs a power-of-two way count, got {ways}")]
    PlruWays { level: &'static str, ways: usize },
    #[error("capacity must not shrink towards the LLC ({0})")]
    Capacity(&'static str),
    #[error("insertion age {0} is outside 0..=3")]
    InsertionAge(u8),
    #[error("at least one core is required")]
    NoCores,
}

/// Tag / set-index / offset split of a byte address for one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhysicalAddress {
    pub tag: u64,
    pub set_index: u64,
    pub offset: u64,
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, lvl, plru) in [("l1", self.l1, true), ("l2", self.l2, true), ("l3", self.l3, false)] {
            if !lvl.sets.is_power_of_two() {
                return Err(GeometryError::SetsNotPowerOfTwo { level: name, sets: lvl.sets });
            }
            if lvl.ways == 0 {
                return Err(GeometryError::NoWays { level: name });
            }
            if plru && !lvl.ways.is_power_of_two() {
                return Err(GeometryError::PlruWays { level: name, ways: lvl.ways });
            }
        }
        let cap = |g: LevelGeometry| g.sets * g.ways;
        if cap(self.l2) < cap(self.l1) {
            return Err(GeometryError::Capacity("l2 < l1"));
        }
        if cap(self.l3) < cap(self.l2) {
            return Err(GeometryError::Capacity("l3 < l2"));
        }
        if self.policy.insertion_age > MAX_AGE {
            return Err(GeometryError::InsertionAge(self.policy.insertion_age));
        }
        if self.cores == 0 {
            return Err(GeometryError::NoCores);
        }
        Ok(())
    }

    fn level(&self, level: Level) -> LevelGeometry {
        match level {
            Level::L1 => self.l1,
            Level::L2 => self.l2,
            Level::L3 | Level::Mem => self.l3,
        }
    }

    pub fn set_index(&self, level: Level, line: LineAddr) -> u64 {
        line.0 & (self.level(level).sets as u64 - 1)
    }

    pub fn l3_set(&self, line: LineAddr) -> u64 {
        self.set_index(Level::L3, line)
    }

    pub fn decompose(&self, level: Level, addr: u64) -> PhysicalAddress {
        let sets = self.level(level).sets as u64;
        let line = addr >> OFFSET_BITS;
        PhysicalAddress {
            tag: line >> sets.trailing_zeros(),
            set_index: line & (sets - 1),
            offset: addr & (LINE_SIZE - 1),
        }
    }

    pub fn compose(&self, level: Level, parts: PhysicalAddress) -> u64 {
        let sets = self.level(level).sets as u64;
        let line = (parts.tag << sets.trailing_zeros()) | parts.set_index;
        (line << OFFSET_BITS) | parts.offset
    }

    /// The `n`-th distinct line that maps to `set` of the L3.
    pub fn line_in_l3_set(&self, set: u64, n: u64) -> LineAddr {
        let sets = self.l3.sets as u64;
        LineAddr(n * sets + (set & (sets - 1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub level_hit: Level,
    pub evicted_l3_line: Option<LineAddr>,
    pub cost_cycles: u64,
}

/// Sets indexed by number and allocated on first fill, so untouched sets
/// stay distinguishable from empty ones.
#[derive(Debug, Clone)]
struct SetMap<T>(Vec<Option<T>>);

impl<T> Default for SetMap<T> {
    fn default() -> Self {
        Self(Vec::new())
    }
}

impl<T> SetMap<T> {
    fn get(&self, set: &u64) -> Option<&T> {
        self.0.get(*set as usize).and_then(Option::as_ref)
    }

    fn get_mut(&mut self, set: &u64) -> Option<&mut T> {
        self.0.get_mut(*set as usize).and_then(Option::as_mut)
    }

    fn slot(&mut self, set: u64) -> &mut Option<T> {
        let i = set as usize;
        if i >= self.0.len() {
            self.0.resize_with(i + 1, || None);
        }
        &mut self.0[i]
    }

    fn insert(&mut self, set: u64, value: T) {
        *self.slot(set) = Some(value);
    }

    fn get_or_insert_with(&mut self, set: u64, f: impl FnOnce() -> T) -> &mut T {
        self.slot(set).get_or_insert_with(f)
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.0.iter().flatten()
    }
}

// Trailing unallocated slots carry no state.
impl<T: PartialEq> PartialEq for SetMap<T> {
    fn eq(&self, other: &Self) -> bool {
        let n = self.0.len().max(other.0.len());
        (0..n).all(|i| self.0.get(i).unwrap_or(&None) == other.0.get(i).unwrap_or(&None))
    }
}

impl<T: Eq> Eq for SetMap<T> {}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PrivateCaches {
    l1: SetMap<PlruSet>,
    l2: SetMap<PlruSet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    geom: CacheGeometry,
    l3: SetMap<L3Set>,
    cores: Vec<PrivateCaches>,
}

impl Hierarchy {
    pub fn new(geom: CacheGeometry) -> Result<Self, GeometryError> {
        geom.validate()?;
        let cores = vec![PrivateCaches::default(); geom.cores];
        Ok(Self {
            geom,
            l3: SetMap::default(),
            cores,
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geom
    }

    pub fn cores(&self) -> usize {
        self.cores.len()
    }

    /// Which level would serve `line` for `core`, without changing state.
    pub fn peek(&self, core: usize, line: LineAddr) -> Level {
        let p = &self.cores[core];
        let l1s = self.geom.set_index(Level::L1, line);
        if p.l1.get(&l1s).is_some_and(|s| s.find(line).is_some()) {
            return Level::L1;
        }
        let l2s = self.geom.set_index(Level::L2, line);
        if p.l2.get(&l2s).is_some_and(|s| s.find(line).is_some()) {
            return Level::L2;
        }
        if self.in_l3(line) {
            Level::L3
        } else {
            Level::Mem
        }
    }

    pub fn in_l3(&self, line: LineAddr) -> bool {
        self.l3
            .get(&self.geom.l3_set(line))
            .is_some_and(|s| s.find(line).is_some())
    }

    pub fn in_l1(&self, core: usize, line: LineAddr) -> bool {
        let s = self.geom.set_index(Level::L1, line);
        self.cores[core].l1.get(&s).is_some_and(|set| set.find(line).is_some())
    }

    pub fn in_l2(&self, core: usize, line: LineAddr) -> bool {
        let s = self.geom.set_index(Level::L2, line);
        self.cores[core].l2.get(&s).is_some_and(|set| set.find(line).is_some())
    }

    pub fn l3_set_state(&self, set: u64) -> Option<&L3Set> {
        self.l3.get(&set)
    }

    pub fn l1_set_state(&self, core: usize, set: u64) -> Option<&PlruSet> {
        self.cores[core].l1.get(&set)
    }

    pub fn l2_set_state(&self, core: usize, set: u64) -> Option<&PlruSet> {
        self.cores[core].l2.get(&set)
    }

    /// Overwrites one L3 set; used to seed test states.
    pub fn put_l3_set(&mut self, set: u64, state: L3Set) {
        assert_eq!(state.ways(), self.geom.l3.ways);
        self.l3.insert(set, state);
    }

    pub fn access(&mut self, core: usize, line: LineAddr) -> AccessOutcome {
        let level = self.peek(core, line);
        let mut evicted = None;
        match level {
            Level::L1 => {
                self.touch_private(core, Level::L1, line);
            }
            Level::L2 => {
                self.touch_private(core, Level::L2, line);
                self.fill_private(core, Level::L1, line);
            }
            Level::L3 => {
                let set_idx = self.geom.l3_set(line);
                let policy = self.geom.policy;
                let set = self.l3.get_mut(&set_idx).expect("resident line has a set");
                let way = set.find(line).expect("peek said L3");
                set.hit(way, &policy);
                self.fill_private(core, Level::L2, line);
                self.fill_private(core, Level::L1, line);
            }
            Level::Mem => {
                evicted = self.fill_l3(line);
                self.fill_private(core, Level::L2, line);
                self.fill_private(core, Level::L1, line);
            }
        }
        AccessOutcome {
            level_hit: level,
            evicted_l3_line: evicted,
            cost_cycles: self.geom.latencies.of(level),
        }
    }

    fn fill_l3(&mut self, line: LineAddr) -> Option<LineAddr> {
        let set_idx = self.geom.l3_set(line);
        let ways = self.geom.l3.ways;
        let policy = self.geom.policy;
        let set = self.l3.get_or_insert_with(set_idx, || L3Set::new(ways));
        let way = match set.free_way() {
            Some(w) => w,
            None => set.select_victim(),
        };
        let displaced = set.insert(way, line, &policy);
        if let Some(victim) = displaced {
            self.back_invalidate(victim);
        }
        displaced
    }

    fn back_invalidate(&mut self, line: LineAddr) {
        let l1s = self.geom.set_index(Level::L1, line);
        let l2s = self.geom.set_index(Level::L2, line);
        for p in &mut self.cores {
            if let Some(s) = p.l1.get_mut(&l1s) {
                s.invalidate(line);
            }
            if let Some(s) = p.l2.get_mut(&l2s) {
                s.invalidate(line);
            }
        }
    }

    fn private_set(&mut self, core: usize, level: Level, line: LineAddr) -> &mut PlruSet {
        let g = self.geom.level(level);
        let idx = self.geom.set_index(level, line);
        let p = &mut self.cores[core];
        let map = match level {
            Level::L1 => &mut p.l1,
            Level::L2 => &mut p.l2,
            _ => unreachable!("private levels are L1 and L2"),
        };
        map.get_or_insert_with(idx, || PlruSet::new(g.ways))
    }

    fn touch_private(&mut self, core: usize, level: Level, line: LineAddr) {
        let set = self.private_set(core, level, line);
        let way = set.find(line).expect("touching a resident line");
        set.touch(way);
    }

    fn fill_private(&mut self, core: usize, level: Level, line: LineAddr) {
        self.private_set(core, level, line).access(line);
    }

    /// Invalidates `line` everywhere. Replacement state of other lines is
    /// left as is.
    pub fn flush(&mut self, line: LineAddr) {
        if let Some(set) = self.l3.get_mut(&self.geom.l3_set(line)) {
            set.invalidate(line);
        }
        self.back_invalidate(line);
    }

    /// Lines held in a private cache but missing from the L3.
    pub fn inclusion_violations(&self) -> Vec<(usize, Level, LineAddr)> {
        let mut out = Vec::new();
        for (core, p) in self.cores.iter().enumerate() {
            for (level, map) in [(Level::L1, &p.l1), (Level::L2, &p.l2)] {
                for set in map.values() {
                    for line in set.lines() {
                        if !self.in_l3(line) {
                            out.push((core, level, line));
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hier() -> Hierarchy {
        Hierarchy::new(CacheGeometry::default()).unwrap()
    }

    #[test]
    fn cold_miss_then_l1_hit() {
        let mut h = hier();
        let x = LineAddr(5);
        let first = h.access(0, x);
        assert_eq!(first.level_hit, Level::Mem);
        assert_eq!(first.cost_cycles, 200);
        assert_eq!(first.evicted_l3_line, None);
        assert_eq!(h.access(0, x).level_hit, Level::L1);
    }

    #[test]
    fn l3_eviction_back_invalidates_private_copies() {
        let g = CacheGeometry::default();
        let mut h = hier();
        let victim_line = g.line_in_l3_set(7, 100);
        h.access(0, victim_line);
        assert!(h.in_l1(0, victim_line) && h.in_l2(0, victim_line));
        // another core fills the same L3 set with 12 lines; first miss in the
        // full set ages everyone to 3 and evicts way 0, the victim line
        let mut evicted = Vec::new();
        for n in 0..12 {
            let o = h.access(1, g.line_in_l3_set(7, n));
            evicted.extend(o.evicted_l3_line);
        }
        assert_eq!(evicted, vec![victim_line]);
        assert!(!h.in_l1(0, victim_line) && !h.in_l2(0, victim_line));
        assert_eq!(h.access(0, victim_line).level_hit, Level::Mem);
        assert!(h.inclusion_violations().is_empty());
    }

    #[test]
    fn l1_hit_leaves_l3_ages_alone() {
        let g = CacheGeometry::default();
        let mut h = hier();
        let x = g.line_in_l3_set(3, 1);
        h.access(0, x);
        let before = h.l3_set_state(3).cloned();
        assert_eq!(h.access(0, x).level_hit, Level::L1);
        assert_eq!(h.l3_set_state(3).cloned(), before);
    }

    #[test]
    fn l3_hit_from_other_core_makes_line_younger() {
        let g = CacheGeometry::default();
        let mut h = hier();
        let x = g.line_in_l3_set(3, 1);
        h.access(0, x);
        assert_eq!(h.access(1, x).level_hit, Level::L3);
        let set = h.l3_set_state(3).unwrap();
        assert_eq!(set.slot(set.find(x).unwrap()).unwrap().age, 1);
    }

    #[test]
    fn flush_resident_and_absent() {
        let g = CacheGeometry::default();
        let mut h = hier();
        let x = g.line_in_l3_set(9, 0);
        let y = g.line_in_l3_set(9, 1);
        h.access(0, x);
        h.access(0, y);
        let l1_set = g.set_index(Level::L1, x);
        let l1_before = h.l1_set_state(0, l1_set).unwrap().occupancy();
        let l3_before = h.l3_set_state(9).unwrap().occupancy();
        h.flush(x);
        assert_eq!(h.l1_set_state(0, l1_set).unwrap().occupancy(), l1_before - 1);
        assert_eq!(h.l3_set_state(9).unwrap().occupancy(), l3_before - 1);
        assert_eq!(h.peek(0, x), Level::Mem);
        let snapshot = h.clone();
        h.flush(g.line_in_l3_set(9, 55));
        assert_eq!(h, snapshot);
        assert_eq!(h.access(0, x).level_hit, Level::Mem);
    }

    #[test]
    fn geometry_validation() {
        let mut g = CacheGeometry::default();
        g.l3.sets = 1000;
        assert!(matches!(g.validate(), Err(GeometryError::SetsNotPowerOfTwo { .. })));
        let mut g = CacheGeometry::default();
        g.l1.ways = 6;
        assert!(matches!(g.validate(), Err(GeometryError::PlruWays { .. })));
        let mut g = CacheGeometry::default();
        g.l3 = LevelGeometry { sets: 16, ways: 2 };
        assert!(matches!(g.validate(), Err(GeometryError::Capacity(_))));
    }

    #[test]
    fn address_split_round_trips() {
        let g = CacheGeometry::default();
        let addr = 0x1234_5678_9abc;
        for level in [Level::L1, Level::L2, Level::L3] {
            let parts = g.decompose(level, addr);
            assert!(parts.offset < 64);
            assert_eq!(g.compose(level, parts), addr);
        }
    }
}
