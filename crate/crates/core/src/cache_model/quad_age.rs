//! Quad-age replacement for the shared last-level cache.
//!
//! Every valid line carries a two-bit age. New lines are inserted with a
//! configurable age, hits make a line younger, and on a miss in a full set
//! the lowest-indexed way with age 3 is evicted. When no line has age 3, all
//! ages are raised together by the smallest amount that makes one of them 3.

use serde::{Deserialize, Serialize};

use super::LineAddr;

pub const MAX_AGE: u8 = 3;

/// How an LLC hit changes the age of the line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitUpdate {
    /// Age goes down by one, saturating at 0.
    Decrement,
    /// Age goes straight to 0.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadAgePolicy {
    pub insertion_age: u8,
    pub hit_update: HitUpdate,
}

impl Default for QuadAgePolicy {
    fn default() -> Self {
        Self {
            insertion_age: 2,
            hit_update: HitUpdate::Decrement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L3LineMeta {
    pub line: LineAddr,
    pub age: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L3Set {
    ways: Vec<Option<L3LineMeta>>,
}

impl L3Set {
    pub fn new(ways: usize) -> Self {
        Self {
            ways: vec![None; ways],
        }
    }

    /// Builds a set from explicit `(line, age)` slots; handy in tests.
    pub fn from_slots(slots: Vec<Option<(LineAddr, u8)>>) -> Self {
        Self {
            ways: slots
                .into_iter()
                .map(|s| s.map(|(line, age)| L3LineMeta { line, age: age.min(MAX_AGE) }))
                .collect(),
        }
    }

    pub fn ways(&self) -> usize {
        self.ways.len()
    }

    pub fn slot(&self, way: usize) -> Option<L3LineMeta> {
        self.ways[way]
    }

    pub fn slots(&self) -> &[Option<L3LineMeta>] {
        &self.ways
    }

    pub fn ages(&self) -> Vec<Option<u8>> {
        self.ways.iter().map(|w| w.map(|m| m.age)).collect()
    }

    pub fn lines(&self) -> impl Iterator<Item = LineAddr> + '_ {
        self.ways.iter().flatten().map(|m| m.line)
    }

    pub fn occupancy(&self) -> usize {
        self.ways.iter().filter(|w| w.is_some()).count()
    }

    pub fn find(&self, line: LineAddr) -> Option<usize> {
        self.ways.iter().position(|w| w.map(|m| m.line) == Some(line))
    }

    pub fn free_way(&self) -> Option<usize> {
        self.ways.iter().position(Option::is_none)
    }

    /// Picks the eviction candidate of a full set, aging the set first when
    /// no line has reached age 3. The aging is stored.
    pub fn select_victim(&mut self) -> usize {
        debug_assert!(self.free_way().is_none(), "victim selection on a set with free ways");
        if let Some(way) = self.first_oldest() {
            return way;
        }
        let oldest = self.ways.iter().flatten().map(|m| m.age).max().unwrap_or(MAX_AGE);
        let step = MAX_AGE - oldest;
        for meta in self.ways.iter_mut().flatten() {
            meta.age = (meta.age + step).min(MAX_AGE);
        }
        self.first_oldest().expect("aging produces an age-3 line")
    }

    fn first_oldest(&self) -> Option<usize> {
        self.ways
            .iter()
            .position(|w| matches!(w, Some(m) if m.age == MAX_AGE))
    }

    /// Installs `line` in `way` with the policy's insertion age; returns the
    /// line it displaced.
    pub fn insert(&mut self, way: usize, line: LineAddr, policy: &QuadAgePolicy) -> Option<LineAddr> {
        let old = self.ways[way].map(|m| m.line);
        self.ways[way] = Some(L3LineMeta {
            line,
            age: policy.insertion_age.min(MAX_AGE),
        });
        old
    }

    pub fn hit(&mut self, way: usize, policy: &QuadAgePolicy) {
        if let Some(meta) = self.ways[way].as_mut() {
            meta.age = match policy.hit_update {
                HitUpdate::Decrement => meta.age.saturating_sub(1),
                HitUpdate::Reset => 0,
            };
        }
    }

    pub fn invalidate(&mut self, line: LineAddr) -> bool {
        match self.find(line) {
            Some(way) => {
                self.ways[way] = None;
                true
            }
            None => false,
        }
    }
}
