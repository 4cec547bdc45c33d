use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SniperError;
use crate::cache_model::{CacheGeometry, LineAddr, PlruSet};

/// Tags `ATTACKER_TAG_BASE..ATTACKER_TAG_BASE + 1024` within any set are
/// reserved for attacker lines.
pub const ATTACKER_TAG_BASE: u64 = 4096;
const ATTACKER_TAG_SPAN: usize = 1024;

/// `w` attacker lines congruent in the L3. Index 0 is the sacrificial line
/// A, index 1 the probe line B, the rest are fillers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionSet {
    pub set_index: u64,
    pub lines: Vec<LineAddr>,
}

impl EvictionSet {
    pub fn a(&self) -> LineAddr {
        self.lines[0]
    }

    pub fn b(&self) -> LineAddr {
        self.lines[1]
    }

    /// Every line except A.
    pub fn rest(&self) -> &[LineAddr] {
        &self.lines[1..]
    }

    pub fn label(i: usize) -> String {
        let mut s = String::new();
        let mut n = i;
        loop {
            s.insert(0, (b'A' + (n % 26) as u8) as char);
            if n < 26 {
                break;
            }
            n = n / 26 - 1;
        }
        s
    }
}

pub fn build_eviction_set(geom: &CacheGeometry, target_set: u64, seed: u64) -> EvictionSet {
    let w = geom.l3.ways;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (target_set << 20) ^ 0xe5e7);
    let lines = sample(&mut rng, ATTACKER_TAG_SPAN, w)
        .into_iter()
        .map(|t| geom.line_in_l3_set(target_set, ATTACKER_TAG_BASE + t as u64))
        .collect();
    EvictionSet { set_index: target_set, lines }
}

/// Order over `lines` such that each access in turn misses both private
/// caches, starting from the given L1 and L2 set states.
pub fn plru_aware_order_from(l1: &PlruSet, l2: &PlruSet, lines: &[LineAddr]) -> Result<Vec<LineAddr>, SniperError> {
    fn dfs(l1: &PlruSet, l2: &PlruSet, left: &mut Vec<LineAddr>, order: &mut Vec<LineAddr>) -> bool {
        if left.is_empty() {
            return true;
        }
        for i in 0..left.len() {
            let line = left[i];
            if l1.find(line).is_some() || l2.find(line).is_some() {
                continue;
            }
            let (mut n1, mut n2) = (l1.clone(), l2.clone());
            n2.access(line);
            n1.access(line);
            left.remove(i);
            order.push(line);
            if dfs(&n1, &n2, left, order) {
                return true;
            }
            order.pop();
            left.insert(i, line);
        }
        false
    }
    let mut left = lines.to_vec();
    let mut order = Vec::with_capacity(lines.len());
    if dfs(l1, l2, &mut left, &mut order) {
        Ok(order)
    } else {
        Err(SniperError::NoOrderFound)
    }
}

/// Order over every line but A after the whole set was read linearly into
/// empty private caches.
pub fn plru_aware_order(es: &EvictionSet, geom: &CacheGeometry) -> Result<Vec<LineAddr>, SniperError> {
    let mut l1 = PlruSet::new(geom.l1.ways);
    let mut l2 = PlruSet::new(geom.l2.ways);
    for &line in &es.lines {
        l2.access(line);
        l1.access(line);
    }
    plru_aware_order_from(&l1, &l2, es.rest())
}
