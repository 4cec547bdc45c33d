//! Tree pseudo-LRU set used by the private L1 and L2 caches.
//!
//! The tree is stored heap-style: node 0 is the root, the children of node
//! `n` are `2n + 1` (left) and `2n + 2` (right), and the `w` leaves are the
//! ways. A node bit of `true` points to the right subtree.
//!
//! While the set still has free ways, fills go to the lowest free way
//! without consulting the tree. Touching a way flips every node on its path
//! that currently points towards it.

use super::LineAddr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlruSet {
    bits: Vec<bool>,
    ways: Vec<Option<LineAddr>>,
}

impl PlruSet {
    /// `ways` must be a power of two.
    pub fn new(ways: usize) -> Self {
        assert!(ways.is_power_of_two(), "tree PLRU needs a power-of-two way count");
        Self {
            bits: vec![false; ways - 1],
            ways: vec![None; ways],
        }
    }

    pub fn ways(&self) -> usize {
        self.ways.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set_bits(&mut self, bits: &[bool]) {
        assert_eq!(bits.len(), self.bits.len());
        self.bits.copy_from_slice(bits);
    }

    pub fn line_at(&self, way: usize) -> Option<LineAddr> {
        self.ways[way]
    }

    pub fn lines(&self) -> impl Iterator<Item = LineAddr> + '_ {
        self.ways.iter().flatten().copied()
    }

    pub fn occupancy(&self) -> usize {
        self.ways.iter().filter(|w| w.is_some()).count()
    }

    pub fn find(&self, line: LineAddr) -> Option<usize> {
        self.ways.iter().position(|w| *w == Some(line))
    }

    /// Lowest free way if any, otherwise the leaf reached by walking the
    /// tree from the root.
    pub fn select_victim(&self) -> usize {
        if let Some(free) = self.ways.iter().position(Option::is_none) {
            return free;
        }
        let inner = self.bits.len();
        let mut node = 0;
        while node < inner {
            node = 2 * node + 1 + usize::from(self.bits[node]);
        }
        node - inner
    }

    pub fn touch(&mut self, way: usize) {
        let mut node = way + self.bits.len();
        while node > 0 {
            let parent = (node - 1) / 2;
            let came_from_right = node == 2 * parent + 2;
            // point away from the touched child
            self.bits[parent] = !came_from_right;
            node = parent;
        }
    }

    /// Touches `line` if present, otherwise installs it in the victim way.
    /// Returns `(hit, displaced line)`.
    pub fn access(&mut self, line: LineAddr) -> (bool, Option<LineAddr>) {
        if let Some(way) = self.find(line) {
            self.touch(way);
            return (true, None);
        }
        let way = self.select_victim();
        let displaced = self.ways[way].replace(line);
        self.touch(way);
        (false, displaced)
    }

    /// Drops `line` without touching the tree.
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
