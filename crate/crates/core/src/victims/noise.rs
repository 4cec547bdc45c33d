use std::any::Any;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::cache_model::{CacheGeometry, LineAddr};
use crate::machine::{Process, ProcessKind, Shared};

/// Background activity: Poisson-timed accesses to private lines that map to
/// chosen L3 sets.
pub struct NoiseProcess {
    core: usize,
    targets: Vec<(u64, f64)>,
    pools: Vec<Vec<LineAddr>>,
    total_rate: f64,
    rng: ChaCha8Rng,
    next: Option<u64>,
    end: u64,
    fired: u64,
}

/// Line numbers `NOISE_TAG_BASE..` within a set belong to the noise process.
pub const NOISE_TAG_BASE: u64 = 8192;

impl NoiseProcess {
    /// `targets` lists (L3 set, accesses per cycle); `pool` distinct lines
    /// are cycled per set.
    pub fn new(geom: &CacheGeometry, core: usize, targets: Vec<(u64, f64)>, pool: usize, start: u64, end: u64, seed: u64) -> Self {
        let pools = targets
            .iter()
            .map(|&(set, _)| (0..pool as u64).map(|n| geom.line_in_l3_set(set, NOISE_TAG_BASE + n)).collect())
            .collect();
        let total_rate: f64 = targets.iter().map(|&(_, r)| r).sum();
        let mut p = Self {
            core,
            targets,
            pools,
            total_rate,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65),
            next: None,
            end,
            fired: 0,
        };
        p.next = p.draw(start);
        p
    }

    pub fn accesses(&self) -> u64 {
        self.fired
    }

    fn draw(&mut self, from: u64) -> Option<u64> {
        if self.total_rate <= 0.0 {
            return None;
        }
        let gap: f64 = Exp::new(self.total_rate).expect("positive rate").sample(&mut self.rng);
        let t = from + gap.ceil().max(1.0) as u64;
        (t <= self.end).then_some(t)
    }
}

impl Process for NoiseProcess {
    fn kind(&self) -> ProcessKind {
        ProcessKind::Noise
    }

    fn next_event(&self) -> Option<u64> {
        self.next
    }

    fn fire(&mut self, now: u64, shared: &mut Shared) {
        let mut pick = self.rng.gen::<f64>() * self.total_rate;
        let mut idx = self.targets.len() - 1;
        for (i, &(_, r)) in self.targets.iter().enumerate() {
            if pick < r {
                idx = i;
                break;
            }
            pick -= r;
        }
        let pool = &self.pools[idx];
        let line = pool[self.rng.gen_range(0..pool.len())];
        shared.commit_access(now, ProcessKind::Noise, self.core, line);
        self.fired += 1;
        self.next = self.draw(now);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
