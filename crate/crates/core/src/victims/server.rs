use std::any::Any;
use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::aes::Block;
use super::script::{aes_encrypt_script, rsa_decrypt_script, AesVictim, CiphertextRecord, Marker, RsaVictim, Step};
use crate::cache_model::LineAddr;
use crate::machine::{EventKind, Process, ProcessKind, Shared};

/// Request arrivals: run `n` nominally starts at `first + n * mean` shifted
/// by a uniform jitter, and never before the previous run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrivals {
    pub first: u64,
    pub mean_cycles: u64,
    pub jitter_cycles: u64,
    pub count: u64,
}

impl Arrivals {
    pub fn from_micros(first: u64, mean_us: f64, jitter_us: f64, cycles_per_us: f64, count: u64) -> Self {
        Self {
            first,
            mean_cycles: (mean_us * cycles_per_us).round() as u64,
            jitter_cycles: (jitter_us * cycles_per_us).round() as u64,
            count,
        }
    }

    fn nominal(&self, n: u64, rng: &mut ChaCha8Rng) -> u64 {
        let base = self.first + n * self.mean_cycles;
        if self.jitter_cycles == 0 {
            return base;
        }
        let j = self.jitter_cycles as i64;
        let d = rng.gen_range(-j..=j);
        (base as i64 + d).max(0) as u64
    }
}

#[derive(Debug, Clone)]
pub enum Workload {
    Aes(AesVictim),
    Rsa(RsaVictim),
}

/// Evaluation-only record of one victim run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub run_id: u64,
    pub start: u64,
    pub end: u64,
    pub markers: Vec<(Marker, u64)>,
    /// Completion cycles of accesses to watched lines.
    pub watched: Vec<(u64, LineAddr)>,
}

impl GroundTruth {
    pub fn marker(&self, m: Marker) -> Option<u64> {
        self.markers.iter().find(|(x, _)| *x == m).map(|&(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    line: LineAddr,
    at: u64,
}

pub struct ServerProcess {
    workload: Workload,
    core: usize,
    arrivals: Arrivals,
    rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    issued: u64,
    next_start: Option<u64>,
    steps: Vec<Step>,
    pc: usize,
    pending: Option<Pending>,
    resume_at: Option<u64>,
    current: Option<GroundTruth>,
    current_record: Option<(Block, Block)>,
    watched: BTreeSet<LineAddr>,
    keep_markers: bool,
    watched_cleared: usize,
    truth: Vec<GroundTruth>,
    published: Vec<CiphertextRecord>,
    responses: Vec<u64>,
}

impl ServerProcess {
    pub fn new(workload: Workload, core: usize, arrivals: Arrivals, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e72_7665_72);
        let jitter = match &workload {
            Workload::Aes(v) if v.timing.jitter_sigma > 0.0 => Some(Normal::new(0.0, v.timing.jitter_sigma).expect("finite sigma")),
            _ => None,
        };
        let next_start = (arrivals.count > 0).then(|| arrivals.nominal(0, &mut rng));
        Self {
            workload,
            core,
            arrivals,
            rng,
            jitter,
            issued: 0,
            next_start,
            steps: Vec::new(),
            pc: 0,
            pending: None,
            resume_at: None,
            current: None,
            current_record: None,
            watched: BTreeSet::new(),
            keep_markers: true,
            watched_cleared: 0,
            truth: Vec::new(),
            published: Vec::new(),
            responses: Vec::new(),
        }
    }

    pub fn watch(&mut self, line: LineAddr) {
        self.watched.insert(line);
    }

    /// Drops per-run marker lists, keeping only start and end cycles.
    pub fn set_keep_markers(&mut self, keep: bool) {
        self.keep_markers = keep;
    }

    /// Forgets watched accesses of every finished run.
    pub fn clear_watched(&mut self) {
        for g in &mut self.truth[self.watched_cleared..] {
            g.watched = Vec::new();
        }
        self.watched_cleared = self.truth.len();
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    pub fn ground_truth(&self) -> &[GroundTruth] {
        &self.truth
    }

    /// Completed encryptions as the client sees them.
    pub fn published(&self) -> &[CiphertextRecord] {
        &self.published
    }

    /// Cycle at which each answered request was returned to its client.
    pub fn responses(&self) -> &[u64] {
        &self.responses
    }

    pub fn in_run(&self) -> bool {
        self.current.is_some()
    }

    pub fn runs_started(&self) -> u64 {
        self.issued
    }

    pub fn write_ground_truth_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        #[derive(Serialize)]
        struct Row {
            run_id: u64,
            start_cycle: u64,
            end_cycle: u64,
            key_hash: String,
        }
        let hash = format!("{:016x}", self.key_hash());
        let mut w = csv::Writer::from_writer(out);
        for g in &self.truth {
            w.serialize(Row {
                run_id: g.run_id,
                start_cycle: g.start,
                end_cycle: g.end,
                key_hash: hash.clone(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// FNV-1a over the secret; identifies the key in exports without
    /// revealing it.
    pub fn key_hash(&self) -> u64 {
        let bytes: Vec<u8> = match &self.workload {
            Workload::Aes(v) => v.round_keys[0].to_vec(),
            Workload::Rsa(v) => v.bits.iter().map(|&b| b as u8).collect(),
        };
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
    }

    fn start_run(&mut self, now: u64, shared: &mut Shared) {
        let steps = match &self.workload {
            Workload::Aes(v) => {
                let mut pt = [0u8; 16];
                self.rng.fill(&mut pt);
                let j = self.jitter.map_or(0, |n| n.sample(&mut self.rng).round() as i64);
                let (ct, s) = aes_encrypt_script(v, &pt, j);
                self.current_record = Some((pt, ct));
                s
            }
            Workload::Rsa(v) => rsa_decrypt_script(v).expect("validated exponent"),
        };
        self.steps = steps;
        self.pc = 0;
        self.current = Some(GroundTruth {
            run_id: self.issued,
            start: now,
            end: now,
            markers: Vec::new(),
            watched: Vec::new(),
        });
        self.issued += 1;
        shared.note(now, ProcessKind::Victim, EventKind::RunStart);
    }

    fn finish_run(&mut self, now: u64, shared: &mut Shared) {
        let mut g = self.current.take().expect("run in progress");
        g.end = now;
        self.responses.push(now);
        if !self.keep_markers {
            g.markers = Vec::new();
        }
        if let Some((plaintext, ciphertext)) = self.current_record.take() {
            self.published.push(CiphertextRecord {
                plaintext,
                ciphertext,
                start: g.start,
                end: now,
            });
        }
        self.truth.push(g);
        shared.note(now, ProcessKind::Victim, EventKind::RunEnd);
        self.steps = Vec::new();
        self.next_start = (self.issued < self.arrivals.count).then(|| {
            let t = self.arrivals.nominal(self.issued, &mut self.rng);
            t.max(now + 1)
        });
    }

    /// Executes steps from `pc` until one needs time to pass.
    fn run_steps(&mut self, now: u64, shared: &mut Shared) {
        while self.pc < self.steps.len() {
            let step = self.steps[self.pc];
            self.pc += 1;
            match step {
                Step::Marker(m) => {
                    if let Some(g) = self.current.as_mut() {
                        g.markers.push((m, now));
                    }
                }
                Step::Compute(0) => {}
                Step::Compute(c) => {
                    self.resume_at = Some(now + c);
                    return;
                }
                Step::Access { line, l1_cost } => {
                    let (_, cost) = shared.peek_cost(self.core, line, l1_cost);
                    self.pending = Some(Pending { line, at: now + cost });
                    return;
                }
            }
        }
        self.finish_run(now, shared);
    }
}

impl Process for ServerProcess {
    fn kind(&self) -> ProcessKind {
        ProcessKind::Victim
    }

    fn next_event(&self) -> Option<u64> {
        if let Some(p) = self.pending {
            return Some(p.at);
        }
        if self.current.is_some() {
            return self.resume_at;
        }
        self.next_start
    }

    fn fire(&mut self, now: u64, shared: &mut Shared) {
        if let Some(p) = self.pending.take() {
            shared.commit_access(now, ProcessKind::Victim, self.core, p.line);
            if self.watched.contains(&p.line) {
                if let Some(g) = self.current.as_mut() {
                    g.watched.push((now, p.line));
                }
            }
        } else if self.current.is_some() {
            self.resume_at = None;
        } else {
            self.next_start = None;
            self.start_run(now, shared);
        }
        self.run_steps(now, shared);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
