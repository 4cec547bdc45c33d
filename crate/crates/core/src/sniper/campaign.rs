use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eviction::{build_eviction_set, EvictionSet};
use super::primitives::{aim_flush_reload, await_abort, prime, recover, shoot, DetectionEvent};
use super::stakeout::{adapt_wait_time, shoot_latency, stakeout, ProfileSample, StakeoutReport, VictimProfile};
use super::{AttackPlan, DetectionMethod, Observation, ObservationLog, ShootMethod, SniperError, Validity, Verdict};
use crate::cache_model::{CacheGeometry, LineAddr};
use crate::machine::{Machine, MachineConfig};
use crate::recovery::{rsa_decode, rsa_metrics, Alignment, BitTrace, Decoded, EliminationMode, KeyHypothesisSet, Progress, RsaMetrics, WindowObservation};
use crate::victims::aes::Block;
use crate::victims::{Arrivals, AesTiming, AesVictim, GroundTruth, Marker, NoiseProcess, RsaLines, RsaTiming, RsaVictim, ServerProcess, Workload};

const VICTIM_CORE: usize = 0;
const NOISE_CORE: usize = 2;
/// Slack after the replica's end for the recovery probe. The replica is
/// not shot at, so a refetch of the target adds one memory latency on top.
const STAKEOUT_MARGIN: u64 = 100;

fn recovery_margin(cfg: &MachineConfig) -> u64 {
    STAKEOUT_MARGIN + cfg.geometry.latencies.mem
}
const OUTPUT_WAIT: u64 = 20_000;
const OUTPUT_POLL: u64 = 100;

fn machine_for(cfg: &MachineConfig) -> Machine {
    Machine::new(cfg).expect("machine configuration is validated before a campaign")
}

fn server(m: &Machine) -> &ServerProcess {
    m.process::<ServerProcess>().expect("server process installed")
}

/// Run whose start is the latest one not after `t`.
fn run_at(truth: &[GroundTruth], t: u64) -> Option<&GroundTruth> {
    let i = truth.partition_point(|g| g.start <= t);
    (i > 0).then(|| &truth[i - 1])
}

fn median_u64(mut v: Vec<u64>) -> Option<u64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[v.len() / 2])
}

/// Four S-Box copies; the victim uses one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AesLayout {
    pub tables: [LineAddr; 4],
}

impl Default for AesLayout {
    fn default() -> Self {
        Self {
            tables: [0u64, 1, 2, 3].map(|t| LineAddr(0x10_0000 + 0x100 * t + 0x40)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AesCampaign {
    pub machine: MachineConfig,
    pub key: Block,
    pub layout: AesLayout,
    pub table_choice: usize,
    pub timing: AesTiming,
    pub arrival_mean_us: f64,
    pub arrival_jitter_us: f64,
    pub cycles_per_us: f64,
    pub plan: AttackPlan,
    /// Observation budget.
    pub samples: u64,
    /// Evict just before this last-round lookup (1..=16).
    pub lookup_index: usize,
    /// S-Box line that is watched and evicted.
    pub line_index: usize,
    pub mode: EliminationMode,
    pub stop_when_unique: bool,
    pub progress_every: u64,
    /// Background accesses per cycle into the target set.
    pub noise_rate: f64,
    pub noise_pool: usize,
    pub stakeout_replicas: usize,
    pub discover: bool,
    pub check_ground_truth: bool,
    pub seed: u64,
}

impl Default for AesCampaign {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            key: [0u8; 16],
            layout: AesLayout::default(),
            table_choice: 0,
            timing: AesTiming::default(),
            arrival_mean_us: 500.0,
            arrival_jitter_us: 50.0,
            cycles_per_us: 3800.0,
            plan: AttackPlan::default(),
            samples: 200_000,
            lookup_index: 1,
            line_index: 0,
            mode: EliminationMode::Hard,
            stop_when_unique: true,
            progress_every: 100,
            noise_rate: 0.0,
            noise_pool: 24,
            stakeout_replicas: 21,
            discover: true,
            check_ground_truth: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DetectionStats {
    /// Victim runs that started while the attack loop was active.
    pub runs: u64,
    pub detections: u64,
    /// Runs with at least one detection at the expected latency.
    pub detected_runs: u64,
    pub proper_detections: u64,
    pub latency_sum: u64,
    pub latency_min: u64,
    pub latency_max: u64,
    pub spontaneous_aborts: u64,
    pub staging_broken: u64,
    pub purge_failures: u64,
    /// Re-arms after a spontaneous abort, with the summed cycles from the
    /// abort to the transaction start and from there to being armed.
    pub rearms: u64,
    pub rearm_pre_tx_cycles: u64,
    pub rearm_in_tx_cycles: u64,
}

impl DetectionStats {
    pub fn detection_rate(&self) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            self.detected_runs as f64 / self.runs as f64
        }
    }

    pub fn mean_latency(&self) -> f64 {
        if self.proper_detections == 0 {
            0.0
        } else {
            self.latency_sum as f64 / self.proper_detections as f64
        }
    }

    /// Mean blind windows around a re-arm: (before tx_begin, inside the
    /// transaction before it is armed).
    pub fn rearm_windows(&self) -> Option<(f64, f64)> {
        (self.rearms > 0).then(|| {
            let n = self.rearms as f64;
            (self.rearm_pre_tx_cycles as f64 / n, self.rearm_in_tx_cycles as f64 / n)
        })
    }

    /// Matches detections to runs. A detection is proper when its latency
    /// from the run start is within `tolerance` of `expected`.
    fn score(&mut self, truth: &[GroundTruth], detections: &[u64], from: u64, until: u64, expected: u64, tolerance: u64) {
        let runs: Vec<&GroundTruth> = truth.iter().filter(|g| g.start >= from && g.end <= until).collect();
        self.runs = runs.len() as u64;
        self.detections = detections.len() as u64;
        let mut hit = vec![false; runs.len()];
        for &d in detections {
            let i = runs.partition_point(|g| g.start <= d);
            if i == 0 {
                continue;
            }
            let lat = d - runs[i - 1].start;
            if lat.abs_diff(expected) <= tolerance {
                if self.proper_detections == 0 {
                    self.latency_min = lat;
                }
                self.proper_detections += 1;
                self.latency_sum += lat;
                self.latency_min = self.latency_min.min(lat);
                self.latency_max = self.latency_max.max(lat);
                hit[i - 1] = true;
            }
        }
        self.detected_runs = hit.iter().filter(|&&h| h).count() as u64;
    }
}

pub struct AesCampaignResult {
    pub log: ObservationLog,
    pub hypotheses: KeyHypothesisSet,
    pub progress: Progress,
    pub stats: DetectionStats,
    pub stakeout: StakeoutReport,
    /// Plan as it stood at the end, including the adapted wait.
    pub final_plan: AttackPlan,
    pub discovered_table: usize,
    pub recovered_key: Option<Block>,
    pub key_correct: bool,
    pub ground_truth_checked: u64,
    pub ground_truth_violations: u64,
    /// The simulated machine, for trace and ground-truth export.
    pub machine: Machine,
}

fn aes_server(c: &AesCampaign, key: &Block, arrivals: Arrivals, seed: u64) -> ServerProcess {
    let mut v = AesVictim::new(key, c.layout.tables, c.table_choice);
    v.timing = c.timing;
    ServerProcess::new(Workload::Aes(v), VICTIM_CORE, arrivals, seed)
}

fn target_line(c: &AesCampaign, table: usize) -> LineAddr {
    LineAddr(c.layout.tables[table].0 + c.line_index as u64)
}

/// Arms the detection on `es` (or on `line` for Flush+Reload) and waits for
/// it. Returns the detection together with the cycle the re-arm started
/// its transaction and the cycle it was armed.
fn detect_once(m: &mut Machine, plan: &AttackPlan, es: &EvictionSet, line: LineAddr, staged: bool, deadline: u64) -> Result<(DetectionEvent, Option<(u64, u64)>), SniperError> {
    match plan.detection {
        DetectionMethod::Tsx => {
            let rep = prime(m, es, staged, true)?;
            let armed = rep.tx_begun.map(|b| (b, m.now()));
            await_abort(m, deadline).map(|d| (d, armed))
        }
        DetectionMethod::FlushReload => {
            if staged {
                prime(m, es, true, false)?;
            }
            aim_flush_reload(m, line, plan.wait_limit, plan.count_cycles, deadline).map(|d| (d, None))
        }
    }
}

/// Finds which of the candidate tables the victim uses by priming each
/// candidate's target set and waiting up to `window` cycles for activity.
pub fn discover_table(m: &mut Machine, candidates: &[LineAddr], seed: u64, window: u64) -> Result<Option<usize>, SniperError> {
    let geom = m.geometry().clone();
    for (i, &line) in candidates.iter().enumerate() {
        let es = build_eviction_set(&geom, geom.l3_set(line), seed);
        loop {
            prime(m, &es, false, true)?;
            let deadline = m.now() + window;
            match await_abort(m, deadline) {
                Ok(_) => {
                    m.tx_end().ok();
                    return Ok(Some(i));
                }
                Err(SniperError::SpontaneousAbort(_)) => continue,
                Err(SniperError::NoDetection(_)) => {
                    m.tx_end().ok();
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(None)
}

/// Profiles a replica victim with a random key: detection timestamps
/// against the cycle at which the chosen lookup must find the line gone.
fn aes_stakeout(c: &AesCampaign, table: usize, plan: &AttackPlan) -> Result<StakeoutReport, SniperError> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x7e91_1ca5);
    let mut key = [0u8; 16];
    rng.fill(&mut key);
    let cfg = MachineConfig {
        seed: c.machine.seed ^ 1,
        spontaneous_abort_hazard: 0.0,
        trace_limit: 0,
        ..c.machine.clone()
    };
    let mut m = machine_for(&cfg);
    let arrivals = Arrivals::from_micros(100_000, c.arrival_mean_us, c.arrival_jitter_us, c.cycles_per_us, c.stakeout_replicas as u64 + 1);
    let replica = AesCampaign { table_choice: table, ..c.clone() };
    let mut srv = aes_server(&replica, &key, arrivals, c.seed ^ 1);
    srv.set_keep_markers(true);
    m.add_process(Box::new(srv));
    let line = target_line(c, table);
    let es = build_eviction_set(m.geometry(), m.geometry().l3_set(line), c.seed ^ 1);
    let staged = plan.shoot == ShootMethod::Method2Access;
    let horizon = arrivals.first + (arrivals.count + 1) * arrivals.mean_cycles + arrivals.jitter_cycles;
    let lookup_cost = c.timing.lookup_l1;
    let k = c.lookup_index.clamp(1, 16) as u64;
    let mut profile = VictimProfile::default();
    let mut first = true;
    while profile.samples.len() < c.stakeout_replicas {
        let d = match detect_once(&mut m, plan, &es, line, staged, horizon) {
            Ok((d, _)) => d.timestamp,
            Err(SniperError::NoDetection(_)) => break,
            Err(SniperError::SpontaneousAbort(_)) => continue,
            Err(e) => return Err(e),
        };
        m.wait_until(d + 5_000);
        if first {
            // The first run starts with every line cold.
            first = false;
            continue;
        }
        if let Some(g) = run_at(server(&m).ground_truth(), d) {
            if let Some(mark) = g.marker(Marker::LastRoundLookups) {
                profile.samples.push(ProfileSample {
                    detect: d,
                    target: mark + lookup_cost * (k - 1) + 1,
                    end: g.end,
                });
            }
        }
    }
    m.tx_end().ok();
    let lat = shoot_latency(plan.shoot, cfg.flush_cycles, cfg.geometry.latencies.mem);
    stakeout(&profile, plan, lat, recovery_margin(&cfg))
}

/// Full attack against the AES server: table discovery, stakeout on a
/// replica, then the detect/wait/shoot/recover loop feeding the key
/// elimination.
pub fn run_aes_campaign(c: &AesCampaign) -> Result<AesCampaignResult, SniperError> {
    let mut m = machine_for(&c.machine);
    let geom: CacheGeometry = m.geometry().clone();
    let count = c.samples + c.samples / 4 + 16;
    let arrivals = Arrivals::from_micros(100_000, c.arrival_mean_us, c.arrival_jitter_us, c.cycles_per_us, count);
    let horizon = arrivals.first + (count + 1) * arrivals.mean_cycles + arrivals.jitter_cycles;
    let mut srv = aes_server(c, &c.key, arrivals, c.seed);
    srv.set_keep_markers(false);
    let true_line = target_line(c, c.table_choice);
    if c.check_ground_truth {
        srv.watch(true_line);
    }
    m.add_process(Box::new(srv));
    if c.noise_rate > 0.0 {
        let set = geom.l3_set(true_line);
        m.add_process(Box::new(NoiseProcess::new(&geom, NOISE_CORE, vec![(set, c.noise_rate)], c.noise_pool, 0, horizon, c.seed ^ 0x401)));
    }

    let table = if c.discover {
        let candidates: Vec<LineAddr> = (0..4).map(|t| target_line(c, t)).collect();
        discover_table(&mut m, &candidates, c.seed, 2 * arrivals.mean_cycles + arrivals.jitter_cycles)?.ok_or(SniperError::NoDetection(m.now()))?
    } else {
        c.table_choice
    };
    let line = target_line(c, table);

    let mut plan = c.plan.clone();
    let lat = shoot_latency(plan.shoot, c.machine.flush_cycles, geom.latencies.mem);
    let report = aes_stakeout(c, table, &plan)?;
    if plan.wait_time == 0 {
        plan.wait_time = report.wait_time;
    }
    if plan.recovery_delay == 0 {
        plan.recovery_delay = report.recovery_delay;
    }
    plan.recovery_delay = plan.recovery_delay.max(plan.wait_time + lat + 1);

    let es = build_eviction_set(&geom, geom.l3_set(line), c.seed);
    let staged = plan.shoot == ShootMethod::Method2Access;
    let mut log = ObservationLog::default();
    let mut hyp = KeyHypothesisSet::new(c.mode);
    let mut progress = Progress::default();
    progress.record(&hyp);
    let mut stats = DetectionStats::default();
    let mut detections = Vec::new();
    let mut last_spontaneous: Option<u64> = None;
    let mut next_record = 0usize;
    let (mut checked, mut violations) = (0u64, 0u64);
    let loop_start = m.now();

    while (log.len() as u64) < c.samples {
        let (det, armed) = match detect_once(&mut m, &plan, &es, line, staged, horizon) {
            Ok(x) => x,
            Err(SniperError::SpontaneousAbort(t)) => {
                stats.spontaneous_aborts += 1;
                last_spontaneous = Some(t);
                continue;
            }
            Err(SniperError::PurgeFailed) => {
                stats.purge_failures += 1;
                continue;
            }
            Err(SniperError::NoDetection(_)) => break,
            Err(e) => return Err(e),
        };
        if let (Some(a), Some((begun, at))) = (last_spontaneous.take(), armed) {
            stats.rearms += 1;
            stats.rearm_pre_tx_cycles += begun.saturating_sub(a);
            stats.rearm_in_tx_cycles += at - begun;
        }
        let d = det.timestamp;
        detections.push(d);
        m.wait_until(d + plan.wait_time);
        let shot = shoot(&mut m, plan.shoot, line, &es);
        m.wait_until(d + plan.recovery_delay);
        let probe_at = m.now();
        let (mut verdict, mut validity, shoot_ts, effective) = match shot {
            Ok(s) => (recover(&mut m, plan.shoot, line, &es), Validity::Valid, s.issued, Some(s.effective)),
            Err(SniperError::StagingBroken) => {
                stats.staging_broken += 1;
                (Verdict::Invalid, Validity::StagingBroken, probe_at, None)
            }
            Err(e) => return Err(e),
        };

        // The client sees each ciphertext once the run that produced it ends.
        let output_deadline = d + OUTPUT_WAIT;
        loop {
            let published = server(&m).published();
            while next_record < published.len() && published[next_record].end < d {
                next_record += 1;
            }
            if next_record < published.len() || m.now() >= output_deadline {
                break;
            }
            let now = m.now();
            m.wait_until((now + OUTPUT_POLL).min(output_deadline));
        }
        let srv = server(&m);
        let published = srv.published();
        let ciphertext = match published.get(next_record) {
            Some(r) if r.end <= m.now() => {
                next_record += 1;
                Some(r.ciphertext)
            }
            _ => None,
        };
        if ciphertext.is_none() && validity == Validity::Valid {
            validity = Validity::NoVictimOutput;
            verdict = Verdict::Invalid;
        }
        if c.check_ground_truth && validity == Validity::Valid && table == c.table_choice {
            if let (Some(g), Some(eff)) = (run_at(srv.ground_truth(), d), effective) {
                let touched = g.watched.iter().any(|&(t, l)| l == line && t > eff && t <= probe_at);
                checked += 1;
                if touched != (verdict == Verdict::Accessed) {
                    violations += 1;
                }
            }
        }
        if c.check_ground_truth {
            m.process_mut::<ServerProcess>().expect("server process installed").clear_watched();
        }
        if let Some(ct) = &ciphertext {
            hyp.eliminate(ct, c.line_index, verdict);
        }
        log.push(Observation {
            sample: log.len() as u64,
            detect_ts: d,
            shoot_ts,
            verdict,
            validity,
            ciphertext,
            bit_index: None,
        });
        let n = log.len() as u64;
        if c.progress_every > 0 && n % c.progress_every == 0 {
            progress.record(&hyp);
        }
        if plan.adaptive && plan.adaptation_window > 0 && log.len() % plan.adaptation_window == 0 {
            plan.wait_time = adapt_wait_time(&log.entries[log.len() - plan.adaptation_window..], &plan);
            plan.recovery_delay = plan.recovery_delay.max(plan.wait_time + lat + 1);
        }
        if c.stop_when_unique && hyp.search_space_bits() == 0.0 {
            break;
        }
    }
    m.tx_end().ok();
    if progress.rows.last().map(|r| r.samples) != Some(hyp.samples()) {
        progress.record(&hyp);
    }
    let (expected, tolerance) = match plan.detection {
        DetectionMethod::Tsx => (geom.latencies.mem + c.machine.abort_delivery_latency, 5),
        DetectionMethod::FlushReload => (VALID_HORIZON / 2, VALID_HORIZON / 2),
    };
    stats.score(server(&m).ground_truth(), &detections, loop_start, m.now(), expected, tolerance);
    let recovered_key = hyp.recovered_master_key();
    Ok(AesCampaignResult {
        key_correct: recovered_key == Some(c.key),
        recovered_key,
        log,
        hypotheses: hyp,
        progress,
        stats,
        stakeout: report,
        final_plan: plan,
        discovered_table: table,
        ground_truth_checked: checked,
        ground_truth_violations: violations,
        machine: m,
    })
}

/// Detections later than this many cycles after the run start come too
/// late to aim at the last round.
pub const VALID_HORIZON: u64 = 380;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaitFlushRow {
    pub wait_limit: u32,
    pub trials: u32,
    pub detected: u32,
    pub valid: u32,
}

impl WaitFlushRow {
    pub fn detected_rate(&self) -> f64 {
        self.detected as f64 / self.trials.max(1) as f64
    }

    pub fn valid_rate(&self) -> f64 {
        self.valid as f64 / self.trials.max(1) as f64
    }
}

/// Outcome of one Flush+Reload trial, in cycles from the run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushReloadOutcome {
    pub latency: u64,
    /// Start of the last-round lookups of the detected run.
    pub last_round: u64,
    pub end: u64,
}

/// One Flush+Reload detection attempt against a single warm encryption.
pub fn flush_reload_trial(cfg: &MachineConfig, timing: AesTiming, wait_limit: u32, count_cycles: u64, seed: u64) -> Option<FlushReloadOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1_0500);
    let mut key = [0u8; 16];
    rng.fill(&mut key);
    let mut m = machine_for(&MachineConfig { seed, trace_limit: 0, ..cfg.clone() });
    let layout = AesLayout::default();
    let mut v = AesVictim::new(&key, layout.tables, 0);
    v.timing = timing;
    let arrivals = Arrivals {
        first: 2_000,
        mean_cycles: 40_000,
        jitter_cycles: 0,
        count: 2,
    };
    m.add_process(Box::new(ServerProcess::new(Workload::Aes(v), VICTIM_CORE, arrivals, seed)));
    let start = arrivals.first + arrivals.mean_cycles;
    m.wait_until(start - 1_500 + rng.gen_range(0..1_000));
    let d = aim_flush_reload(&mut m, layout.tables[0], wait_limit, count_cycles, start + 3_000).ok()?;
    m.wait_until(start + 5_000);
    let g = server(&m).ground_truth().get(1)?;
    Some(FlushReloadOutcome {
        latency: d.timestamp.checked_sub(start)?,
        last_round: g.marker(Marker::LastRoundLookups)? - start,
        end: g.end - start,
    })
}

/// Detection and valid-detection rates of Flush+Reload per wait limit.
pub fn wait_flush_sweep(cfg: &MachineConfig, timing: AesTiming, wait_limits: &[u32], trials: u32, count_cycles: u64, seed: u64) -> Vec<WaitFlushRow> {
    wait_limits
        .iter()
        .map(|&w| {
            let mut row = WaitFlushRow {
                wait_limit: w,
                trials,
                detected: 0,
                valid: 0,
            };
            for t in 0..trials {
                let s = seed.wrapping_mul(0x9e37_79b9).wrapping_add((w as u64) << 32 | t as u64);
                if let Some(o) = flush_reload_trial(cfg, timing, w, count_cycles, s) {
                    row.detected += 1;
                    row.valid += (o.latency <= VALID_HORIZON) as u32;
                }
            }
            row
        })
        .collect()
}

/// Per-cycle spontaneous-abort hazard under which a share `miss` of victim
/// starts fall into a blind window. `w0` is the time from an abort to the
/// next transaction start, `w1` the time from there until armed.
pub fn calibrate_hazard(miss: f64, w0: f64, w1: f64) -> f64 {
    let p = |l: f64| (w0 + (1.0 - (-l * w1).exp()) / l) / (w0 + 1.0 / l);
    let (mut lo, mut hi) = (1e-15f64.ln(), 1e-1f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p(mid.exp()) < miss {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Victim lines of the exponentiation. Every line sits in its own L1 set
/// so the victim's private caches never evict one with another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsaLayout {
    pub lines: RsaLines,
}

impl Default for RsaLayout {
    fn default() -> Self {
        let code = 0x20_0000;
        let data = 0x30_0000;
        Self {
            lines: RsaLines {
                mul_code: LineAddr(code + 0x0c5),
                red_code: LineAddr(code + 0x1d3),
                sqr_code: LineAddr(code + 0x2e1),
                r: [LineAddr(data + 0x38a), LineAddr(data + 0x38b), LineAddr(data + 0x38c)],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsaCampaign {
    pub machine: MachineConfig,
    /// Exponent, most significant bit first.
    pub bits: Vec<bool>,
    pub layout: RsaLayout,
    pub timing: RsaTiming,
    pub plan: AttackPlan,
    pub traces: usize,
    /// Cycle at which each decryption starts.
    pub start: u64,
    /// Background accesses per cycle into the detection set.
    pub detection_noise_rate: f64,
    /// Background accesses per cycle into the R[0] set.
    pub target_noise_rate: f64,
    pub noise_pool: usize,
    pub stakeout_bits: usize,
    /// How long before the copy phase the R[0] line must be gone.
    pub target_lead: u64,
    pub tolerance: f64,
    pub max_shift: i64,
    pub seed: u64,
}

impl Default for RsaCampaign {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            bits: Vec::new(),
            layout: RsaLayout::default(),
            timing: RsaTiming::default(),
            plan: AttackPlan::default(),
            traces: 1,
            start: 100_000,
            detection_noise_rate: 0.0,
            target_noise_rate: 0.0,
            noise_pool: 24,
            stakeout_bits: 32,
            target_lead: 100,
            tolerance: 0.10,
            max_shift: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsaTraceResult {
    pub log: ObservationLog,
    pub trace: BitTrace,
    /// Single-trace decoding scored against the exponent.
    pub metrics: RsaMetrics,
    pub spontaneous_aborts: u64,
    pub staging_broken: u64,
}

pub struct RsaCampaignResult {
    pub stakeout: StakeoutReport,
    pub final_plan: AttackPlan,
    pub alignment: Alignment,
    pub traces: Vec<RsaTraceResult>,
    pub decoded: Decoded,
    /// Multi-trace decoding scored against the exponent; detection counts
    /// come from the first trace.
    pub combined: RsaMetrics,
    /// Machine of the last trace, for trace and ground-truth export.
    pub machine: Machine,
}

struct RsaSetup {
    m: Machine,
    det: EvictionSet,
    r0: EvictionSet,
    horizon: u64,
}

fn rsa_setup(c: &RsaCampaign, cfg: &MachineConfig, bits: Vec<bool>, seed: u64, noisy: bool) -> RsaSetup {
    let mut m = machine_for(cfg);
    let geom = m.geometry().clone();
    let l = c.layout.lines;
    let victim = RsaVictim {
        bits,
        lines: l,
        timing: c.timing,
    };
    let period = crate::victims::rsa_nominal_period(&c.timing, geom.latencies.l1);
    let horizon = c.start + (victim.bits.len() as u64 + 2) * period * 13 / 10;
    let arrivals = Arrivals {
        first: c.start,
        mean_cycles: 0,
        jitter_cycles: 0,
        count: 1,
    };
    m.add_process(Box::new(ServerProcess::new(Workload::Rsa(victim), VICTIM_CORE, arrivals, seed)));
    let det_set = geom.l3_set(l.mul_code);
    let r0_set = geom.l3_set(l.r[0]);
    if noisy {
        let targets: Vec<(u64, f64)> = [(det_set, c.detection_noise_rate), (r0_set, c.target_noise_rate)].into_iter().filter(|&(_, r)| r > 0.0).collect();
        if !targets.is_empty() {
            m.add_process(Box::new(NoiseProcess::new(&geom, NOISE_CORE, targets, c.noise_pool, 0, horizon, seed ^ 0x401)));
        }
    }
    RsaSetup {
        det: build_eviction_set(&geom, det_set, seed),
        r0: build_eviction_set(&geom, r0_set, seed ^ 0x2),
        m,
        horizon,
    }
}

fn mul_starts(g: &GroundTruth) -> Vec<u64> {
    g.markers
        .iter()
        .filter_map(|&(mk, t)| matches!(mk, Marker::MulStart(_)).then_some(t))
        .collect()
}

/// Profiles a replica exponentiation with a random exponent. Returns the
/// stakeout, the measured bit period and the lag from the last detection to
/// the returned result.
fn rsa_stakeout(c: &RsaCampaign, plan: &AttackPlan) -> Result<(StakeoutReport, u64, u64), SniperError> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x25a0);
    let bits: Vec<bool> = (0..c.stakeout_bits.max(2)).map(|_| rng.gen()).collect();
    let cfg = MachineConfig {
        seed: c.machine.seed ^ 1,
        spontaneous_abort_hazard: 0.0,
        trace_limit: 0,
        ..c.machine.clone()
    };
    let mut s = rsa_setup(c, &cfg, bits, c.seed ^ 1, false);
    let mut detections = Vec::new();
    loop {
        prime(&mut s.m, &s.det, false, true)?;
        match await_abort(&mut s.m, s.horizon) {
            Ok(d) => detections.push(d.timestamp),
            Err(SniperError::NoDetection(_)) => break,
            Err(SniperError::SpontaneousAbort(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    s.m.tx_end().ok();
    let g = server(&s.m).ground_truth().first().ok_or(SniperError::EmptyProfile)?;
    let starts = mul_starts(g);
    let mut profile = VictimProfile::default();
    for &d in &detections {
        let i = starts.partition_point(|&t| t <= d);
        if i == 0 {
            continue;
        }
        let bit = (i - 1) as u32;
        if let (Some(copy), Some(end)) = (g.marker(Marker::CopyStart(bit)), g.marker(Marker::ReduceEnd(bit))) {
            profile.samples.push(ProfileSample {
                detect: d,
                target: copy.saturating_sub(c.target_lead),
                end,
            });
        }
    }
    let period = median_u64(detections.windows(2).map(|w| w[1] - w[0]).collect()).ok_or(SniperError::EmptyProfile)?;
    let end_lag = match (server(&s.m).responses().first(), detections.last()) {
        (Some(&end), Some(&last)) => end.saturating_sub(last),
        _ => 0,
    };
    let lat = shoot_latency(plan.shoot, cfg.flush_cycles, cfg.geometry.latencies.mem);
    Ok((stakeout(&profile, plan, lat, recovery_margin(&cfg))?, period, end_lag))
}

fn rsa_trace(c: &RsaCampaign, plan: &AttackPlan, alignment: &Alignment, index: usize) -> Result<(RsaTraceResult, Machine), SniperError> {
    let seed = c.seed.wrapping_add(0x1000 * index as u64 + 7);
    let cfg = MachineConfig {
        seed: c.machine.seed.wrapping_add(index as u64),
        ..c.machine.clone()
    };
    let mut s = rsa_setup(c, &cfg, c.bits.clone(), seed, true);
    let mut log = ObservationLog::default();
    let mut trace = BitTrace::default();
    let (mut spontaneous, mut broken) = (0u64, 0u64);
    let target = c.layout.lines.r[0];
    'outer: loop {
        match prime(&mut s.m, &s.r0, true, false) {
            Ok(_) | Err(SniperError::PurgeFailed) => {}
            Err(e) => return Err(e),
        }
        let d = loop {
            match prime(&mut s.m, &s.det, false, true) {
                Ok(_) => {}
                Err(SniperError::PurgeFailed) => continue,
                Err(e) => return Err(e),
            }
            match await_abort(&mut s.m, s.horizon) {
                Ok(d) => break d.timestamp,
                Err(SniperError::SpontaneousAbort(_)) => spontaneous += 1,
                Err(SniperError::NoDetection(_)) => break 'outer,
                Err(e) => return Err(e),
            }
        };
        s.m.wait_until(d + plan.wait_time);
        let shot = shoot(&mut s.m, plan.shoot, target, &s.r0);
        s.m.wait_until(d + plan.recovery_delay);
        let (verdict, validity, shoot_ts) = match shot {
            Ok(sh) => (recover(&mut s.m, plan.shoot, target, &s.r0), Validity::Valid, sh.issued),
            Err(SniperError::StagingBroken) => {
                broken += 1;
                (Verdict::Invalid, Validity::StagingBroken, s.m.now())
            }
            Err(e) => return Err(e),
        };
        trace.observations.push(WindowObservation { detect_ts: d, verdict });
        log.push(Observation {
            sample: log.len() as u64,
            detect_ts: d,
            shoot_ts,
            verdict,
            validity,
            ciphertext: None,
            bit_index: None,
        });
    }
    s.m.tx_end().ok();
    trace.end = server(&s.m).responses().first().copied();
    let decoded = rsa_decode(std::slice::from_ref(&trace), c.bits.len(), alignment).map_err(|_| SniperError::EmptyProfile)?;
    let aligned = &decoded.per_trace[0];
    for e in log.entries.iter_mut() {
        e.bit_index = aligned.detections.iter().position(|&x| x == Some(e.detect_ts)).map(|i| i as u32);
    }
    let metrics = score_rsa(&s.m, &decoded.bits, &c.bits, &trace);
    Ok((
        RsaTraceResult {
            log,
            trace,
            metrics,
            spontaneous_aborts: spontaneous,
            staging_broken: broken,
        },
        s.m,
    ))
}

/// A detection is true when it falls inside the multiplication phase of
/// some window, that is between its multiplication start and copy start.
fn score_rsa(m: &Machine, bits: &[Option<bool>], truth: &[bool], trace: &BitTrace) -> RsaMetrics {
    let phases: Vec<(u64, u64)> = server(m)
        .ground_truth()
        .first()
        .map(|g| {
            mul_starts(g)
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, g.marker(Marker::CopyStart(i as u32)).unwrap_or(t)))
                .collect()
        })
        .unwrap_or_default();
    let raw: Vec<u64> = trace.observations.iter().map(|o| o.detect_ts).collect();
    rsa_metrics(bits, truth, &raw, |d| {
        let i = phases.partition_point(|&(t, _)| t <= d);
        (i > 0 && d <= phases[i - 1].1).then(|| i - 1)
    })
}

/// Attacks one or more exponentiations with the same exponent and decodes
/// the bits from the R[0] verdicts.
pub fn run_rsa_campaign(c: &RsaCampaign) -> Result<RsaCampaignResult, SniperError> {
    if c.bits.is_empty() {
        return Err(SniperError::EmptyProfile);
    }
    let mut plan = c.plan.clone();
    let (report, period, end_lag) = rsa_stakeout(c, &plan)?;
    if plan.wait_time == 0 {
        plan.wait_time = report.wait_time;
    }
    if plan.recovery_delay == 0 {
        plan.recovery_delay = report.recovery_delay;
    }
    let alignment = Alignment {
        period,
        tolerance: c.tolerance,
        max_shift: c.max_shift,
        end_lag,
    };
    let mut traces = Vec::with_capacity(c.traces.max(1));
    let mut last = None;
    for i in 0..c.traces.max(1) {
        let (t, m) = rsa_trace(c, &plan, &alignment, i)?;
        traces.push(t);
        last = Some(m);
    }
    let machine = last.expect("at least one trace");
    let bit_traces: Vec<BitTrace> = traces.iter().map(|t| t.trace.clone()).collect();
    let decoded = rsa_decode(&bit_traces, c.bits.len(), &alignment).map_err(|_| SniperError::EmptyProfile)?;
    let mut combined = score_rsa(&machine, &decoded.bits, &c.bits, &traces[0].trace);
    if c.traces > 1 {
        // Detection counts of the last machine do not belong to trace 0.
        combined.detections = traces[0].metrics.detections;
        combined.detected_windows = traces[0].metrics.detected_windows;
        combined.false_detections = traces[0].metrics.false_detections;
        combined.detection_rate = traces[0].metrics.detection_rate;
        combined.false_positive_rate = traces[0].metrics.false_positive_rate;
    }
    Ok(RsaCampaignResult {
        stakeout: report,
        final_plan: plan,
        alignment,
        traces,
        decoded,
        combined,
        machine,
    })
}
