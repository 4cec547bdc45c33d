//! Runs one scenario end to end and exports its artefacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::config::{ConfigError, ScenarioConfig, VictimKind};
use crate::machine::Machine;
use crate::recovery::RsaMetrics;
use crate::sniper::{calibrate_hazard, run_aes_campaign, run_rsa_campaign, AesCampaign, DetectionStats, ObservationLog, RsaCampaign, SniperError, StakeoutReport, Validity};
use crate::victims::aes::to_hex;
use crate::victims::{AesTiming, ServerProcess};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("attack failed: {0}")]
    Attack(#[from] SniperError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pilot used to measure the re-arm windows before calibrating the hazard.
pub const PILOT_HAZARD: f64 = 2e-6;
pub const PILOT_SAMPLES: u64 = 3000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StakeoutSummary {
    pub wait_time: u64,
    pub recovery_delay: u64,
    pub target_distance: i64,
    pub end_distance: i64,
    pub final_wait_time: u64,
    pub final_recovery_delay: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AesSummary {
    pub samples: u64,
    pub informative_samples: u64,
    pub search_space_bits: f64,
    pub candidate_counts: Vec<usize>,
    pub discovered_table: usize,
    pub recovered_key: Option<String>,
    pub key_correct: bool,
    pub detection: DetectionStats,
    pub detection_rate: f64,
    pub mean_detection_latency: f64,
    pub ground_truth_checked: u64,
    pub ground_truth_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsaSummary {
    pub exponent_bits: usize,
    pub traces: usize,
    pub period: u64,
    pub combined: RsaMetrics,
    pub per_trace: Vec<RsaMetrics>,
    pub unknown_bits: usize,
    pub spontaneous_aborts: u64,
    pub staging_broken: u64,
}

/// Contents of `summary.json`. Only simulated quantities are recorded so
/// that equal inputs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub victim: VictimKind,
    pub seed: u64,
    pub key_hash: String,
    pub simulated_cycles: u64,
    /// Share of observations whose shot and output association succeeded.
    pub valid_rate: f64,
    pub spontaneous_abort_hazard: f64,
    pub stakeout: StakeoutSummary,
    pub aes: Option<AesSummary>,
    pub rsa: Option<RsaSummary>,
    pub config: ScenarioConfig,
}

fn stakeout_summary(r: &StakeoutReport, wait: u64, recovery: u64) -> StakeoutSummary {
    StakeoutSummary {
        wait_time: r.wait_time,
        recovery_delay: r.recovery_delay,
        target_distance: r.target_distance,
        end_distance: r.end_distance,
        final_wait_time: wait,
        final_recovery_delay: recovery,
    }
}

pub fn aes_campaign(cfg: &ScenarioConfig) -> AesCampaign {
    AesCampaign {
        machine: cfg.machine(),
        key: cfg.aes_key(),
        table_choice: cfg.table_choice,
        timing: AesTiming {
            jitter_sigma: cfg.victim_jitter_sigma,
            ..AesTiming::default()
        },
        arrival_mean_us: cfg.arrival_mean_us,
        arrival_jitter_us: cfg.arrival_jitter_us,
        cycles_per_us: cfg.cycles_per_us,
        plan: cfg.plan(),
        samples: cfg.samples,
        lookup_index: cfg.lookup_index,
        line_index: cfg.line_index,
        mode: cfg.elimination,
        stop_when_unique: cfg.stop_when_unique,
        progress_every: cfg.progress_every,
        noise_rate: cfg.noise_rate,
        noise_pool: cfg.noise_pool,
        stakeout_replicas: cfg.stakeout_replicas,
        seed: cfg.seed,
        ..AesCampaign::default()
    }
}

pub fn rsa_campaign(cfg: &ScenarioConfig) -> RsaCampaign {
    RsaCampaign {
        machine: cfg.machine(),
        bits: cfg.rsa_exponent(),
        plan: cfg.plan(),
        traces: cfg.traces,
        detection_noise_rate: cfg.detection_noise_rate,
        target_noise_rate: cfg.target_noise_rate,
        noise_pool: cfg.noise_pool,
        target_lead: cfg.target_lead,
        seed: cfg.seed,
        ..RsaCampaign::default()
    }
}

/// Measures the re-arm windows with a short pilot and returns the
/// spontaneous-abort hazard that misses `miss` of the victim starts.
pub fn calibrated_hazard(base: &AesCampaign, miss: f64) -> Result<f64, SniperError> {
    let mut pilot = base.clone();
    pilot.samples = PILOT_SAMPLES;
    pilot.stop_when_unique = false;
    pilot.check_ground_truth = false;
    pilot.machine.spontaneous_abort_hazard = PILOT_HAZARD;
    pilot.machine.trace_limit = 0;
    let r = run_aes_campaign(&pilot)?;
    let (w0, w1) = r.stats.rearm_windows().ok_or(SniperError::EmptyProfile)?;
    Ok(calibrate_hazard(miss, w0, w1))
}

fn write_common(m: &Machine, dir: &Path) -> Result<String, ScenarioError> {
    m.trace().write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    let srv = m.process::<ServerProcess>().expect("server process installed");
    srv.write_ground_truth_csv(BufWriter::new(File::create(dir.join("ground_truth.csv"))?))?;
    Ok(format!("{:016x}", srv.key_hash()))
}

fn valid_rate<'a>(logs: impl Iterator<Item = &'a ObservationLog>) -> f64 {
    let (mut valid, mut total) = (0usize, 0usize);
    for log in logs {
        total += log.len();
        valid += log.entries.iter().filter(|o| o.validity == Validity::Valid).count();
    }
    if total == 0 {
        0.0
    } else {
        valid as f64 / total as f64
    }
}

fn write_json(dir: &Path, s: &Summary) -> Result<(), ScenarioError> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

/// Validates `cfg`, runs it and writes `trace.csv`, `observations.csv`,
/// `recovery.csv`, `ground_truth.csv` and `summary.json` into its output
/// directory.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Summary, ScenarioError> {
    let errors = cfg.check();
    if !errors.is_empty() {
        return Err(ConfigError { errors }.into());
    }
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    match cfg.victim {
        VictimKind::Aes => run_aes(cfg, dir),
        VictimKind::Rsa => run_rsa(cfg, dir),
    }
}

fn run_aes(cfg: &ScenarioConfig, dir: &Path) -> Result<Summary, ScenarioError> {
    let mut c = aes_campaign(cfg);
    if cfg.calibrate_miss_rate > 0.0 {
        c.machine.spontaneous_abort_hazard = calibrated_hazard(&c, cfg.calibrate_miss_rate)?;
    }
    let r = run_aes_campaign(&c)?;
    let key_hash = write_common(&r.machine, dir)?;
    r.log.write_csv(BufWriter::new(File::create(dir.join("observations.csv"))?))?;
    r.progress.write_csv(BufWriter::new(File::create(dir.join("recovery.csv"))?))?;
    let summary = Summary {
        victim: VictimKind::Aes,
        seed: cfg.seed,
        key_hash,
        simulated_cycles: r.machine.now(),
        valid_rate: valid_rate(std::iter::once(&r.log)),
        spontaneous_abort_hazard: c.machine.spontaneous_abort_hazard,
        stakeout: stakeout_summary(&r.stakeout, r.final_plan.wait_time, r.final_plan.recovery_delay),
        aes: Some(AesSummary {
            samples: r.log.len() as u64,
            informative_samples: r.hypotheses.informative_samples(),
            search_space_bits: r.hypotheses.search_space_bits(),
            candidate_counts: r.hypotheses.candidate_counts().to_vec(),
            discovered_table: r.discovered_table,
            recovered_key: r.recovered_key.map(|k| to_hex(&k)),
            key_correct: r.key_correct,
            detection_rate: r.stats.detection_rate(),
            mean_detection_latency: r.stats.mean_latency(),
            detection: r.stats,
            ground_truth_checked: r.ground_truth_checked,
            ground_truth_violations: r.ground_truth_violations,
        }),
        rsa: None,
        config: cfg.clone(),
    };
    write_json(dir, &summary)?;
    Ok(summary)
}

fn run_rsa(cfg: &ScenarioConfig, dir: &Path) -> Result<Summary, ScenarioError> {
    let c = rsa_campaign(cfg);
    let r = run_rsa_campaign(&c)?;
    let key_hash = write_common(&r.machine, dir)?;
    for (i, t) in r.traces.iter().enumerate() {
        let name = if i == 0 { "observations.csv".to_string() } else { format!("observations_t{i}.csv") };
        t.log.write_csv(BufWriter::new(File::create(dir.join(name))?))?;
    }
    #[derive(Serialize)]
    struct Row {
        bit_index: usize,
        decoded: &'static str,
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("recovery.csv"))?));
    for (i, b) in r.decoded.bits.iter().enumerate() {
        let decoded = match b {
            Some(true) => "1",
            Some(false) => "0",
            None => "?",
        };
        w.serialize(Row { bit_index: i, decoded })?;
    }
    w.flush()?;
    let summary = Summary {
        victim: VictimKind::Rsa,
        seed: cfg.seed,
        key_hash,
        simulated_cycles: r.machine.now(),
        valid_rate: valid_rate(r.traces.iter().map(|t| &t.log)),
        spontaneous_abort_hazard: c.machine.spontaneous_abort_hazard,
        stakeout: stakeout_summary(&r.stakeout, r.final_plan.wait_time, r.final_plan.recovery_delay),
        aes: None,
        rsa: Some(RsaSummary {
            exponent_bits: c.bits.len(),
            traces: r.traces.len(),
            period: r.alignment.period,
            combined: r.combined,
            per_trace: r.traces.iter().map(|t| t.metrics).collect(),
            unknown_bits: r.decoded.bits.iter().filter(|b| b.is_none()).count(),
            spontaneous_aborts: r.traces.iter().map(|t| t.spontaneous_aborts).sum(),
            staging_broken: r.traces.iter().map(|t| t.staging_broken).sum(),
        }),
        config: cfg.clone(),
    };
    write_json(dir, &summary)?;
    Ok(summary)
}
