//! The attacker: eviction sets, stakeout, aim (transactional or
//! Flush+Reload detection), wait, shoot and recover.

mod campaign;
mod eviction;
mod primitives;
mod stakeout;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::machine::TxError;
use crate::victims::aes::{to_hex, Block};

pub use campaign::{
    FlushReloadOutcome,
    calibrate_hazard, discover_table, flush_reload_trial, run_aes_campaign, run_rsa_campaign, wait_flush_sweep, AesCampaign, AesCampaignResult, AesLayout,
    DetectionStats, RsaCampaign, RsaCampaignResult, RsaLayout, RsaTraceResult, WaitFlushRow, VALID_HORIZON,
};
pub use eviction::{build_eviction_set, plru_aware_order, plru_aware_order_from, EvictionSet, ATTACKER_TAG_BASE};
pub use primitives::{aim_flush_reload, aim_tsx, await_abort, prime, purge, recover, shoot, DetectionEvent, PrimeReport, Shot};
pub use stakeout::{adapt_wait_time, shoot_latency, stakeout, ProfileSample, StakeoutReport, VictimProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    Tsx,
    FlushReload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShootMethod {
    /// Flush the (shared) target line.
    Method1Flush,
    /// One access to the sacrificial line of an age-staged eviction set.
    Method2Access,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub detection: DetectionMethod,
    pub shoot: ShootMethod,
    /// Cycles from the detection timestamp to issuing the shoot.
    pub wait_time: u64,
    /// Cycles from the detection timestamp to the recovery probe.
    pub recovery_delay: u64,
    pub adaptive: bool,
    pub target_miss_rate: f64,
    /// Dead band around the target rate inside which the wait is kept.
    pub miss_rate_tolerance: f64,
    pub adaptation_window: usize,
    /// Multiplicative factor applied when there are too many misses.
    pub step_down: f64,
    /// Cycles added when there are too few misses.
    pub step_up: u64,
    /// Bounds for the adapted wait.
    pub wait_floor: u64,
    pub wait_ceiling: u64,
    /// Cycles the abort handler needs before it can act.
    pub handler_overhead: u64,
    pub wait_limit: u32,
    /// Cycles per busy-wait iteration of the Flush+Reload loop.
    pub count_cycles: u64,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            detection: DetectionMethod::Tsx,
            shoot: ShootMethod::Method2Access,
            wait_time: 0,
            recovery_delay: 0,
            adaptive: false,
            target_miss_rate: 0.07,
            miss_rate_tolerance: 0.02,
            adaptation_window: 10_000,
            step_down: 0.98,
            step_up: 10,
            wait_floor: 50,
            wait_ceiling: 1_900_000,
            handler_overhead: 50,
            wait_limit: 20,
            count_cycles: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accessed,
    NotAccessed,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    StagingBroken,
    NoVictimOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub sample: u64,
    pub detect_ts: u64,
    pub shoot_ts: u64,
    pub verdict: Verdict,
    pub validity: Validity,
    pub ciphertext: Option<Block>,
    pub bit_index: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservationLog {
    pub entries: Vec<Observation>,
}

impl ObservationLog {
    pub fn push(&mut self, o: Observation) {
        self.entries.push(o);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            sample: u64,
            detect_ts: u64,
            shoot_ts: u64,
            verdict: Verdict,
            validity: Validity,
            record: &'a str,
        }
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            let record = match (e.ciphertext, e.bit_index) {
                (Some(c), _) => to_hex(&c),
                (None, Some(i)) => i.to_string(),
                (None, None) => String::new(),
            };
            w.serialize(Row {
                sample: e.sample,
                detect_ts: e.detect_ts,
                shoot_ts: e.shoot_ts,
                verdict: e.verdict,
                validity: e.validity,
                record: &record,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SniperError {
    #[error("no access order keeps every eviction-set line out of the private caches")]
    NoOrderFound,
    #[error("target lies {distance} cycles after detection, earliest reachable is {earliest}")]
    WindowTooEarly { distance: i64, earliest: u64 },
    #[error("spontaneous transactional abort at cycle {0}")]
    SpontaneousAbort(u64),
    #[error("sacrificial line still cached when shooting")]
    StagingBroken,
    #[error("eviction set could not be made resident")]
    PurgeFailed,
    #[error("no detection before cycle {0}")]
    NoDetection(u64),
    #[error("empty stakeout profile")]
    EmptyProfile,
    #[error("transaction: {0}")]
    Tx(#[from] TxError),
}
