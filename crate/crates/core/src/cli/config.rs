//! Flat `key = value` scenario files. Blank lines and `#` comments are
//! ignored; every key is optional and falls back to its default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::cache_model::{CacheGeometry, LevelGeometry};
use crate::machine::MachineConfig;
use crate::recovery::EliminationMode;
use crate::sniper::{AttackPlan, DetectionMethod, ShootMethod};
use crate::victims::aes::{parse_block, Block};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimKind {
    Aes,
    Rsa,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub victim: VictimKind,
    /// Hex key (AES) or hex exponent (RSA), or `random`.
    pub key: String,
    pub rsa_bits: usize,
    pub table_choice: usize,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub l1_sets: usize,
    pub l1_ways: usize,
    pub l2_sets: usize,
    pub l2_ways: usize,
    pub l3_sets: usize,
    pub l3_ways: usize,
    pub insertion_age: u8,
    pub latency_l1: u64,
    pub latency_l2: u64,
    pub latency_l3: u64,
    pub latency_mem: u64,
    pub abort_delivery_latency: u64,
    pub flush_cycles: u64,
    pub cycles_per_us: f64,
    pub trace_limit: usize,

    pub arrival_mean_us: f64,
    pub arrival_jitter_us: f64,
    pub victim_jitter_sigma: f64,

    pub detection: DetectionMethod,
    pub shoot: ShootMethod,
    pub wait_time: u64,
    pub recovery_delay: u64,
    pub adaptive: bool,
    pub target_miss_rate: f64,
    pub miss_rate_tolerance: f64,
    pub adaptation_window: usize,
    pub wait_limit: u32,
    pub count_cycles: u64,

    pub samples: u64,
    pub traces: usize,
    pub lookup_index: usize,
    pub line_index: usize,
    pub elimination: EliminationMode,
    pub stop_when_unique: bool,
    pub progress_every: u64,
    pub stakeout_replicas: usize,
    pub target_lead: u64,

    pub spontaneous_abort_hazard: f64,
    /// When positive, the hazard is instead calibrated from a pilot run so
    /// that this share of victim starts is missed.
    pub calibrate_miss_rate: f64,
    pub noise_rate: f64,
    pub detection_noise_rate: f64,
    pub target_noise_rate: f64,
    pub noise_pool: usize,

    pub mc_samples: u64,
    pub sim_samples: u64,
    pub fr_trials: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let g = CacheGeometry::default();
        let m = MachineConfig::default();
        let p = AttackPlan::default();
        Self {
            victim: VictimKind::Aes,
            key: "random".into(),
            rsa_bits: 2048,
            table_choice: 0,
            seed: 0,
            output_dir: PathBuf::from("out"),
            l1_sets: g.l1.sets,
            l1_ways: g.l1.ways,
            l2_sets: g.l2.sets,
            l2_ways: g.l2.ways,
            l3_sets: g.l3.sets,
            l3_ways: g.l3.ways,
            insertion_age: g.policy.insertion_age,
            latency_l1: g.latencies.l1,
            latency_l2: g.latencies.l2,
            latency_l3: g.latencies.l3,
            latency_mem: g.latencies.mem,
            abort_delivery_latency: m.abort_delivery_latency,
            flush_cycles: m.flush_cycles,
            cycles_per_us: 3800.0,
            trace_limit: 200_000,
            arrival_mean_us: 500.0,
            arrival_jitter_us: 50.0,
            victim_jitter_sigma: 5.0,
            detection: p.detection,
            shoot: p.shoot,
            wait_time: p.wait_time,
            recovery_delay: p.recovery_delay,
            adaptive: p.adaptive,
            target_miss_rate: p.target_miss_rate,
            miss_rate_tolerance: p.miss_rate_tolerance,
            adaptation_window: p.adaptation_window,
            wait_limit: p.wait_limit,
            count_cycles: p.count_cycles,
            samples: 200_000,
            traces: 1,
            lookup_index: 1,
            line_index: 0,
            elimination: EliminationMode::Hard,
            stop_when_unique: true,
            progress_every: 100,
            stakeout_replicas: 21,
            target_lead: 100,
            spontaneous_abort_hazard: 0.0,
            calibrate_miss_rate: 0.0,
            noise_rate: 0.0,
            detection_noise_rate: 0.0,
            target_noise_rate: 0.0,
            noise_pool: 24,
            mc_samples: 100_000,
            sim_samples: 20_000,
            fr_trials: 2_000,
        }
    }
}

/// One problem found in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    /// 1-based line number, 0 for whole-config checks.
    pub line: usize,
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CONFIG_INVALID")?;
        for e in &self.errors {
            if e.line > 0 {
                write!(f, "\n  line {}: `{}`: {}", e.line, e.key, e.message)?;
            } else {
                write!(f, "\n  `{}`: {}", e.key, e.message)?;
            }
        }
        Ok(())
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.replace('_', "").parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_victim(v: &str) -> Result<VictimKind, String> {
    match v {
        "aes" => Ok(VictimKind::Aes),
        "rsa" => Ok(VictimKind::Rsa),
        _ => Err(format!("expected aes or rsa, got `{v}`")),
    }
}

fn parse_detection(v: &str) -> Result<DetectionMethod, String> {
    match v {
        "tsx" => Ok(DetectionMethod::Tsx),
        "flush_reload" => Ok(DetectionMethod::FlushReload),
        _ => Err(format!("expected tsx or flush_reload, got `{v}`")),
    }
}

fn parse_shoot(v: &str) -> Result<ShootMethod, String> {
    match v {
        "method1" | "method1_flush" => Ok(ShootMethod::Method1Flush),
        "method2" | "method2_access" => Ok(ShootMethod::Method2Access),
        _ => Err(format!("expected method1 or method2, got `{v}`")),
    }
}

fn parse_mode(v: &str) -> Result<EliminationMode, String> {
    match v {
        "hard" => Ok(EliminationMode::Hard),
        "scored" => Ok(EliminationMode::Scored),
        _ => Err(format!("expected hard or scored, got `{v}`")),
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            errors: vec![FieldError {
                line: 0,
                key: path.display().to_string(),
                message: format!("cannot read: {e}"),
            }],
        })?;
        Self::parse(&text)
    }

    /// Parses and validates a scenario. Every problem is reported, not
    /// only the first one.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut errors = Vec::new();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(FieldError {
                    line: n + 1,
                    key: line.to_string(),
                    message: "expected `key = value`".into(),
                });
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                errors.push(FieldError {
                    line: n + 1,
                    key: k.into(),
                    message: "duplicate key".into(),
                });
                continue;
            }
            seen.push(k.to_string());
            if let Err(message) = c.set(k, v) {
                errors.push(FieldError {
                    line: n + 1,
                    key: k.into(),
                    message,
                });
            }
        }
        errors.extend(c.check());
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError { errors })
        }
    }

    fn set(&mut self, k: &str, v: &str) -> Result<(), String> {
        match k {
            "victim" => self.victim = parse_victim(v)?,
            "key" => self.key = v.to_string(),
            "rsa_bits" => self.rsa_bits = parse_num(v)?,
            "table_choice" => self.table_choice = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "l1_sets" => self.l1_sets = parse_num(v)?,
            "l1_ways" => self.l1_ways = parse_num(v)?,
            "l2_sets" => self.l2_sets = parse_num(v)?,
            "l2_ways" => self.l2_ways = parse_num(v)?,
            "l3_sets" => self.l3_sets = parse_num(v)?,
            "l3_ways" => self.l3_ways = parse_num(v)?,
            "insertion_age" => self.insertion_age = parse_num(v)?,
            "latency_l1" => self.latency_l1 = parse_num(v)?,
            "latency_l2" => self.latency_l2 = parse_num(v)?,
            "latency_l3" => self.latency_l3 = parse_num(v)?,
            "latency_mem" => self.latency_mem = parse_num(v)?,
            "abort_delivery_latency" => self.abort_delivery_latency = parse_num(v)?,
            "flush_cycles" => self.flush_cycles = parse_num(v)?,
            "cycles_per_us" => self.cycles_per_us = parse_num(v)?,
            "trace_limit" => self.trace_limit = parse_num(v)?,
            "arrival_mean_us" => self.arrival_mean_us = parse_num(v)?,
            "arrival_jitter_us" => self.arrival_jitter_us = parse_num(v)?,
            "victim_jitter_sigma" => self.victim_jitter_sigma = parse_num(v)?,
            "detection" => self.detection = parse_detection(v)?,
            "shoot" => self.shoot = parse_shoot(v)?,
            "wait_time" => self.wait_time = parse_num(v)?,
            "recovery_delay" => self.recovery_delay = parse_num(v)?,
            "adaptive" => self.adaptive = parse_bool(v)?,
            "target_miss_rate" => self.target_miss_rate = parse_num(v)?,
            "miss_rate_tolerance" => self.miss_rate_tolerance = parse_num(v)?,
            "adaptation_window" => self.adaptation_window = parse_num(v)?,
            "wait_limit" => self.wait_limit = parse_num(v)?,
            "count_cycles" => self.count_cycles = parse_num(v)?,
            "samples" => self.samples = parse_num(v)?,
            "traces" => self.traces = parse_num(v)?,
            "lookup_index" => self.lookup_index = parse_num(v)?,
            "line_index" => self.line_index = parse_num(v)?,
            "elimination" => self.elimination = parse_mode(v)?,
            "stop_when_unique" => self.stop_when_unique = parse_bool(v)?,
            "progress_every" => self.progress_every = parse_num(v)?,
            "stakeout_replicas" => self.stakeout_replicas = parse_num(v)?,
            "target_lead" => self.target_lead = parse_num(v)?,
            "spontaneous_abort_hazard" => self.spontaneous_abort_hazard = parse_num(v)?,
            "calibrate_miss_rate" => self.calibrate_miss_rate = parse_num(v)?,
            "noise_rate" => self.noise_rate = parse_num(v)?,
            "detection_noise_rate" => self.detection_noise_rate = parse_num(v)?,
            "target_noise_rate" => self.target_noise_rate = parse_num(v)?,
            "noise_pool" => self.noise_pool = parse_num(v)?,
            "mc_samples" => self.mc_samples = parse_num(v)?,
            "sim_samples" => self.sim_samples = parse_num(v)?,
            "fr_trials" => self.fr_trials = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Whole-config consistency checks; every problem has line 0.
    pub fn check(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        let mut bad = |key: &str, message: String| {
            out.push(FieldError {
                line: 0,
                key: key.into(),
                message,
            })
        };
        if let Err(e) = self.geometry().validate() {
            bad("geometry", e.to_string());
        }
        if self.table_choice > 3 {
            bad("table_choice", "must be 0..=3".into());
        }
        if !(1..=16).contains(&self.lookup_index) {
            bad("lookup_index", "must be 1..=16".into());
        }
        if self.line_index > 3 {
            bad("line_index", "must be 0..=3".into());
        }
        if self.key != "random" {
            match self.victim {
                VictimKind::Aes => {
                    if parse_block(&self.key).is_none() {
                        bad("key", "expected 32 hex digits or `random`".into());
                    }
                }
                VictimKind::Rsa => {
                    if self.key.is_empty() || !self.key.chars().all(|c| c.is_ascii_hexdigit()) {
                        bad("key", "expected a hex exponent or `random`".into());
                    }
                }
            }
        }
        if self.victim == VictimKind::Rsa && self.key == "random" && self.rsa_bits == 0 {
            bad("rsa_bits", "must be positive".into());
        }
        for (k, v) in [
            ("spontaneous_abort_hazard", self.spontaneous_abort_hazard),
            ("noise_rate", self.noise_rate),
            ("detection_noise_rate", self.detection_noise_rate),
            ("target_noise_rate", self.target_noise_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                bad(k, format!("per-cycle rate must be in [0, 1), got {v}"));
            }
        }
        for (k, v) in [
            ("target_miss_rate", self.target_miss_rate),
            ("miss_rate_tolerance", self.miss_rate_tolerance),
            ("calibrate_miss_rate", self.calibrate_miss_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                bad(k, format!("must be in [0, 1), got {v}"));
            }
        }
        if self.cycles_per_us <= 0.0 || !self.cycles_per_us.is_finite() {
            bad("cycles_per_us", "must be positive".into());
        }
        if self.arrival_mean_us <= 0.0 {
            bad("arrival_mean_us", "must be positive".into());
        }
        if self.arrival_jitter_us < 0.0 || self.arrival_jitter_us * 2.0 >= self.arrival_mean_us {
            bad("arrival_jitter_us", "must be non-negative and below half the mean".into());
        }
        if self.victim_jitter_sigma < 0.0 || !self.victim_jitter_sigma.is_finite() {
            bad("victim_jitter_sigma", "must be non-negative".into());
        }
        if self.samples == 0 {
            bad("samples", "must be positive".into());
        }
        if self.traces == 0 {
            bad("traces", "must be positive".into());
        }
        if self.stakeout_replicas == 0 {
            bad("stakeout_replicas", "must be positive".into());
        }
        if self.noise_pool == 0 {
            bad("noise_pool", "must be positive".into());
        }
        if self.adaptive && self.adaptation_window == 0 {
            bad("adaptation_window", "must be positive when adaptive".into());
        }
        if self.detection == DetectionMethod::FlushReload && self.victim == VictimKind::Rsa {
            bad("detection", "flush_reload detection is only modelled for the AES victim".into());
        }
        if self.victim == VictimKind::Rsa && self.calibrate_miss_rate > 0.0 {
            bad("calibrate_miss_rate", "hazard calibration is only available for the AES victim".into());
        }
        if self.fr_trials == 0 {
            bad("fr_trials", "must be positive".into());
        }
        out
    }

    pub fn geometry(&self) -> CacheGeometry {
        let mut g = CacheGeometry::default();
        g.l1 = LevelGeometry { sets: self.l1_sets, ways: self.l1_ways };
        g.l2 = LevelGeometry { sets: self.l2_sets, ways: self.l2_ways };
        g.l3 = LevelGeometry { sets: self.l3_sets, ways: self.l3_ways };
        g.policy.insertion_age = self.insertion_age;
        g.latencies.l1 = self.latency_l1;
        g.latencies.l2 = self.latency_l2;
        g.latencies.l3 = self.latency_l3;
        g.latencies.mem = self.latency_mem;
        g
    }

    pub fn machine(&self) -> MachineConfig {
        MachineConfig {
            geometry: self.geometry(),
            abort_delivery_latency: self.abort_delivery_latency,
            flush_cycles: self.flush_cycles,
            spontaneous_abort_hazard: self.spontaneous_abort_hazard,
            seed: self.seed,
            trace_limit: self.trace_limit,
            ..MachineConfig::default()
        }
    }

    pub fn plan(&self) -> AttackPlan {
        AttackPlan {
            detection: self.detection,
            shoot: self.shoot,
            wait_time: self.wait_time,
            recovery_delay: self.recovery_delay,
            adaptive: self.adaptive,
            target_miss_rate: self.target_miss_rate,
            miss_rate_tolerance: self.miss_rate_tolerance,
            adaptation_window: self.adaptation_window,
            wait_limit: self.wait_limit,
            count_cycles: self.count_cycles,
            ..AttackPlan::default()
        }
    }

    /// AES key from the config, or drawn from the seed.
    pub fn aes_key(&self) -> Block {
        parse_block(&self.key).unwrap_or_else(|| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b65_79);
            let mut k = [0u8; 16];
            rng.fill(&mut k);
            k
        })
    }

    /// RSA exponent bits, most significant first.
    pub fn rsa_exponent(&self) -> Vec<bool> {
        if self.key == "random" {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b65_79);
            let mut bits: Vec<bool> = (0..self.rsa_bits).map(|_| rng.gen()).collect();
            bits[0] = true;
            bits
        } else {
            self.key
                .chars()
                .filter_map(|c| c.to_digit(16))
                .flat_map(|d| (0..4).rev().map(move |i| d >> i & 1 == 1))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ScenarioConfig::parse("# nothing\n\n").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let c = ScenarioConfig::parse("victim = rsa  # the exponentiation\nkey = a5\nshoot = method1\nadaptive = true\nsamples = 1_000\n").unwrap();
        assert_eq!(c.victim, VictimKind::Rsa);
        assert_eq!(c.shoot, ShootMethod::Method1Flush);
        assert!(c.adaptive);
        assert_eq!(c.samples, 1000);
        assert_eq!(c.rsa_exponent(), vec![true, false, true, false, false, true, false, true]);
    }

    #[test]
    fn every_problem_is_reported_with_its_line() {
        let err = ScenarioConfig::parse("samples = lots\nbogus = 1\nseed = 1\nseed = 2\nlookup_index = 0\n").unwrap_err();
        let keys: Vec<(usize, &str)> = err.errors.iter().map(|e| (e.line, e.key.as_str())).collect();
        assert_eq!(keys, vec![(1, "samples"), (2, "bogus"), (4, "seed"), (0, "lookup_index")]);
        let text = err.to_string();
        assert!(text.starts_with("CONFIG_INVALID"));
        assert!(text.contains("line 2: `bogus`: unknown key"));
    }

    #[test]
    fn geometry_errors_surface() {
        let err = ScenarioConfig::parse("l3_sets = 1000\n").unwrap_err();
        assert_eq!(err.errors[0].key, "geometry");
    }

    #[test]
    fn bad_keys_are_rejected() {
        assert!(ScenarioConfig::parse("key = 00112233").is_err());
        assert!(ScenarioConfig::parse("key = 000102030405060708090a0b0c0d0e0f").is_ok());
        assert!(ScenarioConfig::parse("victim = rsa\nkey = xyz").is_err());
    }
}
