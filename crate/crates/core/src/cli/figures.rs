use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ScenarioConfig;
use super::scenario::{aes_campaign, ScenarioError};
use crate::sniper::{run_aes_campaign, wait_flush_sweep, Validity, Verdict};
use crate::victims::{aes_last_round_nonaccess_mc, aes_last_round_nonaccess_prob, AesTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    AesLast,
    WaitFlush,
    FlushCountTot,
}

impl FigureKind {
    pub fn file_name(self) -> &'static str {
        match self {
            FigureKind::AesLast => "aes_last.csv",
            FigureKind::WaitFlush => "wait_flush.csv",
            FigureKind::FlushCountTot => "flush_count_tot.csv",
        }
    }
}

impl FromStr for FigureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aes_last" => Ok(FigureKind::AesLast),
            "wait_flush" => Ok(FigureKind::WaitFlush),
            "flush_count_tot" => Ok(FigureKind::FlushCountTot),
            other => Err(format!("unknown figure `{other}` (aes_last, wait_flush, flush_count_tot)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AesLastRow {
    pub k: u32,
    pub analytic_pct: f64,
    pub mc_pct: f64,
    pub simulated_pct: f64,
}

/// Limits swept for the busy-wait figure: every limit up to 50, then steps
/// of 5 up to 150.
pub fn wait_limit_grid() -> Vec<u32> {
    (0..=50).chain((55..=150).step_by(5)).collect()
}

/// Share of valid machine-level samples whose verdict is "not accessed"
/// when line `line_index` is evicted just before last-round lookup `k`.
pub fn simulated_nonaccess(cfg: &ScenarioConfig, k: usize) -> Result<f64, ScenarioError> {
    let mut c = aes_campaign(cfg);
    c.lookup_index = k;
    c.samples = cfg.sim_samples;
    c.stop_when_unique = false;
    c.progress_every = 0;
    c.discover = false;
    c.check_ground_truth = false;
    c.machine.trace_limit = 0;
    c.seed = cfg.seed ^ ((k as u64) << 32);
    let r = run_aes_campaign(&c)?;
    let valid: Vec<_> = r.log.entries.iter().filter(|o| o.validity == Validity::Valid).collect();
    let clean = valid.iter().filter(|o| o.verdict == Verdict::NotAccessed).count();
    Ok(clean as f64 / valid.len().max(1) as f64)
}

pub fn aes_last_rows(cfg: &ScenarioConfig) -> Result<Vec<AesLastRow>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mc = aes_last_round_nonaccess_mc(cfg.mc_samples as usize, cfg.line_index, &mut rng);
    (1..=16u32)
        .map(|k| {
            Ok(AesLastRow {
                k,
                analytic_pct: 100.0 * aes_last_round_nonaccess_prob(k).expect("k in range"),
                mc_pct: 100.0 * mc[k as usize - 1],
                simulated_pct: 100.0 * simulated_nonaccess(cfg, k as usize)?,
            })
        })
        .collect()
}

/// Writes the data behind one figure to `<output_dir>/<figure>.csv` and
/// returns the path.
pub fn emit_figure_data(which: FigureKind, cfg: &ScenarioConfig) -> Result<PathBuf, ScenarioError> {
    let errors = cfg.check();
    if !errors.is_empty() {
        return Err(super::config::ConfigError { errors }.into());
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(which.file_name());
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    match which {
        FigureKind::AesLast => {
            for row in aes_last_rows(cfg)? {
                w.serialize(row)?;
            }
        }
        FigureKind::WaitFlush => {
            #[derive(Serialize)]
            struct Row {
                wait_limit: u32,
                detected_pct: f64,
                valid_pct: f64,
            }
            let timing = AesTiming {
                jitter_sigma: cfg.victim_jitter_sigma,
                ..AesTiming::default()
            };
            let rows = wait_flush_sweep(&cfg.machine(), timing, &wait_limit_grid(), cfg.fr_trials, cfg.count_cycles, cfg.seed);
            for r in rows {
                w.serialize(Row {
                    wait_limit: r.wait_limit,
                    detected_pct: 100.0 * r.detected_rate(),
                    valid_pct: 100.0 * r.valid_rate(),
                })?;
            }
        }
        FigureKind::FlushCountTot => {
            #[derive(Serialize)]
            struct Row {
                samples: u64,
                search_space_bits: f64,
            }
            let mut c = aes_campaign(cfg);
            c.machine.trace_limit = 0;
            let r = run_aes_campaign(&c)?;
            for p in &r.progress.rows {
                w.serialize(Row {
                    samples: p.samples,
                    search_space_bits: p.search_space_bits,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(path)
}
