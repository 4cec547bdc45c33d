//! One test per acceptance criterion. Each prints a single
//! `CRITERION nn PASS|FAIL ...` line before asserting.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use cachesniper::cache_model::{CacheGeometry, Hierarchy, Level, LineAddr};
use cachesniper::cli::figures::{aes_last_rows, wait_limit_grid};
use cachesniper::cli::scenario::{aes_campaign, calibrated_hazard, rsa_campaign};
use cachesniper::cli::validate::plru_survivors;
use cachesniper::cli::{emit_figure_data, run_scenario, FigureKind, ScenarioConfig};
use cachesniper::machine::{Machine, MachineConfig, ProcessKind};
use cachesniper::sniper::{
    build_eviction_set, plru_aware_order, prime, recover, run_aes_campaign, run_rsa_campaign, wait_flush_sweep, ShootMethod, Verdict,
};
use cachesniper::victims::aes::{encrypt, parse_block};
use cachesniper::victims::{aes_last_round_nonaccess_mc, aes_last_round_nonaccess_prob, AesTiming};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Criteria carry wall-clock budgets, so they run one at a time.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, what: &str, pass: bool, detail: String, elapsed: Duration) {
    // Written to the raw handle so the line shows up even when output is captured.
    let mut out = std::io::stdout().lock();
    writeln!(out, "CRITERION {n:02} {} {what}: {detail} [{:.2?}]", if pass { "PASS" } else { "FAIL" }, elapsed).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn preset(name: &str) -> ScenarioConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.conf"));
    ScenarioConfig::load(&p).expect("preset parses")
}

/// (key, plaintext, ciphertext) from the standard known-answer sets.
const KAT: [(&str, &str, &str); 15] = [
    ("00000000000000000000000000000000", "00000000000000000000000000000000", "66e94bd4ef8a2c3b884cfa59ca342b2e"),
    ("000102030405060708090a0b0c0d0e0f", "00112233445566778899aabbccddeeff", "69c4e0d86a7b0430d8cdb78070b4c55a"),
    ("2b7e151628aed2a6abf7158809cf4f3c", "3243f6a8885a308d313198a2e0370734", "3925841d02dc09fbdc118597196a0b32"),
    ("00000000000000000000000000000000", "f34481ec3cc627bacd5dc3fb08f273e6", "0336763e966d92595a567cc9ce537f5e"),
    ("00000000000000000000000000000000", "9798c4640bad75c7c3227db910174e72", "a9a1631bf4996954ebc093957b234589"),
    ("00000000000000000000000000000000", "96ab5c2ff612d9dfaae8c31f30c42168", "ff4f8391a6a40ca5b25d23bedd44a597"),
    ("00000000000000000000000000000000", "6a118a874519e64e9963798a503f1d35", "dc43be40be0e53712f7e2bf5ca707209"),
    ("00000000000000000000000000000000", "cb9fceec81286ca3e989bd979b0cb284", "92beedab1895a94faa69b632e5cc47ce"),
    ("00000000000000000000000000000000", "b26aeb1874e47ca8358ff22378f09144", "459264f4798f6a78bacb89c15ed3d601"),
    ("00000000000000000000000000000000", "58c8e00b2631686d54eab84b91f0aca1", "08a4e2efec8a8e3312ca7460b9040bbf"),
    ("10a58869d74be5a374cf867cfb473859", "00000000000000000000000000000000", "6d251e6944b051e04eaa6fb4dbf78465"),
    ("caea65cdbb75e9169ecd22ebe6e54675", "00000000000000000000000000000000", "6e29201190152df4ee058139def610bb"),
    ("a2e2fa9baf7d20822ca9f0542f764a41", "00000000000000000000000000000000", "c3b44b95d9d2f25670eee9a0de099fa3"),
    ("b6364ac4e1de1e285eaf144a2415f7a0", "00000000000000000000000000000000", "5d9b05578fc944b3cf1ccf0e746cd581"),
    ("00000000000000000000000000000000", "80000000000000000000000000000000", "3ad78e726c1ec02b7ebfe92b23d9ec34"),
];

#[test]
fn criterion_01_aes_known_answer() {
    let _guard = serial();
    let t = Instant::now();
    let bad: Vec<usize> = KAT
        .iter()
        .enumerate()
        .filter(|(_, (k, p, c))| encrypt(&parse_block(k).unwrap(), &parse_block(p).unwrap()) != parse_block(c).unwrap())
        .map(|(i, _)| i)
        .collect();
    let e = t.elapsed();
    report(1, "aes known-answer vectors", bad.is_empty() && e < Duration::from_secs(1), format!("{}/{} match, mismatches {bad:?}", KAT.len() - bad.len(), KAT.len()), e);
}

#[test]
fn criterion_02_untouched_line_probability() {
    let _guard = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = aes_last_round_nonaccess_mc(100_000, 0, &mut rng)[0];
    let e = t.elapsed();
    let pass = (p - 0.0100).abs() <= 0.002 && e < Duration::from_secs(10);
    report(2, "P(line untouched in last round), 1e5 samples", pass, format!("p = {p:.5} (target 0.0100 +- 0.002)"), e);
}

#[test]
fn criterion_03_nonaccess_by_eviction_point() {
    let _guard = serial();
    let t = Instant::now();
    let mut cfg = preset("aes_noiseless");
    cfg.mc_samples = 100_000;
    cfg.sim_samples = 30_000;
    let rows = aes_last_rows(&cfg).unwrap();
    let e = t.elapsed();
    let worst_mc = rows.iter().map(|r| (r.mc_pct - r.analytic_pct).abs() / 100.0).fold(0.0, f64::max);
    let worst_sim = rows.iter().map(|r| (r.simulated_pct - r.analytic_pct).abs() / 100.0).fold(0.0, f64::max);
    let anchors = aes_last_round_nonaccess_prob(16).unwrap() == 0.75 && aes_last_round_nonaccess_prob(15).unwrap() == 0.5625;
    let pass = worst_mc <= 0.01 && worst_sim <= 0.01 && anchors && e < Duration::from_secs(30);
    report(
        3,
        "non-access vs eviction point k",
        pass,
        format!("max |mc - 0.75^(17-k)| = {worst_mc:.4}, max |simulated - 0.75^(17-k)| = {worst_sim:.4}, k=16 {:.2}%, k=15 {:.2}%", rows[15].simulated_pct, rows[14].simulated_pct),
        e,
    );
}

/// Staging, one external fill, one shoot and the reload probe, from a
/// randomly disturbed set. Returns a description of the first mismatch.
fn surgical_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MachineConfig::default();
    let g = cfg.geometry.clone();
    let mut m = Machine::new(&cfg).unwrap();
    let set = rng.gen_range(0..g.l3.sets as u64);
    for _ in 0..rng.gen_range(0..40) {
        let core = [0, 2][rng.gen_range(0..2)];
        let line = g.line_in_l3_set(set, rng.gen_range(0x800..0x840));
        m.shared_mut().commit_access(0, ProcessKind::Noise, core, line);
    }
    let es = build_eviction_set(&g, set, rng.gen());
    let s = g.line_in_l3_set(set, 0x900 + rng.gen_range(0..64));
    prime(&mut m, &es, true, false).map_err(|e| format!("prime: {e}"))?;
    let now = m.now();
    let fill = m.shared_mut().commit_access(now, ProcessKind::Victim, 0, s);
    if fill.evicted_l3_line != Some(es.a()) {
        return Err(format!("external fill evicted {:?}", fill.evicted_l3_line));
    }
    let l3 = m.hierarchy().l3_set_state(set).unwrap();
    if l3.slot(0).map(|x| x.line) != Some(s) {
        return Err("external line not at way 0".into());
    }
    let before: Vec<LineAddr> = l3.lines().collect();
    let shot = m.access(es.a());
    let after: Vec<LineAddr> = m.hierarchy().l3_set_state(set).unwrap().lines().collect();
    let gone: Vec<_> = before.iter().filter(|l| !after.contains(l)).collect();
    let new: Vec<_> = after.iter().filter(|l| !before.contains(l)).collect();
    if gone != [&s] || new != [&es.a()] || shot.evicted_l3_line != Some(s) {
        return Err(format!("shoot diff: out {gone:?} in {new:?}"));
    }
    let reload = rng.gen_bool(0.5);
    if reload {
        let now = m.now();
        m.shared_mut().commit_access(now, ProcessKind::Victim, 0, s);
    }
    let v = recover(&mut m, ShootMethod::Method2Access, s, &es);
    if (v == Verdict::Accessed) != reload {
        return Err(format!("probe said {v:?} with reload {reload}"));
    }
    Ok(())
}

#[test]
fn criterion_04_surgical_eviction() {
    let _guard = serial();
    let t = Instant::now();
    let failures: Vec<(u64, String)> = (0..10_000u64).filter_map(|s| surgical_trial(s).err().map(|e| (s, e))).collect();
    report(
        4,
        "staged single-access eviction, 1e4 random states",
        failures.is_empty(),
        format!("{} failures{}", failures.len(), failures.first().map(|f| format!(", first: seed {} {}", f.0, f.1)).unwrap_or_default()),
        t.elapsed(),
    );
}

/// A transaction reads part of a set; a victim then streams lines into it
/// until the read set is hit. Compares against the same schedule with
/// plain loads. Returns whether an abort happened and whether the states
/// matched.
fn persistence_trial(seed: u64) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MachineConfig::default();
    let g = cfg.geometry.clone();
    let set = rng.gen_range(0..g.l3.sets as u64);
    let reads: Vec<LineAddr> = (0..rng.gen_range(1..12)).map(|i| g.line_in_l3_set(set, i)).collect();
    let stream: Vec<LineAddr> = (0..rng.gen_range(4..40)).map(|i| g.line_in_l3_set(set, 100 + i)).collect();

    let run = |in_tx: bool, stop: Option<u64>| {
        let mut m = Machine::new(&cfg).unwrap();
        if in_tx {
            m.tx_begin().unwrap();
        }
        for &l in &reads {
            if in_tx {
                m.tx_read(l).unwrap();
            } else {
                m.access(l);
            }
        }
        let mut t = m.now();
        for &l in &stream {
            t += 50;
            if stop.is_some_and(|s| t > s) {
                break;
            }
            m.shared_mut().commit_access(t, ProcessKind::Victim, 0, l);
        }
        let info = if in_tx { m.spin_until_abort(t + 10_000) } else { None };
        (m, info)
    };
    let (tx, info) = run(true, None);
    let Some(info) = info else { return (false, true) };
    let (plain, _) = run(false, None);
    (true, tx.hierarchy() == plain.hierarchy() && !tx.hierarchy().in_l3(info.evicted.unwrap()))
}

#[test]
fn criterion_05_transaction_persistence() {
    let _guard = serial();
    let t = Instant::now();
    let (mut aborts, mut rollbacks, mut seed) = (0u32, 0u32, 0u64);
    while aborts < 10_000 {
        let (aborted, same) = persistence_trial(seed);
        seed += 1;
        if aborted {
            aborts += 1;
            if !same {
                rollbacks += 1;
            }
        }
    }
    report(5, "state after abort equals the plain replay", rollbacks == 0, format!("{aborts} aborts, {rollbacks} rollbacks ({seed} trials)"), t.elapsed());
}

#[test]
fn criterion_06_plru_anomaly() {
    let _guard = serial();
    let t = Instant::now();
    let survivors = plru_survivors();
    let g = CacheGeometry::default();
    let es = build_eviction_set(&g, 321, 6);
    let order = plru_aware_order(&es, &g).unwrap();
    let mut h = Hierarchy::new(g.clone()).unwrap();
    for &l in &es.lines {
        h.access(1, l);
    }
    let levels: Vec<Level> = order.iter().map(|&l| h.access(1, l).level_hit).collect();
    let e = t.elapsed();
    let all_l3 = levels.iter().all(|&l| l == Level::L3);
    let pass = survivors == ["B", "D", "F", "H"] && order.len() == 11 && all_l3 && e < Duration::from_secs(1);
    report(6, "tree-PLRU survivors and aware order", pass, format!("survivors {survivors:?}, order of {} all L3: {all_l3}", order.len()), e);
}

#[test]
fn criterion_07_detection_calibration() {
    let _guard = serial();
    let t = Instant::now();
    let mut cfg = preset("aes_noisy");
    cfg.samples = 10_000;
    cfg.trace_limit = 0;
    let mut c = aes_campaign(&cfg);
    c.stop_when_unique = false;
    c.machine.spontaneous_abort_hazard = calibrated_hazard(&c, 0.03).unwrap();
    let r = run_aes_campaign(&c).unwrap();
    let s = &r.stats;
    let rate = s.detection_rate();
    let pass = s.runs >= 10_000 && (rate - 0.97).abs() <= 0.01 && s.latency_min + 5 >= 380 && s.latency_max <= 385;
    report(
        7,
        "TSX detection rate and latency",
        pass,
        format!("hazard {:.3e}/cycle, {} runs, rate {:.4}, latency {}..{} (mean {:.2})", c.machine.spontaneous_abort_hazard, s.runs, rate, s.latency_min, s.latency_max, s.mean_latency()),
        t.elapsed(),
    );
}

#[test]
fn criterion_08_aes_key_recovery() {
    let _guard = serial();
    let t = Instant::now();
    let mut cfg = preset("aes_noiseless");
    cfg.trace_limit = 0;
    let c = aes_campaign(&cfg);
    let r = run_aes_campaign(&c).unwrap();
    let bits: Vec<f64> = r.progress.rows.iter().map(|p| p.search_space_bits).collect();
    let monotone = bits.windows(2).all(|w| w[1] <= w[0]);
    let samples = r.log.len();
    let e = t.elapsed();
    let pass = r.hypotheses.search_space_bits() == 0.0 && r.key_correct && samples <= 200_000 && monotone && r.ground_truth_violations == 0 && e < Duration::from_secs(300);
    report(
        8,
        "noiseless AES key recovery",
        pass,
        format!("0 bits after {samples} samples, key correct {}, monotone {monotone}, ground-truth mismatches {}/{}", r.key_correct, r.ground_truth_violations, r.ground_truth_checked),
        e,
    );
}

#[test]
fn criterion_09_rsa_exponent_recovery() {
    let _guard = serial();
    let t = Instant::now();
    let mut clean = preset("rsa_noiseless");
    clean.trace_limit = 0;
    let a = run_rsa_campaign(&rsa_campaign(&clean)).unwrap().combined;
    let mut noisy = preset("rsa_noisy");
    noisy.trace_limit = 0;
    let b = run_rsa_campaign(&rsa_campaign(&noisy)).unwrap().combined;
    let e = t.elapsed();
    let pass = a.windows == 2048 && a.correct_bits == 2048 && a.bit_errors == 0 && (0.80..=0.95).contains(&b.precision) && e < Duration::from_secs(120);
    report(
        9,
        "RSA exponent bits from one trace",
        pass,
        format!(
            "noiseless {}/{} correct; noisy detection {:.4}, false positives {:.4}, precision {:.4}",
            a.correct_bits, a.windows, b.detection_rate, b.false_positive_rate, b.precision
        ),
        e,
    );
}

/// Largest amount by which the curve breaks "rises to the peak, then
/// falls", measured against the running max before and running min after.
fn unimodality_violation(v: &[f64], peak: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut hi = f64::MIN;
    for &x in &v[..=peak] {
        hi = hi.max(x);
        worst = worst.max(hi - x);
    }
    let mut lo = f64::MAX;
    for &x in &v[peak..] {
        lo = lo.min(x);
        worst = worst.max(x - lo);
    }
    worst
}

#[test]
fn criterion_10_flush_reload_wait_sweep() {
    let _guard = serial();
    let t = Instant::now();
    let cfg = ScenarioConfig::default();
    let timing = AesTiming {
        jitter_sigma: cfg.victim_jitter_sigma,
        ..AesTiming::default()
    };
    let rows = wait_flush_sweep(&cfg.machine(), timing, &wait_limit_grid(), cfg.fr_trials, cfg.count_cycles, 11);
    let v: Vec<f64> = rows.iter().map(|r| r.valid_rate()).collect();
    let peak = (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best });
    let ripple = unimodality_violation(&v, peak);
    let at = rows[peak].wait_limit;
    let pass = (15..=25).contains(&at) && ripple <= 0.08;
    report(
        10,
        "valid detection vs wait limit",
        pass,
        format!("peak {:.3} at wait_limit {at}, largest ripple {ripple:.3} (tolerance 0.08), {} trials per limit", v[peak], cfg.fr_trials),
        t.elapsed(),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_determinism() {
    let _guard = serial();
    let t = Instant::now();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    let mut configs = vec![preset("aes_noiseless"), preset("rsa_noisy"), preset("aes_noisy")];
    configs[1].rsa_bits = 256;
    configs[2].samples = 2000;
    for (i, mut cfg) in configs.into_iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.fr_trials = 50;
        let mut runs = Vec::new();
        for _ in 0..2 {
            run_scenario(&cfg).unwrap();
            if i == 0 {
                emit_figure_data(FigureKind::WaitFlush, &cfg).unwrap();
            }
            runs.push(dir_bytes(dir.path()));
            fs::remove_dir_all(dir.path()).unwrap();
        }
        let (fa, fb) = (&runs[0], &runs[1]);
        compared += fa.len();
        if fa.iter().map(|f| &f.0).ne(fb.iter().map(|f| &f.0)) {
            mismatches.push(format!("scenario {i}: file sets differ"));
        }
        for ((name, x), (_, y)) in fa.iter().zip(fb) {
            if x != y {
                mismatches.push(format!("scenario {i}: {name}"));
            }
        }
    }
    report(11, "byte-identical reruns", mismatches.is_empty(), format!("{compared} files compared, differing {mismatches:?}"), t.elapsed());
}
