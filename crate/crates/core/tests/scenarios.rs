use std::path::{Path, PathBuf};
use std::process::Command;

use cachesniper::cli::{run_scenario, ScenarioConfig, ScenarioError, VictimKind};
use cachesniper::recovery::{EliminationMode, KeyHypothesisSet};
use cachesniper::sniper::Verdict;
use cachesniper::victims::aes::parse_block;
use serde::Deserialize;

fn preset(name: &str) -> ScenarioConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.conf"));
    ScenarioConfig::load(&p).expect("preset parses")
}

fn in_dir(mut cfg: ScenarioConfig, dir: &Path) -> ScenarioConfig {
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[derive(Debug, Deserialize)]
struct ObsRow {
    sample: u64,
    verdict: String,
    validity: String,
    record: String,
}

fn observations(path: PathBuf) -> Vec<ObsRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(Result::unwrap).collect()
}

fn verdict(s: &str) -> Verdict {
    match s {
        "accessed" => Verdict::Accessed,
        "not_accessed" => Verdict::NotAccessed,
        _ => Verdict::Invalid,
    }
}

#[test]
fn aes_summary_matches_its_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(preset("aes_noiseless"), dir.path());
    let s = run_scenario(&cfg).unwrap();
    let aes = s.aes.as_ref().unwrap();
    assert_eq!(aes.search_space_bits, 0.0);
    assert!(aes.key_correct);
    assert!(aes.ground_truth_checked > 0);
    assert_eq!(aes.ground_truth_violations, 0);

    let rows = observations(dir.path().join("observations.csv"));
    assert_eq!(rows.len() as u64, aes.samples);
    assert!(rows.iter().enumerate().all(|(i, r)| r.sample == i as u64));
    let valid = rows.iter().filter(|r| r.validity == "valid").count();
    assert_eq!(valid as f64 / rows.len() as f64, s.valid_rate);

    // Replaying the logged ciphertexts and verdicts reproduces the result.
    let mut hyp = KeyHypothesisSet::new(EliminationMode::Hard);
    for r in &rows {
        if let Some(ct) = parse_block(&r.record) {
            hyp.eliminate(&ct, cfg.line_index, verdict(&r.verdict));
        }
    }
    assert_eq!(hyp.search_space_bits(), aes.search_space_bits);
    assert_eq!(hyp.recovered_master_key(), Some(cfg.aes_key()));

    let mut rec = csv::Reader::from_path(dir.path().join("recovery.csv")).unwrap();
    let series: Vec<(u64, f64)> = rec.records().map(|r| {
        let r = r.unwrap();
        (r[0].parse().unwrap(), r[1].parse().unwrap())
    }).collect();
    assert_eq!(series[0], (0, 128.0));
    assert_eq!(*series.last().unwrap(), (aes.samples, 0.0));
    assert!(series.windows(2).all(|w| w[1].1 <= w[0].1));

    let truth = csv::Reader::from_path(dir.path().join("ground_truth.csv")).unwrap().records().count();
    assert!(truth as u64 >= aes.samples);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], cfg.seed);
    assert_eq!(json["config"]["seed"], cfg.seed);
    assert_eq!(json["aes"]["samples"], aes.samples);
}

#[test]
fn rsa_summary_matches_its_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = in_dir(preset("rsa_noiseless"), dir.path());
    cfg.rsa_bits = 256;
    let s = run_scenario(&cfg).unwrap();
    let rsa = s.rsa.as_ref().unwrap();
    assert_eq!(s.victim, VictimKind::Rsa);
    let truth = cfg.rsa_exponent();
    let mut rec = csv::Reader::from_path(dir.path().join("recovery.csv")).unwrap();
    let decoded: Vec<String> = rec.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(decoded.len(), 256);
    let correct = decoded.iter().zip(&truth).filter(|(d, &t)| d.as_str() == if t { "1" } else { "0" }).count();
    assert_eq!(correct, rsa.combined.correct_bits);
    assert_eq!(correct, 256);
    let unknown = decoded.iter().filter(|d| d.as_str() == "?").count();
    assert_eq!(unknown, rsa.unknown_bits);
    let rows = observations(dir.path().join("observations.csv"));
    assert_eq!(rows.len(), rsa.combined.detections);
}

#[test]
fn extra_rsa_traces_get_their_own_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = in_dir(preset("rsa_noisy"), dir.path());
    cfg.rsa_bits = 128;
    cfg.traces = 3;
    let s = run_scenario(&cfg).unwrap();
    assert_eq!(s.rsa.unwrap().traces, 3);
    for f in ["observations.csv", "observations_t1.csv", "observations_t2.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_configs_are_rejected_with_field_diagnostics() {
    let e = ScenarioConfig::parse("victim = des\nbogus = 1\nsamples = many\n").unwrap_err();
    let text = e.to_string();
    assert!(text.starts_with("CONFIG_INVALID"), "{text}");
    let lines: Vec<(usize, &str)> = e.errors.iter().map(|f| (f.line, f.key.as_str())).collect();
    assert_eq!(lines, vec![(1, "victim"), (2, "bogus"), (3, "samples")]);

    let mut cfg = ScenarioConfig::default();
    cfg.l3_ways = 0;
    cfg.lookup_index = 17;
    match run_scenario(&cfg) {
        Err(ScenarioError::Config(e)) => {
            let keys: Vec<&str> = e.errors.iter().map(|f| f.key.as_str()).collect();
            assert!(keys.contains(&"geometry") && keys.contains(&"lookup_index"), "{keys:?}");
        }
        other => panic!("expected CONFIG_INVALID, got {other:?}"),
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cachesniper");
    let ok = Command::new(bin).arg("validate").output().unwrap();
    assert!(ok.status.success());
    let report = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{report}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "victim = aes\nunknown_knob = 3\n").unwrap();
    let out = Command::new(bin).arg("run").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CONFIG_INVALID"));

    let out = Command::new(bin).args(["figures", "nonsense"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}
