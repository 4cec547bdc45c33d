use serde::{Deserialize, Serialize};

use super::aes::{self, Block, RoundKeys, ROUNDS};
use crate::cache_model::LineAddr;

/// Named points inside a victim run, recorded with their cycle for
/// stakeout and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    RoundStart(u8),
    /// All four prefetches of the final round are done; the next access is
    /// the first data-dependent lookup.
    LastRoundLookups,
    MulStart(u32),
    /// Multiplication finished with both operands; the copy of the selected
    /// result follows.
    CopyStart(u32),
    ReduceEnd(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Blocking load. `l1_cost` overrides the L1 latency (pipelined loads).
    Access { line: LineAddr, l1_cost: Option<u64> },
    Compute(u64),
    Marker(Marker),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AesTiming {
    pub prefetch_l1: u64,
    pub lookup_l1: u64,
    pub add_round_key: u64,
    pub mix_columns: u64,
    pub jitter_base: u64,
    pub jitter_sigma: f64,
    pub jitter_clamp: u64,
    /// Round whose tail carries the jitter term.
    pub jitter_round: u8,
}

impl Default for AesTiming {
    fn default() -> Self {
        Self {
            prefetch_l1: 1,
            lookup_l1: 3,
            add_round_key: 8,
            mix_columns: 8,
            jitter_base: 15,
            jitter_sigma: 5.0,
            jitter_clamp: 15,
            jitter_round: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AesVictim {
    pub round_keys: RoundKeys,
    /// First line of each of the four S-Box copies.
    pub tables: [LineAddr; 4],
    pub table_choice: usize,
    pub timing: AesTiming,
}

impl AesVictim {
    pub fn new(key: &Block, tables: [LineAddr; 4], table_choice: usize) -> Self {
        assert!(table_choice < 4, "table_choice must be 0..=3");
        Self {
            round_keys: aes::expand_key(key),
            tables,
            table_choice,
            timing: AesTiming::default(),
        }
    }

    pub fn sbox_line(&self, idx: usize) -> LineAddr {
        LineAddr(self.tables[self.table_choice].0 + idx as u64)
    }

    pub fn sbox_lines(&self) -> [LineAddr; 4] {
        [0, 1, 2, 3].map(|i| self.sbox_line(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiphertextRecord {
    pub plaintext: Block,
    pub ciphertext: Block,
    pub start: u64,
    pub end: u64,
}

/// Ciphertext and the access script of one encryption. `jitter` is the
/// signed per-encryption deviation added to the jitter base.
pub fn aes_encrypt_script(v: &AesVictim, plaintext: &Block, jitter: i64) -> (Block, Vec<Step>) {
    let t = &v.timing;
    let traced = aes::encrypt_traced(&v.round_keys, plaintext);
    let lines = v.sbox_lines();
    let mut s = Vec::with_capacity(ROUNDS * 24 + 4);
    for round in 1..=ROUNDS {
        s.push(Step::Marker(Marker::RoundStart(round as u8)));
        for &line in &lines {
            s.push(Step::Access { line, l1_cost: Some(t.prefetch_l1) });
        }
        if round == 1 {
            s.push(Step::Compute(t.add_round_key));
        }
        if round == ROUNDS {
            s.push(Step::Marker(Marker::LastRoundLookups));
        }
        for &x in &traced.lookups[round - 1] {
            s.push(Step::Access { line: lines[(x >> 6) as usize], l1_cost: Some(t.lookup_l1) });
        }
        if round != ROUNDS {
            s.push(Step::Compute(t.mix_columns));
        }
        if round == t.jitter_round as usize {
            let c = t.jitter_clamp as i64;
            let extra = t.jitter_base as i64 + jitter.clamp(-c, c);
            s.push(Step::Compute(extra.max(0) as u64));
        }
    }
    (traced.ciphertext, s)
}

/// Chance that a fixed S-Box line escapes every last-round lookup from the
/// `k`-th on, i.e. when it is evicted just before lookup `k`.
pub fn aes_last_round_nonaccess_prob(k: u32) -> Result<f64, VictimError> {
    if !(1..=16).contains(&k) {
        return Err(VictimError::Domain(k));
    }
    Ok(0.75f64.powi(17 - k as i32))
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VictimError {
    #[error("eviction index {0} outside 1..=16")]
    Domain(u32),
    #[error("exponent has no bits")]
    EmptyExponent,
}

/// Monte Carlo estimate of [`aes_last_round_nonaccess_prob`] for every `k`
/// from random keys and plaintexts. Entry `k-1` holds the estimate for `k`.
pub fn aes_last_round_nonaccess_mc<R: rand::Rng>(samples: usize, line: usize, rng: &mut R) -> [f64; 16] {
    let mut untouched = [0u64; 16];
    for _ in 0..samples {
        let mut key = [0u8; 16];
        let mut pt = [0u8; 16];
        rng.fill(&mut key);
        rng.fill(&mut pt);
        let traced = aes::encrypt_traced(&aes::expand_key(&key), &pt);
        let last = &traced.lookups[ROUNDS - 1];
        // The suffix from lookup k onward is untouched iff the last hit on
        // the line happened before k.
        let last_hit = last.iter().rposition(|&x| (x >> 6) as usize == line);
        let first_clean = last_hit.map_or(0, |p| p + 1);
        for (k0, slot) in untouched.iter_mut().enumerate() {
            if k0 >= first_clean {
                *slot += 1;
            }
        }
    }
    untouched.map(|u| u as f64 / samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsaTiming {
    pub mul_iters: u32,
    pub mul_iter_compute: u64,
    pub mul_tail: u64,
    pub copy_accesses: u32,
    pub copy_gap: u64,
    pub red_accesses: u32,
    pub red_gap: u64,
    pub sqr_iters: u32,
    pub sqr_iter_compute: u64,
    pub bit_idle: u64,
}

impl Default for RsaTiming {
    fn default() -> Self {
        Self {
            mul_iters: 40,
            mul_iter_compute: 192,
            mul_tail: 100,
            copy_accesses: 5,
            copy_gap: 11,
            red_accesses: 23,
            red_gap: 96,
            sqr_iters: 40,
            sqr_iter_compute: 196,
            bit_idle: 3200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsaLines {
    pub mul_code: LineAddr,
    pub red_code: LineAddr,
    pub sqr_code: LineAddr,
    pub r: [LineAddr; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsaVictim {
    /// Exponent bits, most significant first.
    pub bits: Vec<bool>,
    pub lines: RsaLines,
    pub timing: RsaTiming,
}

fn push_repeated(s: &mut Vec<Step>, line: LineAddr, n: u32, gap: u64) {
    for _ in 0..n {
        s.push(Step::Access { line, l1_cost: None });
        s.push(Step::Compute(gap));
    }
}

pub fn rsa_decrypt_script(v: &RsaVictim) -> Result<Vec<Step>, VictimError> {
    if v.bits.is_empty() {
        return Err(VictimError::EmptyExponent);
    }
    let t = &v.timing;
    let l = &v.lines;
    let mut s = Vec::new();
    // init(R): the registers are written once before the ladder starts.
    for &r in &l.r {
        s.push(Step::Access { line: r, l1_cost: None });
    }
    for (i, &bit) in v.bits.iter().enumerate() {
        let i = i as u32;
        let sel = l.r[bit as usize];
        s.push(Step::Marker(Marker::MulStart(i)));
        s.push(Step::Access { line: l.mul_code, l1_cost: None });
        for _ in 0..t.mul_iters {
            s.push(Step::Access { line: l.r[0], l1_cost: None });
            s.push(Step::Access { line: l.r[1], l1_cost: None });
            s.push(Step::Compute(t.mul_iter_compute));
        }
        s.push(Step::Compute(t.mul_tail));
        s.push(Step::Marker(Marker::CopyStart(i)));
        push_repeated(&mut s, sel, t.copy_accesses, t.copy_gap);
        s.push(Step::Access { line: l.red_code, l1_cost: None });
        push_repeated(&mut s, sel, t.red_accesses, t.red_gap);
        s.push(Step::Marker(Marker::ReduceEnd(i)));
        s.push(Step::Access { line: l.sqr_code, l1_cost: None });
        for _ in 0..t.sqr_iters {
            s.push(Step::Access { line: l.r[2], l1_cost: None });
            s.push(Step::Compute(t.sqr_iter_compute));
        }
        s.push(Step::Access { line: l.red_code, l1_cost: None });
        push_repeated(&mut s, l.r[2], t.red_accesses, t.red_gap);
        s.push(Step::Compute(t.bit_idle));
    }
    Ok(s)
}

/// Cycles of one exponent bit when every load hits L1.
pub fn rsa_nominal_period(t: &RsaTiming, l1: u64) -> u64 {
    let mul = l1 + t.mul_iters as u64 * (2 * l1 + t.mul_iter_compute) + t.mul_tail;
    let copy = t.copy_accesses as u64 * (l1 + t.copy_gap);
    let red = l1 + t.red_accesses as u64 * (l1 + t.red_gap);
    let sqr = l1 + t.sqr_iters as u64 * (l1 + t.sqr_iter_compute);
    mul + copy + 2 * red + sqr + t.bit_idle
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn victim() -> AesVictim {
        let tables = [0x100, 0x200, 0x300, 0x400].map(LineAddr);
        AesVictim::new(&[0u8; 16], tables, 2)
    }

    fn accesses(s: &[Step]) -> Vec<LineAddr> {
        s.iter()
            .filter_map(|st| match st {
                Step::Access { line, .. } => Some(*line),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn zero_vector_and_access_count() {
        let (ct, s) = aes_encrypt_script(&victim(), &[0u8; 16], 0);
        assert_eq!(aes::to_hex(&ct), "66e94bd4ef8a2c3b884cfa59ca342b2e");
        assert_eq!(accesses(&s).len(), 10 * (4 + 16));
    }

    #[test]
    fn prefetches_precede_lookups_in_every_round() {
        let v = victim();
        let (_, s) = aes_encrypt_script(&v, &[7u8; 16], 3);
        let mut round_accesses: Vec<Vec<LineAddr>> = Vec::new();
        for st in &s {
            match st {
                Step::Marker(Marker::RoundStart(_)) => round_accesses.push(Vec::new()),
                Step::Access { line, .. } => round_accesses.last_mut().unwrap().push(*line),
                _ => {}
            }
        }
        assert_eq!(round_accesses.len(), 10);
        for r in round_accesses {
            assert_eq!(&r[..4], &v.sbox_lines());
            assert_eq!(r.len(), 20);
        }
    }

    #[test]
    fn lookups_use_chosen_table() {
        let v = victim();
        let (_, s) = aes_encrypt_script(&v, &[1u8; 16], 0);
        for line in accesses(&s) {
            assert!(line.0 >= 0x300 && line.0 < 0x304);
        }
    }

    #[test]
    fn nonaccess_prob_points() {
        assert_eq!(aes_last_round_nonaccess_prob(16).unwrap(), 0.75);
        assert_eq!(aes_last_round_nonaccess_prob(15).unwrap(), 0.5625);
        assert!((aes_last_round_nonaccess_prob(1).unwrap() - 0.010_022_595).abs() < 1e-8);
        assert_eq!(aes_last_round_nonaccess_prob(0), Err(VictimError::Domain(0)));
        assert_eq!(aes_last_round_nonaccess_prob(17), Err(VictimError::Domain(17)));
    }

    #[test]
    fn small_monte_carlo_tracks_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = aes_last_round_nonaccess_mc(20_000, 0, &mut rng);
        for k in 1..=16u32 {
            let p = aes_last_round_nonaccess_prob(k).unwrap();
            assert!((est[k as usize - 1] - p).abs() < 0.02, "k={k}");
        }
    }

    fn rsa(bits: Vec<bool>) -> RsaVictim {
        RsaVictim {
            bits,
            lines: RsaLines {
                mul_code: LineAddr(10),
                red_code: LineAddr(11),
                sqr_code: LineAddr(12),
                r: [LineAddr(20), LineAddr(21), LineAddr(22)],
            },
            timing: RsaTiming::default(),
        }
    }

    fn code_sequence(s: &[Step]) -> Vec<LineAddr> {
        accesses(s).into_iter().filter(|l| l.0 < 20).collect()
    }

    #[test]
    fn rsa_flow_is_balanced_and_reduce_uses_selected_register() {
        let one = rsa_decrypt_script(&rsa(vec![true])).unwrap();
        let zero = rsa_decrypt_script(&rsa(vec![false])).unwrap();
        assert_eq!(code_sequence(&one), code_sequence(&zero));
        let copy_at = |s: &[Step]| s.iter().position(|st| matches!(st, Step::Marker(Marker::CopyStart(0)))).unwrap();
        let end_at = |s: &[Step]| s.iter().position(|st| matches!(st, Step::Marker(Marker::ReduceEnd(0)))).unwrap();
        let regs = |s: &[Step]| {
            let w = &s[copy_at(s)..end_at(s)];
            accesses(w).into_iter().filter(|l| l.0 >= 20).collect::<std::collections::BTreeSet<_>>()
        };
        assert_eq!(regs(&one).into_iter().collect::<Vec<_>>(), vec![LineAddr(21)]);
        assert_eq!(regs(&zero).into_iter().collect::<Vec<_>>(), vec![LineAddr(20)]);
    }

    #[test]
    fn rsa_period_and_window_count() {
        let t = RsaTiming::default();
        let p = rsa_nominal_period(&t, 4);
        assert!((23_000..=25_000).contains(&p), "period {p}");
        let copy = t.copy_accesses as u64 * (4 + t.copy_gap);
        assert!((70..=80).contains(&copy));
        let red = 4 + t.red_accesses as u64 * (4 + t.red_gap);
        assert!((2200..=2400).contains(&red));
        let s = rsa_decrypt_script(&rsa(vec![true; 2048])).unwrap();
        let muls = s.iter().filter(|st| matches!(st, Step::Marker(Marker::MulStart(_)))).count();
        assert_eq!(muls, 2048);
        assert_eq!(rsa_decrypt_script(&rsa(vec![])), Err(VictimError::EmptyExponent));
    }
}
