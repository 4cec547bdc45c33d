use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::sniper::Verdict;
use crate::victims::aes::{master_key_from_last_round, Block, SBOX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EliminationMode {
    /// Candidates are removed outright; sound only without verdict noise.
    Hard,
    /// Candidates collect one point per contradicting sample and are ranked.
    Scored,
}

/// Last-round key candidates, indexed by ciphertext byte position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHypothesisSet {
    mode: EliminationMode,
    alive: [[bool; 256]; 16],
    scores: [[u32; 256]; 16],
    samples: u64,
    informative: u64,
}

impl KeyHypothesisSet {
    pub fn new(mode: EliminationMode) -> Self {
        Self {
            mode,
            alive: [[true; 256]; 16],
            scores: [[0; 256]; 16],
            samples: 0,
            informative: 0,
        }
    }

    pub fn mode(&self) -> EliminationMode {
        self.mode
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn informative_samples(&self) -> u64 {
        self.informative
    }

    /// Folds one observation in. Only a `NotAccessed` verdict on S-Box line
    /// `line_index` carries information: no last-round output byte can then
    /// come from that line.
    pub fn eliminate(&mut self, ciphertext: &Block, line_index: usize, verdict: Verdict) {
        assert!(line_index < 4, "S-Box has four lines");
        self.samples += 1;
        if verdict != Verdict::NotAccessed {
            return;
        }
        self.informative += 1;
        let line = &SBOX[64 * line_index..64 * line_index + 64];
        for (pos, &c) in ciphertext.iter().enumerate() {
            for &s in line {
                let k = (c ^ s) as usize;
                match self.mode {
                    EliminationMode::Hard => self.alive[pos][k] = false,
                    EliminationMode::Scored => self.scores[pos][k] += 1,
                }
            }
        }
    }

    pub fn score(&self, pos: usize, value: u8) -> u32 {
        self.scores[pos][value as usize]
    }

    pub fn is_alive(&self, pos: usize, value: u8) -> bool {
        self.alive[pos][value as usize]
    }

    /// Surviving candidates for one byte. In scored mode these are the
    /// candidates sharing the lowest score.
    pub fn candidate_count(&self, pos: usize) -> usize {
        match self.mode {
            EliminationMode::Hard => self.alive[pos].iter().filter(|&&a| a).count(),
            EliminationMode::Scored => {
                let min = *self.scores[pos].iter().min().expect("256 entries");
                self.scores[pos].iter().filter(|&&s| s == min).count()
            }
        }
    }

    pub fn candidate_counts(&self) -> [usize; 16] {
        std::array::from_fn(|i| self.candidate_count(i))
    }

    /// Remaining key entropy in bits, summed over bytes.
    pub fn search_space_bits(&self) -> f64 {
        self.candidate_counts()
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (c as f64).log2() })
            .sum()
    }

    /// Candidates of one byte by ascending score, ties by value.
    pub fn noisy_rank(&self, pos: usize) -> Vec<u8> {
        let mut v: Vec<u8> = (0..=255u8).collect();
        v.sort_by_key(|&k| (self.scores[pos][k as usize], k));
        v
    }

    /// 1-based rank of `value`, counting every candidate scored at or below
    /// it (ties count against the true value).
    pub fn rank_of(&self, pos: usize, value: u8) -> usize {
        let s = self.scores[pos][value as usize];
        self.scores[pos].iter().filter(|&&x| x <= s).count()
    }

    /// The last-round key when every byte is pinned down.
    pub fn unique_last_round_key(&self) -> Option<Block> {
        let mut k = [0u8; 16];
        for (pos, slot) in k.iter_mut().enumerate() {
            if self.candidate_count(pos) != 1 {
                return None;
            }
            *slot = match self.mode {
                EliminationMode::Hard => self.alive[pos].iter().position(|&a| a)? as u8,
                EliminationMode::Scored => self.noisy_rank(pos)[0],
            };
        }
        Some(k)
    }

    pub fn recovered_master_key(&self) -> Option<Block> {
        self.unique_last_round_key().map(|k| master_key_from_last_round(&k))
    }
}

/// One row of the recovery progress series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressRow {
    pub samples: u64,
    pub search_space_bits: f64,
    pub counts: [usize; 16],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub rows: Vec<ProgressRow>,
}

impl Progress {
    pub fn record(&mut self, hyp: &KeyHypothesisSet) {
        self.rows.push(ProgressRow {
            samples: hyp.samples(),
            search_space_bits: hyp.search_space_bits(),
            counts: hyp.candidate_counts(),
        });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["samples".to_string(), "search_space_bits".to_string()];
        header.extend((0..16).map(|i| format!("candidates_{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.samples.to_string(), format!("{:.6}", r.search_space_bits)];
            rec.extend(r.counts.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_hypothesis_is_128_bits() {
        let h = KeyHypothesisSet::new(EliminationMode::Hard);
        assert_eq!(h.search_space_bits(), 128.0);
        assert_eq!(h.candidate_counts(), [256; 16]);
    }

    #[test]
    fn not_accessed_on_line_zero_removes_first_quarter_of_sbox() {
        let mut h = KeyHypothesisSet::new(EliminationMode::Hard);
        h.eliminate(&[0u8; 16], 0, Verdict::NotAccessed);
        for j in 0..64 {
            assert!(!h.is_alive(0, SBOX[j]));
        }
        for j in 64..256 {
            assert!(h.is_alive(0, SBOX[j]));
        }
        assert_eq!(h.candidate_count(0), 192);
    }

    #[test]
    fn accessed_changes_nothing() {
        let mut h = KeyHypothesisSet::new(EliminationMode::Hard);
        let before = h.clone();
        h.eliminate(&[9u8; 16], 2, Verdict::Accessed);
        h.eliminate(&[9u8; 16], 2, Verdict::Invalid);
        assert_eq!(h.alive, before.alive);
        assert_eq!(h.samples(), 2);
    }

    #[test]
    fn search_space_small_cases() {
        let mut h = KeyHypothesisSet::new(EliminationMode::Hard);
        for pos in 0..16 {
            for k in 1..256 {
                h.alive[pos][k] = false;
            }
        }
        assert_eq!(h.search_space_bits(), 0.0);
        h.alive[3][7] = true;
        assert_eq!(h.search_space_bits(), 1.0);
    }

    #[test]
    fn zero_noise_true_byte_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let key: u8 = 0x5a;
        let mut h = KeyHypothesisSet::new(EliminationMode::Scored);
        for _ in 0..200 {
            // Output of a lookup outside line 0.
            let x: u8 = rng.gen_range(64..=255);
            let mut ct = [0u8; 16];
            ct[0] = SBOX[x as usize] ^ key;
            h.eliminate(&ct, 0, Verdict::NotAccessed);
        }
        assert_eq!(h.score(0, key), 0);
        assert_eq!(h.noisy_rank(0)[0], key);
        assert_eq!(h.rank_of(0, key), 1);
    }

    #[test]
    fn progress_csv_header_and_first_row() {
        let mut p = Progress::default();
        p.record(&KeyHypothesisSet::new(EliminationMode::Hard));
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("samples,search_space_bits,candidates_0"));
        assert!(lines.next().unwrap().starts_with("0,128.000000,256"));
    }
}
