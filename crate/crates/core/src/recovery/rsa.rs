use serde::Serialize;

use crate::sniper::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowObservation {
    pub detect_ts: u64,
    pub verdict: Verdict,
}

/// Time-ordered observations of one exponentiation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitTrace {
    pub observations: Vec<WindowObservation>,
    /// When the exponentiation's result was returned, if seen.
    pub end: Option<u64>,
}

/// A trace mapped onto multiply windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedTrace {
    /// Detection timestamp assigned to each window.
    pub detections: Vec<Option<u64>>,
    pub verdicts: Vec<Option<Verdict>>,
    /// Detections that fit no window.
    pub discarded: usize,
}

impl AlignedTrace {
    pub fn bits(&self) -> Vec<Option<bool>> {
        self.verdicts.iter().map(|v| v.and_then(decode_verdict)).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("no observations to decode")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub period: u64,
    /// Accepted deviation from the grid, as a fraction of the period.
    pub tolerance: f64,
    /// Shifts tried when aligning a trace against the reference trace.
    pub max_shift: i64,
    /// Cycles from the last window's detection to the returned result;
    /// 0 when unknown.
    pub end_lag: u64,
}

impl Default for Alignment {
    fn default() -> Self {
        Self {
            period: 24_000,
            tolerance: 0.10,
            max_shift: 3,
            end_lag: 0,
        }
    }
}

/// R[0] touched after the eviction means the selected register was R[0].
pub fn decode_verdict(v: Verdict) -> Option<bool> {
    match v {
        Verdict::Accessed => Some(false),
        Verdict::NotAccessed => Some(true),
        Verdict::Invalid => None,
    }
}

/// Chains detections onto a grid: each accepted detection sits a whole
/// number of periods after the previous accepted one, within tolerance.
/// The first detection anchors window 0. The period is refined from
/// consecutive accepted detections. A rejected detection followed one
/// period later by another becomes the new anchor, so one stray detection
/// cannot derail the rest of the trace.
///
/// When the trace carries its end time and the alignment knows the lag from
/// the last window to the end, the chain is finally shifted so that its last
/// accepted detection sits at the window the end time points to. A missed
/// first window or a stray detection before it then costs one bit instead of
/// shifting the whole trace.
pub fn align_trace(trace: &BitTrace, n_bits: usize, a: &Alignment) -> AlignedTrace {
    let mut out = AlignedTrace {
        detections: vec![None; n_bits],
        verdicts: vec![None; n_bits],
        discarded: 0,
    };
    let mut period = a.period as f64;
    let tol = a.tolerance * a.period as f64;
    let mut anchor: Option<(u64, usize)> = None;
    let mut pending: Option<&WindowObservation> = None;
    let place = |out: &mut AlignedTrace, o: &WindowObservation, i: usize| {
        out.detections[i] = Some(o.detect_ts);
        out.verdicts[i] = Some(o.verdict);
    };
    for obs in &trace.observations {
        let (t, i) = match anchor {
            None => {
                if n_bits > 0 {
                    place(&mut out, obs, 0);
                    anchor = Some((obs.detect_ts, 0));
                }
                continue;
            }
            Some(x) => x,
        };
        let delta = obs.detect_ts as f64 - t as f64;
        let k = (delta / period).round();
        let residual = delta - k * period;
        if k >= 1.0 && residual.abs() <= tol {
            let idx = i + k as usize;
            if idx >= n_bits {
                out.discarded += 1;
                continue;
            }
            if k == 1.0 && residual.abs() <= tol / 2.0 {
                period = 0.9 * period + 0.1 * delta;
            }
            place(&mut out, obs, idx);
            anchor = Some((obs.detect_ts, idx));
            pending = None;
            continue;
        }
        if let Some(p) = pending {
            let gap = obs.detect_ts as f64 - p.detect_ts as f64;
            let pk = ((p.detect_ts as f64 - t as f64) / period).round();
            if (gap - period).abs() <= tol && pk >= 1.0 {
                let pi = i + pk as usize;
                if pi + 1 < n_bits {
                    out.discarded -= 1;
                    place(&mut out, p, pi);
                    place(&mut out, obs, pi + 1);
                    anchor = Some((obs.detect_ts, pi + 1));
                    pending = None;
                    continue;
                }
            }
        }
        pending = Some(obs);
        out.discarded += 1;
    }
    if let (Some(end), Some((d, idx))) = (trace.end, anchor) {
        if a.end_lag > 0 && n_bits > 0 {
            let back = (end as f64 - a.end_lag as f64 - d as f64) / period;
            let k = back.round();
            if k >= 0.0 && (back - k).abs() * period <= tol && (k as usize) < n_bits {
                let shift = (n_bits - 1 - k as usize) as i64 - idx as i64;
                shift_aligned(&mut out, shift);
            }
        }
    }
    out
}

fn shift_aligned(out: &mut AlignedTrace, shift: i64) {
    if shift == 0 {
        return;
    }
    let n = out.detections.len() as i64;
    let mut detections = vec![None; n as usize];
    let mut verdicts = vec![None; n as usize];
    for i in 0..n {
        let j = i + shift;
        if out.detections[i as usize].is_some() {
            if (0..n).contains(&j) {
                detections[j as usize] = out.detections[i as usize];
                verdicts[j as usize] = out.verdicts[i as usize];
            } else {
                out.discarded += 1;
            }
        }
    }
    out.detections = detections;
    out.verdicts = verdicts;
}

fn shifted(bits: &[Option<bool>], s: i64) -> Vec<Option<bool>> {
    (0..bits.len() as i64)
        .map(|i| {
            let j = i - s;
            if j >= 0 && (j as usize) < bits.len() {
                bits[j as usize]
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub bits: Vec<Option<bool>>,
    pub per_trace: Vec<AlignedTrace>,
    /// Window shift applied to each trace relative to the first.
    pub shifts: Vec<i64>,
}

/// Decodes one or more traces of the same exponent. Traces after the first
/// are shifted to agree best with the first, then bits are majority-voted;
/// ties stay unknown.
pub fn rsa_decode(traces: &[BitTrace], n_bits: usize, a: &Alignment) -> Result<Decoded, DecodeError> {
    if traces.iter().all(|t| t.observations.is_empty()) {
        return Err(DecodeError::EmptyTrace);
    }
    let per_trace: Vec<AlignedTrace> = traces.iter().map(|t| align_trace(t, n_bits, a)).collect();
    let reference = per_trace[0].bits();
    let mut shifts = vec![0i64];
    let mut aligned = vec![reference.clone()];
    for t in &per_trace[1..] {
        let bits = t.bits();
        let best = (-a.max_shift..=a.max_shift)
            .map(|s| {
                let sb = shifted(&bits, s);
                let agree = sb.iter().zip(&reference).filter(|(x, y)| x.is_some() && x == y).count();
                (agree, -(s.abs()), s)
            })
            .max()
            .map_or(0, |(_, _, s)| s);
        shifts.push(best);
        aligned.push(shifted(&bits, best));
    }
    let bits = (0..n_bits)
        .map(|i| {
            let ones = aligned.iter().filter(|b| b[i] == Some(true)).count();
            let zeros = aligned.iter().filter(|b| b[i] == Some(false)).count();
            match ones.cmp(&zeros) {
                std::cmp::Ordering::Greater => Some(true),
                std::cmp::Ordering::Less => Some(false),
                std::cmp::Ordering::Equal => None,
            }
        })
        .collect();
    Ok(Decoded { bits, per_trace, shifts })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RsaMetrics {
    pub windows: usize,
    pub detected_windows: usize,
    pub detections: usize,
    pub false_detections: usize,
    pub decoded_bits: usize,
    pub correct_bits: usize,
    pub bit_errors: usize,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    /// Fraction of zero bits decoded as zero.
    pub true_positive_rate: f64,
    /// Fraction of one bits decoded as one.
    pub true_negative_rate: f64,
    pub precision: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores decoded bits against the exponent. `true_detection` tells, per
/// raw detection timestamp, which window really caused it (if any).
pub fn rsa_metrics(bits: &[Option<bool>], truth: &[bool], raw_detections: &[u64], true_detection: impl Fn(u64) -> Option<usize>) -> RsaMetrics {
    let mut m = RsaMetrics {
        windows: truth.len(),
        detections: raw_detections.len(),
        ..Default::default()
    };
    let mut seen = vec![false; truth.len()];
    for &d in raw_detections {
        match true_detection(d) {
            Some(i) if i < seen.len() => seen[i] = true,
            _ => m.false_detections += 1,
        }
    }
    m.detected_windows = seen.iter().filter(|&&s| s).count();
    let (mut zeros, mut zero_ok, mut ones, mut one_ok) = (0, 0, 0, 0);
    for (b, &t) in bits.iter().zip(truth) {
        if let Some(b) = b {
            m.decoded_bits += 1;
            if *b == t {
                m.correct_bits += 1;
            } else {
                m.bit_errors += 1;
            }
            if t {
                ones += 1;
                one_ok += (*b == t) as usize;
            } else {
                zeros += 1;
                zero_ok += (*b == t) as usize;
            }
        }
    }
    m.detection_rate = ratio(m.detected_windows, m.windows);
    m.false_positive_rate = ratio(m.false_detections, m.detections);
    m.true_positive_rate = ratio(zero_ok, zeros);
    m.true_negative_rate = ratio(one_ok, ones);
    m.precision = ratio(m.correct_bits, m.decoded_bits);
    m
}
