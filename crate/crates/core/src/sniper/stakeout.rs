use super::{AttackPlan, Observation, ShootMethod, SniperError, Validity, Verdict};

/// One replica run as seen from the detection timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileSample {
    pub detect: u64,
    /// First cycle at which the target line may be out of the cache.
    pub target: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VictimProfile {
    pub samples: Vec<ProfileSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StakeoutReport {
    pub wait_time: u64,
    pub recovery_delay: u64,
    pub target_distance: i64,
    pub end_distance: i64,
}

fn median(mut v: Vec<i64>) -> i64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Turns replica measurements into a wait: the median distance from
/// detection to the target, minus the time the shoot needs to take effect.
/// `shoot_latency` is that time for `method`; `margin` is added to the end
/// distance for the recovery probe.
pub fn stakeout(profile: &VictimProfile, plan: &AttackPlan, shoot_latency: u64, margin: u64) -> Result<StakeoutReport, SniperError> {
    if profile.samples.is_empty() {
        return Err(SniperError::EmptyProfile);
    }
    let target_distance = median(profile.samples.iter().map(|s| s.target as i64 - s.detect as i64).collect());
    let end_distance = median(profile.samples.iter().map(|s| s.end as i64 - s.detect as i64).collect());
    let earliest = plan.handler_overhead + shoot_latency;
    if target_distance < earliest as i64 {
        return Err(SniperError::WindowTooEarly {
            distance: target_distance,
            earliest,
        });
    }
    let wait_time = target_distance as u64 - shoot_latency;
    let recovery_delay = (end_distance.max(0) as u64 + margin).max(wait_time + shoot_latency + 1);
    Ok(StakeoutReport {
        wait_time,
        recovery_delay,
        target_distance,
        end_distance,
    })
}

/// Shoot latency of a method under the given flush and memory costs.
pub fn shoot_latency(method: ShootMethod, flush_cycles: u64, mem: u64) -> u64 {
    match method {
        ShootMethod::Method1Flush => flush_cycles,
        ShootMethod::Method2Access => mem,
    }
}

/// Moves the wait toward the target share of `NotAccessed` verdicts among
/// the valid samples of `window`.
pub fn adapt_wait_time(window: &[Observation], plan: &AttackPlan) -> u64 {
    let valid: Vec<&Observation> = window.iter().filter(|o| o.validity == Validity::Valid && o.verdict != Verdict::Invalid).collect();
    if valid.is_empty() {
        return plan.wait_time;
    }
    let misses = valid.iter().filter(|o| o.verdict == Verdict::NotAccessed).count();
    let rate = misses as f64 / valid.len() as f64;
    let w = if rate > plan.target_miss_rate + plan.miss_rate_tolerance {
        (plan.wait_time as f64 * plan.step_down).floor() as u64
    } else if rate < plan.target_miss_rate - plan.miss_rate_tolerance {
        plan.wait_time + plan.step_up
    } else {
        plan.wait_time
    };
    w.clamp(plan.wait_floor, plan.wait_ceiling)
}
