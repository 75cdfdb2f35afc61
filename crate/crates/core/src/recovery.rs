//! Controlled restart: hot updates, warm standbys, and restart-cost baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::topology::MachineId;

/// Log-probability mass of Binomial(n, p) for every k in 0..=n.
///
/// Built from the ratio recurrence in log space, so it neither underflows for
/// large `n` nor needs factorials.
fn binomial_log_pmf(n: u64, p: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut lp = n as f64 * (-p).ln_1p();
    let log_odds = p.ln() - (-p).ln_1p();
    out.push(lp);
    for k in 0..n {
        lp += ((n - k) as f64).ln() - ((k + 1) as f64).ln() + log_odds;
        out.push(lp);
    }
    out
}

/// Probability mass of Binomial(n, p), exact up to floating-point rounding.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[n as usize] = 1.0;
        return v;
    }
    let lps = binomial_log_pmf(n, p);
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lps.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Smallest `s` such that P[Binomial(n, p) <= s] >= q.
pub fn size_pool(n: u64, p: f64, q: f64) -> u64 {
    assert!((0.0..=1.0).contains(&p), "p must be a probability");
    assert!(n >= 1, "machine count must be positive");
    let mut cdf = 0.0;
    for (k, mass) in binomial_pmf(n, p).into_iter().enumerate() {
        cdf += mass;
        if cdf >= q {
            return k as u64;
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Urgency {
    Urgent,
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateTrigger {
    UrgentSubmit,
    Failover,
    WindowExpiry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotUpdate {
    pub id: usize,
    pub urgency: Urgency,
    pub submitted_at_ms: u64,
    pub applied_at_ms: Option<u64>,
    pub applied_via: Option<UpdateTrigger>,
}

/// Pending and applied code updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateQueue {
    pub window_ms: u64,
    pub updates: Vec<HotUpdate>,
}

impl UpdateQueue {
    pub fn new(window_ms: u64) -> Self {
        UpdateQueue {
            window_ms,
            updates: Vec::new(),
        }
    }

    pub fn submit(&mut self, urgency: Urgency, now_ms: u64) -> usize {
        let id = self.updates.len();
        self.updates.push(HotUpdate {
            id,
            urgency,
            submitted_at_ms: now_ms,
            applied_at_ms: None,
            applied_via: None,
        });
        id
    }

    pub fn pending(&self) -> impl Iterator<Item = &HotUpdate> {
        self.updates.iter().filter(|u| u.applied_at_ms.is_none())
    }

    pub fn expiry_ms(&self, id: usize) -> u64 {
        self.updates[id].submitted_at_ms + self.window_ms
    }

    /// Marks the updates selected by `trigger` as applied at `now_ms`.
    ///
    /// `UrgentSubmit` and `WindowExpiry` carry the update that caused them;
    /// a failover applies every pending lazy update.
    pub fn apply(&mut self, trigger: UpdateTrigger, target: Option<usize>, now_ms: u64) -> Vec<usize> {
        let window = self.window_ms;
        let selected: Vec<usize> = self
            .updates
            .iter()
            .filter(|u| u.applied_at_ms.is_none())
            .filter(|u| match trigger {
                UpdateTrigger::UrgentSubmit => Some(u.id) == target,
                UpdateTrigger::Failover => u.urgency == Urgency::Lazy,
                UpdateTrigger::WindowExpiry => {
                    Some(u.id) == target || u.submitted_at_ms + window <= now_ms
                }
            })
            .map(|u| u.id)
            .collect();
        for &id in &selected {
            let u = &mut self.updates[id];
            u.applied_at_ms = Some(now_ms);
            u.applied_via = Some(trigger);
        }
        selected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum StandbyState {
    Initializing { ready_at_ms: u64 },
    Warm,
}

/// Warm standby machines kept in low-power sleep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandbyPool {
    pub target: usize,
    pub members: BTreeMap<MachineId, StandbyState>,
}

impl StandbyPool {
    pub fn new(target: usize) -> Self {
        StandbyPool {
            target,
            members: BTreeMap::new(),
        }
    }

    pub fn warm_count(&self) -> usize {
        self.members.values().filter(|s| **s == StandbyState::Warm).count()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn deficit(&self) -> usize {
        self.target.saturating_sub(self.members.len())
    }

    pub fn add_warm(&mut self, m: MachineId) {
        assert!(self.members.len() < self.target, "pool would exceed its target");
        self.members.insert(m, StandbyState::Warm);
    }

    pub fn add_initializing(&mut self, m: MachineId, ready_at_ms: u64) {
        assert!(self.members.len() < self.target, "pool would exceed its target");
        self.members.insert(m, StandbyState::Initializing { ready_at_ms });
    }

    /// Returns true if `m` was initializing in the pool and is now warm.
    pub fn mark_ready(&mut self, m: MachineId) -> bool {
        match self.members.get_mut(&m) {
            Some(s @ StandbyState::Initializing { .. }) => {
                *s = StandbyState::Warm;
                true
            }
            _ => false,
        }
    }

    /// Removes up to `n` warm members, lowest id first.
    pub fn take_warm(&mut self, n: usize) -> Vec<MachineId> {
        let picked: Vec<MachineId> = self
            .members
            .iter()
            .filter(|(_, s)| **s == StandbyState::Warm)
            .map(|(&m, _)| m)
            .take(n)
            .collect();
        for m in &picked {
            self.members.remove(m);
        }
        picked
    }
}

/// Restart cost parameters, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestartParams {
    pub wake_latency_s: f64,
    pub fresh_init_s: f64,
    pub restore_s: f64,
    pub hot_update_restart_s: f64,
    /// Full-job requeue cost by machine count, interpolated linearly.
    pub requeue_points: Vec<(u64, f64)>,
    /// In-place hot-update scheduling cost by machine count.
    pub hot_update_points: Vec<(u64, f64)>,
}

impl Default for RestartParams {
    fn default() -> Self {
        RestartParams {
            wake_latency_s: 50.0,
            fresh_init_s: 320.0,
            restore_s: 10.0,
            hot_update_restart_s: 60.0,
            requeue_points: vec![(128, 454.0), (256, 545.0), (512, 635.0), (1024, 768.0)],
            hot_update_points: vec![(128, 46.0), (256, 51.0), (512, 54.0), (1024, 65.0)],
        }
    }
}

/// Piecewise-linear interpolation, extrapolating from the end segments.
pub fn interpolate(points: &[(u64, f64)], x: u64) -> f64 {
    match points {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            let idx = points
                .windows(2)
                .position(|w| x <= w[1].0)
                .unwrap_or(points.len() - 2);
            let (x0, y0) = points[idx];
            let (x1, y1) = points[idx + 1];
            let t = (x as f64 - x0 as f64) / (x1 as f64 - x0 as f64);
            y0 + t * (y1 - y0)
        }
    }
}

impl RestartParams {
    pub fn requeue_s(&self, machines: u64) -> f64 {
        interpolate(&self.requeue_points, machines)
    }

    pub fn hot_update_s(&self, machines: u64) -> f64 {
        interpolate(&self.hot_update_points, machines)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartPolicy {
    Requeue,
    Reschedule,
    Oracle,
    Ours,
}

impl RestartPolicy {
    pub const ALL: [RestartPolicy; 4] = [
        RestartPolicy::Requeue,
        RestartPolicy::Reschedule,
        RestartPolicy::Oracle,
        RestartPolicy::Ours,
    ];
}

impl std::str::FromStr for RestartPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "requeue" => Ok(RestartPolicy::Requeue),
            "reschedule" => Ok(RestartPolicy::Reschedule),
            "oracle" => Ok(RestartPolicy::Oracle),
            "ours" => Ok(RestartPolicy::Ours),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

impl std::fmt::Display for RestartPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RestartPolicy::Requeue => "requeue",
            RestartPolicy::Reschedule => "reschedule",
            RestartPolicy::Oracle => "oracle",
            RestartPolicy::Ours => "ours",
        })
    }
}

/// How a failover sources replacement machines and how long it takes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailoverTiming {
    pub from_pool: usize,
    pub fresh: usize,
    /// Seconds until every replacement is ready to train.
    pub schedule_s: f64,
}

/// Warm standbys first; any shortfall is scheduled fresh and the job waits
/// for all of them.
pub fn failover_timing(evictions: usize, warm: usize, params: &RestartParams) -> FailoverTiming {
    let from_pool = evictions.min(warm);
    let fresh = evictions - from_pool;
    let schedule_s = if fresh == 0 {
        params.wake_latency_s
    } else {
        params.wake_latency_s.max(params.fresh_init_s)
    };
    FailoverTiming {
        from_pool,
        fresh,
        schedule_s,
    }
}

/// Scheduling time from failure detection until the job resumes.
pub fn baseline_restart(
    policy: RestartPolicy,
    evictions: usize,
    warm: usize,
    job_machines: u64,
    params: &RestartParams,
) -> f64 {
    match policy {
        RestartPolicy::Requeue => params.requeue_s(job_machines),
        RestartPolicy::Reschedule => params.fresh_init_s,
        RestartPolicy::Oracle => params.wake_latency_s,
        RestartPolicy::Ours => failover_timing(evictions, warm, params).schedule_s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasScale {
    pub machines: u64,
    pub daily_fail_prob: f64,
    pub catastrophic_machines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasRow {
    pub machines: u64,
    pub pool_size: u64,
    /// Seconds per policy, in the order of [`WasTable::policies`].
    pub was_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasTable {
    pub policies: Vec<RestartPolicy>,
    pub catastrophic_weight: f64,
    pub rows: Vec<WasRow>,
}

impl WasTable {
    pub fn get(&self, machines: u64, policy: RestartPolicy) -> Option<f64> {
        let col = self.policies.iter().position(|p| *p == policy)?;
        let row = self.rows.iter().find(|r| r.machines == machines)?;
        Some(row.was_s[col])
    }
}

/// Default evaluation scales: 128 to 1024 machines, 32-machine catastrophes.
pub fn default_was_scales(daily_fail_prob: f64) -> Vec<WasScale> {
    [128, 256, 512, 1024]
        .into_iter()
        .map(|machines| WasScale {
            machines,
            daily_fail_prob,
            catastrophic_machines: 32,
        })
        .collect()
}

/// Weighted-average scheduling time.
///
/// Evictions of 1..=P99 machines are weighted by their binomial mass
/// (renormalized to `1 - catastrophic_weight`); a catastrophic eviction of
/// `catastrophic_machines` carries the remaining weight.
pub fn was_table(
    scales: &[WasScale],
    policies: &[RestartPolicy],
    q: f64,
    catastrophic_weight: f64,
    params: &RestartParams,
) -> WasTable {
    let rows = scales
        .iter()
        .map(|s| {
            let pool = size_pool(s.machines, s.daily_fail_prob, q);
            let top = pool.max(1) as usize;
            let pmf = binomial_pmf(s.machines, s.daily_fail_prob);
            let mass: f64 = (1..=top).map(|k| pmf.get(k).copied().unwrap_or(0.0)).sum();
            let weights: Vec<(usize, f64)> = if mass > 0.0 {
                (1..=top)
                    .map(|k| (k, (1.0 - catastrophic_weight) * pmf[k] / mass))
                    .collect()
            } else {
                vec![(1, 1.0 - catastrophic_weight)]
            };
            let was_s = policies
                .iter()
                .map(|&policy| {
                    let cost = |k: usize| baseline_restart(policy, k, pool as usize, s.machines, params);
                    let regular: f64 = weights.iter().map(|&(k, w)| w * cost(k)).sum();
                    regular + catastrophic_weight * cost(s.catastrophic_machines)
                })
                .collect();
            WasRow {
                machines: s.machines,
                pool_size: pool,
                was_s,
            }
        })
        .collect();
    WasTable {
        policies: policies.to_vec(),
        catastrophic_weight,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_size_edge_cases() {
        assert_eq!(size_pool(1024, 0.0, 0.99), 0);
        assert_eq!(size_pool(1, 1.0, 0.99), 1);
        assert_eq!(size_pool(1024, 0.001, 0.99), 4);
    }

    #[test]
    fn pmf_sums_to_one_without_underflow() {
        let pmf = binomial_pmf(4096, 0.5);
        let total: f64 = pmf.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(pmf[2048] > 0.0);
    }

    #[test]
    fn lazy_updates_ride_the_next_failover() {
        let mut q = UpdateQueue::new(86_400_000);
        let lazy = q.submit(Urgency::Lazy, 0);
        let urgent = q.submit(Urgency::Urgent, 100);
        assert_eq!(q.apply(UpdateTrigger::UrgentSubmit, Some(urgent), 100), vec![urgent]);
        assert_eq!(q.apply(UpdateTrigger::Failover, None, 7_200_000), vec![lazy]);
        assert!(q.apply(UpdateTrigger::Failover, None, 8_000_000).is_empty());
        assert_eq!(q.updates[lazy].applied_via, Some(UpdateTrigger::Failover));
    }

    #[test]
    fn window_expiry_applies_only_expired() {
        let mut q = UpdateQueue::new(86_400_000);
        let a = q.submit(Urgency::Lazy, 0);
        let _b = q.submit(Urgency::Lazy, 1_000);
        assert_eq!(q.expiry_ms(a), 86_400_000);
        assert_eq!(q.apply(UpdateTrigger::WindowExpiry, Some(a), 86_400_000), vec![a]);
        assert_eq!(q.pending().count(), 1);
    }

    #[test]
    fn pool_take_and_replenish() {
        let mut pool = StandbyPool::new(4);
        for m in 100..104 {
            pool.add_warm(m);
        }
        let got = pool.take_warm(2);
        assert_eq!(got, vec![100, 101]);
        assert_eq!(pool.deficit(), 2);
        pool.add_initializing(200, 5_000);
        assert_eq!(pool.warm_count(), 2);
        assert!(pool.mark_ready(200));
        assert_eq!(pool.warm_count(), 3);
    }

    #[test]
    fn failover_shortfall_waits_for_fresh_init() {
        let p = RestartParams::default();
        let t = failover_timing(2, 4, &p);
        assert_eq!((t.from_pool, t.fresh, t.schedule_s), (2, 0, p.wake_latency_s));
        let t = failover_timing(6, 4, &p);
        assert_eq!((t.from_pool, t.fresh, t.schedule_s), (4, 2, p.fresh_init_s));
        let t = failover_timing(32, 4, &p);
        assert_eq!(t.fresh, 28);
    }

    #[test]
    fn baselines_follow_measured_points() {
        let p = RestartParams::default();
        assert_eq!(baseline_restart(RestartPolicy::Requeue, 1, 4, 1024, &p), 768.0);
        assert_eq!(p.hot_update_s(128), 46.0);
        assert_eq!(p.requeue_s(384), 590.0);
        for k in [1, 3, 7, 32] {
            assert_eq!(baseline_restart(RestartPolicy::Oracle, k, 0, 512, &p), p.wake_latency_s);
        }
    }

    #[test]
    fn single_policy_table_has_one_column() {
        let t = was_table(
            &default_was_scales(0.001),
            &[RestartPolicy::Ours],
            0.99,
            0.01,
            &RestartParams::default(),
        );
        assert!(t.rows.iter().all(|r| r.was_s.len() == 1));
    }
}
