//! Proactive real-time checks: periodic inspections, metric monitors, and
//! classification of alerts into controller actions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::topology::MachineId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InspectionItem {
    Nic,
    NetworkPort,
    Switch,
    GpuDriver,
    GpuTemp,
    GpuLost,
    OsKernel,
    PcieBandwidth,
    RowRemap,
    PacketLoss,
}

impl InspectionItem {
    /// Network items may recover on their own and get a tolerance window.
    pub fn is_network(self) -> bool {
        matches!(
            self,
            InspectionItem::Nic | InspectionItem::NetworkPort | InspectionItem::Switch | InspectionItem::PacketLoss
        )
    }
}

impl fmt::Display for InspectionItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    EvictNow,
    Tolerate,
    StopTime,
    AggregationTrigger,
    Rollback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectionRule {
    pub item: InspectionItem,
    pub interval_s: f64,
    /// Consecutive positive polls before an alert is raised.
    pub threshold: u32,
}

impl InspectionRule {
    pub fn interval_ms(&self) -> u64 {
        (self.interval_s * 1000.0).round() as u64
    }

    /// Worst-case delay from onset to alert when onsets fall on poll ticks.
    pub fn worst_case_latency_ms(&self) -> u64 {
        self.interval_ms() * self.threshold as u64
    }
}

/// Inspection rules with the production defaults.
pub fn default_rules() -> Vec<InspectionRule> {
    use InspectionItem::*;
    [
        (Nic, 30.0, 1),
        (NetworkPort, 30.0, 1),
        (Switch, 30.0, 2),
        (GpuDriver, 10.0, 1),
        (GpuTemp, 10.0, 1),
        (GpuLost, 10.0, 1),
        (OsKernel, 2.0, 1),
    ]
    .into_iter()
    .map(|(item, interval_s, threshold)| InspectionRule {
        item,
        interval_s,
        threshold,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Loss,
    GradNorm,
    RdmaTraffic,
    TensorcoreUtil,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricRule {
    Nan,
    /// Value exceeds `factor` times the previous sample.
    RatioSpike { factor: f64 },
    /// Value stays at zero for `duration_s`.
    ZeroFor { duration_s: f64 },
    /// Value at or below `fraction` of the trailing `window`-sample median for
    /// `consecutive` samples.
    BelowMedian { fraction: f64, window: usize, consecutive: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricMonitor {
    pub metric: Metric,
    pub rule: MetricRule,
}

impl MetricMonitor {
    pub fn action(&self) -> Action {
        match self.rule {
            MetricRule::Nan | MetricRule::RatioSpike { .. } => Action::StopTime,
            MetricRule::ZeroFor { .. } | MetricRule::BelowMedian { .. } => Action::AggregationTrigger,
        }
    }
}

pub fn default_monitors() -> Vec<MetricMonitor> {
    vec![
        MetricMonitor {
            metric: Metric::Loss,
            rule: MetricRule::Nan,
        },
        MetricMonitor {
            metric: Metric::Loss,
            rule: MetricRule::RatioSpike { factor: 5.0 },
        },
        MetricMonitor {
            metric: Metric::GradNorm,
            rule: MetricRule::RatioSpike { factor: 5.0 },
        },
        MetricMonitor {
            metric: Metric::RdmaTraffic,
            rule: MetricRule::ZeroFor { duration_s: 600.0 },
        },
        MetricMonitor {
            metric: Metric::TensorcoreUtil,
            rule: MetricRule::BelowMedian {
                fraction: 0.5,
                window: 10,
                consecutive: 3,
            },
        },
    ]
}

/// Bounded sample history for one monitor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    history: VecDeque<(u64, f64)>,
    streak: usize,
    zero_since_ms: Option<u64>,
}

impl MonitorState {
    /// Feeds one sample; returns true when the rule trips on it.
    pub fn observe(&mut self, rule: &MetricRule, now_ms: u64, value: f64) -> bool {
        let tripped = match *rule {
            MetricRule::Nan => value.is_nan(),
            MetricRule::RatioSpike { factor } => self
                .history
                .back()
                .is_some_and(|&(_, prev)| prev > 0.0 && value > factor * prev),
            MetricRule::ZeroFor { duration_s } => {
                if value == 0.0 {
                    let since = *self.zero_since_ms.get_or_insert(now_ms);
                    now_ms.saturating_sub(since) as f64 >= duration_s * 1000.0
                } else {
                    self.zero_since_ms = None;
                    false
                }
            }
            MetricRule::BelowMedian {
                fraction,
                window,
                consecutive,
            } => {
                let trailing: Vec<f64> = self
                    .history
                    .iter()
                    .rev()
                    .take(window)
                    .map(|&(_, v)| v)
                    .collect();
                let low = !trailing.is_empty() && value <= fraction * median(&trailing);
                self.streak = if low { self.streak + 1 } else { 0 };
                self.streak >= consecutive
            }
        };
        self.history.push_back((now_ms, value));
        while self.history.len() > 16 {
            self.history.pop_front();
        }
        tripped
    }

    /// Marks the start of a zero run that began before the first sample.
    pub fn zero_since(&mut self, onset_ms: u64) {
        if self.zero_since_ms.is_none_or(|s| s > onset_ms) {
            self.zero_since_ms = Some(onset_ms);
        }
    }

    pub fn reset(&mut self) {
        *self = MonitorState::default();
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlertSource {
    Inspection { item: InspectionItem },
    Metric { metric: Metric },
    /// Error log; `module` is set when the error traces to a code module.
    Log { module: Option<String> },
    /// Collective-communication timeout.
    CommTimeout,
    /// Throughput monitor window elapsed with a decline.
    MfuMonitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Confidence {
    MachineAttributed,
    Unattributed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub time_ms: u64,
    pub machines: BTreeSet<MachineId>,
    pub source: AlertSource,
    pub confidence: Confidence,
    /// Metric rule that fired, for metric alerts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

impl Alert {
    pub fn attributed(time_ms: u64, machines: BTreeSet<MachineId>, source: AlertSource) -> Self {
        debug_assert!(!machines.is_empty());
        Alert {
            time_ms,
            machines,
            source,
            confidence: Confidence::MachineAttributed,
            rule: None,
        }
    }

    pub fn job_level(time_ms: u64, source: AlertSource) -> Self {
        Alert {
            time_ms,
            machines: BTreeSet::new(),
            source,
            confidence: Confidence::Unattributed,
            rule: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkTolerance {
    pub alerts: usize,
    pub window_s: f64,
}

impl Default for NetworkTolerance {
    fn default() -> Self {
        NetworkTolerance {
            alerts: 2,
            window_s: 300.0,
        }
    }
}

/// Maps an alert to a controller action, given recent alerts.
///
/// Pure in `(alert, history)`; `history` holds earlier alerts only.
pub fn classify(alert: &Alert, history: &[Alert], tolerance: &NetworkTolerance) -> Action {
    match &alert.source {
        AlertSource::Inspection { item } if item.is_network() => {
            let window_ms = (tolerance.window_s * 1000.0) as u64;
            let prior = history
                .iter()
                .filter(|h| {
                    h.time_ms <= alert.time_ms
                        && alert.time_ms - h.time_ms <= window_ms
                        && matches!(&h.source, AlertSource::Inspection { item: i } if i.is_network())
                        && !h.machines.is_disjoint(&alert.machines)
                })
                .count();
            if prior + 1 >= tolerance.alerts {
                Action::EvictNow
            } else {
                Action::Tolerate
            }
        }
        AlertSource::Inspection { .. } => Action::EvictNow,
        AlertSource::Log { module: Some(_) } => Action::Rollback,
        AlertSource::Log { module: None } | AlertSource::CommTimeout => Action::StopTime,
        AlertSource::Metric { metric } => match metric {
            Metric::Loss | Metric::GradNorm => Action::StopTime,
            Metric::RdmaTraffic | Metric::TensorcoreUtil => Action::AggregationTrigger,
        },
        AlertSource::MfuMonitor => Action::AggregationTrigger,
    }
}

/// Detection settings; every field can be overridden from a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub inspections_enabled: bool,
    pub rules: Vec<InspectionRule>,
    pub monitors: Vec<MetricMonitor>,
    pub metric_sample_s: f64,
    pub comm_timeout_s: f64,
    pub mfu_monitor_s: f64,
    /// Delay from a crash until its error log is visible; defaults to one step.
    pub log_latency_s: Option<f64>,
    pub network_tolerance: NetworkTolerance,
    /// Alerts older than this are dropped from the classifier history.
    pub history_s: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            inspections_enabled: true,
            rules: default_rules(),
            monitors: default_monitors(),
            metric_sample_s: 60.0,
            comm_timeout_s: 600.0,
            mfu_monitor_s: 600.0,
            log_latency_s: None,
            network_tolerance: NetworkTolerance::default(),
            history_s: 3600.0,
        }
    }
}

impl DetectionConfig {
    pub fn rule(&self, item: InspectionItem) -> Option<&InspectionRule> {
        if !self.inspections_enabled {
            return None;
        }
        self.rules.iter().find(|r| r.item == item)
    }
}

/// What a poll can see: machines with an active fault on an inspection item,
/// with the fault's onset.
pub trait InspectionView {
    fn inspectable(&self, item: InspectionItem) -> Vec<(MachineId, u64)>;
}

/// Poll state: consecutive positive readings per (item, machine).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inspector {
    streaks: BTreeMap<(InspectionItem, MachineId), u32>,
}

impl Inspector {
    /// Runs one poll of `rule` at `now_ms`. A fault is visible once its onset
    /// is strictly before the poll.
    pub fn poll(&mut self, rule: &InspectionRule, view: &impl InspectionView, now_ms: u64) -> Vec<Alert> {
        let visible: BTreeSet<MachineId> = view
            .inspectable(rule.item)
            .into_iter()
            .filter(|&(_, onset)| onset < now_ms)
            .map(|(m, _)| m)
            .collect();
        self.streaks
            .retain(|(item, m), _| *item != rule.item || visible.contains(m));
        let mut alerts = Vec::new();
        for m in visible {
            let streak = self.streaks.entry((rule.item, m)).or_insert(0);
            *streak += 1;
            if *streak >= rule.threshold {
                alerts.push(Alert::attributed(
                    now_ms,
                    BTreeSet::from([m]),
                    AlertSource::Inspection { item: rule.item },
                ));
            }
        }
        alerts
    }

    pub fn forget_machine(&mut self, m: MachineId) {
        self.streaks.retain(|(_, mm), _| *mm != m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct View(Vec<(InspectionItem, MachineId, u64)>);
    impl InspectionView for View {
        fn inspectable(&self, item: InspectionItem) -> Vec<(MachineId, u64)> {
            self.0
                .iter()
                .filter(|(i, _, _)| *i == item)
                .map(|&(_, m, t)| (m, t))
                .collect()
        }
    }

    fn rule(item: InspectionItem) -> InspectionRule {
        *default_rules().iter().find(|r| r.item == item).unwrap()
    }

    #[test]
    fn nic_crash_alerts_on_the_next_poll() {
        let r = rule(InspectionItem::Nic);
        let view = View(vec![(InspectionItem::Nic, 5, 0)]);
        let mut ins = Inspector::default();
        assert!(ins.poll(&r, &view, 0).is_empty());
        let alerts = ins.poll(&r, &view, 30_000);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].machines, BTreeSet::from([5]));
        assert_eq!(alerts[0].confidence, Confidence::MachineAttributed);
    }

    #[test]
    fn switch_down_needs_two_consecutive_polls() {
        let r = rule(InspectionItem::Switch);
        let view = View(vec![(InspectionItem::Switch, 3, 0)]);
        let mut ins = Inspector::default();
        assert!(ins.poll(&r, &view, 30_000).is_empty());
        assert_eq!(ins.poll(&r, &view, 60_000).len(), 1);
        assert_eq!(r.worst_case_latency_ms(), 60_000);
    }

    #[test]
    fn os_kernel_fault_within_two_seconds() {
        let r = rule(InspectionItem::OsKernel);
        let view = View(vec![(InspectionItem::OsKernel, 1, 100_000)]);
        let mut ins = Inspector::default();
        assert_eq!(ins.poll(&r, &view, 102_000).len(), 1);
    }

    #[test]
    fn streak_resets_when_fault_clears() {
        let r = rule(InspectionItem::Switch);
        let mut ins = Inspector::default();
        assert!(ins.poll(&r, &View(vec![(InspectionItem::Switch, 3, 0)]), 30_000).is_empty());
        assert!(ins.poll(&r, &View(vec![]), 60_000).is_empty());
        assert!(ins.poll(&r, &View(vec![(InspectionItem::Switch, 3, 0)]), 90_000).is_empty());
    }

    fn alert(item: InspectionItem, t: u64, m: MachineId) -> Alert {
        Alert::attributed(t, BTreeSet::from([m]), AlertSource::Inspection { item })
    }

    #[test]
    fn classification_table() {
        let tol = NetworkTolerance::default();
        assert_eq!(classify(&alert(InspectionItem::GpuLost, 0, 1), &[], &tol), Action::EvictNow);
        assert_eq!(
            classify(&alert(InspectionItem::NetworkPort, 0, 1), &[], &tol),
            Action::Tolerate
        );
        let nan = Alert::job_level(0, AlertSource::Metric { metric: Metric::Loss });
        assert_eq!(classify(&nan, &[], &tol), Action::StopTime);
        let bug = Alert::job_level(0, AlertSource::Log { module: Some("fused_attn".into()) });
        assert_eq!(classify(&bug, &[], &tol), Action::Rollback);
        let rdma = Alert::job_level(0, AlertSource::Metric { metric: Metric::RdmaTraffic });
        assert_eq!(classify(&rdma, &[], &tol), Action::AggregationTrigger);
    }

    #[test]
    fn second_network_alert_within_window_evicts() {
        let tol = NetworkTolerance::default();
        let first = alert(InspectionItem::NetworkPort, 0, 4);
        let second = alert(InspectionItem::NetworkPort, 30_000, 4);
        assert_eq!(classify(&second, std::slice::from_ref(&first), &tol), Action::EvictNow);
        let late = alert(InspectionItem::NetworkPort, 301_000, 4);
        assert_eq!(classify(&late, std::slice::from_ref(&first), &tol), Action::Tolerate);
        let other = alert(InspectionItem::NetworkPort, 30_000, 9);
        assert_eq!(classify(&other, &[first], &tol), Action::Tolerate);
    }

    #[test]
    fn tensorcore_decline_needs_three_low_samples() {
        let rule = MetricRule::BelowMedian {
            fraction: 0.5,
            window: 10,
            consecutive: 3,
        };
        let mut st = MonitorState::default();
        for i in 0..10 {
            assert!(!st.observe(&rule, i * 60_000, 1.0));
        }
        assert!(!st.observe(&rule, 600_000, 0.5));
        assert!(!st.observe(&rule, 660_000, 0.5));
        assert!(st.observe(&rule, 720_000, 0.5));
    }

    #[test]
    fn zero_rdma_for_ten_minutes() {
        let rule = MetricRule::ZeroFor { duration_s: 600.0 };
        let mut st = MonitorState::default();
        st.zero_since(0);
        assert!(!st.observe(&rule, 540_000, 0.0));
        assert!(st.observe(&rule, 600_000, 0.0));
    }

    #[test]
    fn ratio_spike() {
        let rule = MetricRule::RatioSpike { factor: 5.0 };
        let mut st = MonitorState::default();
        assert!(!st.observe(&rule, 0, 2.0));
        assert!(!st.observe(&rule, 1, 9.0));
        assert!(st.observe(&rule, 2, 46.0));
    }
}
