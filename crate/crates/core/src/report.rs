//! Simulation reports: machine-readable JSON plus a plain-text rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ckptplan::CkptPolicy;
use crate::detection::{Action, AlertSource};
use crate::diagnosis::{Resolution, Stage};
use crate::recovery::{HotUpdate, RestartPolicy, WasTable};
use crate::simkernel::{EttrPoint, MachineState, MetricsLedger, SegmentClass};
use crate::topology::MachineId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub event: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncidentOutcome {
    Resolved,
    Escalated,
    /// A tolerated fault cleared before it was acted on.
    SelfRecovered,
    /// The run ended while the incident was open.
    Unfinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentCase {
    pub id: usize,
    /// Fault-script indices behind the incident.
    pub faults: Vec<usize>,
    pub kinds: Vec<String>,
    pub onset_s: f64,
    pub detected_s: f64,
    pub detection_latency_s: f64,
    pub detected_by: AlertSource,
    pub action: Action,
    /// Stop-time stages entered, in order.
    pub stages: Vec<Stage>,
    /// Every controller step taken, in order.
    pub path: Vec<String>,
    /// Topology machine slots evicted while handling the incident.
    pub evicted: BTreeSet<MachineId>,
    /// Physical machines removed from the job.
    pub evicted_machines: BTreeSet<MachineId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suspects: Option<BTreeSet<MachineId>>,
    pub outcome: IncidentOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunOutcome {
    Completed,
    Escalated,
    CapacityExhausted,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub index: usize,
    pub kind: String,
    pub onset_s: f64,
    /// Physical machines hit.
    pub machines: Vec<MachineId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incident: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartKind {
    Failover,
    Reattempt,
    Rollback,
    HotUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub t_s: f64,
    pub kind: RestartKind,
    pub duration_s: f64,
    pub restored_step: u64,
    /// Steps between the restored step and the furthest step ever reached.
    pub recompute_steps: u64,
    /// Restored from the remote tier because in-memory copies were lost.
    pub remote: bool,
    pub machines_replaced: usize,
    pub updates_applied: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub resolution: Resolution,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub policy: CkptPolicy,
    /// Steady-state stall per checkpointed step.
    pub steady_stall_s: f64,
    pub every_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub outcome: RunOutcome,
    pub horizon_steps: u64,
    pub steps_completed: u64,
    pub wall_clock_s: f64,
    pub ettr: f64,
    pub time_by_class_s: BTreeMap<SegmentClass, f64>,
    pub restart_policy: RestartPolicy,
    pub standby_target: usize,
    pub checkpoint: CheckpointSummary,
    pub code_versions: Vec<u32>,
    pub breakdown: Vec<BreakdownRow>,
    pub incidents: Vec<IncidentCase>,
    pub faults: Vec<FaultRecord>,
    pub restarts: Vec<RestartRecord>,
    pub updates: Vec<HotUpdate>,
    pub machines: Vec<MachineState>,
    pub sliding_window_s: f64,
    pub ettr_cumulative: Vec<EttrPoint>,
    pub ettr_sliding: Vec<EttrPoint>,
    pub ledger: MetricsLedger,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub was: Option<WasTable>,
    pub trace: Vec<TraceEvent>,
}

/// Resolved incidents per label, in label order, with shares of the total.
pub fn breakdown(incidents: &[IncidentCase]) -> Vec<BreakdownRow> {
    let resolved: Vec<Resolution> = incidents.iter().filter_map(|i| i.resolution).collect();
    let total = resolved.len();
    Resolution::ALL
        .iter()
        .map(|&r| {
            let count = resolved.iter().filter(|&&x| x == r).count();
            BreakdownRow {
                resolution: r,
                count,
                share: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            }
        })
        .collect()
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario    {} (seed {})", self.scenario, self.seed);
        let _ = writeln!(
            out,
            "outcome     {:?}, {}/{} steps in {:.0} s",
            self.outcome, self.steps_completed, self.horizon_steps, self.wall_clock_s
        );
        let _ = writeln!(out, "ETTR        {:.4}", self.ettr);
        let _ = writeln!(out, "\ntime by class");
        for (class, secs) in &self.time_by_class_s {
            let _ = writeln!(out, "  {:<18} {:>12.1} s", format!("{class:?}"), secs);
        }
        let _ = writeln!(out, "\nresolved incidents");
        for row in &self.breakdown {
            let _ = writeln!(
                out,
                "  {:<18} {:>5}  {:>6.1}%",
                row.resolution.to_string(),
                row.count,
                100.0 * row.share
            );
        }
        if !self.incidents.is_empty() {
            let _ = writeln!(out, "\nincidents");
            for i in &self.incidents {
                let label = i
                    .resolution
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| format!("{:?}", i.outcome).to_lowercase());
                let _ = writeln!(
                    out,
                    "  #{:<4} t={:>9.0}s {:<18} detect {:>6.0}s  {:<16} evicted {:?}",
                    i.id,
                    i.detected_s,
                    i.kinds.join("+"),
                    i.detection_latency_s,
                    label,
                    i.evicted
                );
            }
        }
        if let Some(was) = &self.was {
            out.push('\n');
            out.push_str(&render_was(was));
        }
        out
    }
}

pub fn render_was(was: &WasTable) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>9} {:>5}", "machines", "pool");
    for p in &was.policies {
        let _ = write!(out, " {:>11}", p.to_string());
    }
    out.push('\n');
    for row in &was.rows {
        let _ = write!(out, "{:>9} {:>5}", row.machines, row.pool_size);
        for w in &row.was_s {
            let _ = write!(out, " {:>10.1}s", w);
        }
        out.push('\n');
    }
    out
}

/// `t_s,cumulative,sliding` rows at every ledger boundary.
pub fn ettr_csv(report: &SimReport) -> String {
    let mut out = String::from("t_s,cumulative,sliding\n");
    for (c, s) in report.ettr_cumulative.iter().zip(&report.ettr_sliding) {
        let _ = writeln!(out, "{},{},{}", c.t_s, c.ettr, s.ettr);
    }
    out
}
