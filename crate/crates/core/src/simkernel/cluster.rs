//! Machines, their health, and fault injection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::fault::{FaultKind, JobEffect, Observability};
use crate::detection::{DetectionConfig, InspectionItem, InspectionView, Metric};
use crate::error::ScriptError;
use crate::topology::{MachineId, ParallelTopology, Rank};

pub type SimTime = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum Health {
    Healthy,
    Degraded { slowdown: f64 },
    Faulty { kind: String },
    Evicted,
    StandbyWarm,
    StandbyInitializing,
    /// Spare capacity outside the job and the warm pool.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub id: MachineId,
    pub health: Health,
    /// Topology slot this machine fills, if it is part of the job.
    pub slot: Option<MachineId>,
    pub ranks: Vec<Rank>,
}

/// A fault after onset, bound to physical machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveFault {
    /// Index into the scenario's fault script.
    pub index: usize,
    pub kind: FaultKind,
    pub machines: Vec<MachineId>,
    pub onset_ms: SimTime,
    pub end_ms: Option<SimTime>,
    /// Code version a code-bound fault lives in.
    pub version: Option<u32>,
}

impl ActiveFault {
    pub fn is_active(&self, now: SimTime) -> bool {
        self.onset_ms <= now && self.end_ms.is_none_or(|e| now < e)
    }
}

/// Where a fault shows up and how long after it starts affecting the job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "kebab-case")]
pub enum Signal {
    Inspection { item: InspectionItem, machines: BTreeSet<MachineId>, after_ms: u64 },
    Log { module: Option<String>, after_ms: u64 },
    CommTimeout { after_ms: u64 },
    MfuMonitor { after_ms: u64 },
    Metric { metric: Metric, after_ms: u64 },
    StackSignature { machines: BTreeSet<MachineId> },
}

pub struct ClusterState {
    pub topo: ParallelTopology,
    pub machines: Vec<MachineState>,
    /// Physical machine in each topology slot.
    pub slots: Vec<MachineId>,
    pub faults: Vec<ActiveFault>,
}

fn ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

impl ClusterState {
    /// Job machines fill slots `0..n`; `spares` idle machines follow.
    pub fn new(topo: ParallelTopology, spares: usize) -> Self {
        let n = topo.machine_count();
        let machines = (0..n + spares)
            .map(|id| MachineState {
                id,
                health: if id < n { Health::Healthy } else { Health::Idle },
                slot: (id < n).then_some(id),
                ranks: if id < n { topo.ranks_of(id).collect() } else { Vec::new() },
            })
            .collect();
        ClusterState {
            topo,
            machines,
            slots: (0..n).collect(),
            faults: Vec::new(),
        }
    }

    pub fn slot_of(&self, m: MachineId) -> Option<MachineId> {
        self.machines.get(m).and_then(|s| s.slot)
    }

    pub fn in_job(&self, m: MachineId) -> bool {
        self.slot_of(m).is_some()
    }

    /// Physical machine ids for topology slots.
    pub fn occupants(&self, slots: &[MachineId]) -> Vec<MachineId> {
        slots.iter().map(|&s| self.slots[s]).collect()
    }

    pub fn active_faults(&self, now: SimTime) -> impl Iterator<Item = &ActiveFault> {
        self.faults.iter().filter(move |f| f.is_active(now))
    }

    pub fn faults_on(&self, m: MachineId, now: SimTime) -> impl Iterator<Item = &ActiveFault> {
        self.active_faults(now).filter(move |f| f.machines.contains(&m))
    }

    /// Registers a fault at `now` and returns the signals it will emit once
    /// it reaches the job.
    pub fn inject(
        &mut self,
        fault: ActiveFault,
        detection: &DetectionConfig,
        step_ms: u64,
        now: SimTime,
    ) -> Result<Vec<Signal>, ScriptError> {
        for &m in &fault.machines {
            let state = self.machines.get(m).ok_or(ScriptError::NoSuchMachine(m))?;
            if state.health == Health::Evicted {
                return Err(ScriptError::Evicted(m));
            }
        }
        let signals = signals_for(&fault, detection, step_ms);
        let targets = fault.machines.clone();
        self.faults.push(fault);
        for m in targets {
            self.refresh_health(m, now);
        }
        Ok(signals)
    }

    /// Recomputes a job or standby machine's health from its active faults.
    pub fn refresh_health(&mut self, m: MachineId, now: SimTime) {
        if !matches!(
            self.machines[m].health,
            Health::Healthy | Health::Degraded { .. } | Health::Faulty { .. }
        ) {
            return;
        }
        let mut slowdown: Option<f64> = None;
        let mut faulty = None;
        for f in self.faults_on(m, now) {
            match f.kind.job_effect() {
                JobEffect::Degrade(s) => slowdown = Some(slowdown.map_or(s, |x: f64| x.min(s))),
                _ => {
                    faulty.get_or_insert_with(|| f.kind.name().to_string());
                }
            }
        }
        self.machines[m].health = match (faulty, slowdown) {
            (Some(kind), _) => Health::Faulty { kind },
            (None, Some(slowdown)) => Health::Degraded { slowdown },
            (None, None) => Health::Healthy,
        };
    }

    /// Moves `incoming` into `slot` and marks the previous occupant evicted.
    pub fn replace(&mut self, slot: MachineId, incoming: MachineId, now: SimTime) -> MachineId {
        let outgoing = self.slots[slot];
        let ranks = std::mem::take(&mut self.machines[outgoing].ranks);
        self.machines[outgoing].slot = None;
        self.machines[outgoing].health = Health::Evicted;
        self.machines[incoming].slot = Some(slot);
        self.machines[incoming].ranks = ranks;
        self.machines[incoming].health = Health::Healthy;
        self.slots[slot] = incoming;
        self.refresh_health(incoming, now);
        outgoing
    }

    pub fn set_health(&mut self, m: MachineId, health: Health) {
        self.machines[m].health = health;
    }

    pub fn is_clean(&self, m: MachineId, now: SimTime) -> bool {
        self.faults_on(m, now).next().is_none()
    }
}

/// Active-fault view for one poll instant.
pub struct PollView<'a> {
    pub cluster: &'a ClusterState,
    pub now: SimTime,
}

impl InspectionView for PollView<'_> {
    fn inspectable(&self, item: InspectionItem) -> Vec<(MachineId, u64)> {
        self.cluster
            .active_faults(self.now)
            .filter(|f| f.kind.inspection_item() == Some(item))
            .flat_map(|f| f.machines.iter().map(move |&m| (m, f.onset_ms)))
            .filter(|(m, _)| self.cluster.in_job(*m))
            .collect()
    }
}

fn signals_for(f: &ActiveFault, d: &DetectionConfig, step_ms: u64) -> Vec<Signal> {
    let machines: BTreeSet<MachineId> = f.machines.iter().copied().collect();
    let mut out = Vec::new();
    let rule = f.kind.inspection_item().and_then(|item| d.rule(item));
    if let (Some(item), Some(rule)) = (f.kind.inspection_item(), rule) {
        out.push(Signal::Inspection {
            item,
            machines: machines.clone(),
            after_ms: rule.worst_case_latency_ms(),
        });
    }
    let sample_ms = ms(d.metric_sample_s);
    match f.kind.job_effect() {
        JobEffect::Block => {
            if let FaultKind::Hang { .. } = f.kind {
                out.push(Signal::Metric {
                    metric: Metric::RdmaTraffic,
                    after_ms: sample_ms,
                });
                out.push(Signal::StackSignature { machines });
            } else {
                out.push(Signal::CommTimeout {
                    after_ms: ms(d.comm_timeout_s),
                });
            }
        }
        JobEffect::Crash => {
            let module = match &f.kind {
                FaultKind::UserCodeBug { module } => module.clone(),
                _ => None,
            };
            out.push(Signal::Log {
                module,
                after_ms: d.log_latency_s.map_or(step_ms, ms),
            });
        }
        JobEffect::Degrade(_) => {
            if f.kind.observability() == Observability::Inspectable && rule.is_none() {
                out.push(Signal::MfuMonitor {
                    after_ms: ms(d.mfu_monitor_s),
                });
            }
            out.push(Signal::Metric {
                metric: Metric::TensorcoreUtil,
                after_ms: sample_ms,
            });
            out.push(Signal::Metric {
                metric: Metric::RdmaTraffic,
                after_ms: sample_ms,
            });
        }
        JobEffect::Corrupt { nan_delay_ms } => out.push(Signal::Metric {
            metric: Metric::Loss,
            after_ms: nan_delay_ms + sample_ms,
        }),
        JobEffect::Nan => out.push(Signal::Metric {
            metric: Metric::Loss,
            after_ms: sample_ms,
        }),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster() -> ClusterState {
        ClusterState::new(ParallelTopology::new(2, 4, 2, 2).unwrap(), 2)
    }

    fn fault(kind: FaultKind, machines: Vec<MachineId>) -> ActiveFault {
        ActiveFault {
            index: 0,
            kind,
            machines,
            onset_ms: 0,
            end_ms: None,
            version: None,
        }
    }

    #[test]
    fn nic_crash_reports_on_inspection() {
        let mut c = cluster();
        let s = c
            .inject(fault(FaultKind::NicCrash, vec![5]), &DetectionConfig::default(), 15_000, 0)
            .unwrap();
        assert_eq!(
            s[0],
            Signal::Inspection {
                item: InspectionItem::Nic,
                machines: BTreeSet::from([5]),
                after_ms: 30_000
            }
        );
        assert_eq!(c.machines[5].health, Health::Faulty { kind: "nic-crash".into() });
    }

    #[test]
    fn sdc_emits_only_delayed_loss() {
        let mut c = cluster();
        let s = c
            .inject(
                fault(FaultKind::Sdc { nan_delay_s: 300.0 }, vec![3]),
                &DetectionConfig::default(),
                15_000,
                0,
            )
            .unwrap();
        assert_eq!(
            s,
            vec![Signal::Metric {
                metric: Metric::Loss,
                after_ms: 360_000
            }]
        );
    }

    #[test]
    fn fail_slow_degrades() {
        let mut c = cluster();
        c.inject(
            fault(FaultKind::FailSlow { slowdown: 0.5 }, vec![7]),
            &DetectionConfig::default(),
            15_000,
            0,
        )
        .unwrap();
        assert_eq!(c.machines[7].health, Health::Degraded { slowdown: 0.5 });
    }

    #[test]
    fn evicted_target_is_a_script_error() {
        let mut c = cluster();
        c.replace(1, 8, 0);
        let err = c
            .inject(fault(FaultKind::GpuLost, vec![1]), &DetectionConfig::default(), 15_000, 0)
            .unwrap_err();
        assert_eq!(err, ScriptError::Evicted(1));
        assert_eq!(
            c.inject(fault(FaultKind::GpuLost, vec![42]), &DetectionConfig::default(), 15_000, 0)
                .unwrap_err(),
            ScriptError::NoSuchMachine(42)
        );
    }

    #[test]
    fn replace_moves_ranks() {
        let mut c = cluster();
        let out = c.replace(3, 9, 0);
        assert_eq!(out, 3);
        assert!(c.machines[3].ranks.is_empty());
        assert_eq!(c.machines[9].ranks, vec![6, 7]);
        assert_eq!(c.slots[3], 9);
    }
}
