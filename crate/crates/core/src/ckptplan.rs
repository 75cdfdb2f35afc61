//! Over-eviction-aware in-memory checkpointing.
//!
//! Every rank keeps its own shard in host memory and ships a copy to its
//! backup peer (see [`ParallelTopology::backup_plan`]). A shard of step `s`
//! survives an eviction if either holder survives and finished storing it.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::topology::{BackupPlan, MachineId, ParallelTopology, Rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkptPolicy {
    ByterobustAsync,
    MemorySave,
    MegatronBlocking,
}

impl CkptPolicy {
    pub const ALL: [CkptPolicy; 3] = [
        CkptPolicy::ByterobustAsync,
        CkptPolicy::MemorySave,
        CkptPolicy::MegatronBlocking,
    ];
}

/// Per-step durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkptDurations {
    pub d2h_s: f64,
    pub serialize_s: f64,
    pub backup_send_s: f64,
    /// Forward plus backward compute; the window D2H can hide behind.
    pub fwd_bwd_s: f64,
    pub optimizer_s: f64,
    /// Fixed extra cost of the backup send, for modelling bandwidth contention.
    pub backup_overhead_s: f64,
}

impl Default for CkptDurations {
    fn default() -> Self {
        CkptDurations {
            d2h_s: 1.5,
            serialize_s: 5.0,
            backup_send_s: 3.0,
            fwd_bwd_s: 13.5,
            optimizer_s: 1.5,
            backup_overhead_s: 0.0,
        }
    }
}

impl CkptDurations {
    pub fn step_compute_s(&self) -> f64 {
        self.fwd_bwd_s + self.optimizer_s
    }

    /// Delay from the end of a step until its own copy, and then its backup
    /// copy, are complete.
    pub fn copy_lags(&self, policy: CkptPolicy) -> (f64, f64) {
        match policy {
            CkptPolicy::MegatronBlocking => (0.0, 0.0),
            CkptPolicy::MemorySave | CkptPolicy::ByterobustAsync => {
                let own = self.d2h_s + self.serialize_s;
                (own, own + self.backup_send_s + self.backup_overhead_s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTimeline {
    pub step: u64,
    pub start: f64,
    pub d2h_start: f64,
    pub d2h_done: f64,
    pub serialized: f64,
    pub backup_stored: f64,
    pub stall: f64,
    pub end: f64,
}

/// Generates the checkpoint pipeline timeline for `steps` consecutive steps.
///
/// Blocking saves copy and serialize after fwd/bwd while the GPU waits.
/// Memory-save overlaps D2H with fwd/bwd through a single host buffer that is
/// released once serialized. The async pipeline runs D2H on its own channel
/// with two host buffers; a buffer is released when serialized and sent, so
/// step `i`'s D2H waits for step `i - 2`'s buffer.
pub fn timeline(policy: CkptPolicy, d: &CkptDurations, steps: usize) -> Vec<StepTimeline> {
    let mut out: Vec<StepTimeline> = Vec::with_capacity(steps);
    let mut start = 0.0;
    for i in 0..steps {
        let rec = match policy {
            CkptPolicy::MegatronBlocking => {
                let d2h_start = start + d.fwd_bwd_s;
                let d2h_done = d2h_start + d.d2h_s;
                let serialized = d2h_done + d.serialize_s;
                let stall = d.d2h_s + d.serialize_s;
                StepTimeline {
                    step: i as u64,
                    start,
                    d2h_start,
                    d2h_done,
                    serialized,
                    backup_stored: serialized,
                    stall,
                    end: start + d.fwd_bwd_s + stall + d.optimizer_s,
                }
            }
            CkptPolicy::MemorySave | CkptPolicy::ByterobustAsync => {
                let gate = match policy {
                    CkptPolicy::MemorySave => i.checked_sub(1).map(|j| out[j].serialized),
                    _ => i.checked_sub(2).map(|j| out[j].backup_stored),
                }
                .unwrap_or(0.0);
                let d2h_start = start.max(gate);
                let d2h_done = d2h_start + d.d2h_s;
                let optimizer_ready = start + d.fwd_bwd_s;
                let stall = (d2h_done - optimizer_ready).max(0.0);
                let serialized = d2h_done + d.serialize_s;
                StepTimeline {
                    step: i as u64,
                    start,
                    d2h_start,
                    d2h_done,
                    serialized,
                    backup_stored: serialized + d.backup_send_s + d.backup_overhead_s,
                    stall,
                    end: optimizer_ready + stall + d.optimizer_s,
                }
            }
        };
        start = rec.end;
        out.push(rec);
    }
    out
}

/// Stall added to training step `step` (0-based) under `policy`.
pub fn step_stall(policy: CkptPolicy, d: &CkptDurations, step: usize) -> f64 {
    timeline(policy, d, step + 1)[step].stall
}

/// Largest number of checkpoints whose buffer is held at the same instant.
pub fn max_in_flight(tl: &[StepTimeline]) -> usize {
    let mut edges: Vec<(f64, i32)> = tl
        .iter()
        .flat_map(|r| [(r.d2h_start, 1), (r.backup_stored, -1)])
        .collect();
    // Releases sort before acquisitions at equal times.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut cur = 0;
    let mut best = 0;
    for (_, delta) in edges {
        cur += delta;
        best = best.max(cur);
    }
    best as usize
}

pub fn plan_backups(topo: &ParallelTopology) -> Result<BackupPlan, TopologyError> {
    let plan = topo.backup_plan()?;
    debug_assert!(plan.is_involution());
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShardSource {
    OwnCopy,
    BackupCopy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub step: u64,
    pub from_backup: usize,
    pub sources: Vec<ShardSource>,
}

impl RecoveryPoint {
    pub fn source(&self) -> ShardSource {
        if self.from_backup == 0 {
            ShardSource::OwnCopy
        } else {
            ShardSource::BackupCopy
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("in-memory checkpoints lost for rank {rank}; fall back to remote step {remote_step}")]
pub struct Unrecoverable {
    pub rank: Rank,
    pub remote_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCopies {
    pub step: u64,
    /// Sim time (ms) at which the owner's copy is serialized.
    pub own_ready_ms: u64,
    /// Sim time (ms) at which the peer's copy is stored.
    pub backup_ready_ms: u64,
}

/// Per-step completion record for every shard and its backup holder.
///
/// All ranks save in lockstep, so one completion record per step covers every
/// shard; holders differ only by machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardLedger {
    topo: ParallelTopology,
    plan: BackupPlan,
    retain: usize,
    remote_interval: u64,
    steps: VecDeque<StepCopies>,
}

impl ShardLedger {
    pub fn new(topo: ParallelTopology, retain: usize, remote_interval: u64) -> Result<Self, TopologyError> {
        let plan = plan_backups(&topo)?;
        let mut ledger = ShardLedger {
            topo,
            plan,
            retain: retain.max(1),
            remote_interval: remote_interval.max(1),
            steps: VecDeque::new(),
        };
        ledger.reset(0, 0);
        Ok(ledger)
    }

    pub fn plan(&self) -> &BackupPlan {
        &self.plan
    }

    pub fn records(&self) -> impl Iterator<Item = &StepCopies> {
        self.steps.iter()
    }

    /// Forget everything and mark `step` as held by every owner and peer.
    pub fn reset(&mut self, step: u64, now_ms: u64) {
        self.steps.clear();
        self.steps.push_back(StepCopies {
            step,
            own_ready_ms: now_ms,
            backup_ready_ms: now_ms,
        });
    }

    pub fn record(&mut self, copies: StepCopies) {
        self.steps.push_back(copies);
        while self.steps.len() > self.retain {
            self.steps.pop_front();
        }
    }

    pub fn remote_step(&self, last_completed: u64) -> u64 {
        last_completed / self.remote_interval * self.remote_interval
    }

    /// Most recent step whose every shard survives the eviction of `evicted`
    /// (topology machine indices) as of `now_ms`.
    pub fn latest_recoverable(
        &self,
        evicted: &BTreeSet<MachineId>,
        now_ms: u64,
    ) -> Result<RecoveryPoint, Unrecoverable> {
        self.latest_recoverable_up_to(evicted, now_ms, u64::MAX)
    }

    /// As [`latest_recoverable`](Self::latest_recoverable), ignoring steps
    /// after `max_step`.
    pub fn latest_recoverable_up_to(
        &self,
        evicted: &BTreeSet<MachineId>,
        now_ms: u64,
        max_step: u64,
    ) -> Result<RecoveryPoint, Unrecoverable> {
        let rpm = self.topo.ranks_per_machine;
        let mut first_lost = None;
        for rec in self.steps.iter().rev().filter(|r| r.step <= max_step) {
            let mut sources = Vec::with_capacity(self.topo.rank_count());
            let mut lost = None;
            for rank in 0..self.topo.rank_count() {
                let owner_alive = !evicted.contains(&(rank / rpm));
                let backup_alive = !evicted.contains(&(self.plan.peer_of(rank) / rpm));
                if owner_alive && rec.own_ready_ms <= now_ms {
                    sources.push(ShardSource::OwnCopy);
                } else if backup_alive && rec.backup_ready_ms <= now_ms {
                    sources.push(ShardSource::BackupCopy);
                } else {
                    lost = Some(rank);
                    break;
                }
            }
            match lost {
                None => {
                    let from_backup = sources.iter().filter(|s| **s == ShardSource::BackupCopy).count();
                    return Ok(RecoveryPoint {
                        step: rec.step,
                        from_backup,
                        sources,
                    });
                }
                Some(rank) => {
                    first_lost.get_or_insert(rank);
                }
            }
        }
        let newest = self.steps.back().map_or(0, |r| r.step).min(max_step);
        Err(Unrecoverable {
            rank: first_lost.unwrap_or(0),
            remote_step: self.remote_step(newest),
        })
    }
}
