//! Stack-trace aggregation and parallel-group over-eviction.
//!
//! Healthy machines in a synchronous job sit in the same code path, so their
//! stacks match exactly once per-machine identifiers are stripped. Machines
//! outside the dominant signature are outliers; the smallest parallel group
//! covering them is evicted as a unit.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::topology::{Axis, GroupRef, MachineId, ParallelTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessRole {
    Trainer,
    Dataloader,
    Checkpointer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessStack {
    pub role: ProcessRole,
    pub frames: Vec<String>,
}

impl ProcessStack {
    pub fn trainer<S: Into<String>>(frames: impl IntoIterator<Item = S>) -> Self {
        ProcessStack {
            role: ProcessRole::Trainer,
            frames: frames.into_iter().map(Into::into).collect(),
        }
    }
}

/// Stacks captured from every training pod at one instant.
///
/// This is also the on-disk fixture format: a JSON object mapping machine id
/// to its process stacks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSnapshot {
    pub machines: BTreeMap<MachineId, Vec<ProcessStack>>,
}

impl StackSnapshot {
    pub fn insert(&mut self, machine: MachineId, stack: ProcessStack) {
        self.machines.entry(machine).or_default().push(stack);
    }
}

static ADDRESS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"0x[0-9a-fA-F]+").unwrap());
static RANK_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(rank|pid|tid|local_rank|device|cuda)([ =:_]*)\d+").unwrap());
static ENDPOINT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b\d{1,3}(\.\d{1,3}){3}(:\d+)?\b").unwrap());

/// Strips per-machine identifiers (addresses, rank/pid numbers, endpoints).
pub fn normalize_frame(frame: &str) -> String {
    let s = ADDRESS.replace_all(frame, "0x_");
    let s = ENDPOINT.replace_all(&s, "<addr>");
    let s = RANK_ID.replace_all(&s, "${1}${2}_");
    s.trim().to_string()
}

fn signature(stacks: &[&ProcessStack]) -> String {
    let mut per_process: Vec<String> = stacks
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| normalize_frame(f))
                .collect::<Vec<_>>()
                .join(" <- ")
        })
        .collect();
    per_process.sort();
    per_process.join(" || ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleGrouping {
    pub role: ProcessRole,
    pub groups: BTreeMap<String, BTreeSet<MachineId>>,
    pub dominant: Vec<String>,
    pub outliers: BTreeSet<MachineId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackGrouping {
    pub roles: Vec<RoleGrouping>,
    pub contributors: BTreeSet<MachineId>,
    /// Union of outliers over all roles.
    pub outliers: BTreeSet<MachineId>,
    /// Smallest dominant share over the roles.
    pub confidence: f64,
}

impl StackGrouping {
    pub fn is_inconclusive(&self) -> bool {
        self.outliers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregationError {
    #[error("stack snapshot is empty")]
    EmptySnapshot,
    #[error("no outliers to isolate")]
    NoOutliers,
    #[error("no group was flagged in any fail-slow round")]
    NeverFlagged,
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Groups machines by exact signature per process role.
///
/// The largest group of each role is dominant; equal-size leaders are all
/// dominant. Everything else is an outlier.
pub fn cluster(snapshot: &StackSnapshot) -> Result<StackGrouping, AggregationError> {
    if snapshot.machines.is_empty() {
        return Err(AggregationError::EmptySnapshot);
    }
    let roles: BTreeSet<ProcessRole> = snapshot
        .machines
        .values()
        .flat_map(|stacks| stacks.iter().map(|s| s.role))
        .collect();
    let mut out = Vec::new();
    let mut all_outliers = BTreeSet::new();
    let mut confidence: f64 = 1.0;
    for role in roles {
        let mut groups: BTreeMap<String, BTreeSet<MachineId>> = BTreeMap::new();
        for (&machine, stacks) in &snapshot.machines {
            let mine: Vec<&ProcessStack> = stacks.iter().filter(|s| s.role == role).collect();
            if mine.is_empty() {
                continue;
            }
            groups.entry(signature(&mine)).or_default().insert(machine);
        }
        let top = groups.values().map(BTreeSet::len).max().unwrap_or(0);
        let total: usize = groups.values().map(BTreeSet::len).sum();
        let dominant: Vec<String> = groups
            .iter()
            .filter(|(_, m)| m.len() == top)
            .map(|(s, _)| s.clone())
            .collect();
        let outliers: BTreeSet<MachineId> = groups
            .iter()
            .filter(|(_, m)| m.len() != top)
            .flat_map(|(_, m)| m.iter().copied())
            .collect();
        confidence = confidence.min((top * dominant.len()) as f64 / total.max(1) as f64);
        all_outliers.extend(outliers.iter().copied());
        out.push(RoleGrouping {
            role,
            groups,
            dominant,
            outliers,
        });
    }
    Ok(StackGrouping {
        roles: out,
        contributors: snapshot.machines.keys().copied().collect(),
        outliers: all_outliers,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isolation {
    pub group: Option<GroupRef>,
    pub machines: BTreeSet<MachineId>,
}

/// Machines to evict for the grouping's outliers: the smallest parallel group
/// covering them, or the outlier machines themselves when none does.
pub fn isolate(grouping: &StackGrouping, topo: &ParallelTopology) -> Result<Isolation, AggregationError> {
    if grouping.outliers.is_empty() {
        return Err(AggregationError::NoOutliers);
    }
    match topo.shared_group_for_machines(&grouping.outliers)? {
        Some(g) => {
            let mut machines: BTreeSet<MachineId> = topo.group_machines(g)?.into_iter().collect();
            machines.extend(grouping.outliers.iter().copied());
            Ok(Isolation {
                group: Some(g),
                machines,
            })
        }
        None => Ok(Isolation {
            group: None,
            machines: grouping.outliers.clone(),
        }),
    }
}

pub const FAIL_SLOW_ROUNDS: usize = 5;
pub const FAIL_SLOW_INTERVAL_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailSlowVerdict {
    /// PP group flagged in each round, if any.
    pub round_flags: Vec<Option<usize>>,
    pub flag_counts: BTreeMap<usize, usize>,
    pub group: GroupRef,
    pub machines: BTreeSet<MachineId>,
}

fn pp_groups_of_machine(topo: &ParallelTopology, m: MachineId) -> BTreeSet<usize> {
    topo.ranks_of(m)
        .filter_map(|r| topo.group_of(Axis::Pp, r).ok())
        .map(|g| topo.pp_group_index(g))
        .collect()
}

/// Flags, for one snapshot, the PP group holding the most outlier machines.
pub fn flag_round(snapshot: &StackSnapshot, topo: &ParallelTopology) -> Result<Option<usize>, AggregationError> {
    let grouping = cluster(snapshot)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &m in &grouping.outliers {
        for g in pp_groups_of_machine(topo, m) {
            *counts.entry(g).or_default() += 1;
        }
    }
    Ok(argmax_lowest(&counts))
}

fn argmax_lowest(counts: &BTreeMap<usize, usize>) -> Option<usize> {
    let best = counts.values().copied().max()?;
    counts.iter().find(|(_, &c)| c == best).map(|(&g, _)| g)
}

/// Repeated aggregation for throughput degradation: the PP group flagged in
/// the most rounds is the degrader; ties go to the lowest group index.
pub fn fail_slow_rounds(
    rounds: &[StackSnapshot],
    topo: &ParallelTopology,
) -> Result<FailSlowVerdict, AggregationError> {
    let round_flags = rounds
        .iter()
        .map(|s| flag_round(s, topo))
        .collect::<Result<Vec<_>, _>>()?;
    let mut flag_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in round_flags.iter().flatten() {
        *flag_counts.entry(*g).or_default() += 1;
    }
    let idx = argmax_lowest(&flag_counts).ok_or(AggregationError::NeverFlagged)?;
    let group = topo.groups(Axis::Pp)[idx];
    let machines = topo.group_machines(group)?.into_iter().collect();
    Ok(FailSlowVerdict {
        round_flags,
        flag_counts,
        group,
        machines,
    })
}

pub const HEALTHY_TRAINER_STACK: [&str; 4] = [
    "train.py:main",
    "megatron/training.py:train_step",
    "megatron/optimizer.py:step",
    "torch/distributed:reduce_scatter_tensor",
];

/// Stack emitted by a healthy trainer.
pub fn healthy_trainer() -> ProcessStack {
    ProcessStack::trainer(HEALTHY_TRAINER_STACK)
}

/// Trainer blocked in `leaf` (e.g. `isend`, `irecv`).
pub fn stuck_trainer(leaf: &str) -> ProcessStack {
    ProcessStack::trainer([
        "train.py:main",
        "megatron/training.py:train_step",
        "megatron/schedules.py:backward_step",
        &format!("torch/distributed:{leaf}"),
    ])
}

/// The backward-communication hang snapshot: machines 0..12 finished backward
/// and wait in optimizer sync, 12 and 13 are in `irecv`, 14 in `isend`, and 15
/// in `all_gather_into_tensor`.
pub fn hang_snapshot() -> StackSnapshot {
    let mut s = StackSnapshot::default();
    for m in 0..16 {
        let stack = match m {
            12 | 13 => stuck_trainer("irecv"),
            14 => stuck_trainer("isend"),
            15 => stuck_trainer("all_gather_into_tensor"),
            _ => healthy_trainer(),
        };
        s.insert(m, stack);
    }
    s
}
