//! Hierarchical stop-time checks and dual-phase replay localization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ReplayError;
use crate::topology::MachineId;

/// Machine grouping for the two replay phases.
///
/// Phase one groups machine `x` by `x / m` (horizontal), phase two by
/// `x % n` (vertical), with `n = z / m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub z: usize,
    pub m: usize,
    pub n: usize,
}

impl ReplayPlan {
    pub fn new(z: usize, m: usize) -> Result<Self, ReplayError> {
        if m == 0 || z == 0 || !z.is_multiple_of(m) {
            return Err(ReplayError::IndivisibleGroups { z, m });
        }
        Ok(ReplayPlan { z, m, n: z / m })
    }

    /// `m = k * pp_size`, `n = dp_size / k`; machines are whole pipelines.
    pub fn recommended(pp_size: usize, dp_size: usize, k: usize) -> Result<Self, ReplayError> {
        let k = k.max(1);
        Self::new(pp_size * dp_size, k * pp_size)
    }

    pub fn horizontal_groups(&self) -> Vec<Vec<MachineId>> {
        (0..self.n)
            .map(|a| (a * self.m..(a + 1) * self.m).collect())
            .collect()
    }

    pub fn vertical_groups(&self) -> Vec<Vec<MachineId>> {
        (0..self.n)
            .map(|b| (b..self.z).step_by(self.n).collect())
            .collect()
    }

    /// `1` when `m <= n`, else `ceil(m / n)`.
    pub fn expected_cardinality(&self) -> usize {
        if self.m <= self.n {
            1
        } else {
            self.m.div_ceil(self.n)
        }
    }

    pub fn suspects(&self, a: usize, b: usize) -> BTreeSet<MachineId> {
        let first = a * self.m + (b + self.n - (a * self.m) % self.n) % self.n;
        (first..(a + 1) * self.m).step_by(self.n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub plan: ReplayPlan,
    pub horizontal: usize,
    pub vertical: usize,
    pub suspects: BTreeSet<MachineId>,
}

fn failing_group(
    phase: &'static str,
    groups: &[Vec<MachineId>],
    replay: &mut impl FnMut(&[MachineId]) -> bool,
) -> Result<usize, ReplayError> {
    let failed: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| replay(g))
        .map(|(i, _)| i)
        .collect();
    match failed.len() {
        0 => Err(ReplayError::NotReproducible { phase }),
        1 => Ok(failed[0]),
        n if n == groups.len() => Err(ReplayError::AllGroupsFailed { phase }),
        n => Err(ReplayError::MultipleGroupsFailed { phase, failed: n }),
    }
}

/// Runs both replay phases. `replay(group)` returns true when the reduced job
/// replayed on `group` fails.
pub fn locate(
    plan: ReplayPlan,
    mut replay: impl FnMut(&[MachineId]) -> bool,
) -> Result<ReplayOutcome, ReplayError> {
    let a = failing_group("horizontal", &plan.horizontal_groups(), &mut replay)?;
    let b = failing_group("vertical", &plan.vertical_groups(), &mut replay)?;
    Ok(ReplayOutcome {
        plan,
        horizontal: a,
        vertical: b,
        suspects: plan.suspects(a, b),
    })
}

/// Locates a single known faulty machine among `z` machines in groups of `m`.
pub fn dual_phase_replay(z: usize, m: usize, faulty: MachineId) -> Result<ReplayOutcome, ReplayError> {
    let plan = ReplayPlan::new(z, m)?;
    locate(plan, |group| group.contains(&faulty))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagTest {
    /// GPU health check (EUD-like).
    GpuCheck,
    IntraComm,
    InterComm,
    BitwiseAlign,
}

impl DiagTest {
    pub const LADDER: [DiagTest; 3] = [DiagTest::GpuCheck, DiagTest::IntraComm, DiagTest::InterComm];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticVerdict {
    pub test: DiagTest,
    pub tested: BTreeSet<MachineId>,
    pub failed: BTreeSet<MachineId>,
}

impl DiagnosticVerdict {
    pub fn all_passed(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Something that can run a diagnostic test on machines and report which fail.
pub trait TestBench {
    fn run(&mut self, test: DiagTest, machines: &BTreeSet<MachineId>) -> BTreeSet<MachineId>;
}

/// GPU check, then intra-machine, then inter-machine communication tests;
/// stops at the first test that fails any machine.
pub fn diagnose(bench: &mut impl TestBench, machines: &BTreeSet<MachineId>) -> Vec<DiagnosticVerdict> {
    run_ladder(bench, machines, &DiagTest::LADDER)
}

/// The NaN ladder: the standard tests followed by the bit-wise alignment test.
pub fn nan_ladder(bench: &mut impl TestBench, machines: &BTreeSet<MachineId>) -> Vec<DiagnosticVerdict> {
    run_ladder(
        bench,
        machines,
        &[DiagTest::GpuCheck, DiagTest::IntraComm, DiagTest::InterComm, DiagTest::BitwiseAlign],
    )
}

fn run_ladder(
    bench: &mut impl TestBench,
    machines: &BTreeSet<MachineId>,
    tests: &[DiagTest],
) -> Vec<DiagnosticVerdict> {
    let mut out = Vec::new();
    for &test in tests {
        let failed: BTreeSet<MachineId> = bench
            .run(test, machines)
            .into_iter()
            .filter(|m| machines.contains(m))
            .collect();
        let stop = !failed.is_empty();
        out.push(DiagnosticVerdict {
            test,
            tested: machines.clone(),
            failed,
        });
        if stop {
            break;
        }
    }
    out
}

pub fn ladder_failures(verdicts: &[DiagnosticVerdict]) -> BTreeSet<MachineId> {
    verdicts.last().map(|v| v.failed.clone()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Diagnose,
    Reattempt,
    Rollback,
    Replay,
    Resolved,
    Escalated,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Diagnose => "diagnose",
            Stage::Reattempt => "reattempt",
            Stage::Rollback => "rollback",
            Stage::Replay => "replay",
            Stage::Resolved => "resolved",
            Stage::Escalated => "escalated",
        };
        f.write_str(s)
    }
}

/// How an incident was finally resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    EvictRealtime,
    EvictDiagnose,
    Reattempt,
    Rollback,
    Replay,
    Aggregation,
}

impl Resolution {
    pub const ALL: [Resolution; 6] = [
        Resolution::EvictRealtime,
        Resolution::EvictDiagnose,
        Resolution::Reattempt,
        Resolution::Rollback,
        Resolution::Replay,
        Resolution::Aggregation,
    ];
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Resolution::EvictRealtime => "evict-realtime",
            Resolution::EvictDiagnose => "evict-diagnose",
            Resolution::Reattempt => "reattempt",
            Resolution::Rollback => "rollback",
            Resolution::Replay => "replay",
            Resolution::Aggregation => "aggregation",
        };
        f.write_str(s)
    }
}

/// What happened when a stage was executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    /// Diagnose found failing machines; they are evicted and training restarts.
    Evicted { restart_ok: bool },
    /// Diagnose found nothing.
    AllPassed,
    /// A restart (reattempt, rollback, replay eviction) ran; did the job survive?
    Restarted { ok: bool },
    /// Rollback had no earlier code version to revert to.
    NoPreviousVersion,
    /// Replay could not pin the fault to a machine.
    NotLocalized,
}

/// Stop-time state machine.
///
/// On repeated failure of the same incident the stages run
/// diagnose → (evict | reattempt) → rollback → replay → escalated, and each
/// stage is entered at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopTimePipeline {
    pub stage: Stage,
    pub path: Vec<Stage>,
    pub resolution: Option<Resolution>,
}

impl Default for StopTimePipeline {
    fn default() -> Self {
        Self::new()
    }
}

impl StopTimePipeline {
    pub fn new() -> Self {
        Self::starting_at(Stage::Diagnose)
    }

    /// Entry for step 2 (traceable user error) and step 7 (crash after
    /// eviction), both of which go straight to rollback.
    pub fn starting_at(stage: Stage) -> Self {
        StopTimePipeline {
            stage,
            path: vec![stage],
            resolution: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.stage, Stage::Resolved | Stage::Escalated)
    }

    fn enter(&mut self, stage: Stage) {
        debug_assert!(
            matches!(stage, Stage::Resolved | Stage::Escalated) || !self.path.contains(&stage),
            "stage {stage} entered twice"
        );
        self.stage = stage;
        self.path.push(stage);
    }

    fn resolve(&mut self, r: Resolution) {
        self.resolution = Some(r);
        self.enter(Stage::Resolved);
    }

    /// Applies the outcome of the current stage and moves to the next one.
    pub fn advance(&mut self, outcome: StageOutcome) -> Stage {
        use StageOutcome::*;
        match (self.stage, outcome) {
            (Stage::Diagnose, Evicted { restart_ok: true }) => self.resolve(Resolution::EvictDiagnose),
            (Stage::Diagnose, Evicted { restart_ok: false }) => self.enter(Stage::Rollback),
            (Stage::Diagnose, AllPassed) => self.enter(Stage::Reattempt),
            (Stage::Reattempt, Restarted { ok: true }) => self.resolve(Resolution::Reattempt),
            (Stage::Reattempt, _) => self.enter(Stage::Rollback),
            (Stage::Rollback, Restarted { ok: true }) => self.resolve(Resolution::Rollback),
            (Stage::Rollback, _) => self.enter(Stage::Replay),
            (Stage::Replay, Restarted { ok: true }) => self.resolve(Resolution::Replay),
            (Stage::Replay, _) => self.enter(Stage::Escalated),
            (s, o) => panic!("outcome {o:?} is not valid in stage {s}"),
        }
        self.stage
    }

    /// Number of transitions taken so far.
    pub fn transitions(&self) -> usize {
        self.path.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute-force oracle: every machine satisfying both congruences.
    fn brute_suspects(z: usize, m: usize, faulty: usize) -> BTreeSet<usize> {
        let n = z / m;
        (0..z).filter(|x| x / m == faulty / m && x % n == faulty % n).collect()
    }

    #[test]
    fn replay_pinpoints_machine_13() {
        let out = dual_phase_replay(24, 4, 13).unwrap();
        assert_eq!(out.plan.n, 6);
        assert_eq!(out.horizontal, 3);
        assert_eq!(out.vertical, 1);
        assert_eq!(out.suspects, BTreeSet::from([13]));
    }

    #[test]
    fn trivial_and_ambiguous_cases() {
        let out = dual_phase_replay(4, 2, 0).unwrap();
        assert_eq!((out.horizontal, out.vertical), (0, 0));
        assert_eq!(out.suspects, BTreeSet::from([0]));

        let out = dual_phase_replay(12, 6, 4).unwrap();
        assert_eq!((out.horizontal, out.vertical), (0, 0));
        assert_eq!(out.suspects, BTreeSet::from([0, 2, 4]));
        assert_eq!(out.suspects, brute_suspects(12, 6, 4));
        assert_eq!(out.plan.expected_cardinality(), 3);
    }

    #[test]
    fn replay_errors() {
        assert!(matches!(
            dual_phase_replay(10, 3, 0),
            Err(ReplayError::IndivisibleGroups { .. })
        ));
        let plan = ReplayPlan::new(8, 2).unwrap();
        assert!(matches!(
            locate(plan, |_| false),
            Err(ReplayError::NotReproducible { phase: "horizontal" })
        ));
        assert!(matches!(
            locate(plan, |_| true),
            Err(ReplayError::AllGroupsFailed { .. })
        ));
        assert!(matches!(
            locate(plan, |g| g.contains(&0) || g.contains(&7)),
            Err(ReplayError::MultipleGroupsFailed { failed: 2, .. })
        ));
    }

    #[test]
    fn recommended_plan_uses_pipelines() {
        let p = ReplayPlan::recommended(4, 6, 1).unwrap();
        assert_eq!((p.z, p.m, p.n), (24, 4, 6));
    }

    struct Truth(BTreeSet<usize>, DiagTest);
    impl TestBench for Truth {
        fn run(&mut self, test: DiagTest, _: &BTreeSet<usize>) -> BTreeSet<usize> {
            if test == self.1 {
                self.0.clone()
            } else {
                BTreeSet::new()
            }
        }
    }

    #[test]
    fn ladder_stops_at_first_failure() {
        let machines: BTreeSet<usize> = (0..16).collect();
        let v = diagnose(&mut Truth(BTreeSet::from([9]), DiagTest::GpuCheck), &machines);
        assert_eq!(v.len(), 1);
        assert_eq!(ladder_failures(&v), BTreeSet::from([9]));

        let v = diagnose(&mut Truth(BTreeSet::from([13]), DiagTest::BitwiseAlign), &machines);
        assert_eq!(v.len(), 3);
        assert!(ladder_failures(&v).is_empty());

        let v = nan_ladder(&mut Truth(BTreeSet::from([13]), DiagTest::BitwiseAlign), &machines);
        assert_eq!(v.len(), 4);
        assert_eq!(ladder_failures(&v), BTreeSet::from([13]));
    }

    #[test]
    fn pipeline_full_escalation_path() {
        let mut p = StopTimePipeline::new();
        p.advance(StageOutcome::AllPassed);
        p.advance(StageOutcome::Restarted { ok: false });
        p.advance(StageOutcome::Restarted { ok: false });
        p.advance(StageOutcome::NotLocalized);
        assert_eq!(
            p.path,
            vec![Stage::Diagnose, Stage::Reattempt, Stage::Rollback, Stage::Replay, Stage::Escalated]
        );
        assert_eq!(p.transitions(), 4);
        assert!(p.resolution.is_none());
    }

    #[test]
    fn pipeline_rollback_resolves_user_code() {
        let mut p = StopTimePipeline::new();
        p.advance(StageOutcome::AllPassed);
        p.advance(StageOutcome::Restarted { ok: false });
        p.advance(StageOutcome::Restarted { ok: true });
        assert_eq!(p.resolution, Some(Resolution::Rollback));
    }

    #[test]
    fn pipeline_missing_version_goes_to_replay() {
        let mut p = StopTimePipeline::starting_at(Stage::Rollback);
        assert_eq!(p.advance(StageOutcome::NoPreviousVersion), Stage::Replay);
    }

    #[test]
    fn pipeline_eviction_then_crash_rolls_back() {
        let mut p = StopTimePipeline::new();
        assert_eq!(p.advance(StageOutcome::Evicted { restart_ok: false }), Stage::Rollback);
    }
}
