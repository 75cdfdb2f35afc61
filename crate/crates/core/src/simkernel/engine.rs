//! The event loop and the controller that reacts to alerts.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cluster::{ActiveFault, ClusterState, Health, PollView, Signal, SimTime};
use super::fault::{FaultKind, JobEffect};
use super::ledger::{ettr, final_ettr, EttrMode, MetricsLedger, SegmentClass};
use crate::aggregation::{
    cluster as cluster_stacks, fail_slow_rounds, healthy_trainer, isolate, stuck_trainer, ProcessStack,
    StackSnapshot, FAIL_SLOW_INTERVAL_MS, FAIL_SLOW_ROUNDS,
};
use crate::ckptplan::{step_stall, CkptPolicy, ShardLedger, StepCopies};
use crate::detection::{classify, Action, Alert, AlertSource, Inspector, Metric, MetricRule, MonitorState};
use crate::diagnosis::{
    diagnose, ladder_failures, locate, nan_ladder, DiagTest, ReplayOutcome, ReplayPlan, Resolution,
    Stage, StageOutcome, StopTimePipeline, TestBench,
};
use crate::error::{ReplayError, Result};
use crate::recovery::{
    baseline_restart, failover_timing, size_pool, RestartPolicy, StandbyPool, UpdateQueue, UpdateTrigger, Urgency,
};
use crate::report::{
    breakdown, CheckpointSummary, FaultRecord, IncidentCase, IncidentOutcome, RestartKind, RestartRecord,
    RunOutcome, SimReport, TraceEvent,
};
use crate::scenario::ScenarioConfig;
use crate::topology::{MachineId, ParallelTopology};

fn ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

fn secs(t: SimTime) -> f64 {
    t as f64 / 1000.0
}

#[derive(Debug, Clone)]
enum Ev {
    StepDone { gen: u64 },
    FaultOnset { fault: usize },
    FaultEnd { fault: usize },
    Poll { rule: usize },
    MetricSample,
    JobSignal { fault: usize, gen: u64, signal: Signal },
    NanAppear { fault: usize, gen: u64 },
    Control { token: u64 },
    UpdateRestartDone { gen: u64 },
    StandbyReady { machine: MachineId },
    QuarantineEnd { machine: MachineId },
    UpdateSubmit { update: usize },
    UpdateExpiry { id: usize },
}

struct Queued {
    time: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Min-heap on (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum JobState {
    Running { start: SimTime, compute_ms: u64 },
    /// Stalled by an undetected fault.
    Blocked { since: SimTime },
    /// Held by the controller.
    Suspended,
    Done,
}

/// Training job progress.
#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub step: u64,
    pub high_water: u64,
    pub versions: Vec<u32>,
    pub restored_from: Option<u64>,
    state: JobState,
    gen: u64,
    since_restart: usize,
    halted_at: SimTime,
    nan: Option<(SimTime, u64)>,
    next_version: u32,
}

#[derive(Debug, Clone, Default)]
struct FaultRt {
    slot: Option<usize>,
    gen: u64,
    incident: Option<usize>,
    signals: Vec<Signal>,
}

#[derive(Debug, Clone)]
enum After {
    /// Restart closing a stop-time stage.
    Stage(Stage),
    /// Restart after a direct eviction; on failure go to rollback.
    Direct(Resolution),
}

#[derive(Debug, Clone)]
enum Phase {
    Tolerating,
    Capture,
    FailSlow { snapshots: Vec<StackSnapshot> },
    DiagnoseDone { failed: BTreeSet<MachineId> },
    ReplayDone { result: std::result::Result<ReplayOutcome, ReplayError> },
    Restarting { after: After },
    Remanifest { after: After },
}

struct Current {
    id: usize,
    causes: Vec<usize>,
    phase: Phase,
    pipeline: Option<StopTimePipeline>,
    nan: bool,
    /// Versions in the stack when the incident opened.
    base_versions: usize,
    token: u64,
}

struct Bench<'a> {
    cluster: &'a ClusterState,
    cfg: &'a ScenarioConfig,
    rng: &'a mut ChaCha8Rng,
    now: SimTime,
}

impl TestBench for Bench<'_> {
    fn run(&mut self, test: DiagTest, slots: &BTreeSet<MachineId>) -> BTreeSet<MachineId> {
        let d = &self.cfg.diagnosis;
        let mut out = BTreeSet::new();
        for &slot in slots {
            let m = self.cluster.slots[slot];
            let hit = self.cluster.faults_on(m, self.now).any(|f| {
                if !f.kind.visible_to(test) {
                    return false;
                }
                let recall = match (&f.kind, test) {
                    (FaultKind::Sdc { .. }, DiagTest::BitwiseAlign) => d.align_recall,
                    (FaultKind::Sdc { .. }, DiagTest::GpuCheck) => d.sdc_gpu_check_recall,
                    _ => 1.0,
                };
                roll(self.rng, recall * (1.0 - d.false_negative_rate))
            });
            if hit {
                out.insert(slot);
            }
        }
        out
    }
}

fn roll(rng: &mut ChaCha8Rng, p: f64) -> bool {
    if p >= 1.0 {
        true
    } else if p <= 0.0 {
        false
    } else {
        rng.gen_bool(p)
    }
}

/// Replay groups of `k * pp_size` machines when that divides the job,
/// otherwise the largest divisor not above the square root.
pub fn replay_plan(topo: &ParallelTopology, k: usize) -> std::result::Result<ReplayPlan, ReplayError> {
    let z = topo.machine_count();
    let m = k * topo.pp_size;
    if m <= z && z.is_multiple_of(m) {
        return ReplayPlan::new(z, m);
    }
    let d = (1..=z).filter(|d| d * d <= z && z.is_multiple_of(*d)).max().unwrap_or(1);
    ReplayPlan::new(z, d)
}

const SLOW_KERNEL_STACK: [&str; 4] = [
    "train.py:main",
    "megatron/training.py:train_step",
    "megatron/schedules.py:forward_step",
    "torch/cuda:gemm_kernel",
];

const NOISE_STACK: [&str; 3] = ["train.py:main", "megatron/data:next_batch", "torch/utils/data:_get_data"];

struct Simulator<'a> {
    cfg: &'a ScenarioConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued>,
    time_limit: SimTime,
    step_ms: u64,
    stalls_ms: Vec<u64>,
    copy_lags_ms: (u64, u64),
    cluster: ClusterState,
    pool: StandbyPool,
    updates: UpdateQueue,
    ckpt: ShardLedger,
    job: TrainingJob,
    ledger: MetricsLedger,
    idle_class: SegmentClass,
    trace: Vec<TraceEvent>,
    inspector: Inspector,
    polling: Vec<bool>,
    monitors: Vec<MonitorState>,
    history: Vec<Alert>,
    queued: VecDeque<(Alert, Vec<usize>)>,
    incidents: Vec<IncidentCase>,
    current: Option<Current>,
    update_restart: Option<u64>,
    faults: Vec<FaultRt>,
    onsets: Vec<SimTime>,
    restarts: Vec<RestartRecord>,
    rng_diag: ChaCha8Rng,
    rng_stacks: ChaCha8Rng,
    outcome: Option<RunOutcome>,
}

/// Runs a scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<SimReport> {
    cfg.validate()?;
    let mut sim = Simulator::new(cfg)?;
    sim.run();
    Ok(sim.report())
}

impl<'a> Simulator<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let topo = cfg.topology;
        let machines = topo.machine_count();
        let spares = cfg.recovery.spare_machines.unwrap_or(machines);
        let step_ms = ms(cfg.step_duration_s);
        let d = cfg.checkpoint.durations(cfg.step_duration_s);
        let policy = cfg.checkpoint.policy;
        let stalls_ms = (0..64).map(|k| ms(step_stall(policy, &d, k))).collect();
        let (own, backup) = d.copy_lags(policy);
        let pool_target = cfg
            .recovery
            .pool_size
            .unwrap_or_else(|| size_pool(machines as u64, cfg.recovery.fail_prob, cfg.recovery.quantile) as usize);
        let mut rng_jitter = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_jitter.set_stream(1);
        let mut rng_diag = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_diag.set_stream(2);
        let mut rng_stacks = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_stacks.set_stream(3);
        let onsets = cfg
            .faults
            .iter()
            .map(|f| {
                let jitter = f.jitter_s.map_or(0, |j| {
                    let j = ms(j);
                    if j == 0 {
                        0
                    } else {
                        rng_jitter.gen_range(0..j)
                    }
                });
                ms(f.onset_s) + jitter
            })
            .collect();
        let horizon_ms = cfg.horizon_steps.saturating_mul(step_ms);
        let mut sim = Simulator {
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            time_limit: horizon_ms.saturating_mul(20).saturating_add(30 * 86_400_000),
            step_ms,
            stalls_ms,
            copy_lags_ms: (ms(own), ms(backup)),
            cluster: ClusterState::new(topo, spares),
            pool: StandbyPool::new(pool_target),
            updates: UpdateQueue::new(ms(cfg.recovery.update_window_s)),
            ckpt: ShardLedger::new(topo, cfg.checkpoint.retain, cfg.checkpoint.remote_interval)?,
            job: TrainingJob {
                step: 0,
                high_water: 0,
                versions: cfg.code_versions.clone(),
                restored_from: None,
                state: JobState::Suspended,
                gen: 0,
                since_restart: 0,
                halted_at: 0,
                nan: None,
                next_version: cfg.code_versions.iter().max().map_or(1, |v| v + 1),
            },
            ledger: MetricsLedger::new(),
            idle_class: SegmentClass::Failover,
            trace: Vec::new(),
            inspector: Inspector::default(),
            polling: vec![false; cfg.detection.rules.len()],
            monitors: vec![MonitorState::default(); cfg.detection.monitors.len()],
            history: Vec::new(),
            queued: VecDeque::new(),
            incidents: Vec::new(),
            current: None,
            update_restart: None,
            faults: vec![FaultRt::default(); cfg.faults.len()],
            onsets,
            restarts: Vec::new(),
            rng_diag,
            rng_stacks,
            outcome: None,
        };
        for _ in 0..pool_target {
            match sim.idle_machine() {
                Some(m) => {
                    sim.pool.add_warm(m);
                    sim.cluster.set_health(m, Health::StandbyWarm);
                }
                None => break,
            }
        }
        Ok(sim)
    }

    fn push(&mut self, time: SimTime, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued { time, seq: self.seq, ev });
    }

    fn note(&mut self, event: &str, detail: impl Into<String>) {
        let detail = detail.into();
        debug!("t={:.3}s {event} {detail}", secs(self.now));
        self.trace.push(TraceEvent {
            t_ms: self.now,
            event: event.to_string(),
            detail,
        });
    }

    fn run(&mut self) {
        self.note(
            "run-start",
            format!(
                "{} machines, {} steps of {} s",
                self.cfg.topology.machine_count(),
                self.cfg.horizon_steps,
                self.cfg.step_duration_s
            ),
        );
        if self.cfg.horizon_steps == 0 {
            self.finish(RunOutcome::Completed);
            return;
        }
        for i in 0..self.cfg.faults.len() {
            self.push(self.onsets[i], Ev::FaultOnset { fault: i });
        }
        for (i, u) in self.cfg.updates.iter().enumerate() {
            self.push(ms(u.submit_at_s), Ev::UpdateSubmit { update: i });
        }
        self.push(ms(self.cfg.detection.metric_sample_s), Ev::MetricSample);
        self.job.state = JobState::Suspended;
        self.start_running();
        while self.outcome.is_none() {
            let Some(q) = self.queue.pop() else {
                self.finish(RunOutcome::TimeLimit);
                break;
            };
            if q.time > self.time_limit {
                self.now = self.time_limit;
                self.finish(RunOutcome::TimeLimit);
                break;
            }
            self.now = q.time;
            self.dispatch(q.ev);
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::StepDone { gen } => self.on_step_done(gen),
            Ev::FaultOnset { fault } => self.on_fault_onset(fault),
            Ev::FaultEnd { fault } => self.on_fault_end(fault),
            Ev::Poll { rule } => self.on_poll(rule),
            Ev::MetricSample => self.on_metric_sample(),
            Ev::JobSignal { fault, gen, signal } => self.on_job_signal(fault, gen, signal),
            Ev::NanAppear { fault, gen } => self.on_nan_appear(fault, gen),
            Ev::Control { token } => self.on_control(token),
            Ev::UpdateRestartDone { gen } => self.on_update_restart_done(gen),
            Ev::StandbyReady { machine } => {
                if self.pool.mark_ready(machine) {
                    self.cluster.set_health(machine, Health::StandbyWarm);
                    self.note("standby-ready", format!("machine {machine}"));
                }
            }
            Ev::QuarantineEnd { machine } => {
                self.cluster.set_health(machine, Health::Idle);
                self.note("quarantine-end", format!("machine {machine}"));
                self.replenish();
            }
            Ev::UpdateSubmit { update } => self.on_update_submit(update),
            Ev::UpdateExpiry { id } => self.on_update_expiry(id),
        }
    }

    // ---- ledger and job state ----

    /// Books time since the ledger end while the job is not stepping.
    fn settle(&mut self) {
        if !matches!(self.job.state, JobState::Running { .. }) {
            self.ledger.extend_to(self.now, self.idle_class);
        }
    }

    fn set_idle_class(&mut self, class: SegmentClass) {
        self.settle();
        self.idle_class = class;
    }

    /// Stops stepping; the partial step is booked as `class`.
    fn halt(&mut self, class: SegmentClass) {
        if let JobState::Running { .. } = self.job.state {
            self.ledger.extend_to(self.now, class);
            self.job.gen += 1;
            self.job.halted_at = self.now;
            self.job.state = JobState::Suspended;
        }
    }

    fn block(&mut self) {
        if let JobState::Running { .. } = self.job.state {
            self.halt(SegmentClass::Detection);
            self.job.state = JobState::Blocked { since: self.now };
            self.idle_class = SegmentClass::Detection;
            self.note("job-blocked", format!("step {}", self.job.step));
        }
    }

    fn suspend(&mut self, class: SegmentClass) {
        match self.job.state {
            JobState::Running { .. } => {
                self.halt(SegmentClass::Detection);
                self.idle_class = class;
            }
            JobState::Blocked { .. } => {
                self.set_idle_class(class);
                self.job.state = JobState::Suspended;
            }
            JobState::Suspended => self.set_idle_class(class),
            JobState::Done => {}
        }
    }

    fn slowdown(&self) -> f64 {
        self.cluster
            .active_faults(self.now)
            .filter(|f| self.affects_job(f))
            .filter_map(|f| match f.kind.job_effect() {
                JobEffect::Degrade(s) => Some(s),
                _ => None,
            })
            .fold(1.0, f64::min)
    }

    fn start_step(&mut self) {
        let compute_ms = (self.step_ms as f64 / self.slowdown()).ceil() as u64;
        let next = self.job.step + 1;
        let stall = if next.is_multiple_of(self.cfg.checkpoint.every_steps) {
            self.stalls_ms[self.job.since_restart.min(self.stalls_ms.len() - 1)]
        } else {
            0
        };
        self.job.state = JobState::Running {
            start: self.now,
            compute_ms,
        };
        let gen = self.job.gen;
        self.push(self.now + compute_ms + stall, Ev::StepDone { gen });
    }

    fn on_step_done(&mut self, gen: u64) {
        if gen != self.job.gen {
            return;
        }
        let JobState::Running { start, compute_ms } = self.job.state else {
            return;
        };
        let next = self.job.step + 1;
        let class = if next <= self.job.high_water {
            SegmentClass::Recompute
        } else {
            SegmentClass::Productive
        };
        self.ledger.extend_to(start + compute_ms.min(self.step_ms), class);
        self.ledger.extend_to(start + compute_ms, SegmentClass::Detection);
        self.ledger.extend_to(self.now, SegmentClass::CheckpointStall);
        self.job.step = next;
        self.job.high_water = self.job.high_water.max(next);
        self.job.since_restart += 1;
        if next.is_multiple_of(self.cfg.checkpoint.every_steps) {
            let t_c = start + compute_ms;
            let copies = if self.cfg.checkpoint.policy == CkptPolicy::MegatronBlocking {
                StepCopies {
                    step: next,
                    own_ready_ms: self.now,
                    backup_ready_ms: self.now,
                }
            } else {
                StepCopies {
                    step: next,
                    own_ready_ms: t_c + self.copy_lags_ms.0,
                    backup_ready_ms: t_c + self.copy_lags_ms.1,
                }
            };
            self.ckpt.record(copies);
        }
        if next >= self.cfg.horizon_steps {
            self.finish(RunOutcome::Completed);
        } else {
            self.start_step();
        }
    }

    /// Begins stepping from the current step and lets every live fault reach
    /// the fresh processes.
    fn start_running(&mut self) {
        self.settle();
        self.job.since_restart = 0;
        self.job.nan = None;
        for (mon, state) in self.cfg.detection.monitors.iter().zip(self.monitors.iter_mut()) {
            if mon.metric != Metric::TensorcoreUtil {
                state.reset();
            }
        }
        self.note("job-running", format!("from step {}", self.job.step));
        self.start_step();
        let live: Vec<usize> = (0..self.faults.len())
            .filter(|&i| self.fault(i).is_some_and(|f| self.affects_job(f)))
            .collect();
        for i in live {
            if matches!(self.job.state, JobState::Done) {
                break;
            }
            self.manifest(i);
        }
    }

    fn finish(&mut self, outcome: RunOutcome) {
        if self.outcome.is_some() {
            return;
        }
        if let JobState::Running { .. } = self.job.state {
            // The interrupted step never completes.
            self.halt(SegmentClass::Detection);
        }
        self.settle();
        self.job.state = JobState::Done;
        if let Some(cur) = self.current.take() {
            let inc = &mut self.incidents[cur.id];
            if outcome != RunOutcome::Escalated || inc.outcome != IncidentOutcome::Escalated {
                inc.outcome = IncidentOutcome::Unfinished;
            }
        }
        self.outcome = Some(outcome);
        info!("run finished: {outcome:?} at {:.0} s", secs(self.now));
        self.note("run-end", format!("{outcome:?} at step {}", self.job.step));
    }

    // ---- faults ----

    fn fault(&self, i: usize) -> Option<&ActiveFault> {
        self.faults[i].slot.map(|s| &self.cluster.faults[s])
    }

    fn affects_job(&self, f: &ActiveFault) -> bool {
        if !f.is_active(self.now) {
            return false;
        }
        if f.kind.is_code_bound() {
            return f.version.is_some_and(|v| self.job.versions.contains(&v));
        }
        if f.kind.is_job_level() {
            return true;
        }
        f.machines.iter().any(|&m| self.cluster.in_job(m))
    }

    fn fault_affects_job(&self, i: usize) -> bool {
        self.fault(i).is_some_and(|f| self.affects_job(f))
    }

    /// The fault belongs to the incident currently being handled.
    fn handled(&self, i: usize) -> bool {
        self.current.as_ref().is_some_and(|c| c.causes.contains(&i))
    }

    fn controller_busy(&self) -> bool {
        self.current.is_some() || self.update_restart.is_some()
    }

    fn on_fault_onset(&mut self, i: usize) {
        let spec = &self.cfg.faults[i];
        let machines = self.cluster.occupants(&spec.machines);
        let active = ActiveFault {
            index: i,
            kind: spec.kind.clone(),
            machines: machines.clone(),
            onset_ms: self.now,
            end_ms: spec.duration_s.map(|d| self.now + ms(d)),
            version: spec
                .kind
                .is_code_bound()
                .then(|| *self.job.versions.last().expect("at least one version")),
        };
        let end = active.end_ms;
        let signals = match self
            .cluster
            .inject(active, &self.cfg.detection, self.step_ms, self.now)
        {
            Ok(s) => s,
            Err(e) => {
                self.note("fault-skipped", format!("#{i} {}: {e}", spec.kind));
                return;
            }
        };
        self.faults[i].slot = Some(self.cluster.faults.len() - 1);
        self.faults[i].signals = signals.clone();
        self.note("fault-onset", format!("#{i} {} on {:?}", spec.kind, machines));
        if let Some(end) = end {
            self.push(end, Ev::FaultEnd { fault: i });
        }
        for s in &signals {
            if let Signal::Inspection { item, .. } = s {
                if let Some(r) = self.cfg.detection.rules.iter().position(|r| r.item == *item) {
                    if !self.polling[r] {
                        self.polling[r] = true;
                        let iv = self.cfg.detection.rules[r].interval_ms();
                        let next = (self.now / iv + 1) * iv;
                        self.push(next, Ev::Poll { rule: r });
                    }
                }
            }
        }
        let stepping = matches!(self.job.state, JobState::Running { .. } | JobState::Blocked { .. });
        if stepping && self.fault_affects_job(i) && !self.is_suspended_by_controller() {
            self.manifest(i);
        }
    }

    fn is_suspended_by_controller(&self) -> bool {
        matches!(self.job.state, JobState::Suspended)
    }

    /// The fault reaches the running job.
    fn manifest(&mut self, i: usize) {
        self.faults[i].gen += 1;
        let gen = self.faults[i].gen;
        let kind = self.cfg.faults[i].kind.clone();
        match kind.job_effect() {
            JobEffect::Block | JobEffect::Crash => self.block(),
            JobEffect::Degrade(_) => {}
            JobEffect::Corrupt { nan_delay_ms } => self.push(self.now + nan_delay_ms, Ev::NanAppear { fault: i, gen }),
            JobEffect::Nan => {
                self.job.nan.get_or_insert((self.now, self.job.step));
            }
        }
        for s in self.faults[i].signals.clone() {
            let after = match s {
                Signal::Log { after_ms, .. } | Signal::CommTimeout { after_ms } | Signal::MfuMonitor { after_ms } => {
                    after_ms
                }
                _ => continue,
            };
            self.push(self.now + after, Ev::JobSignal { fault: i, gen, signal: s });
        }
    }

    fn on_fault_end(&mut self, i: usize) {
        let Some(f) = self.fault(i).cloned() else { return };
        for &m in &f.machines {
            self.cluster.refresh_health(m, self.now);
        }
        self.note("fault-end", format!("#{i} {}", f.kind));
        if !f.kind.self_recovers() {
            return;
        }
        let tolerated = self
            .current
            .as_ref()
            .is_some_and(|c| c.causes.contains(&i) && matches!(c.phase, Phase::Tolerating));
        if tolerated {
            self.close_incident(IncidentOutcome::SelfRecovered, None);
        } else if matches!(self.job.state, JobState::Blocked { .. }) && !self.controller_busy() && !self.still_blocked() {
            self.settle();
            self.note("job-unblocked", format!("#{i} cleared"));
            self.start_step();
        }
    }

    /// Any live fault that keeps the job from stepping.
    fn still_blocked(&self) -> bool {
        self.cluster.active_faults(self.now).any(|f| {
            matches!(f.kind.job_effect(), JobEffect::Block | JobEffect::Crash) && self.affects_job(f)
        })
    }

    fn on_nan_appear(&mut self, i: usize, gen: u64) {
        if self.faults[i].gen != gen || !self.fault_affects_job(i) {
            return;
        }
        if let JobState::Running { .. } = self.job.state {
            if self.job.nan.is_none() {
                self.job.nan = Some((self.now, self.job.step));
                self.note("loss-nan", format!("#{i} at step {}", self.job.step));
            }
        }
    }

    // ---- detection ----

    fn on_poll(&mut self, r: usize) {
        let rule = self.cfg.detection.rules[r];
        let view = PollView {
            cluster: &self.cluster,
            now: self.now,
        };
        let alerts = self.inspector.poll(&rule, &view, self.now);
        let still = self.cluster.active_faults(self.now).any(|f| {
            f.kind.inspection_item() == Some(rule.item) && f.machines.iter().any(|&m| self.cluster.in_job(m))
        });
        if still {
            self.push(self.now + rule.interval_ms(), Ev::Poll { rule: r });
        } else {
            self.polling[r] = false;
        }
        if alerts.is_empty() {
            return;
        }
        let machines: BTreeSet<MachineId> = alerts.iter().flat_map(|a| a.machines.iter().copied()).collect();
        let causes: Vec<usize> = (0..self.faults.len())
            .filter(|&i| {
                self.fault(i).is_some_and(|f| {
                    f.is_active(self.now)
                        && f.kind.inspection_item() == Some(rule.item)
                        && f.machines.iter().any(|m| machines.contains(m))
                })
            })
            .collect();
        let alert = Alert::attributed(self.now, machines, AlertSource::Inspection { item: rule.item });
        self.handle_alert(alert, causes);
    }

    fn on_metric_sample(&mut self) {
        if matches!(self.job.state, JobState::Done) {
            return;
        }
        self.push(self.now + ms(self.cfg.detection.metric_sample_s), Ev::MetricSample);
        if self.controller_busy() {
            return;
        }
        let running = matches!(self.job.state, JobState::Running { .. });
        let blocked_since = match self.job.state {
            JobState::Blocked { since } => Some(since),
            _ => None,
        };
        if !running && blocked_since.is_none() {
            return;
        }
        let throughput = self.slowdown();
        for k in 0..self.cfg.detection.monitors.len() {
            let mon = self.cfg.detection.monitors[k];
            let value = match (mon.metric, blocked_since) {
                (Metric::RdmaTraffic, Some(since)) => {
                    self.monitors[k].zero_since(since);
                    0.0
                }
                (Metric::RdmaTraffic, None) => throughput,
                (_, Some(_)) => continue,
                (Metric::Loss, None) => {
                    if self.job.nan.is_some() {
                        f64::NAN
                    } else {
                        1.0
                    }
                }
                (Metric::GradNorm, None) => 1.0,
                (Metric::TensorcoreUtil, None) => throughput,
            };
            if !self.monitors[k].observe(&mon.rule, self.now, value) {
                continue;
            }
            let causes = self.metric_causes(mon.metric, &mon.rule);
            if causes.is_empty() {
                continue;
            }
            let alert = Alert::job_level(self.now, AlertSource::Metric { metric: mon.metric });
            self.handle_alert(alert, causes);
            break;
        }
    }

    fn metric_causes(&self, metric: Metric, rule: &MetricRule) -> Vec<usize> {
        (0..self.faults.len())
            .filter(|&i| {
                self.fault(i).is_some_and(|f| {
                    self.affects_job(f)
                        && !self.handled(i)
                        && match (metric, rule) {
                            (Metric::Loss | Metric::GradNorm, _) => {
                                matches!(f.kind.job_effect(), JobEffect::Corrupt { .. } | JobEffect::Nan)
                            }
                            (Metric::RdmaTraffic, MetricRule::ZeroFor { .. }) => {
                                matches!(f.kind.job_effect(), JobEffect::Block | JobEffect::Crash)
                            }
                            (Metric::RdmaTraffic | Metric::TensorcoreUtil, _) => {
                                matches!(f.kind.job_effect(), JobEffect::Degrade(_))
                            }
                        }
                })
            })
            .collect()
    }

    fn on_job_signal(&mut self, i: usize, gen: u64, signal: Signal) {
        if self.faults[i].gen != gen || !self.fault_affects_job(i) {
            return;
        }
        if self.handled(i) && !matches!(self.current.as_ref().unwrap().phase, Phase::Tolerating) {
            return;
        }
        let source = match signal {
            Signal::Log { module, .. } => AlertSource::Log { module },
            Signal::CommTimeout { .. } => {
                if matches!(self.job.state, JobState::Running { .. }) {
                    return;
                }
                AlertSource::CommTimeout
            }
            Signal::MfuMonitor { .. } => AlertSource::MfuMonitor,
            _ => return,
        };
        self.handle_alert(Alert::job_level(self.now, source), vec![i]);
    }

    fn handle_alert(&mut self, alert: Alert, causes: Vec<usize>) {
        let horizon = ms(self.cfg.detection.history_s);
        let now = self.now;
        self.history.retain(|a| now.saturating_sub(a.time_ms) <= horizon);
        self.note("alert", format!("{:?} on {:?} for {:?}", alert.source, alert.machines, causes));
        if let Some(cur) = &self.current {
            if causes.iter().any(|c| cur.causes.contains(c)) {
                if matches!(cur.phase, Phase::Tolerating) {
                    let action = classify(&alert, &self.history, &self.cfg.detection.network_tolerance);
                    self.history.push(alert.clone());
                    self.act(action, &alert);
                }
                return;
            }
        }
        if self.controller_busy() {
            self.history.push(alert.clone());
            self.queued.push_back((alert, causes));
            return;
        }
        self.open_incident(alert, causes);
    }

    fn open_incident(&mut self, alert: Alert, causes: Vec<usize>) {
        let prior: Vec<Alert> = self
            .history
            .iter()
            .filter(|a| a.time_ms < alert.time_ms || (a.time_ms == alert.time_ms && **a != alert))
            .cloned()
            .collect();
        let action = classify(&alert, &prior, &self.cfg.detection.network_tolerance);
        if !self.history.contains(&alert) {
            self.history.push(alert.clone());
        }
        let id = self.incidents.len();
        let onset = causes
            .iter()
            .filter_map(|&i| self.fault(i).map(|f| f.onset_ms))
            .min()
            .unwrap_or(alert.time_ms);
        let kinds = causes.iter().map(|&i| self.cfg.faults[i].kind.to_string()).collect();
        for &c in &causes {
            self.faults[c].incident = Some(id);
        }
        self.incidents.push(IncidentCase {
            id,
            faults: causes.clone(),
            kinds,
            onset_s: secs(onset),
            detected_s: secs(alert.time_ms),
            detection_latency_s: secs(alert.time_ms.saturating_sub(onset)),
            detected_by: alert.source.clone(),
            action,
            stages: Vec::new(),
            path: Vec::new(),
            evicted: BTreeSet::new(),
            evicted_machines: BTreeSet::new(),
            suspects: None,
            outcome: IncidentOutcome::Unfinished,
            resolution: None,
            closed_s: None,
        });
        let nan = matches!(alert.source, AlertSource::Metric { metric: Metric::Loss | Metric::GradNorm });
        self.current = Some(Current {
            id,
            causes,
            phase: Phase::Tolerating,
            pipeline: None,
            nan,
            base_versions: self.job.versions.len(),
            token: 0,
        });
        info!(
            "incident {id} opened at {:.0} s: {:?}",
            secs(self.now),
            self.incidents[id].kinds
        );
        self.note("incident-open", format!("#{id} {:?} via {:?}", self.incidents[id].kinds, alert.source));
        self.act(action, &alert);
    }

    fn path(&mut self, step: impl Into<String>) {
        let step = step.into();
        if let Some(cur) = &self.current {
            let id = cur.id;
            self.note("incident-step", format!("#{id} {step}"));
            self.incidents[id].path.push(step);
        }
    }

    fn schedule_control(&mut self, at: SimTime, phase: Phase) {
        let cur = self.current.as_mut().expect("incident in progress");
        cur.phase = phase;
        cur.token += 1;
        let token = cur.token;
        self.push(at, Ev::Control { token });
    }

    fn act(&mut self, action: Action, alert: &Alert) {
        if let Some(cur) = &self.current {
            self.incidents[cur.id].action = action;
        }
        match action {
            Action::Tolerate => {
                self.path("tolerate");
                self.current.as_mut().unwrap().phase = Phase::Tolerating;
                if matches!(self.job.state, JobState::Suspended) {
                    self.start_running();
                }
            }
            Action::EvictNow => {
                self.path("evict-now");
                let slots: BTreeSet<MachineId> =
                    alert.machines.iter().filter_map(|&m| self.cluster.slot_of(m)).collect();
                self.begin_failover(slots, After::Direct(Resolution::EvictRealtime));
            }
            Action::Rollback => {
                self.suspend(SegmentClass::Localization);
                self.current.as_mut().unwrap().pipeline = Some(StopTimePipeline::starting_at(Stage::Rollback));
                self.enter_stage(Stage::Rollback);
            }
            Action::StopTime => {
                self.suspend(SegmentClass::Localization);
                self.current.as_mut().unwrap().pipeline = Some(StopTimePipeline::new());
                self.enter_stage(Stage::Diagnose);
            }
            Action::AggregationTrigger => {
                if matches!(alert.source, AlertSource::Metric { metric: Metric::RdmaTraffic })
                    && !matches!(self.job.state, JobState::Running { .. })
                {
                    self.suspend(SegmentClass::Localization);
                    self.path("capture-stacks");
                    let at = self.now + ms(self.cfg.aggregation.capture_s);
                    self.schedule_control(at, Phase::Capture);
                } else {
                    self.path("fail-slow-round");
                    let now = self.now;
                    self.schedule_control(now, Phase::FailSlow { snapshots: Vec::new() });
                }
            }
        }
    }

    // ---- controller ----

    fn enter_stage(&mut self, stage: Stage) {
        let id = self.current.as_ref().unwrap().id;
        self.incidents[id].stages.push(stage);
        self.path(stage.to_string());
        match stage {
            Stage::Diagnose => {
                let slots: BTreeSet<MachineId> = (0..self.cluster.slots.len()).collect();
                let nan = self.current.as_ref().unwrap().nan;
                let mut bench = Bench {
                    cluster: &self.cluster,
                    cfg: self.cfg,
                    rng: &mut self.rng_diag,
                    now: self.now,
                };
                let verdicts = if nan {
                    nan_ladder(&mut bench, &slots)
                } else {
                    diagnose(&mut bench, &slots)
                };
                let d = &self.cfg.diagnosis;
                let dur: f64 = verdicts
                    .iter()
                    .map(|v| match v.test {
                        DiagTest::GpuCheck => d.gpu_check_s,
                        DiagTest::IntraComm => d.intra_comm_s,
                        DiagTest::InterComm => d.inter_comm_s,
                        DiagTest::BitwiseAlign => d.align_s,
                    })
                    .sum();
                let failed = ladder_failures(&verdicts);
                let at = self.now + ms(dur);
                self.schedule_control(at, Phase::DiagnoseDone { failed });
            }
            Stage::Reattempt => self.begin_restart(RestartKind::Reattempt, After::Stage(Stage::Reattempt)),
            Stage::Rollback => {
                // Revert everything from the version that was live at incident open.
                let base = self.current.as_ref().unwrap().base_versions.min(self.job.versions.len());
                if base > 1 {
                    let reverted = self.job.versions.split_off(base - 1);
                    self.note("rollback", format!("revert versions {reverted:?}"));
                    self.begin_restart(RestartKind::Rollback, After::Stage(Stage::Rollback));
                } else {
                    self.path("no-previous-version");
                    self.advance(StageOutcome::NoPreviousVersion);
                }
            }
            Stage::Replay => {
                let result = replay_plan(&self.cfg.topology, self.cfg.diagnosis.replay_k).and_then(|plan| {
                    let now = self.now;
                    let job_bug = self.cluster.active_faults(now).any(|f| {
                        f.kind.is_code_bound() && f.version.is_some_and(|v| self.job.versions.contains(&v))
                    });
                    locate(plan, |group| {
                        job_bug
                            || group.iter().any(|&s| {
                                self.cluster
                                    .faults_on(self.cluster.slots[s], now)
                                    .any(|f| f.kind.reproduces_in_replay())
                            })
                    })
                });
                let at = self.now + 2 * ms(self.cfg.diagnosis.replay_phase_s);
                self.schedule_control(at, Phase::ReplayDone { result });
            }
            Stage::Resolved | Stage::Escalated => {}
        }
    }

    /// Feeds an outcome to the pipeline and carries on from the next stage.
    fn advance(&mut self, outcome: StageOutcome) {
        let cur = self.current.as_mut().unwrap();
        let pipeline = cur.pipeline.get_or_insert_with(StopTimePipeline::new);
        let next = pipeline.advance(outcome);
        let resolution = pipeline.resolution;
        match next {
            Stage::Resolved => self.close_incident(IncidentOutcome::Resolved, resolution),
            Stage::Escalated => {
                self.path("escalated");
                let id = self.current.as_ref().unwrap().id;
                self.incidents[id].outcome = IncidentOutcome::Escalated;
                self.incidents[id].closed_s = Some(secs(self.now));
                self.finish(RunOutcome::Escalated);
            }
            stage => self.enter_stage(stage),
        }
    }

    fn on_control(&mut self, token: u64) {
        let Some(cur) = &self.current else { return };
        if cur.token != token {
            return;
        }
        let phase = cur.phase.clone();
        match phase {
            Phase::Tolerating => {}
            Phase::Capture => self.on_capture(),
            Phase::FailSlow { snapshots } => self.on_fail_slow_round(snapshots),
            Phase::DiagnoseDone { failed } => {
                if failed.is_empty() {
                    self.path("all-passed");
                    self.advance(StageOutcome::AllPassed);
                } else {
                    self.begin_failover(failed, After::Stage(Stage::Diagnose));
                }
            }
            Phase::ReplayDone { result } => match result {
                Ok(outcome) => {
                    let id = self.current.as_ref().unwrap().id;
                    self.incidents[id].suspects = Some(outcome.suspects.clone());
                    self.path(format!("suspects {:?}", outcome.suspects));
                    self.begin_failover(outcome.suspects, After::Stage(Stage::Replay));
                }
                Err(e) => {
                    self.path(format!("not-localized: {e}"));
                    self.advance(StageOutcome::NotLocalized);
                }
            },
            Phase::Restarting { after } => self.on_restart_done(after),
            Phase::Remanifest { after } => {
                self.job.halted_at = self.now;
                self.path("failed-again");
                match after {
                    After::Stage(Stage::Diagnose) => self.advance(StageOutcome::Evicted { restart_ok: false }),
                    After::Stage(_) => self.advance(StageOutcome::Restarted { ok: false }),
                    After::Direct(_) => {
                        self.current.as_mut().unwrap().pipeline = Some(StopTimePipeline::starting_at(Stage::Rollback));
                        self.enter_stage(Stage::Rollback);
                    }
                }
            }
        }
    }

    fn on_capture(&mut self) {
        let now = self.now;
        let mut snap = StackSnapshot::default();
        for (slot, &m) in self.cluster.slots.iter().enumerate() {
            let hung = self.cluster.faults_on(m, now).find_map(|f| {
                let pos = f.machines.iter().position(|&x| x == m)?;
                self.cfg.faults[f.index].hang_signature(pos).map(str::to_string)
            });
            snap.insert(slot, hung.map_or_else(healthy_trainer, |sig| stuck_trainer(&sig)));
        }
        let isolation = cluster_stacks(&snap).and_then(|g| isolate(&g, &self.cfg.topology));
        match isolation {
            Ok(iso) => {
                let group = iso.group.map_or_else(|| "outliers".to_string(), |g| g.to_string());
                self.path(format!("over-evict {group}"));
                self.begin_failover(iso.machines, After::Direct(Resolution::Aggregation));
            }
            Err(e) => {
                self.path(format!("inconclusive: {e}"));
                self.current.as_mut().unwrap().pipeline = Some(StopTimePipeline::new());
                self.enter_stage(Stage::Diagnose);
            }
        }
    }

    fn on_fail_slow_round(&mut self, mut snapshots: Vec<StackSnapshot>) {
        let now = self.now;
        let mut snap = StackSnapshot::default();
        for slot in 0..self.cluster.slots.len() {
            let m = self.cluster.slots[slot];
            let slow = self
                .cluster
                .faults_on(m, now)
                .any(|f| matches!(f.kind.job_effect(), JobEffect::Degrade(_)));
            let stack = if slow && roll(&mut self.rng_stacks, self.cfg.aggregation.slow_signature_prob) {
                ProcessStack::trainer(SLOW_KERNEL_STACK)
            } else if roll(&mut self.rng_stacks, self.cfg.aggregation.noise_prob) {
                ProcessStack::trainer(NOISE_STACK)
            } else {
                healthy_trainer()
            };
            snap.insert(slot, stack);
        }
        snapshots.push(snap);
        if snapshots.len() < FAIL_SLOW_ROUNDS {
            self.schedule_control(now + FAIL_SLOW_INTERVAL_MS, Phase::FailSlow { snapshots });
            return;
        }
        match fail_slow_rounds(&snapshots, &self.cfg.topology) {
            Ok(v) => {
                self.path(format!("over-evict {} flagged {:?}", v.group, v.flag_counts));
                self.begin_failover(v.machines, After::Direct(Resolution::Aggregation));
            }
            Err(e) => {
                self.path(format!("inconclusive: {e}"));
                self.suspend(SegmentClass::Localization);
                self.current.as_mut().unwrap().pipeline = Some(StopTimePipeline::new());
                self.enter_stage(Stage::Diagnose);
            }
        }
    }

    fn idle_machine(&self) -> Option<MachineId> {
        self.cluster
            .machines
            .iter()
            .find(|m| m.health == Health::Idle)
            .map(|m| m.id)
    }

    fn replenish(&mut self) {
        while self.pool.deficit() > 0 {
            let Some(m) = self.idle_machine() else { break };
            let ready = self.now + ms(self.cfg.recovery.restart.fresh_init_s);
            self.pool.add_initializing(m, ready);
            self.cluster.set_health(m, Health::StandbyInitializing);
            self.push(ready, Ev::StandbyReady { machine: m });
        }
    }

    fn apply_lazy_updates(&mut self) -> Vec<usize> {
        let applied = self.updates.apply(UpdateTrigger::Failover, None, self.now);
        for &id in &applied {
            self.push_version(id, "failover");
        }
        applied
    }

    fn push_version(&mut self, id: usize, via: &str) {
        let v = self.job.next_version;
        self.job.next_version += 1;
        self.job.versions.push(v);
        self.note("update-applied", format!("update {id} via {via}, version {v}"));
    }

    /// Picks the restore point for a restart that loses `evicted` slots.
    fn restore(&mut self, evicted: &BTreeSet<MachineId>) -> (u64, bool) {
        let cap = self.job.nan.map_or(u64::MAX, |(_, step)| step);
        let (step, remote) = match self.ckpt.latest_recoverable_up_to(evicted, self.job.halted_at, cap) {
            Ok(p) => (p.step, false),
            Err(u) => (u.remote_step, true),
        };
        self.job.step = step;
        self.job.restored_from = Some(step);
        self.job.nan = None;
        self.ckpt.reset(step, self.now);
        (step, remote)
    }

    fn begin_failover(&mut self, slots: BTreeSet<MachineId>, after: After) {
        self.suspend(SegmentClass::Failover);
        let n = slots.len();
        let warm = self.pool.warm_count();
        let mut incoming = self.pool.take_warm(n.min(warm));
        let from_pool = incoming.len();
        while incoming.len() < n {
            let Some(m) = self.idle_machine() else {
                self.path("capacity-exhausted");
                self.finish(RunOutcome::CapacityExhausted);
                return;
            };
            // Reserve it so the next lookup skips it.
            self.cluster.set_health(m, Health::StandbyInitializing);
            incoming.push(m);
        }
        let id = self.current.as_ref().unwrap().id;
        let mut replaced = Vec::new();
        for (&slot, &m) in slots.iter().zip(&incoming) {
            let out = self.cluster.replace(slot, m, self.now);
            self.inspector.forget_machine(out);
            if self.cluster.is_clean(out, self.now) {
                self.push(
                    self.now + ms(self.cfg.recovery.quarantine_s),
                    Ev::QuarantineEnd { machine: out },
                );
            }
            self.incidents[id].evicted.insert(slot);
            self.incidents[id].evicted_machines.insert(out);
            replaced.push(out);
        }
        self.note(
            "evict",
            format!("#{id} slots {:?} machines {:?} -> {:?}", slots, replaced, incoming),
        );
        let params = &self.cfg.recovery.restart;
        let schedule_s = match self.cfg.recovery.policy {
            RestartPolicy::Ours => failover_timing(n, warm, params).schedule_s,
            p => baseline_restart(p, n, warm, self.cfg.topology.machine_count() as u64, params),
        };
        let dur = ms(schedule_s + params.restore_s);
        let updates = self.apply_lazy_updates();
        let (step, remote) = self.restore(&slots);
        self.path(format!("failover {n} ({from_pool} warm) restore step {step}"));
        self.restarts.push(RestartRecord {
            t_s: secs(self.now),
            kind: RestartKind::Failover,
            duration_s: secs(dur),
            restored_step: step,
            recompute_steps: self.job.high_water - step,
            remote,
            machines_replaced: n,
            updates_applied: updates,
        });
        self.replenish();
        self.schedule_control(self.now + dur, Phase::Restarting { after });
    }

    fn in_place_restart_ms(&self) -> u64 {
        let p = &self.cfg.recovery.restart;
        ms(p.hot_update_s(self.cfg.topology.machine_count() as u64) + p.restore_s)
    }

    fn begin_restart(&mut self, kind: RestartKind, after: After) {
        self.suspend(SegmentClass::Failover);
        let updates = if kind == RestartKind::Reattempt {
            self.apply_lazy_updates()
        } else {
            Vec::new()
        };
        let dur = self.in_place_restart_ms();
        let (step, remote) = self.restore(&BTreeSet::new());
        self.restarts.push(RestartRecord {
            t_s: secs(self.now),
            kind,
            duration_s: secs(dur),
            restored_step: step,
            recompute_steps: self.job.high_water - step,
            remote,
            machines_replaced: 0,
            updates_applied: updates,
        });
        self.schedule_control(self.now + dur, Phase::Restarting { after });
    }

    fn on_restart_done(&mut self, after: After) {
        let causes = self.current.as_ref().unwrap().causes.clone();
        let ok = !causes.iter().any(|&c| self.fault_affects_job(c));
        if ok {
            self.path("restart-ok");
            match after {
                After::Direct(r) => self.close_incident(IncidentOutcome::Resolved, Some(r)),
                After::Stage(Stage::Diagnose) => self.advance(StageOutcome::Evicted { restart_ok: true }),
                After::Stage(_) => self.advance(StageOutcome::Restarted { ok: true }),
            }
        } else {
            self.set_idle_class(SegmentClass::Localization);
            let wait = self.remanifest_ms(&causes);
            self.schedule_control(self.now + wait, Phase::Remanifest { after });
        }
    }

    /// How long a still-present fault takes to break a fresh restart again.
    fn remanifest_ms(&self, causes: &[usize]) -> u64 {
        let d = &self.cfg.detection;
        let sample = ms(d.metric_sample_s);
        causes
            .iter()
            .filter(|&&c| self.fault_affects_job(c))
            .map(|&c| {
                let kind = &self.cfg.faults[c].kind;
                match kind.job_effect() {
                    JobEffect::Crash => d.log_latency_s.map_or(self.step_ms, ms),
                    JobEffect::Block => match kind {
                        FaultKind::Hang { .. } => {
                            let zero = d.monitors.iter().find_map(|m| match m.rule {
                                MetricRule::ZeroFor { duration_s } => Some(ms(duration_s)),
                                _ => None,
                            });
                            zero.unwrap_or(ms(d.comm_timeout_s)) + sample
                        }
                        _ => kind
                            .inspection_item()
                            .and_then(|item| d.rule(item))
                            .map_or(ms(d.comm_timeout_s), |r| r.worst_case_latency_ms()),
                    },
                    JobEffect::Degrade(_) => 3 * sample,
                    JobEffect::Corrupt { nan_delay_ms } => nan_delay_ms + sample,
                    JobEffect::Nan => sample,
                }
            })
            .min()
            .unwrap_or(sample)
    }

    fn close_incident(&mut self, outcome: IncidentOutcome, resolution: Option<Resolution>) {
        let Some(cur) = self.current.take() else { return };
        let inc = &mut self.incidents[cur.id];
        inc.outcome = outcome;
        inc.resolution = resolution;
        inc.closed_s = Some(secs(self.now));
        info!("incident {} closed at {:.0} s: {:?} {:?}", cur.id, secs(self.now), outcome, resolution);
        let label = resolution.map_or_else(|| format!("{outcome:?}"), |r| r.to_string());
        self.note("incident-close", format!("#{} {label}", cur.id));
        self.after_controller();
    }

    /// Controller went idle: handle queued alerts, otherwise let the job run.
    fn after_controller(&mut self) {
        while let Some((alert, causes)) = self.queued.pop_front() {
            let live = causes
                .iter()
                .any(|&c| self.fault_affects_job(c));
            if live {
                self.open_incident(alert, causes);
                return;
            }
        }
        match self.job.state {
            JobState::Suspended => self.start_running(),
            JobState::Blocked { .. } if !self.still_blocked() => {
                self.settle();
                self.start_step();
            }
            _ => {}
        }
    }

    // ---- hot updates ----

    fn on_update_submit(&mut self, i: usize) {
        let urgency = self.cfg.updates[i].urgency;
        let id = self.updates.submit(urgency, self.now);
        self.note("update-submit", format!("update {id} {urgency:?}"));
        match urgency {
            Urgency::Urgent => {
                self.updates.apply(UpdateTrigger::UrgentSubmit, Some(id), self.now);
                self.push_version(id, "urgent");
                self.update_restart(id);
            }
            Urgency::Lazy => {
                let at = self.updates.expiry_ms(id);
                self.push(at, Ev::UpdateExpiry { id });
            }
        }
    }

    fn on_update_expiry(&mut self, id: usize) {
        let applied = self.updates.apply(UpdateTrigger::WindowExpiry, Some(id), self.now);
        if applied.contains(&id) {
            self.push_version(id, "window-expiry");
            self.update_restart(id);
        }
    }

    /// In-place restart onto a new code version while training runs.
    fn update_restart(&mut self, id: usize) {
        if self.controller_busy() || !matches!(self.job.state, JobState::Running { .. }) {
            return;
        }
        self.halt(SegmentClass::Failover);
        self.idle_class = SegmentClass::Failover;
        let dur = self.in_place_restart_ms();
        let (step, remote) = self.restore(&BTreeSet::new());
        self.restarts.push(RestartRecord {
            t_s: secs(self.now),
            kind: RestartKind::HotUpdate,
            duration_s: secs(dur),
            restored_step: step,
            recompute_steps: self.job.high_water - step,
            remote,
            machines_replaced: 0,
            updates_applied: vec![id],
        });
        self.job.gen += 1;
        let gen = self.job.gen;
        self.update_restart = Some(gen);
        self.push(self.now + dur, Ev::UpdateRestartDone { gen });
    }

    fn on_update_restart_done(&mut self, gen: u64) {
        if self.update_restart != Some(gen) {
            return;
        }
        self.update_restart = None;
        self.after_controller();
    }

    // ---- report ----

    fn report(self) -> SimReport {
        let ledger = self.ledger;
        let window = self.cfg.sliding_window_s;
        let totals = ledger.totals_ms().into_iter().map(|(c, t)| (c, secs(t))).collect();
        let d = self.cfg.checkpoint.durations(self.cfg.step_duration_s);
        let faults = self
            .faults
            .iter()
            .enumerate()
            .filter_map(|(i, rt)| {
                let f = &self.cluster.faults[rt.slot?];
                Some(FaultRecord {
                    index: i,
                    kind: f.kind.to_string(),
                    onset_s: secs(f.onset_ms),
                    machines: f.machines.clone(),
                    incident: rt.incident,
                })
            })
            .collect();
        SimReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            outcome: self.outcome.unwrap_or(RunOutcome::TimeLimit),
            horizon_steps: self.cfg.horizon_steps,
            steps_completed: self.job.step,
            wall_clock_s: secs(ledger.end_ms()),
            ettr: final_ettr(&ledger),
            time_by_class_s: totals,
            restart_policy: self.cfg.recovery.policy,
            standby_target: self.pool.target,
            checkpoint: CheckpointSummary {
                policy: self.cfg.checkpoint.policy,
                steady_stall_s: step_stall(self.cfg.checkpoint.policy, &d, 63),
                every_steps: self.cfg.checkpoint.every_steps,
            },
            code_versions: self.job.versions.clone(),
            breakdown: breakdown(&self.incidents),
            incidents: self.incidents,
            faults,
            restarts: self.restarts,
            updates: self.updates.updates,
            machines: self.cluster.machines,
            sliding_window_s: window,
            ettr_cumulative: ettr(&ledger, EttrMode::Cumulative),
            ettr_sliding: ettr(&ledger, EttrMode::Sliding { window_s: window }),
            ledger,
            was: None,
            trace: self.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{self, UpdateEvent};
    use crate::simkernel::FaultEvent;

    #[test]
    fn hang_is_over_evicted_by_aggregation() {
        let r = run(&scenario::fig4_hang()).unwrap();
        assert_eq!(r.outcome, RunOutcome::Completed);
        assert_eq!(r.incidents.len(), 1);
        let i = &r.incidents[0];
        assert_eq!(i.resolution, Some(Resolution::Aggregation));
        assert_eq!(i.evicted, BTreeSet::from([12, 13, 14, 15]));
        assert!(i.stages.is_empty());
    }

    #[test]
    fn sdc_is_found_by_replay() {
        let r = run(&scenario::fig6_sdc()).unwrap();
        let i = &r.incidents[0];
        assert_eq!(i.resolution, Some(Resolution::Replay));
        assert_eq!(i.suspects, Some(BTreeSet::from([13])));
        assert_eq!(i.evicted, BTreeSet::from([13]));
        assert_eq!(i.stages.last(), Some(&Stage::Replay));
    }

    #[test]
    fn inspections_beat_the_timeout() {
        let with = run(&scenario::table8_detection()).unwrap();
        let mut cfg = scenario::table8_detection();
        cfg.detection.inspections_enabled = false;
        let without = run(&cfg).unwrap();
        assert_eq!(with.incidents.len(), 7);
        assert_eq!(without.incidents.len(), 7);
        for (a, b) in with.incidents.iter().zip(&without.incidents) {
            let AlertSource::Inspection { item } = a.detected_by else {
                panic!("{a:?}")
            };
            let bound = scenario::table8_detection().detection.rule(item).unwrap().worst_case_latency_ms();
            assert!(a.detection_latency_s <= secs(bound), "{:?}", a);
            assert_eq!(b.detection_latency_s, 600.0, "{:?}", b);
        }
    }

    #[test]
    fn fault_free_run_is_all_productive() {
        let mut cfg = scenario::zero_fault();
        cfg.horizon_steps = 500;
        let r = run(&cfg).unwrap();
        assert_eq!(r.steps_completed, 500);
        assert!(r.ettr >= 0.99, "{}", r.ettr);
        assert_eq!(r.ledger.end_ms(), 500 * 15_000 + r.time_by_class_s[&SegmentClass::CheckpointStall] as u64 * 1000);
    }

    #[test]
    fn zero_horizon_ends_immediately() {
        let mut cfg = scenario::zero_fault();
        cfg.horizon_steps = 0;
        let r = run(&cfg).unwrap();
        assert_eq!(r.outcome, RunOutcome::Completed);
        assert_eq!(r.wall_clock_s, 0.0);
    }

    #[test]
    fn undetectable_hang_hits_the_time_limit() {
        let mut cfg = scenario::zero_fault();
        cfg.horizon_steps = 100;
        cfg.detection.inspections_enabled = false;
        cfg.detection.monitors.clear();
        cfg.faults.push(FaultEvent::new(310.0, FaultKind::Hang { signatures: vec!["irecv".into()] }, vec![1]));
        let r = run(&cfg).unwrap();
        assert_eq!(r.outcome, RunOutcome::TimeLimit);
        assert_eq!(r.steps_completed, 20);
    }

    #[test]
    fn urgent_update_restarts_in_place() {
        let mut cfg = scenario::zero_fault();
        cfg.horizon_steps = 200;
        cfg.updates.push(UpdateEvent {
            submit_at_s: 100.0,
            urgency: Urgency::Urgent,
        });
        let r = run(&cfg).unwrap();
        assert_eq!(r.restarts.len(), 1);
        assert_eq!(r.restarts[0].kind, RestartKind::HotUpdate);
        assert_eq!(r.code_versions, vec![1, 2]);
        assert_eq!(r.updates[0].applied_at_ms, Some(100_000));
    }

    #[test]
    fn replay_groups_follow_pipeline_stages() {
        let topo = ParallelTopology::new(2, 4, 6, 2).unwrap();
        let plan = replay_plan(&topo, 1).unwrap();
        assert_eq!((plan.z, plan.m), (24, 4));
        // 3 machines cannot hold a 4-machine group.
        let topo = ParallelTopology::new(2, 4, 3, 8).unwrap();
        assert_eq!(replay_plan(&topo, 1).unwrap().m, 1);
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run(&scenario::fig4_hang()).unwrap();
        let b = run(&scenario::fig4_hang()).unwrap();
        assert_eq!(a, b);
    }
}
