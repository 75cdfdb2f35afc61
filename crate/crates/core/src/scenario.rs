//! Scenario files: everything a simulation run needs, validated up front.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckptplan::{plan_backups, CkptDurations, CkptPolicy};
use crate::detection::{DetectionConfig, MetricRule};
use crate::error::{ConfigError, Error, FieldError};
use crate::recovery::{RestartParams, RestartPolicy, Urgency};
use crate::simkernel::{FaultEvent, FaultKind};
use crate::topology::ParallelTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub topology: ParallelTopology,
    pub horizon_steps: u64,
    #[serde(default = "default_step_s")]
    pub step_duration_s: f64,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub updates: Vec<UpdateEvent>,
    /// Code version history, oldest first; the last entry is live.
    #[serde(default = "default_versions")]
    pub code_versions: Vec<u32>,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub diagnosis: DiagnosisConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
    #[serde(default = "default_window_s")]
    pub sliding_window_s: f64,
}

fn default_step_s() -> f64 {
    15.0
}

fn default_versions() -> Vec<u32> {
    vec![1]
}

fn default_window_s() -> f64 {
    3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateEvent {
    pub submit_at_s: f64,
    pub urgency: Urgency,
}

/// Stop-time diagnostic costs and test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosisConfig {
    pub gpu_check_s: f64,
    pub intra_comm_s: f64,
    pub inter_comm_s: f64,
    pub align_s: f64,
    /// Duration of one replay phase (both phases run back to back).
    pub replay_phase_s: f64,
    /// Replay group size is `replay_k * pp_size` machines.
    pub replay_k: usize,
    /// Probability that a test misses a machine it should flag.
    pub false_negative_rate: f64,
    /// Probability that the alignment test flags an SDC machine.
    pub align_recall: f64,
    /// Probability that the GPU check flags an SDC machine.
    pub sdc_gpu_check_recall: f64,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            gpu_check_s: 60.0,
            intra_comm_s: 30.0,
            inter_comm_s: 60.0,
            align_s: 120.0,
            replay_phase_s: 300.0,
            replay_k: 1,
            false_negative_rate: 0.0,
            align_recall: 0.7,
            sdc_gpu_check_recall: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Time to capture stacks from every pod.
    pub capture_s: f64,
    /// Chance that a degraded machine shows its slow kernel in one round.
    pub slow_signature_prob: f64,
    /// Chance that a healthy machine shows a transient odd stack in one round.
    pub noise_prob: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            capture_s: 5.0,
            slow_signature_prob: 0.8,
            noise_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub policy: RestartPolicy,
    /// Per-machine failure probability used to size the warm pool.
    pub fail_prob: f64,
    pub quantile: f64,
    /// Fixed pool size instead of the binomial quantile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    /// Idle machines available beyond the job; defaults to the job size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spare_machines: Option<usize>,
    pub restart: RestartParams,
    pub update_window_s: f64,
    /// Healthy over-evicted machines return to the idle set after this long.
    pub quarantine_s: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            policy: RestartPolicy::Ours,
            fail_prob: 1e-3,
            quantile: 0.99,
            pool_size: None,
            spare_machines: None,
            restart: RestartParams::default(),
            update_window_s: 86_400.0,
            quarantine_s: 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    pub policy: CkptPolicy,
    pub d2h_s: f64,
    pub serialize_s: f64,
    pub backup_send_s: f64,
    pub backup_overhead_s: f64,
    /// Tail of each step not overlapped with D2H copies.
    pub optimizer_s: f64,
    pub every_steps: u64,
    /// In-memory steps kept per holder.
    pub retain: usize,
    /// Steps between remote persistent saves.
    pub remote_interval: u64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        let d = CkptDurations::default();
        CheckpointConfig {
            policy: CkptPolicy::ByterobustAsync,
            d2h_s: d.d2h_s,
            serialize_s: d.serialize_s,
            backup_send_s: d.backup_send_s,
            backup_overhead_s: d.backup_overhead_s,
            optimizer_s: d.optimizer_s,
            every_steps: 1,
            retain: 2,
            remote_interval: 100,
        }
    }
}

impl CheckpointConfig {
    /// Pipeline durations for a step of `step_s` seconds.
    pub fn durations(&self, step_s: f64) -> CkptDurations {
        CkptDurations {
            d2h_s: self.d2h_s,
            serialize_s: self.serialize_s,
            backup_send_s: self.backup_send_s,
            fwd_bwd_s: step_s - self.optimizer_s,
            optimizer_s: self.optimizer_s,
            backup_overhead_s: self.backup_overhead_s,
        }
    }
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, seed: u64, topology: ParallelTopology, horizon_steps: u64) -> Self {
        ScenarioConfig {
            name: name.into(),
            seed,
            topology,
            horizon_steps,
            step_duration_s: default_step_s(),
            faults: Vec::new(),
            updates: Vec::new(),
            code_versions: default_versions(),
            detection: DetectionConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            aggregation: AggregationConfig::default(),
            recovery: RecoveryConfig::default(),
            checkpoint: CheckpointConfig::default(),
            sliding_window_s: default_window_s(),
        }
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_steps as f64 * self.step_duration_s
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_json(&text)?)
    }

    /// Every violation found, each tagged with its field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Validator::default();
        self.check(&mut v);
        if v.errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v.errors))
        }
    }

    fn check(&self, v: &mut Validator) {
        if self.name.trim().is_empty() {
            v.push("name", "must not be empty");
        }
        let topo_ok = match self.topology.validate() {
            Ok(()) => match plan_backups(&self.topology) {
                Ok(_) => true,
                Err(e) => {
                    v.push("topology", e.to_string());
                    false
                }
            },
            Err(e) => {
                v.push("topology", e.to_string());
                false
            }
        };
        v.positive("step_duration_s", self.step_duration_s);
        v.positive("sliding_window_s", self.sliding_window_s);
        let machines = if topo_ok { self.topology.machine_count() } else { usize::MAX };
        let horizon_s = self.horizon_s();
        for (i, f) in self.faults.iter().enumerate() {
            let p = format!("faults[{i}]");
            if !(f.onset_s.is_finite() && f.onset_s >= 0.0) {
                v.push(format!("{p}.onset_s"), "must be a non-negative number");
            } else if f.onset_s >= horizon_s {
                v.push(
                    format!("{p}.onset_s"),
                    format!("onset {} s is outside the {} s horizon", f.onset_s, horizon_s),
                );
            }
            if let Some(d) = f.duration_s {
                v.positive(&format!("{p}.duration_s"), d);
            }
            if let Some(j) = f.jitter_s {
                v.non_negative(&format!("{p}.jitter_s"), j);
            }
            if f.kind.is_job_level() {
                if !f.machines.is_empty() {
                    v.push(format!("{p}.machines"), format!("{} is job-level and takes no machines", f.kind));
                }
            } else if f.machines.is_empty() {
                v.push(format!("{p}.machines"), format!("{} needs at least one machine", f.kind));
            }
            for (j, &m) in f.machines.iter().enumerate() {
                if m >= machines {
                    v.push(format!("{p}.machines[{j}]"), format!("machine {m} does not exist"));
                }
                if f.machines[..j].contains(&m) {
                    v.push(format!("{p}.machines[{j}]"), format!("machine {m} listed twice"));
                }
            }
            match &f.kind {
                FaultKind::Hang { signatures } => {
                    if signatures.is_empty() {
                        v.push(format!("{p}.kind.signatures"), "must not be empty");
                    } else if signatures.len() != 1 && signatures.len() != f.machines.len() {
                        v.push(
                            format!("{p}.kind.signatures"),
                            "needs one signature, or one per machine",
                        );
                    }
                }
                FaultKind::FailSlow { slowdown } | FaultKind::GpuHighTemp { slowdown } => {
                    if !(*slowdown > 0.0 && *slowdown <= 1.0) {
                        v.push(format!("{p}.kind.slowdown"), "must be in (0, 1]");
                    }
                }
                FaultKind::Sdc { nan_delay_s } => v.non_negative(&format!("{p}.kind.nan_delay_s"), *nan_delay_s),
                _ => {}
            }
        }
        for (i, u) in self.updates.iter().enumerate() {
            v.non_negative(&format!("updates[{i}].submit_at_s"), u.submit_at_s);
        }
        if self.code_versions.is_empty() {
            v.push("code_versions", "must list at least the live version");
        } else if self.code_versions.windows(2).any(|w| w[0] >= w[1]) {
            v.push("code_versions", "must be strictly increasing");
        }
        self.check_detection(v);
        self.check_diagnosis(v);
        self.check_recovery(v);
        self.check_checkpoint(v);
    }

    fn check_detection(&self, v: &mut Validator) {
        let d = &self.detection;
        v.positive("detection.metric_sample_s", d.metric_sample_s);
        v.positive("detection.comm_timeout_s", d.comm_timeout_s);
        v.positive("detection.mfu_monitor_s", d.mfu_monitor_s);
        v.positive("detection.history_s", d.history_s);
        if let Some(l) = d.log_latency_s {
            v.non_negative("detection.log_latency_s", l);
        }
        for (i, r) in d.rules.iter().enumerate() {
            v.positive(&format!("detection.rules[{i}].interval_s"), r.interval_s);
            if r.threshold == 0 {
                v.push(format!("detection.rules[{i}].threshold"), "must be at least 1");
            }
        }
        for (i, m) in d.monitors.iter().enumerate() {
            let p = format!("detection.monitors[{i}].rule");
            match m.rule {
                MetricRule::Nan => {}
                MetricRule::RatioSpike { factor } => v.positive(&format!("{p}.factor"), factor),
                MetricRule::ZeroFor { duration_s } => v.non_negative(&format!("{p}.duration_s"), duration_s),
                MetricRule::BelowMedian {
                    fraction,
                    window,
                    consecutive,
                } => {
                    v.probability(&format!("{p}.fraction"), fraction);
                    if window == 0 {
                        v.push(format!("{p}.window"), "must be at least 1");
                    }
                    if consecutive == 0 {
                        v.push(format!("{p}.consecutive"), "must be at least 1");
                    }
                }
            }
        }
        if d.network_tolerance.alerts == 0 {
            v.push("detection.network_tolerance.alerts", "must be at least 1");
        }
        v.non_negative("detection.network_tolerance.window_s", d.network_tolerance.window_s);
    }

    fn check_diagnosis(&self, v: &mut Validator) {
        let d = &self.diagnosis;
        for (name, x) in [
            ("gpu_check_s", d.gpu_check_s),
            ("intra_comm_s", d.intra_comm_s),
            ("inter_comm_s", d.inter_comm_s),
            ("align_s", d.align_s),
            ("replay_phase_s", d.replay_phase_s),
        ] {
            v.non_negative(&format!("diagnosis.{name}"), x);
        }
        if d.replay_k == 0 {
            v.push("diagnosis.replay_k", "must be at least 1");
        }
        v.probability("diagnosis.false_negative_rate", d.false_negative_rate);
        v.probability("diagnosis.align_recall", d.align_recall);
        v.probability("diagnosis.sdc_gpu_check_recall", d.sdc_gpu_check_recall);
        v.non_negative("aggregation.capture_s", self.aggregation.capture_s);
        v.probability("aggregation.slow_signature_prob", self.aggregation.slow_signature_prob);
        v.probability("aggregation.noise_prob", self.aggregation.noise_prob);
    }

    fn check_recovery(&self, v: &mut Validator) {
        let r = &self.recovery;
        v.probability("recovery.fail_prob", r.fail_prob);
        if !(r.quantile > 0.0 && r.quantile <= 1.0) {
            v.push("recovery.quantile", "must be in (0, 1]");
        }
        let p = &r.restart;
        for (name, x) in [
            ("wake_latency_s", p.wake_latency_s),
            ("fresh_init_s", p.fresh_init_s),
            ("restore_s", p.restore_s),
            ("hot_update_restart_s", p.hot_update_restart_s),
        ] {
            v.non_negative(&format!("recovery.restart.{name}"), x);
        }
        for (name, pts) in [
            ("requeue_points", &p.requeue_points),
            ("hot_update_points", &p.hot_update_points),
        ] {
            if pts.is_empty() {
                v.push(format!("recovery.restart.{name}"), "must not be empty");
            } else if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
                v.push(format!("recovery.restart.{name}"), "machine counts must be strictly increasing");
            }
        }
        v.non_negative("recovery.update_window_s", r.update_window_s);
        v.non_negative("recovery.quarantine_s", r.quarantine_s);
    }

    fn check_checkpoint(&self, v: &mut Validator) {
        let c = &self.checkpoint;
        for (name, x) in [
            ("d2h_s", c.d2h_s),
            ("serialize_s", c.serialize_s),
            ("backup_send_s", c.backup_send_s),
            ("backup_overhead_s", c.backup_overhead_s),
            ("optimizer_s", c.optimizer_s),
        ] {
            v.non_negative(&format!("checkpoint.{name}"), x);
        }
        if c.optimizer_s >= self.step_duration_s {
            v.push("checkpoint.optimizer_s", "must be shorter than step_duration_s");
        }
        if c.every_steps == 0 {
            v.push("checkpoint.every_steps", "must be at least 1");
        }
        if c.retain == 0 {
            v.push("checkpoint.retain", "must be at least 1");
        }
        if c.remote_interval == 0 {
            v.push("checkpoint.remote_interval", "must be at least 1");
        }
    }
}

#[derive(Default)]
struct Validator {
    errors: Vec<FieldError>,
}

impl Validator {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(FieldError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, path: &str, x: f64) {
        if !(x.is_finite() && x > 0.0) {
            self.push(path, "must be a positive number");
        }
    }

    fn non_negative(&mut self, path: &str, x: f64) {
        if !(x.is_finite() && x >= 0.0) {
            self.push(path, "must be a non-negative number");
        }
    }

    fn probability(&mut self, path: &str, x: f64) {
        if !(0.0..=1.0).contains(&x) {
            self.push(path, "must be in [0, 1]");
        }
    }
}

pub const BUNDLED: [&str; 5] = ["fig4_hang", "fig6_sdc", "table8_detection", "zero_fault", "mixed_production"];

pub fn bundled(name: &str) -> Result<ScenarioConfig, ConfigError> {
    match name {
        "fig4_hang" => Ok(fig4_hang()),
        "fig6_sdc" => Ok(fig6_sdc()),
        "table8_detection" => Ok(table8_detection()),
        "zero_fault" => Ok(zero_fault()),
        "mixed_production" => Ok(mixed_production()),
        other => Err(ConfigError::UnknownBundled(other.to_string())),
    }
}

fn topo(tp: usize, pp: usize, dp: usize, rpm: usize) -> ParallelTopology {
    ParallelTopology::new(tp, pp, dp, rpm).expect("bundled topology is valid")
}

/// Backward-pass hang on the last PP group of a 16-machine job.
pub fn fig4_hang() -> ScenarioConfig {
    let mut s = ScenarioConfig::new("fig4_hang", 4, topo(2, 4, 4, 2), 2000);
    s.faults.push(FaultEvent::new(
        3_000.0,
        FaultKind::Hang {
            signatures: ["irecv", "irecv", "isend", "all_gather_into_tensor"]
                .map(String::from)
                .to_vec(),
        },
        vec![12, 13, 14, 15],
    ));
    s
}

/// SDC on machine 13 of 24 that no stop-time test catches.
pub fn fig6_sdc() -> ScenarioConfig {
    let mut s = ScenarioConfig::new("fig6_sdc", 6, topo(2, 4, 6, 2), 2000);
    s.diagnosis.align_recall = 0.0;
    s.faults
        .push(FaultEvent::new(3_000.0, FaultKind::Sdc { nan_delay_s: 300.0 }, vec![13]));
    s
}

/// The seven inspected infrastructure faults, one hour apart on distinct
/// machines.
pub fn table8_detection() -> ScenarioConfig {
    let mut s = ScenarioConfig::new("table8_detection", 8, topo(8, 4, 4, 8), 4000);
    let kinds = [
        FaultKind::NicCrash,
        FaultKind::PortFlapping,
        FaultKind::SwitchDown,
        FaultKind::GpuDriverHang,
        FaultKind::GpuHighTemp { slowdown: 0.8 },
        FaultKind::GpuLost,
        FaultKind::OsKernelFault,
    ];
    for (i, kind) in kinds.into_iter().enumerate() {
        let onset = 1800.0 + 7200.0 * i as f64 + 7.0 * i as f64;
        s.faults.push(FaultEvent::new(onset, kind, vec![2 * i + 1]));
    }
    s
}

pub fn zero_fault() -> ScenarioConfig {
    ScenarioConfig::new("zero_fault", 0, topo(2, 4, 4, 2), 10_000)
}

/// Production incident symptoms mapped to fault kinds, with observed counts.
/// Manual restarts become hot updates.
pub const PRODUCTION_MIX: [(&str, u32); 17] = [
    ("cuda-error", 19968),
    ("cpu-overload", 6095),
    ("cpu-oom", 5567),
    ("disk-space", 2755),
    ("infiniband", 1599),
    ("filesystem-mount", 1176),
    ("hdfs-error", 1104),
    ("container-error", 781),
    ("os-kernel-panic", 203),
    ("gpu-memory-error", 188),
    ("external-service", 128),
    ("gpu-unavailable", 76),
    ("disk-fault", 47),
    ("job-hang", 5506),
    ("mfu-decline", 442),
    ("nan-value", 148),
    ("manual-restart", 9582),
];

enum MixEntry {
    Fault(FaultKind, Option<f64>),
    Update(Urgency),
}

fn mix_entry(symptom: &str, rng: &mut ChaCha8Rng) -> MixEntry {
    use FaultKind::*;
    let transient = |d: f64| Some(d);
    match symptom {
        "cuda-error" | "gpu-memory-error" => MixEntry::Fault(CudaError, None),
        "cpu-overload" => MixEntry::Fault(UserCodeBug { module: None }, transient(30.0)),
        // Persists in the running code version until it is rolled back.
        "cpu-oom" => MixEntry::Fault(UserCodeBug { module: None }, None),
        "disk-space" | "filesystem-mount" | "disk-fault" | "os-kernel-panic" => MixEntry::Fault(OsKernelFault, None),
        "infiniband" => MixEntry::Fault(NicCrash, None),
        "hdfs-error" | "external-service" => MixEntry::Fault(HdfsError, transient(30.0)),
        "container-error" => MixEntry::Fault(TransientComm, transient(30.0)),
        "gpu-unavailable" => MixEntry::Fault(GpuLost, None),
        "job-hang" => MixEntry::Fault(
            Hang {
                signatures: vec!["irecv".into(), "isend".into()],
            },
            None,
        ),
        "mfu-decline" => MixEntry::Fault(FailSlow { slowdown: 0.5 }, None),
        "nan-value" => MixEntry::Fault(Sdc { nan_delay_s: 300.0 }, None),
        _ => MixEntry::Update(if rng.gen_bool(0.1) { Urgency::Urgent } else { Urgency::Lazy }),
    }
}

/// Largest-remainder apportionment of `total` events over `weights`.
pub fn apportion(weights: &[u32], total: u32) -> Vec<u32> {
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut out: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let mut left = total - out.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Two weeks of a 32-machine job hit by 200 events in production proportions.
pub fn mixed_production() -> ScenarioConfig {
    const EVENTS: u32 = 200;
    let topology = topo(8, 4, 8, 8);
    let mut s = ScenarioConfig::new("mixed_production", 2024, topology, 80_640);
    s.code_versions = vec![1, 2, 3, 4, 5, 6, 7, 8];
    s.recovery.spare_machines = Some(160);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let weights: Vec<u32> = PRODUCTION_MIX.iter().map(|&(_, w)| w).collect();
    let counts = apportion(&weights, EVENTS);
    let horizon = s.horizon_s();
    let machines = topology.machine_count();
    let pp_groups = topology.groups(crate::topology::Axis::Pp);
    for (&(symptom, _), &n) in PRODUCTION_MIX.iter().zip(&counts) {
        for _ in 0..n {
            let onset = (rng.gen_range(0.02..0.98) * horizon).round();
            match mix_entry(symptom, &mut rng) {
                MixEntry::Update(urgency) => s.updates.push(UpdateEvent {
                    submit_at_s: onset,
                    urgency,
                }),
                MixEntry::Fault(kind, duration_s) => {
                    let targets = if kind.is_job_level() {
                        Vec::new()
                    } else if matches!(kind, FaultKind::Hang { .. }) {
                        let g = pp_groups[rng.gen_range(0..pp_groups.len())];
                        let ms = topology.group_machines(g).expect("group exists");
                        ms[ms.len() - 2..].to_vec()
                    } else {
                        vec![rng.gen_range(0..machines)]
                    };
                    let mut f = FaultEvent::new(onset, kind, targets);
                    f.duration_s = duration_s;
                    s.faults.push(f);
                }
            }
        }
    }
    s.faults.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    s.updates.sort_by(|a, b| a.submit_at_s.total_cmp(&b.submit_at_s));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_validate_and_round_trip() {
        for name in BUNDLED {
            let s = bundled(name).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = ScenarioConfig::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s, "{name}");
        }
        assert!(matches!(bundled("nope"), Err(ConfigError::UnknownBundled(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&zero_fault().to_json()).unwrap();
        v["checkpoint"]["bogus"] = 1.into();
        assert!(matches!(
            ScenarioConfig::from_json(&v.to_string()),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn missing_seed_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&zero_fault().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn violations_carry_paths() {
        let mut s = zero_fault();
        s.faults.push(FaultEvent::new(1e9, FaultKind::NicCrash, vec![99]));
        s.faults.push(FaultEvent::new(10.0, FaultKind::NanLoss, vec![1]));
        s.checkpoint.optimizer_s = 20.0;
        let Err(ConfigError::Invalid(errs)) = s.validate() else {
            panic!("expected violations")
        };
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(
            paths,
            [
                "faults[0].onset_s",
                "faults[0].machines[0]",
                "faults[1].machines",
                "checkpoint.optimizer_s"
            ]
        );
    }

    #[test]
    fn odd_machine_count_rejected() {
        let s = ScenarioConfig::new("odd", 1, topo(1, 1, 3, 1), 10);
        let Err(ConfigError::Invalid(errs)) = s.validate() else {
            panic!()
        };
        assert_eq!(errs[0].path, "topology");
    }

    #[test]
    fn apportion_sums_and_hang_share() {
        let weights: Vec<u32> = PRODUCTION_MIX.iter().map(|&(_, w)| w).collect();
        let counts = apportion(&weights, 200);
        assert_eq!(counts.iter().sum::<u32>(), 200);
        let hang = PRODUCTION_MIX.iter().position(|&(s, _)| s == "job-hang").unwrap();
        assert_eq!(counts[hang], 20);
    }
}
