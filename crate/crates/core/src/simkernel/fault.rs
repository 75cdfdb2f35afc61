//! Injected fault vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detection::InspectionItem;
use crate::diagnosis::DiagTest;
use crate::topology::MachineId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FaultKind {
    NicCrash,
    PortFlapping,
    SwitchDown,
    GpuDriverHang,
    GpuHighTemp {
        #[serde(default = "default_thermal_slowdown")]
        slowdown: f64,
    },
    GpuLost,
    OsKernelFault,
    CudaError,
    /// Bug in the code version active at onset. A `module` tag means the
    /// error log names the offending module.
    UserCodeBug {
        #[serde(default)]
        module: Option<String>,
    },
    TransientComm,
    /// Silent data corruption; the loss turns NaN `nan_delay_s` later.
    Sdc {
        #[serde(default = "default_nan_delay")]
        nan_delay_s: f64,
    },
    /// Silent hang. Target machines show `signatures` (one per target, or a
    /// single one for all) as the leaf frame of their trainer stack.
    Hang { signatures: Vec<String> },
    /// Throughput drops to `slowdown` of nominal (0.5 doubles step time).
    FailSlow { slowdown: f64 },
    /// Loss becomes NaN because of the code version active at onset.
    NanLoss,
    HdfsError,
}

fn default_thermal_slowdown() -> f64 {
    0.8
}

fn default_nan_delay() -> f64 {
    300.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observability {
    Inspectable,
    LogVisible,
    MetricVisible,
    Silent,
}

/// What a fault does to the running job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JobEffect {
    /// Collective communication stalls; no progress, no log.
    Block,
    /// Processes exit with an error log.
    Crash,
    /// Steps slow down to `factor` of nominal throughput.
    Degrade(f64),
    /// Nothing visible until the loss turns NaN.
    Corrupt { nan_delay_ms: u64 },
    /// Loss is NaN from onset.
    Nan,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::NicCrash => "nic-crash",
            FaultKind::PortFlapping => "port-flapping",
            FaultKind::SwitchDown => "switch-down",
            FaultKind::GpuDriverHang => "gpu-driver-hang",
            FaultKind::GpuHighTemp { .. } => "gpu-high-temp",
            FaultKind::GpuLost => "gpu-lost",
            FaultKind::OsKernelFault => "os-kernel-fault",
            FaultKind::CudaError => "cuda-error",
            FaultKind::UserCodeBug { .. } => "user-code-bug",
            FaultKind::TransientComm => "transient-comm",
            FaultKind::Sdc { .. } => "sdc",
            FaultKind::Hang { .. } => "hang",
            FaultKind::FailSlow { .. } => "fail-slow",
            FaultKind::NanLoss => "nan-loss",
            FaultKind::HdfsError => "hdfs-error",
        }
    }

    pub fn observability(&self) -> Observability {
        match self {
            FaultKind::NicCrash
            | FaultKind::PortFlapping
            | FaultKind::SwitchDown
            | FaultKind::GpuDriverHang
            | FaultKind::GpuHighTemp { .. }
            | FaultKind::GpuLost
            | FaultKind::OsKernelFault => Observability::Inspectable,
            FaultKind::CudaError
            | FaultKind::UserCodeBug { .. }
            | FaultKind::TransientComm
            | FaultKind::HdfsError => Observability::LogVisible,
            FaultKind::Hang { .. } | FaultKind::FailSlow { .. } | FaultKind::NanLoss => {
                Observability::MetricVisible
            }
            FaultKind::Sdc { .. } => Observability::Silent,
        }
    }

    pub fn inspection_item(&self) -> Option<InspectionItem> {
        match self {
            FaultKind::NicCrash => Some(InspectionItem::Nic),
            FaultKind::PortFlapping => Some(InspectionItem::NetworkPort),
            FaultKind::SwitchDown => Some(InspectionItem::Switch),
            FaultKind::GpuDriverHang => Some(InspectionItem::GpuDriver),
            FaultKind::GpuHighTemp { .. } => Some(InspectionItem::GpuTemp),
            FaultKind::GpuLost => Some(InspectionItem::GpuLost),
            FaultKind::OsKernelFault => Some(InspectionItem::OsKernel),
            _ => None,
        }
    }

    pub fn job_effect(&self) -> JobEffect {
        match self {
            FaultKind::NicCrash
            | FaultKind::PortFlapping
            | FaultKind::SwitchDown
            | FaultKind::GpuDriverHang
            | FaultKind::GpuLost
            | FaultKind::OsKernelFault
            | FaultKind::Hang { .. } => JobEffect::Block,
            FaultKind::CudaError
            | FaultKind::UserCodeBug { .. }
            | FaultKind::TransientComm
            | FaultKind::HdfsError => JobEffect::Crash,
            FaultKind::GpuHighTemp { slowdown } | FaultKind::FailSlow { slowdown } => JobEffect::Degrade(*slowdown),
            FaultKind::Sdc { nan_delay_s } => JobEffect::Corrupt {
                nan_delay_ms: (nan_delay_s * 1000.0).round() as u64,
            },
            FaultKind::NanLoss => JobEffect::Nan,
        }
    }

    /// Faults tied to the job's code or services rather than a machine.
    pub fn is_job_level(&self) -> bool {
        matches!(
            self,
            FaultKind::UserCodeBug { .. } | FaultKind::NanLoss | FaultKind::HdfsError
        )
    }

    /// Faults bound to the code version active at onset.
    pub fn is_code_bound(&self) -> bool {
        matches!(self, FaultKind::UserCodeBug { .. } | FaultKind::NanLoss)
    }

    /// Blocking faults after which training picks up again once they clear.
    pub fn self_recovers(&self) -> bool {
        matches!(self, FaultKind::PortFlapping)
    }

    /// Whether `test` flags a machine carrying this fault, before any
    /// configured recall is applied.
    pub fn visible_to(&self, test: DiagTest) -> bool {
        match test {
            DiagTest::GpuCheck => matches!(
                self,
                FaultKind::GpuDriverHang
                    | FaultKind::GpuLost
                    | FaultKind::CudaError
                    | FaultKind::GpuHighTemp { .. }
                    | FaultKind::OsKernelFault
                    | FaultKind::Sdc { .. }
            ),
            DiagTest::IntraComm => false,
            DiagTest::InterComm => matches!(
                self,
                FaultKind::NicCrash | FaultKind::PortFlapping | FaultKind::SwitchDown | FaultKind::TransientComm
            ),
            DiagTest::BitwiseAlign => matches!(self, FaultKind::Sdc { .. }),
        }
    }

    /// Machines that run the replayed job on a faulty machine fail.
    pub fn reproduces_in_replay(&self) -> bool {
        !self.is_job_level() && !matches!(self, FaultKind::TransientComm)
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One scripted fault. `machines` are topology machine slots; the fault hits
/// whichever physical machine occupies the slot at onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub onset_s: f64,
    pub kind: FaultKind,
    #[serde(default)]
    pub machines: Vec<MachineId>,
    /// `None` means permanent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    /// Uniform random delay in `[0, jitter_s)` added to the onset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_s: Option<f64>,
}

impl FaultEvent {
    pub fn new(onset_s: f64, kind: FaultKind, machines: Vec<MachineId>) -> Self {
        FaultEvent {
            onset_s,
            kind,
            machines,
            duration_s: None,
            jitter_s: None,
        }
    }

    pub fn lasting(mut self, duration_s: f64) -> Self {
        self.duration_s = Some(duration_s);
        self
    }

    pub fn observability(&self) -> Observability {
        self.kind.observability()
    }

    /// Hang signature for the `i`-th target machine.
    pub fn hang_signature(&self, i: usize) -> Option<&str> {
        match &self.kind {
            FaultKind::Hang { signatures } => signatures.get(i).or(signatures.first()).map(String::as_str),
            _ => None,
        }
    }
}
