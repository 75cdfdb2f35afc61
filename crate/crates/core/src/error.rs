use thiserror::Error;

use crate::topology::{MachineId, RankCoord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("parallel sizes must be positive")]
    ZeroAxis,
    #[error("ranks_per_machine must be positive")]
    ZeroRanksPerMachine,
    #[error("{ranks} ranks cannot be split evenly into machines of {ranks_per_machine}")]
    UnevenMachines { ranks: usize, ranks_per_machine: usize },
    #[error("rank {rank} out of range (total {total})")]
    RankOutOfRange { rank: usize, total: usize },
    #[error("coordinate {0:?} out of range")]
    CoordOutOfRange(RankCoord),
    #[error("outlier set is empty")]
    EmptyOutlierSet,
    #[error("no backup pairing exists for {machines} machine(s)")]
    NoBackupPeer { machines: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("group size {m} does not divide machine count {z}")]
    IndivisibleGroups { z: usize, m: usize },
    #[error("fault not reproducible: no group failed in the {phase} phase")]
    NotReproducible { phase: &'static str },
    #[error("every group failed in the {phase} phase; fault is not machine-local")]
    AllGroupsFailed { phase: &'static str },
    #[error("{failed} groups failed in the {phase} phase; more than one faulty machine")]
    MultipleGroupsFailed { phase: &'static str, failed: usize },
}

/// A single schema or consistency violation, addressed by a JSON-style path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("machine {0} does not exist")]
    NoSuchMachine(MachineId),
    #[error("machine {0} is evicted")]
    Evicted(MachineId),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
