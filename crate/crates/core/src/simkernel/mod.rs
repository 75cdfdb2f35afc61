mod cluster;
mod engine;
mod fault;
mod ledger;

pub use cluster::{ActiveFault, ClusterState, Health, MachineState, PollView, Signal, SimTime};
pub use engine::{replay_plan, run, TrainingJob};
pub use fault::{FaultEvent, FaultKind, JobEffect, Observability};
pub use ledger::{ettr, final_ettr, EttrMode, EttrPoint, MetricsLedger, Segment, SegmentClass};
