#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robustsim::ckptplan::CkptPolicy;
use robustsim::recovery::{RestartPolicy, Urgency};
use robustsim::scenario::{ScenarioConfig, UpdateEvent};
use robustsim::simkernel::{FaultEvent, FaultKind};
use robustsim::topology::ParallelTopology;

const TOPOLOGIES: [(usize, usize, usize, usize); 5] = [(2, 4, 2, 2), (2, 4, 4, 2), (2, 2, 4, 2), (4, 2, 2, 4), (1, 4, 4, 2)];

fn random_kind(rng: &mut ChaCha8Rng, machines: usize) -> FaultKind {
    let sig = ["irecv", "isend", "all_reduce", "barrier"];
    match rng.gen_range(0..15) {
        0 => FaultKind::NicCrash,
        1 => FaultKind::PortFlapping,
        2 => FaultKind::SwitchDown,
        3 => FaultKind::GpuDriverHang,
        4 => FaultKind::GpuHighTemp {
            slowdown: rng.gen_range(0.3..0.95),
        },
        5 => FaultKind::GpuLost,
        6 => FaultKind::OsKernelFault,
        7 => FaultKind::CudaError,
        8 => FaultKind::UserCodeBug { module: None },
        9 => FaultKind::TransientComm,
        10 => FaultKind::Sdc {
            nan_delay_s: rng.gen_range(0.0..600.0),
        },
        11 => FaultKind::Hang {
            signatures: (0..machines).map(|_| sig.choose(rng).unwrap().to_string()).collect(),
        },
        12 => FaultKind::FailSlow {
            slowdown: rng.gen_range(0.2..0.9),
        },
        13 => FaultKind::NanLoss,
        _ => FaultKind::HdfsError,
    }
}

/// A small scenario with a random fault script, update stream and settings.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tp, pp, dp, rpm) = *TOPOLOGIES.choose(&mut rng).unwrap();
    let topo = ParallelTopology::new(tp, pp, dp, rpm).unwrap();
    let n = topo.machine_count();
    let mut s = ScenarioConfig::new(format!("random-{seed}"), rng.gen(), topo, rng.gen_range(200..3000));
    s.step_duration_s = [5.0, 10.0, 15.0][rng.gen_range(0..3)];
    s.code_versions = (1..=rng.gen_range(1..4)).collect();
    let horizon = s.horizon_s();
    for _ in 0..rng.gen_range(0..10) {
        let count = if rng.gen_bool(0.3) { rng.gen_range(1..=n.min(4)) } else { 1 };
        let mut targets: Vec<usize> = (0..n).collect();
        targets.shuffle(&mut rng);
        targets.truncate(count);
        let kind = random_kind(&mut rng, count);
        let targets = if kind.is_job_level() { Vec::new() } else { targets };
        let mut f = FaultEvent::new(rng.gen_range(0.0..horizon).floor(), kind, targets);
        if rng.gen_bool(0.3) {
            f.duration_s = Some(rng.gen_range(5.0..1200.0));
        }
        if rng.gen_bool(0.2) {
            f.jitter_s = Some(rng.gen_range(0.0..60.0));
        }
        s.faults.push(f);
    }
    for _ in 0..rng.gen_range(0..4) {
        s.updates.push(UpdateEvent {
            submit_at_s: rng.gen_range(0.0..horizon).floor(),
            urgency: if rng.gen_bool(0.3) { Urgency::Urgent } else { Urgency::Lazy },
        });
    }
    s.detection.inspections_enabled = rng.gen_bool(0.8);
    s.recovery.policy = *RestartPolicy::ALL.choose(&mut rng).unwrap();
    if rng.gen_bool(0.3) {
        s.recovery.spare_machines = Some(rng.gen_range(0..=n));
    }
    s.checkpoint.policy = *CkptPolicy::ALL.choose(&mut rng).unwrap();
    s.diagnosis.align_recall = rng.gen_range(0.0..=1.0);
    s.aggregation.noise_prob = rng.gen_range(0.0..0.2);
    s.sliding_window_s = rng.gen_range(600.0..7200.0);
    s.validate().unwrap_or_else(|e| panic!("generator produced an invalid scenario: {e}"));
    s
}
