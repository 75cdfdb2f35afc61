//! Lazy updates ride along with the next restart; urgent ones restart now.

use robustsim::recovery::Urgency;
use robustsim::scenario::{zero_fault, UpdateEvent};
use robustsim::simkernel::{run, FaultEvent, FaultKind};

fn main() -> robustsim::Result<()> {
    let mut cfg = zero_fault();
    cfg.horizon_steps = 4000;
    cfg.updates = vec![
        UpdateEvent { submit_at_s: 2_000.0, urgency: Urgency::Lazy },
        UpdateEvent { submit_at_s: 5_000.0, urgency: Urgency::Urgent },
        UpdateEvent { submit_at_s: 8_000.0, urgency: Urgency::Lazy },
    ];
    cfg.faults.push(FaultEvent::new(20_000.0, FaultKind::GpuLost, vec![4]));

    let r = run(&cfg)?;
    for rs in &r.restarts {
        println!("{:>7.0}s {:?} took {:.0} s, applied {:?}", rs.t_s, rs.kind, rs.duration_s, rs.updates_applied);
    }
    println!("versions {:?}", r.code_versions);
    Ok(())
}
