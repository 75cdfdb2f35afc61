//! Build a scenario in code: a flapping port that heals on its own, then a
//! GPU loss and a fail-slow machine.

use robustsim::scenario::ScenarioConfig;
use robustsim::simkernel::{run, FaultEvent, FaultKind};
use robustsim::topology::ParallelTopology;

fn main() -> robustsim::Result<()> {
    let topo = ParallelTopology::new(4, 4, 4, 4)?;
    let mut cfg = ScenarioConfig::new("custom", 11, topo, 3000);
    cfg.faults = vec![
        FaultEvent::new(1_200.0, FaultKind::PortFlapping, vec![3]).lasting(20.0),
        FaultEvent::new(9_000.0, FaultKind::GpuLost, vec![7]),
        FaultEvent::new(20_000.0, FaultKind::FailSlow { slowdown: 0.3 }, vec![10]),
    ];
    cfg.validate()?;

    let r = run(&cfg)?;
    println!("{:?} after {:.0} s, ETTR {:.4}", r.outcome, r.wall_clock_s, r.ettr);
    for f in &r.faults {
        match f.incident {
            Some(i) => println!("{:>16} at {:>7.0}s -> incident #{i}", f.kind, f.onset_s),
            None => println!("{:>16} at {:>7.0}s -> tolerated", f.kind, f.onset_s),
        }
    }
    Ok(())
}
