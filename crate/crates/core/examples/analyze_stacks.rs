//! Group trainer stacks from a hung job and isolate the outlier machines.

use robustsim::aggregation::{cluster, hang_snapshot, healthy_trainer, isolate, stuck_trainer, StackSnapshot};
use robustsim::topology::ParallelTopology;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let topo = ParallelTopology::new(2, 4, 4, 2)?;
    let snap = hang_snapshot();
    let grouping = cluster(&snap)?;
    let iso = isolate(&grouping, &topo)?;
    println!("outliers {:?}", grouping.outliers);
    println!("evict {:?} ({:?})", iso.machines, iso.group);

    // A lone stuck machine is evicted by itself.
    let mut snap = StackSnapshot::default();
    for m in 0..16 {
        snap.insert(m, if m == 5 { stuck_trainer("nccl_recv") } else { healthy_trainer() });
    }
    let iso = isolate(&cluster(&snap)?, &topo)?;
    println!("evict {:?}", iso.machines);
    Ok(())
}
