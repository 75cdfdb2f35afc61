//! Pair every machine with a checkpoint backup peer outside its own
//! pipeline and data-parallel groups.

use robustsim::cli::render_backup;
use robustsim::topology::ParallelTopology;

fn main() -> robustsim::Result<()> {
    let topo = ParallelTopology::new(2, 4, 2, 2)?;
    let plan = topo.backup_plan()?;
    print!("{}", render_backup(&topo, &plan));
    assert!(plan.violations(&topo).is_empty());

    // Machines hold every rank of a stage here, so the plan pairs machines.
    let flat = ParallelTopology::new(2, 1, 4, 2)?;
    let plan = flat.backup_plan()?;
    println!("pp=1 pairs: {:?}", (0..4).map(|m| (m, plan.peer_of(2 * m) / 2)).collect::<Vec<_>>());
    Ok(())
}
