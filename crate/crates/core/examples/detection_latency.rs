//! Detection latency of each inspected fault, with and without inspections.

use robustsim::scenario::table8_detection;
use robustsim::simkernel::run;

fn main() -> robustsim::Result<()> {
    let mut cfg = table8_detection();
    let with = run(&cfg)?;
    cfg.detection.inspections_enabled = false;
    let without = run(&cfg)?;

    println!("{:<16} {:>10} {:>10}", "fault", "inspected", "timeout");
    for (a, b) in with.incidents.iter().zip(&without.incidents) {
        println!(
            "{:<16} {:>9.0}s {:>9.0}s",
            a.kinds.join("+"),
            a.detection_latency_s,
            b.detection_latency_s
        );
    }
    Ok(())
}
