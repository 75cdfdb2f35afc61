//! Per-step stall of each checkpoint pipeline, and how many host buffers
//! each one holds at once.

use robustsim::ckptplan::{max_in_flight, timeline, CkptDurations, CkptPolicy};

fn main() {
    let d = CkptDurations::default();
    for policy in CkptPolicy::ALL {
        let tl = timeline(policy, &d, 20);
        let stall: f64 = tl.iter().map(|s| s.stall).sum::<f64>() / tl.len() as f64;
        println!(
            "{policy:?}: stall {stall:.2} s/step, step {:.2} s, buffers {}",
            tl[19].end - tl[18].end,
            max_in_flight(&tl)
        );
    }

    // Slow serialization starts to back up the async pipeline.
    let slow = CkptDurations { serialize_s: 40.0, ..d };
    let tl = timeline(CkptPolicy::ByterobustAsync, &slow, 20);
    let stalls: Vec<String> = tl.iter().map(|s| format!("{:.1}", s.stall)).collect();
    println!("slow serialize stalls: {}", stalls.join(" "));
}
