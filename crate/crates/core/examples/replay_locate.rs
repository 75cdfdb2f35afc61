//! Locate a machine that corrupts results by replaying groups of machines.

use robustsim::diagnosis::{dual_phase_replay, ReplayPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = ReplayPlan::new(24, 4)?;
    println!("horizontal: {:?}", plan.horizontal_groups());
    println!("vertical:   {:?}", plan.vertical_groups());

    for faulty in [0, 13, 23] {
        let out = dual_phase_replay(24, 4, faulty)?;
        println!(
            "faulty {faulty:>2}: groups ({}, {}) -> suspects {:?}",
            out.horizontal, out.vertical, out.suspects
        );
    }

    // More groups than machines per group leaves several suspects.
    let out = dual_phase_replay(24, 6, 13)?;
    println!("m=6: {} suspects, at most {}", out.suspects.len(), out.plan.expected_cardinality());
    Ok(())
}
