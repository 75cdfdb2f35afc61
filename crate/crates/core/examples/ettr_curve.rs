//! Write the cumulative and sliding ETTR of the mixed production run as CSV.
//!
//! `cargo run --release --example ettr_curve > ettr.csv`

use robustsim::report::ettr_csv;
use robustsim::scenario::mixed_production;
use robustsim::simkernel::run;

fn main() -> robustsim::Result<()> {
    let r = run(&mixed_production())?;
    eprintln!("ETTR {:.4} over {:.1} days", r.ettr, r.wall_clock_s / 86_400.0);
    for (class, s) in &r.time_by_class_s {
        eprintln!("  {class:?}: {:.2} h", s / 3600.0);
    }
    print!("{}", ettr_csv(&r));
    Ok(())
}
