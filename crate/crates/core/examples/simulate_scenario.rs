//! Run a bundled scenario and print the text report.
//!
//! `cargo run --example simulate_scenario -- fig6_sdc`

use robustsim::cli::load_scenario;
use robustsim::simkernel::run;

fn main() -> robustsim::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "fig4_hang".into());
    let report = run(&load_scenario(&name)?)?;
    print!("{}", report.render_text());
    for inc in &report.incidents {
        println!("#{} path: {}", inc.id, inc.path.join(" -> "));
    }
    Ok(())
}
