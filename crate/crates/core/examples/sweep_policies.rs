//! Compare restart policies on one scenario and print the warm-up table.

use robustsim::cli::{cmd_sweep, load_scenario, render_sweep};
use robustsim::recovery::RestartPolicy;

fn main() -> robustsim::Result<()> {
    let mut cfg = load_scenario("table8_detection")?;
    cfg.horizon_steps = 2000;
    let horizon = cfg.horizon_s();
    cfg.faults.retain(|f| f.onset_s < horizon);
    let sweep = cmd_sweep(&cfg, &RestartPolicy::ALL)?;
    print!("{}", render_sweep(&sweep));
    Ok(())
}
