//! Non-uniform timestep layouts: dense near the two ends, sparse in the middle.

use z2h::schedule::hourglass_from_density;
use z2h::*;

fn main() -> z2h::Result<()> {
    let default = hourglass_schedule(1000, &DEFAULT_HOURGLASS)?;
    println!("default ({} steps): {:?}", default.len(), default.steps());
    for s in default.stages() {
        println!("  ({}, {}]  {} steps  density {:.3}", s.lo, s.hi, default.count_in(s.lo, s.hi), s.density());
    }
    println!("early:middle density {:?}", default.density_ratio());

    let sparse = hourglass_from_density(1000, 300, 700, 6, 3.0)?;
    println!("tau_m 300, tau_e 700, ratio 3: {:?}", sparse.steps());
    println!("uniform-25: {:?}", uniform_schedule(1000, 25)?.steps());
    Ok(())
}
