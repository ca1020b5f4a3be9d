//! Dual-branch sampling: an identity-pose source branch runs alongside the
//! target, and the target's self-attention reads the source's keys and values.

use std::collections::BTreeSet;

use z2h::scene::{view_pair, ShapeFamily, Sprite};
use z2h::*;

fn main() -> z2h::Result<()> {
    let toy = ToyDenoiser::random(5);
    let pair = view_pair(&Sprite::new(ShapeFamily::LShape), Pose::new(0.2, 0.9, 0.0))?;
    let cond = Condition::new(pair.relative, Some(pair.source.to_latent()));
    let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS)?;

    let mut rows = Vec::new();
    for layers in [BTreeSet::new(), BTreeSet::from([1]), BTreeSet::from([0, 1])] {
        let filter = FilterConfig { msa_layers: layers.clone(), ..FilterConfig::default() };
        let g = generate(&toy, &GenerationConfig::new(sched.clone(), filter, cond.clone(), 1))?;
        println!(
            "layers {layers:?}: mode {:?}, nfe {} + {} = {}",
            g.diagnostics.branch_mode,
            g.nfe.target,
            g.nfe.source,
            g.nfe.total()
        );
        rows.push(Image::from_latent(&g.sample)?);
    }
    println!("mse(no layers, {{1}}) = {:.6}", mse(&rows[0], &rows[1])?);
    println!("mse({{1}}, {{0, 1}}) = {:.6}", mse(&rows[1], &rows[2])?);
    Ok(())
}
