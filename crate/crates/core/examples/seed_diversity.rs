//! Spread of samples across seeds as the number of resampling rounds grows.

use z2h::scene::random_pair;
use z2h::*;

fn main() -> z2h::Result<()> {
    let toy = ToyDenoiser::random(8);
    let pair = random_pair(0, 0)?;
    let cond = Condition::new(pair.relative, Some(pair.source.to_latent()));
    let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS)?;
    for r in [1, 5, 15] {
        let filter = FilterConfig { resample_iters: r, msa: false, ..FilterConfig::default() };
        let cfg = GenerationConfig::new(sched.clone(), filter, cond.clone(), 0);
        let images = seed_sweep(&toy, &cfg, 6)?
            .iter()
            .map(Image::from_latent)
            .collect::<z2h::Result<Vec<_>>>()?;
        println!("R = {r:2}: diversity {:.5}", seed_diversity(&images)?);
    }
    Ok(())
}
