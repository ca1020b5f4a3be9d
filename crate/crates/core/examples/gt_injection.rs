//! Capture self-attention maps from a lightly noised copy of the true target
//! and force them at every target forward.
//!
//! Pass a trained weight file as the first argument; without one the random
//! toy is used, which shows the mechanics but not the effect.

use z2h::scene::random_pair;
use z2h::*;

fn main() -> z2h::Result<()> {
    let toy = match std::env::args_os().nth(1) {
        Some(p) => ToyDenoiser::from_weights(load_weights(p.as_ref())?)?,
        None => ToyDenoiser::random(2),
    };
    let noise = NoiseSchedule::default();
    let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS)?;
    let mut wins = 0;
    for seed in 0..6 {
        let pair = random_pair(seed, 0)?;
        let cond = Condition::new(pair.relative, Some(pair.source.to_latent()));
        let mut cfg = GenerationConfig::new(sched.clone(), FilterConfig::default(), cond.clone(), seed);
        let without = Image::from_latent(&generate(&toy, &cfg)?.sample)?;
        cfg.gt_maps = Some(gt_map_capture(&pair.target.to_latent(), 5, &toy, &cond, &noise, seed)?);
        let g = generate(&toy, &cfg)?;
        let with = Image::from_latent(&g.sample)?;
        let (a, b) = (mse(&with, &pair.target)?, mse(&without, &pair.target)?);
        wins += usize::from(a < b);
        println!("seed {seed} {:>6}: mse with {a:.4} without {b:.4}  ({} overrides)", pair.family.name(), g.diagnostics.overrides);
    }
    println!("injection better in {wins}/6");
    Ok(())
}
