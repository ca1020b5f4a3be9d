//! Resampling with attention-map filtering on the toy denoiser. Prints the
//! per-evaluation trace so the inner rounds at the early steps are visible.

use z2h::pipeline::Branch;
use z2h::scene::{view_pair, ShapeFamily, Sprite};
use z2h::*;

fn main() -> z2h::Result<()> {
    let toy = ToyDenoiser::random(3);
    let pair = view_pair(&Sprite::new(ShapeFamily::Glyph), Pose::new(0.0, 1.2, 0.0))?;
    let cond = Condition::new(pair.relative, Some(pair.source.to_latent()));
    let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS)?;

    let filter = FilterConfig { msa: false, pooling: Pooling::Ema(0.5), ..FilterConfig::default() };
    let g = generate(&toy, &GenerationConfig::new(sched.clone(), filter, cond.clone(), 0))?;
    for rec in g.diagnostics.records.iter().filter(|r| r.branch == Branch::Target).take(12) {
        println!("t {:4}  r {}  nfe {}", rec.t, rec.r, rec.nfe);
    }
    println!("... {} evaluations, expected {}", g.nfe.target, expected_nfe(&sched, &FilterConfig::default()));

    let resample_only = FilterConfig { in_step: false, cross_step: false, msa: false, ..FilterConfig::default() };
    let h = generate(&toy, &GenerationConfig::new(sched, resample_only, cond, 0))?;
    let d = mse(&Image::from_latent(&g.sample)?, &Image::from_latent(&h.sample)?)?;
    println!("filtered vs resample-only mse {d:.6}");
    Ok(())
}
