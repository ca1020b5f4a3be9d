//! DDIM on an analytic Gaussian mixture: no network, exact ε, so the sampler
//! can be checked against the prior it should recover.

use z2h::*;

fn main() -> z2h::Result<()> {
    let prior = GmmPrior::new(vec![0.3, 0.7], vec![vec![-2.0], vec![1.0]], vec![vec![0.5], vec![0.5]])?;
    let n = 10_000;
    let gmm = GmmDenoiser::batched(prior.clone(), NoiseSchedule::default(), n)?;
    let cfg = GenerationConfig::new(uniform_schedule(1000, 50)?, FilterConfig::disabled(), Condition::default(), 7);
    let g = generate(&gmm, &cfg)?;

    let mut weight = [0.0; 2];
    let mut mean = [0.0; 2];
    for &x in g.sample.data() {
        let r = prior.responsibilities(&[f64::from(x)]);
        for k in 0..2 {
            weight[k] += r[k];
            mean[k] += r[k] * f64::from(x);
        }
    }
    for k in 0..2 {
        println!("component {k}: weight {:.4}  mean {:+.4}", weight[k] / n as f64, mean[k] / weight[k]);
    }
    println!("nfe {}", g.nfe.target);
    Ok(())
}
