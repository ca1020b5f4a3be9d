//! Variance-preserving forward process, deterministic DDIM stepping,
//! re-noising between sampled steps, and the exact ε-prediction of a
//! diagonal Gaussian mixture.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// β / ᾱ tables of a VP forward process with `ᾱ_0 = 1`.
///
/// Coefficients are kept in `f64`; they are rounded to `f32` only where they
/// multiply tensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    // beta[t] for t in 1..=steps; beta[0] is unused and stored as 0.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// `β_t = (√β_1 + (t-1)/(T-1) · (√β_T - √β_1))²`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut beta = vec![0.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let frac = (t - 1) as f64 / (steps - 1) as f64;
            let root = a + frac * (b - a);
            beta[t] = root * root;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self {
            steps,
            beta,
            alpha_bar,
        })
    }

    /// Length `T` of the forward process.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.beta[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Schedule(format!(
                "timestep {t} outside [{lo}, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `[2, T+1]` tensor: row 0 holds β (with β_0 = 0), row 1 holds ᾱ.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .beta
            .iter()
            .chain(&self.alpha_bar)
            .map(|&x| x as f32)
            .collect();
        Tensor::new(vec![2, self.steps + 1], data).expect("table shape")
    }

    /// `z_t = √ᾱ_t · x0 + √(1-ᾱ_t) · noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check(t, 1)?;
        let ab = self.alpha_bar[t];
        Tensor::axpby(ab.sqrt() as f32, x0, (1.0 - ab).sqrt() as f32, noise)
    }

    /// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
    pub fn ddim_step(&self, z_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        self.check(t, 1)?;
        if t_prev >= t {
            return Err(Error::Schedule(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let ab_p = self.alpha_bar[t_prev];
        let x0 = self.predict_x0(z_t, eps, t)?;
        Tensor::axpby(ab_p.sqrt() as f32, &x0, (1.0 - ab_p).sqrt() as f32, eps)
    }

    /// `x̂0 = (z_t - √(1-ᾱ_t) · ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, z_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t, 1)?;
        let ab = self.alpha_bar[t];
        let inv = (1.0 / ab.sqrt()) as f32;
        let c = ((1.0 - ab).sqrt() / ab.sqrt()) as f32;
        Tensor::axpby(inv, z_t, -c, eps)
    }

    /// Forward conditional between two sampled steps:
    /// `z_t = √(ᾱ_t/ᾱ_p) · z_p + √(1 - ᾱ_t/ᾱ_p) · noise`.
    pub fn renoise(&self, z_prev: &Tensor, t_prev: usize, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check(t, 1)?;
        if t_prev >= t {
            return Err(Error::Schedule(format!("renoise needs t_prev < t, got {t_prev} >= {t}")));
        }
        let ratio = self.alpha_bar[t] / self.alpha_bar[t_prev];
        Tensor::axpby(ratio.sqrt() as f32, z_prev, (1.0 - ratio).sqrt() as f32, noise)
    }
}

/// Diagonal-covariance Gaussian mixture prior over `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::Config("mixture needs matching, non-empty weights/means/variances".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights must be positive and sum to 1, got sum {total}"
            )));
        }
        let dim = means[0].len();
        if dim == 0
            || means.iter().any(|m| m.len() != dim)
            || variances.iter().any(|v| v.len() != dim)
        {
            return Err(Error::Dimension("mixture components disagree on dimension".into()));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("mixture variances must be strictly positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic component `N(0, I_dim)`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]])
    }

    /// Equal-weight mixture with shared isotropic variance.
    pub fn isotropic(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, Vec::len);
        Self::new(vec![1.0 / k as f64; k], means, vec![vec![variance; dim]; k])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Draw `n` samples directly from the mixture, as rows of an `[n, dim]` tensor.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = self.components() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = i;
                    break;
                }
            }
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                data.push((self.means[comp][j] + self.variances[comp][j].sqrt() * e) as f32);
            }
        }
        Tensor::new(vec![n, d], data)
    }

    /// Component responsibilities of a clean sample under the prior itself.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        self.noisy_responsibilities(x, 1.0)
    }

    fn noisy_responsibilities(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let s = alpha_bar.sqrt();
        let logs: Vec<f64> = (0..self.components())
            .map(|i| {
                let mut lp = self.weights[i].ln();
                for j in 0..z.len() {
                    let var = alpha_bar * self.variances[i][j] + (1.0 - alpha_bar);
                    let diff = z[j] - s * self.means[i][j];
                    lp -= 0.5 * (diff * diff / var + (2.0 * std::f64::consts::PI * var).ln());
                }
                lp
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Exact posterior mean `E[x0 | z_t]` for one latent vector.
    pub fn posterior_mean(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let s = alpha_bar.sqrt();
        let resp = self.noisy_responsibilities(z, alpha_bar);
        let mut mean = vec![0.0; z.len()];
        for (i, r) in resp.iter().enumerate() {
            for j in 0..z.len() {
                let var = alpha_bar * self.variances[i][j] + (1.0 - alpha_bar);
                let gain = s * self.variances[i][j] / var;
                mean[j] += r * (self.means[i][j] + gain * (z[j] - s * self.means[i][j]));
            }
        }
        mean
    }
}

/// Exact ε-prediction `(z_t - √ᾱ_t · E[x0|z_t]) / √(1-ᾱ_t)` for a mixture prior.
///
/// The last axis of `z_t` is the mixture dimension; leading axes are a batch.
pub fn gmm_eps(z_t: &Tensor, t: usize, prior: &GmmPrior, schedule: &NoiseSchedule) -> Result<Tensor> {
    let d = prior.dim();
    if z_t.last_dim() != d {
        return Err(Error::Dimension(format!(
            "latent last axis {} does not match mixture dimension {d}",
            z_t.last_dim()
        )));
    }
    if t == 0 {
        return Err(Error::Schedule("gmm_eps needs t >= 1".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Vec::with_capacity(z_t.len());
    let mut row = vec![0.0f64; d];
    for chunk in z_t.data().chunks_exact(d) {
        for (r, &x) in row.iter_mut().zip(chunk) {
            *r = f64::from(x);
        }
        let mean = prior.posterior_mean(&row, ab);
        out.extend(row.iter().zip(&mean).map(|(z, m)| ((z - s * m) / n) as f32));
    }
    Tensor::new(z_t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn scalar(x: f32) -> Tensor {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    /// ᾱ_t as a direct product over the closed-form β, independent of the table.
    fn alpha_bar_by_product(t: usize) -> f64 {
        let (a, b) = (DEFAULT_BETA_START.sqrt(), DEFAULT_BETA_END.sqrt());
        (1..=t)
            .map(|s| {
                let r = a + (s - 1) as f64 / 999.0 * (b - a);
                1.0 - r * r
            })
            .product()
    }

    #[test]
    fn table_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=1000 {
            let b = s.beta(t).unwrap();
            assert!(0.0 < b && b < 1.0);
            if t > 1 {
                assert!(b >= s.beta(t - 1).unwrap());
            }
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab < s.alpha_bar(t - 1).unwrap());
            assert_eq!(ab, s.alpha_bar(t - 1).unwrap() * (1.0 - b));
        }
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
        assert!((s.beta(1).unwrap() - 0.00085).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.012).abs() < 1e-15);
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = NoiseSchedule::default();
        let ab1 = s.alpha_bar(1).unwrap();
        assert!((ab1.sqrt() - 1.0).abs() < 5e-4);
        assert!(((1.0 - ab1).sqrt() - 0.029).abs() < 1e-3);
        let x0 = scalar(0.7);
        let out = s.q_sample(&x0, 300, &scalar(0.0)).unwrap();
        assert_eq!(out.data()[0], s.alpha_bar(300).unwrap().sqrt() as f32 * 0.7);
        assert!(s.q_sample(&x0, 0, &x0).is_err());
        assert!(s.q_sample(&x0, 1001, &x0).is_err());
    }

    #[test]
    fn q_sample_at_500_matches_product_oracle() {
        let s = NoiseSchedule::default();
        let ab = alpha_bar_by_product(500);
        assert!((s.alpha_bar(500).unwrap() - ab).abs() < 1e-12);
        let out = s.q_sample(&scalar(1.0), 500, &scalar(1.0)).unwrap();
        let expected = ab.sqrt() + (1.0 - ab).sqrt();
        assert!((f64::from(out.data()[0]) - expected).abs() < 1e-6);
    }

    #[test]
    fn ddim_endpoints() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(&[3]).unwrap();
        let out = s.ddim_step(&z, &zero, 700, 400).unwrap();
        let k = (s.alpha_bar(400).unwrap() / s.alpha_bar(700).unwrap()).sqrt();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((f64::from(*o) - k * f64::from(*i)).abs() < 1e-5);
        }
        let eps = Tensor::new(vec![3], vec![0.1, 0.2, -0.3]).unwrap();
        let last = s.ddim_step(&z, &eps, 20, 0).unwrap();
        assert_eq!(last, s.predict_x0(&z, &eps, 20).unwrap());
        assert!(matches!(s.ddim_step(&z, &eps, 20, 20), Err(Error::Schedule(_))));
    }

    #[test]
    fn renoise_endpoints() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(vec![2], vec![0.4, -0.8]).unwrap();
        let n = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(s.renoise(&z, 500, 500, &n).is_err());
        assert_eq!(s.renoise(&z, 0, 1000, &n).unwrap(), s.q_sample(&z, 1000, &n).unwrap());
        let zero = Tensor::zeros(&[2]).unwrap();
        let out = s.renoise(&z, 300, 600, &zero).unwrap();
        let k = (s.alpha_bar(600).unwrap() / s.alpha_bar(300).unwrap()).sqrt();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((f64::from(*o) - k * f64::from(*i)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_prediction_step_is_undone_by_zero_noise_renoise() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(vec![3], vec![1.5, -0.25, 0.75]).unwrap();
        let zero = Tensor::zeros(&[3]).unwrap();
        let first = s.ddim_step(&z, &zero, 900, 850).unwrap();
        let back = s.renoise(&first, 850, 900, &zero).unwrap();
        let again = s.ddim_step(&back, &zero, 900, 850).unwrap();
        for (a, b) in first.data().iter().zip(again.data()) {
            assert!((a - b).abs() <= 4.0 * f32::EPSILON * a.abs().max(1.0));
        }
    }

    #[test]
    fn inversion_noise_makes_resampling_a_fixed_point() {
        // Re-noising with the sample that maps z_{t_prev} back onto z_t and
        // stepping again with the same prediction returns z_{t_prev}.
        let s = NoiseSchedule::default();
        let z = Tensor::new(vec![2], vec![0.3, -1.1]).unwrap();
        let eps = Tensor::new(vec![2], vec![0.9, 0.4]).unwrap();
        let first = s.ddim_step(&z, &eps, 960, 940).unwrap();
        let ratio = s.alpha_bar(960).unwrap() / s.alpha_bar(940).unwrap();
        let noise = z
            .zip_map(&first, |zt, zp| {
                ((f64::from(zt) - ratio.sqrt() * f64::from(zp)) / (1.0 - ratio).sqrt()) as f32
            })
            .unwrap();
        let back = s.renoise(&first, 940, 960, &noise).unwrap();
        let again = s.ddim_step(&back, &eps, 960, 940).unwrap();
        for (a, b) in first.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn gmm_single_component_closed_form() {
        let s = NoiseSchedule::default();
        let prior = GmmPrior::standard(2).unwrap();
        let z = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let eps = gmm_eps(&z, 450, &prior, &s).unwrap();
        let c = (1.0 - s.alpha_bar(450).unwrap()).sqrt();
        for (e, x) in eps.data().iter().zip(z.data()) {
            assert!((f64::from(*e) - c * f64::from(*x)).abs() < 1e-6);
        }
    }

    #[test]
    fn gmm_symmetric_mixture_at_origin() {
        let s = NoiseSchedule::default();
        let prior = GmmPrior::isotropic(vec![vec![1.5, -0.5], vec![-1.5, 0.5]], 0.3).unwrap();
        let eps = gmm_eps(&Tensor::zeros(&[2]).unwrap(), 700, &prior, &s).unwrap();
        assert!(eps.data().iter().all(|e| e.abs() < 1e-7));
    }

    #[test]
    fn gmm_matches_quadrature() {
        let s = NoiseSchedule::default();
        let prior = GmmPrior::new(
            vec![0.3, 0.7],
            vec![vec![-2.0], vec![1.0]],
            vec![vec![0.5], vec![0.5]],
        )
        .unwrap();
        let (t, z) = (600, 0.3f64);
        let ab = s.alpha_bar(t).unwrap();
        // E[x0|z] by midpoint quadrature of p(x0) N(z; √ᾱ x0, 1-ᾱ) on [-12, 12].
        let (lo, hi, n) = (-12.0f64, 12.0f64, 240_000usize);
        let h = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            let px: f64 = [(0.3, -2.0), (0.7, 1.0)]
                .iter()
                .map(|&(w, m)| w * (-(x - m) * (x - m) / (2.0 * 0.5)).exp())
                .sum();
            let lik = (-(z - ab.sqrt() * x).powi(2) / (2.0 * (1.0 - ab))).exp();
            num += x * px * lik;
            den += px * lik;
        }
        let expected = (z - ab.sqrt() * num / den) / (1.0 - ab).sqrt();
        let got = gmm_eps(&scalar(z as f32), t, &prior, &s).unwrap().data()[0];
        assert!((f64::from(got) - expected).abs() < 1e-4, "{got} vs {expected}");
    }

    #[test]
    fn prior_validation() {
        assert!(GmmPrior::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn direct_sampling_moments() {
        let prior = GmmPrior::new(vec![0.3, 0.7], vec![vec![-2.0], vec![1.0]], vec![vec![0.5], vec![0.5]]).unwrap();
        let mut rng = StreamKey::new(3, Purpose::Scene).rng();
        let x = prior.sample(20_000, &mut rng).unwrap();
        let mean: f64 = x.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 20_000.0;
        assert!((mean - (0.3 * -2.0 + 0.7 * 1.0)).abs() < 0.03);
    }
}
