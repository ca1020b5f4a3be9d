use crate::diffusion::{gmm_eps, GmmPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AttentionHooks, AttentionLayerInfo, Condition, Denoiser};

/// Exact ε-oracle for a Gaussian mixture prior. Has no attention layers, so
/// every attention mechanism is inert when sampling with it.
///
/// The latent may be any shape whose element count is a multiple of the
/// mixture dimension; it is read as rows of `dim` values.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    prior: GmmPrior,
    schedule: NoiseSchedule,
    latent_shape: Vec<usize>,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior, schedule: NoiseSchedule, latent_shape: Vec<usize>) -> Result<Self> {
        let n: usize = latent_shape.iter().product();
        if n == 0 || n % prior.dim() != 0 {
            return Err(Error::Dimension(format!(
                "latent shape {latent_shape:?} is not a whole number of {}-dim rows",
                prior.dim()
            )));
        }
        Ok(Self {
            prior,
            schedule,
            latent_shape,
        })
    }

    /// `batch` independent samples of the mixture, as a `[batch, dim]` latent.
    pub fn batched(prior: GmmPrior, schedule: NoiseSchedule, batch: usize) -> Result<Self> {
        let d = prior.dim();
        Self::new(prior, schedule, vec![batch, d])
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }
}

impl Denoiser for GmmDenoiser {
    fn name(&self) -> &str {
        "gmm"
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.latent_shape.clone()
    }

    fn attention_census(&self) -> Vec<AttentionLayerInfo> {
        Vec::new()
    }

    fn predict_eps(&self, z_t: &Tensor, t: usize, _cond: &Condition, _hooks: &mut dyn AttentionHooks) -> Result<Tensor> {
        z_t.ensure_shape(&self.latent_shape, "gmm latent")?;
        let d = self.prior.dim();
        let rows = z_t.clone().reshape(vec![z_t.len() / d, d])?;
        gmm_eps(&rows, t, &self.prior, &self.schedule)?.reshape(self.latent_shape.clone())
    }
}
