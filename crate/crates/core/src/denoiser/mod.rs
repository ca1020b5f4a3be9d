//! The ε-prediction contract and its two implementations.

mod gmm;
mod toy;
pub mod weights;

pub use gmm::GmmDenoiser;
pub use toy::{toy_weight_census, ToyDenoiser, CHANNELS, HEADS, HEAD_DIM, LATENT_SIDE, MODEL_DIM, TOKENS};

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    SelfAttention,
    CrossAttention,
}

/// One attention layer as seen by the hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionLayerInfo {
    pub id: usize,
    pub kind: LayerKind,
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
}

/// Relative camera transform from the source view to the target view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Pose {
    /// Elevation change, radians.
    pub elevation: f32,
    /// Azimuth change, radians.
    pub azimuth: f32,
    pub radius: f32,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        elevation: 0.0,
        azimuth: 0.0,
        radius: 0.0,
    };

    pub fn new(elevation: f32, azimuth: f32, radius: f32) -> Self {
        Self {
            elevation,
            azimuth,
            radius,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// `[Δθ, sin Δφ, cos Δφ - 1, Δr]`; all zeros for the identity transform.
    pub fn features(&self) -> [f32; 4] {
        [
            self.elevation,
            self.azimuth.sin(),
            self.azimuth.cos() - 1.0,
            self.radius,
        ]
    }
}

/// What the denoiser is conditioned on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub pose: Pose,
    /// Source view in latent space; concatenated channel-wise with the
    /// noisy latent by denoisers that use it.
    pub source_image: Option<Tensor>,
}

impl Condition {
    pub fn new(pose: Pose, source_image: Option<Tensor>) -> Self {
        Self { pose, source_image }
    }

    /// Identity-pose condition used by the source branch.
    pub fn identity(source_image: Option<Tensor>) -> Self {
        Self::new(Pose::IDENTITY, source_image)
    }

    pub fn is_identity(&self) -> bool {
        self.pose.is_identity()
    }
}

/// Callouts made by a denoiser at each self-attention layer.
///
/// `self_attention_kv` runs first and may swap in other keys/values;
/// `self_attention_scores` then receives the pre-softmax scores and returns
/// the scores the layer will use. Cross-attention layers are never hooked.
pub trait AttentionHooks {
    fn self_attention_kv(&mut self, _layer_id: usize, k: Tensor, v: Tensor) -> Result<(Tensor, Tensor)> {
        Ok((k, v))
    }

    fn self_attention_scores(&mut self, _layer_id: usize, scores: Tensor) -> Result<Tensor> {
        Ok(scores)
    }
}

/// Hooks that change nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl AttentionHooks for NoHooks {}

/// Counts score callouts without altering anything.
#[derive(Debug, Default, Clone)]
pub struct CountingHooks {
    pub calls: usize,
    pub layers: Vec<usize>,
}

impl AttentionHooks for CountingHooks {
    fn self_attention_scores(&mut self, layer_id: usize, scores: Tensor) -> Result<Tensor> {
        self.calls += 1;
        self.layers.push(layer_id);
        Ok(scores)
    }
}

/// An ε-prediction network.
///
/// Implementations are deterministic given their inputs and weights, return
/// a tensor of the latent's shape, and call the score hook exactly once per
/// self-attention layer per forward pass.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn latent_shape(&self) -> Vec<usize>;

    fn attention_census(&self) -> Vec<AttentionLayerInfo>;

    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &Condition, hooks: &mut dyn AttentionHooks) -> Result<Tensor>;
}
