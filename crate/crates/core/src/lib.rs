//! Test-time control of a diffusion sampler through its self-attention maps.
//!
//! The engine walks a timestep schedule with a deterministic DDIM sampler
//! and, at chosen steps, resamples, pools and blends the pre-softmax
//! self-attention scores of the denoiser, optionally swapping in keys and
//! values from a parallel identity-pose branch. Two denoisers implement the
//! [`Denoiser`] contract: an exact Gaussian-mixture oracle and a small
//! pose-conditioned attention network.
//!
//! ```
//! use z2h::{generate, hourglass_schedule, Condition, FilterConfig, GenerationConfig};
//! use z2h::{GmmDenoiser, GmmPrior, NoiseSchedule, DEFAULT_HOURGLASS};
//!
//! let prior = GmmPrior::isotropic(vec![vec![-1.0], vec![1.0]], 0.1).unwrap();
//! let den = GmmDenoiser::batched(prior, NoiseSchedule::default(), 8).unwrap();
//! let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS).unwrap();
//! let cfg = GenerationConfig::new(sched, FilterConfig::default(), Condition::default(), 7);
//! let out = generate(&den, &cfg).unwrap();
//! assert_eq!(out.diagnostics.steps, 26);
//! assert_eq!(out.nfe.target, 66);
//! ```

pub mod cli;
pub mod config;
pub mod control;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod tensor;

pub use config::RunConfig;
pub use control::{
    cross_step_blend, gt_map_capture, in_step_pool, msa_substitute, update_history, AttentionHistory, CapturedMaps,
    FilterConfig, FilterState, Pooling, TimeRange,
};
pub use denoiser::weights::{load_weights, save_weights, WeightContainer};
pub use denoiser::{
    AttentionHooks, AttentionLayerInfo, Condition, Denoiser, GmmDenoiser, LayerKind, NoHooks, Pose, ToyDenoiser,
};
pub use diffusion::{gmm_eps, GmmPrior, NoiseSchedule};
pub use error::{Error, Result};
pub use metrics::{iou_mask, mse, psnr, seed_diversity, ssim, Image};
pub use pipeline::{expected_nfe, generate, plain_ddim, seed_sweep, BranchMode, GenerationConfig, NfeCounter};
pub use schedule::{hourglass_schedule, uniform_schedule, Stage, TimestepSchedule, DEFAULT_HOURGLASS};
pub use tensor::{attention_forward, softmax_rows, AttentionMap, Tensor};
