//! Attention-map filtering on pre-softmax self-attention scores.
//!
//! Within one timestep the resampling iterations produce maps
//! `M_{t,1..R}` that are folded by an in-step pooling function. Across
//! timesteps a history `H` carries an exponential moving average of the
//! refined maps, and every refined map is blended with the history of the
//! previous sampled step:
//!
//! ```text
//! M̃_{t,r} = α_c · f(M_{t,r}, running) + (1 - α_c) · H_{t+1}
//! H_t     = α_h · M̃_{t,R} + (1 - α_h) · H_{t+1}      (H_T = M̃_{T,R})
//! ```
//!
//! The running pool state is the pooled map *before* history blending, so
//! min-pooling stays monotone across iterations.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::denoiser::{AttentionHooks, Condition, Denoiser, LayerKind};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::tensor::{AttentionMap, Tensor};

/// Half-open timestep interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimeRange {
    pub lo: usize,
    pub hi: usize,
}

impl TimeRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo < t && t <= self.hi
    }
}

impl std::fmt::Display for TimeRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

/// In-step pooling function `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Pooling {
    Min,
    Mean,
    /// `α_i · current + (1 - α_i) · running`.
    Ema(f32),
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Min => write!(f, "min"),
            Pooling::Mean => write!(f, "mean"),
            Pooling::Ema(a) => write!(f, "ema:{a}"),
        }
    }
}

/// Every knob of the filtering stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterConfig {
    pub resample: bool,
    /// Iterations per resampled step, `R >= 1`.
    pub resample_iters: usize,
    pub resample_range: TimeRange,
    /// In-step pooling, active inside `resample_range`.
    pub in_step: bool,
    pub pooling: Pooling,
    /// Cross-step history blending and updates, active inside `filter_range`.
    pub cross_step: bool,
    pub filter_range: TimeRange,
    pub alpha_c: f32,
    pub alpha_h: f32,
    pub msa: bool,
    pub msa_range: TimeRange,
    pub msa_layers: BTreeSet<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            resample: true,
            resample_iters: 5,
            resample_range: TimeRange::new(800, 1000),
            in_step: true,
            pooling: Pooling::Min,
            cross_step: true,
            filter_range: TimeRange::new(600, 1000),
            alpha_c: 0.2,
            alpha_h: 0.5,
            msa: true,
            msa_range: TimeRange::new(600, 1000),
            msa_layers: BTreeSet::from([1]),
        }
    }
}

impl FilterConfig {
    /// Everything off: the pipeline reduces to plain DDIM.
    pub fn disabled() -> Self {
        Self {
            resample: false,
            resample_iters: 1,
            in_step: false,
            cross_step: false,
            alpha_c: 1.0,
            msa: false,
            msa_layers: BTreeSet::new(),
            ..Self::default()
        }
    }

    /// Attention map filtering is both the in-step and cross-step update.
    pub fn amf(&self) -> bool {
        self.in_step && self.cross_step
    }

    pub fn set_amf(&mut self, on: bool) {
        self.in_step = on;
        self.cross_step = on;
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.resample_iters == 0 {
            return Err(Error::Config("resample_iters must be >= 1".into()));
        }
        for (name, r) in [
            ("resample_range", self.resample_range),
            ("filter_range", self.filter_range),
            ("msa_range", self.msa_range),
        ] {
            if r.lo >= r.hi || r.hi > t_max {
                return Err(Error::Config(format!("{name} {r} must satisfy lo < hi <= {t_max}")));
            }
        }
        for (name, w) in [("alpha_c", self.alpha_c), ("alpha_h", self.alpha_h)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
            }
        }
        if let Pooling::Ema(a) = self.pooling {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("ema pooling weight {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Denoiser evaluations spent at timestep `t`.
    pub fn rounds_at(&self, t: usize) -> usize {
        if self.resample && self.resample_range.contains(t) {
            self.resample_iters
        } else {
            1
        }
    }

    pub fn pools_at(&self, t: usize) -> bool {
        self.in_step && self.resample_range.contains(t)
    }

    pub fn blends_at(&self, t: usize) -> bool {
        self.cross_step && self.filter_range.contains(t)
    }

    pub fn msa_at(&self, t: usize, layer_id: usize) -> bool {
        self.msa && self.msa_range.contains(t) && self.msa_layers.contains(&layer_id)
    }
}

/// `w · a + (1 - w) · b`, clamped into `[min(a, b), max(a, b)]` so that
/// rounding never leaves the convex hull.
fn convex(a: &Tensor, b: &Tensor, w: f32) -> Result<Tensor> {
    let v = 1.0 - w;
    a.zip_map(b, |x, y| (w * x + v * y).clamp(x.min(y), x.max(y)))
}

/// Running state of the in-step pool for one layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct InStepPool {
    /// Pooled map after the latest iteration.
    pub map: AttentionMap,
    sum: Option<Tensor>,
    count: usize,
}

impl InStepPool {
    pub fn count(&self) -> usize {
        self.count
    }
}

/// Folds `current` into the running pool. With no running state the pool
/// starts at `current`.
pub fn in_step_pool(current: &AttentionMap, running: Option<&InStepPool>, pooling: Pooling) -> Result<InStepPool> {
    let Some(run) = running else {
        return Ok(InStepPool {
            map: current.clone(),
            sum: matches!(pooling, Pooling::Mean).then(|| current.scores.clone()),
            count: 1,
        });
    };
    let prev = &run.map.scores;
    current
        .scores
        .ensure_shape(prev.shape(), "in-step pool operand")
        .map_err(|e| Error::Dimension(format!("layer {}: {e}", current.layer_id)))?;
    let count = run.count + 1;
    let (scores, sum) = match pooling {
        Pooling::Min => (current.scores.zip_map(prev, f32::min)?, None),
        Pooling::Mean => {
            let base = run.sum.as_ref().unwrap_or(prev);
            let sum = current.scores.zip_map(base, |a, b| a + b)?;
            let inv = 1.0 / count as f32;
            (sum.map(|x| x * inv), Some(sum))
        }
        Pooling::Ema(a) => (convex(&current.scores, prev, a)?, None),
    };
    Ok(InStepPool {
        map: AttentionMap {
            scores,
            ..current.clone()
        },
        sum,
        count,
    })
}

/// Per-layer cross-step history `H`, one `(heads, n_q, n_k)` tensor per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionHistory {
    maps: BTreeMap<usize, Tensor>,
    last_update_timestep: Option<usize>,
}

impl AttentionHistory {
    pub fn get(&self, layer_id: usize) -> Option<&Tensor> {
        self.maps.get(&layer_id)
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().copied()
    }

    pub fn last_update_timestep(&self) -> Option<usize> {
        self.last_update_timestep
    }
}

/// `α_c · pooled + (1 - α_c) · H`; identity when the layer has no history.
pub fn cross_step_blend(pooled: &AttentionMap, history: &AttentionHistory, alpha_c: f32) -> Result<AttentionMap> {
    let Some(h) = history.get(pooled.layer_id) else {
        return Ok(pooled.clone());
    };
    h.ensure_shape(pooled.scores.shape(), "stored history")
        .map_err(|e| Error::Dimension(format!("layer {}: {e}", pooled.layer_id)))?;
    Ok(AttentionMap {
        scores: convex(&pooled.scores, h, alpha_c)?,
        ..pooled.clone()
    })
}

/// Updates the history with the refined map of the final iteration `rounds`.
/// The first update for a layer stores the map itself.
pub fn update_history(
    history: &mut AttentionHistory,
    final_map: &AttentionMap,
    alpha_h: f32,
    rounds: usize,
) -> Result<()> {
    if final_map.resample_index != rounds {
        return Err(Error::Contract(format!(
            "history update needs the r = {rounds} map, got r = {}",
            final_map.resample_index
        )));
    }
    let next = match history.maps.get(&final_map.layer_id) {
        None => final_map.scores.clone(),
        Some(h) => {
            h.ensure_shape(final_map.scores.shape(), "stored history")?;
            convex(&final_map.scores, h, alpha_h)?
        }
    };
    history.maps.insert(final_map.layer_id, next);
    history.last_update_timestep = Some(final_map.timestep);
    Ok(())
}

/// Mutual self-attention: the target branch attends with the source branch's
/// keys and values at gated timesteps and layers.
pub fn msa_substitute(
    k_tgt: Tensor,
    v_tgt: Tensor,
    source: Option<(&Tensor, &Tensor)>,
    t: usize,
    layer_id: usize,
    cfg: &FilterConfig,
) -> Result<(Tensor, Tensor)> {
    if !cfg.msa_at(t, layer_id) {
        return Ok((k_tgt, v_tgt));
    }
    let (k_src, v_src) = source.ok_or_else(|| {
        Error::Orchestration(format!("no source keys/values for layer {layer_id} at t = {t}"))
    })?;
    k_src.ensure_shape(k_tgt.shape(), "source keys")?;
    v_src.ensure_shape(v_tgt.shape(), "source values")?;
    Ok((k_src.clone(), v_src.clone()))
}

/// Filtering state owned by one branch of one generation.
#[derive(Debug, Clone, Default)]
pub struct FilterState {
    pools: BTreeMap<usize, InStepPool>,
    pub history: AttentionHistory,
}

impl FilterState {
    /// Runs pooling, blending and the history update on one layer's scores.
    pub fn apply(
        &mut self,
        cfg: &FilterConfig,
        scores: Tensor,
        layer_id: usize,
        t: usize,
        r: usize,
        rounds: usize,
    ) -> Result<Tensor> {
        let pools = cfg.pools_at(t);
        let blends = cfg.blends_at(t);
        if !pools && !blends {
            return Ok(scores);
        }
        let mut map = AttentionMap::new(scores, layer_id, t, r)?;
        if pools {
            let running = if r == 1 { None } else { self.pools.get(&layer_id) };
            let pooled = in_step_pool(&map, running, cfg.pooling)?;
            map = pooled.map.clone();
            self.pools.insert(layer_id, pooled);
        }
        if blends {
            map = cross_step_blend(&map, &self.history, cfg.alpha_c)?;
            if r == rounds {
                update_history(&mut self.history, &map, cfg.alpha_h, rounds)?;
            }
        }
        Ok(map.scores)
    }
}

/// Pre-softmax self-attention maps keyed by layer id.
pub type CapturedMaps = BTreeMap<usize, AttentionMap>;

#[derive(Default)]
struct RecordingHooks {
    maps: CapturedMaps,
    t: usize,
}

impl AttentionHooks for RecordingHooks {
    fn self_attention_scores(&mut self, layer_id: usize, scores: Tensor) -> Result<Tensor> {
        self.maps
            .insert(layer_id, AttentionMap::new(scores.clone(), layer_id, self.t, 1)?);
        Ok(scores)
    }
}

/// Runs one forward pass with a recording tap and returns every
/// self-attention layer's pre-softmax scores.
pub fn record_maps(denoiser: &dyn Denoiser, z_t: &Tensor, t: usize, cond: &Condition) -> Result<CapturedMaps> {
    let mut hooks = RecordingHooks {
        t,
        ..Default::default()
    };
    denoiser.predict_eps(z_t, t, cond, &mut hooks)?;
    Ok(hooks.maps)
}

/// Ground-truth maps: noise the clean target to `tau_init`, run one forward
/// pass, and keep every self-attention map.
pub fn gt_map_capture(
    target_clean: &Tensor,
    tau_init: usize,
    denoiser: &dyn Denoiser,
    cond: &Condition,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<CapturedMaps> {
    let self_layers = self_attention_layers(denoiser);
    if self_layers.is_empty() {
        return Err(Error::Orchestration(format!(
            "denoiser '{}' exposes no self-attention taps",
            denoiser.name()
        )));
    }
    let noise = StreamKey::new(seed, Purpose::GtCapture).gaussian(target_clean.shape())?;
    let z = schedule.q_sample(target_clean, tau_init, &noise)?;
    let maps = record_maps(denoiser, &z, tau_init, cond)?;
    for id in self_layers {
        if !maps.contains_key(&id) {
            return Err(Error::Orchestration(format!("self-attention layer {id} was not tapped")));
        }
    }
    Ok(maps)
}

/// Checks that `maps` covers every self-attention layer of `denoiser` with
/// the live shape.
pub fn check_injection_maps(denoiser: &dyn Denoiser, maps: &CapturedMaps) -> Result<()> {
    for info in denoiser.attention_census() {
        if info.kind != LayerKind::SelfAttention {
            continue;
        }
        let m = maps.get(&info.id).ok_or_else(|| {
            Error::Orchestration(format!("no injection map for self-attention layer {}", info.id))
        })?;
        m.scores
            .ensure_shape(&[info.heads, info.n_q, info.n_k], "injection map")?;
    }
    Ok(())
}

pub(crate) fn self_attention_layers(denoiser: &dyn Denoiser) -> Vec<usize> {
    denoiser
        .attention_census()
        .into_iter()
        .filter(|l| l.kind == LayerKind::SelfAttention)
        .map(|l| l.id)
        .collect()
}
