//! A two-block attention denoiser over a 16×16 latent grid.
//!
//! Each pixel is a token carrying the noisy latent and the source image
//! (channel concatenation). A block is self-attention (4 heads of width 8,
//! hooked), single-token cross-attention on a pose token, and an MLP, each
//! pre-normalised and residual. A sinusoidal timestep embedding is projected
//! and added to every token.
//!
//! Linear weights are stored `[in, out]` and applied as `y = x W + b`.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::tensor::{attention_forward, Tensor};

use super::weights::WeightContainer;
use super::{AttentionHooks, AttentionLayerInfo, Condition, Denoiser, LayerKind};

pub const LATENT_SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const TOKENS: usize = LATENT_SIDE * LATENT_SIDE;
pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = 8;
pub const MODEL_DIM: usize = HEADS * HEAD_DIM;
pub const MLP_DIM: usize = 64;
pub const BLOCKS: usize = 2;
const POSE_FEATURES: usize = 4;
const LN_EPS: f32 = 1e-5;

/// Names and shapes of every toy weight, in file order.
pub fn toy_weight_census() -> Vec<(String, Vec<usize>)> {
    let d = MODEL_DIM;
    let mut c: Vec<(String, Vec<usize>)> = vec![
        ("in_proj.weight".into(), vec![2 * CHANNELS, d]),
        ("in_proj.bias".into(), vec![d]),
        ("pos_embed".into(), vec![TOKENS, d]),
        ("time_proj.weight".into(), vec![d, d]),
        ("time_proj.bias".into(), vec![d]),
        ("pose_proj.weight".into(), vec![POSE_FEATURES, d]),
        ("pose_proj.bias".into(), vec![d]),
    ];
    for b in 0..BLOCKS {
        for part in ["attn", "cross"] {
            for p in ["q", "k", "v", "o"] {
                c.push((format!("blocks.{b}.{part}.{p}.weight"), vec![d, d]));
            }
            c.push((format!("blocks.{b}.{part}.o.bias"), vec![d]));
        }
        c.push((format!("blocks.{b}.mlp.fc1.weight"), vec![d, MLP_DIM]));
        c.push((format!("blocks.{b}.mlp.fc1.bias"), vec![MLP_DIM]));
        c.push((format!("blocks.{b}.mlp.fc2.weight"), vec![MLP_DIM, d]));
        c.push((format!("blocks.{b}.mlp.fc2.bias"), vec![d]));
    }
    c.push(("out_proj.weight".into(), vec![d, CHANNELS]));
    c.push(("out_proj.bias".into(), vec![CHANNELS]));
    c
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    weights: WeightContainer,
    cross_softmax: bool,
}

impl ToyDenoiser {
    pub fn from_weights(weights: WeightContainer) -> Result<Self> {
        weights.check_census(&toy_weight_census())?;
        Ok(Self {
            weights,
            cross_softmax: true,
        })
    }

    /// Seeded random initialisation: matrices `N(0, 1/fan_in)`, biases zero,
    /// positional embedding `N(0, 0.25)`.
    pub fn random(seed: u64) -> Self {
        let mut weights = WeightContainer::new();
        for (i, (name, shape)) in toy_weight_census().into_iter().enumerate() {
            let std = if name == "pos_embed" {
                0.5
            } else if shape.len() == 2 {
                1.0 / (shape[0] as f32).sqrt()
            } else {
                0.0
            };
            let t = if std == 0.0 {
                Tensor::zeros(&shape)
            } else {
                let normal = Normal::new(0.0f32, std).expect("positive std");
                let mut rng = StreamKey::new(seed, Purpose::Weights).at(i, 0).rng();
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            }
            .expect("census shapes are valid");
            weights.insert(name, t).expect("census names are unique");
        }
        Self {
            weights,
            cross_softmax: true,
        }
    }

    pub fn weights(&self) -> &WeightContainer {
        &self.weights
    }

    /// When disabled, cross-attention skips the softmax and broadcasts its
    /// single value row directly.
    pub fn with_cross_softmax(mut self, enabled: bool) -> Self {
        self.cross_softmax = enabled;
        self
    }

    fn w(&self, name: &str) -> &Tensor {
        self.weights.get(name).expect("census checked at construction")
    }

    fn linear(&self, x: &Tensor, prefix: &str, bias: bool) -> Result<Tensor> {
        let mut y = x.matmul(self.w(&format!("{prefix}.weight")))?;
        if bias {
            add_row(&mut y, self.w(&format!("{prefix}.bias")));
        }
        Ok(y)
    }

    fn pose_token(&self, cond: &Condition) -> Result<Tensor> {
        let feats = Tensor::new(vec![1, POSE_FEATURES], cond.pose.features().to_vec())?;
        self.linear(&feats, "pose_proj", true)
    }

    fn embed(&self, z_t: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        let latent = [LATENT_SIDE, LATENT_SIDE, CHANNELS];
        z_t.ensure_shape(&latent, "toy latent")?;
        let zeros;
        let source = match &cond.source_image {
            Some(s) => {
                s.ensure_shape(&latent, "source image")?;
                s
            }
            None => {
                zeros = Tensor::zeros(&latent)?;
                &zeros
            }
        };
        let mut feats = Vec::with_capacity(TOKENS * 2 * CHANNELS);
        for (zp, sp) in z_t.data().chunks_exact(CHANNELS).zip(source.data().chunks_exact(CHANNELS)) {
            feats.extend_from_slice(zp);
            feats.extend_from_slice(sp);
        }
        let x = Tensor::new(vec![TOKENS, 2 * CHANNELS], feats)?;
        let mut x = self.linear(&x, "in_proj", true)?;
        let pos = self.w("pos_embed");
        for (a, b) in x.data_mut().iter_mut().zip(pos.data()) {
            *a += b;
        }
        let temb = self.linear(&timestep_embedding(t, MODEL_DIM)?, "time_proj", true)?;
        add_row(&mut x, &temb);
        Ok(x)
    }

    fn block(&self, x: &mut Tensor, b: usize, pose: &Tensor, hooks: &mut dyn AttentionHooks) -> Result<()> {
        let layer_id = b;

        let h = layer_norm(x);
        let q = split_heads(&self.linear(&h, &format!("blocks.{b}.attn.q"), false)?)?;
        let k = split_heads(&self.linear(&h, &format!("blocks.{b}.attn.k"), false)?)?;
        let v = split_heads(&self.linear(&h, &format!("blocks.{b}.attn.v"), false)?)?;
        let (k, v) = hooks.self_attention_kv(layer_id, k, v)?;
        let mut tap = |s: Tensor| hooks.self_attention_scores(layer_id, s);
        let a = attention_forward(&q, &k, &v, None, Some(&mut tap))?;
        let out = self.linear(&merge_heads(&a)?, &format!("blocks.{b}.attn.o"), true)?;
        add_in_place(x, &out);

        let h = layer_norm(x);
        let q = split_heads(&self.linear(&h, &format!("blocks.{b}.cross.q"), false)?)?;
        let k = split_heads(&self.linear(pose, &format!("blocks.{b}.cross.k"), false)?)?;
        let v = split_heads(&self.linear(pose, &format!("blocks.{b}.cross.v"), false)?)?;
        let a = if self.cross_softmax {
            attention_forward(&q, &k, &v, None, None)?
        } else {
            broadcast_single_value(&v, TOKENS)?
        };
        let out = self.linear(&merge_heads(&a)?, &format!("blocks.{b}.cross.o"), true)?;
        add_in_place(x, &out);

        let h = layer_norm(x);
        let hidden = self
            .linear(&h, &format!("blocks.{b}.mlp.fc1"), true)?
            .map(gelu);
        let out = self.linear(&hidden, &format!("blocks.{b}.mlp.fc2"), true)?;
        add_in_place(x, &out);
        Ok(())
    }
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![LATENT_SIDE, LATENT_SIDE, CHANNELS]
    }

    fn attention_census(&self) -> Vec<AttentionLayerInfo> {
        let self_layers = (0..BLOCKS).map(|b| AttentionLayerInfo {
            id: b,
            kind: LayerKind::SelfAttention,
            heads: HEADS,
            n_q: TOKENS,
            n_k: TOKENS,
        });
        let cross_layers = (0..BLOCKS).map(|b| AttentionLayerInfo {
            id: BLOCKS + b,
            kind: LayerKind::CrossAttention,
            heads: HEADS,
            n_q: TOKENS,
            n_k: 1,
        });
        self_layers.chain(cross_layers).collect()
    }

    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &Condition, hooks: &mut dyn AttentionHooks) -> Result<Tensor> {
        z_t.ensure_finite("toy latent")?;
        let pose = self.pose_token(cond)?;
        let mut x = self.embed(z_t, t, cond)?;
        for b in 0..BLOCKS {
            self.block(&mut x, b, &pose, hooks)?;
        }
        let out = self.linear(&layer_norm(&x), "out_proj", true)?;
        out.ensure_finite("toy output")?;
        out.reshape(self.latent_shape())
    }
}

/// `[1, dim]` sinusoidal embedding `[sin(t·ω_i), cos(t·ω_i)]`, `ω_i = 10000^{-i/(dim/2)}`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut e = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin() as f32;
        e[half + i] = arg.cos() as f32;
    }
    Tensor::new(vec![1, dim], e)
}

fn add_row(x: &mut Tensor, row: &Tensor) {
    let n = row.len();
    for chunk in x.data_mut().chunks_exact_mut(n) {
        for (a, b) in chunk.iter_mut().zip(row.data()) {
            *a += b;
        }
    }
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

fn layer_norm(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + f64::from(LN_EPS)).sqrt();
        for v in row.iter_mut() {
            *v = ((f64::from(*v) - mean) * inv) as f32;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

/// `[n, heads·hd] -> (heads, n, hd)`.
fn split_heads(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    if x.shape()[1] != MODEL_DIM {
        return Err(Error::Dimension(format!("expected width {MODEL_DIM}, got {:?}", x.shape())));
    }
    let mut out = vec![0.0f32; x.len()];
    for (i, row) in x.data().chunks_exact(MODEL_DIM).enumerate() {
        for h in 0..HEADS {
            let dst = (h * n + i) * HEAD_DIM;
            out[dst..dst + HEAD_DIM].copy_from_slice(&row[h * HEAD_DIM..(h + 1) * HEAD_DIM]);
        }
    }
    Tensor::new(vec![HEADS, n, HEAD_DIM], out)
}

/// `(heads, n, hd) -> [n, heads·hd]`.
fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[1];
    let mut out = vec![0.0f32; x.len()];
    for h in 0..HEADS {
        for i in 0..n {
            let src = (h * n + i) * HEAD_DIM;
            let dst = i * MODEL_DIM + h * HEAD_DIM;
            out[dst..dst + HEAD_DIM].copy_from_slice(&x.data()[src..src + HEAD_DIM]);
        }
    }
    Tensor::new(vec![n, MODEL_DIM], out)
}

/// `(heads, 1, hd) -> (heads, n, hd)` by repetition.
fn broadcast_single_value(v: &Tensor, n: usize) -> Result<Tensor> {
    let (h, one, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    if one != 1 {
        return Err(Error::Dimension(format!("expected a single value row, got {:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(h * n * d);
    for row in v.data().chunks_exact(d) {
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    Tensor::new(vec![h, n, d], out)
}
