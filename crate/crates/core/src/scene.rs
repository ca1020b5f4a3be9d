//! Procedural sprite views on a white background.
//!
//! A sprite is a flat, non-symmetric glyph made of axis-aligned bars. A view
//! at absolute pose `(elevation, azimuth, radius)` rotates the glyph in the
//! image plane by the azimuth, foreshortens it vertically by `cos(elevation)`
//! and scales it by `1 / radius`. Pixel coverage is 4×4 supersampled.

use rand::Rng;

use crate::denoiser::{Pose, CHANNELS, LATENT_SIDE};
use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::rng::{Purpose, StreamKey};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    LShape,
    Glyph,
    Tee,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [Self::Box, Self::LShape, Self::Glyph, Self::Tee];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Self::Box),
            "l" | "l-shape" => Ok(Self::LShape),
            "glyph" => Ok(Self::Glyph),
            "tee" => Ok(Self::Tee),
            other => Err(Error::Config(format!("unknown shape family '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::LShape => "l-shape",
            Self::Glyph => "glyph",
            Self::Tee => "tee",
        }
    }

    /// Bars `(x0, y0, x1, y1)` in object space `[-1, 1]²`, y pointing down.
    fn bars(self) -> &'static [[f32; 4]] {
        match self {
            // a box with a notch so that rotations are distinguishable
            Self::Box => &[[-0.6, -0.6, 0.6, 0.1], [-0.6, 0.1, 0.1, 0.6]],
            Self::LShape => &[[-0.6, -0.7, -0.2, 0.7], [-0.2, 0.3, 0.6, 0.7]],
            Self::Glyph => &[[-0.5, -0.7, -0.15, 0.7], [-0.15, -0.7, 0.6, -0.35], [-0.15, -0.1, 0.35, 0.2]],
            Self::Tee => &[[-0.7, -0.7, 0.7, -0.35], [-0.15, -0.35, 0.2, 0.7]],
        }
    }

    fn color(self) -> [f32; 3] {
        match self {
            Self::Box => [0.85, 0.25, 0.2],
            Self::LShape => [0.2, 0.6, 0.3],
            Self::Glyph => [0.2, 0.3, 0.8],
            Self::Tee => [0.9, 0.7, 0.1],
        }
    }
}

/// A sprite with its canonical (source-view) pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub family: ShapeFamily,
    pub base: Pose,
}

impl Sprite {
    pub fn new(family: ShapeFamily) -> Self {
        Self {
            family,
            base: Pose::new(0.0, 0.0, 1.0),
        }
    }

    /// Renders the view at absolute pose `view`.
    pub fn render(&self, view: Pose) -> Result<Image> {
        if view.radius <= 0.05 {
            return Err(Error::Config(format!("view radius {} must be > 0.05", view.radius)));
        }
        let n = LATENT_SIDE;
        let (s, c) = view.azimuth.sin_cos();
        let squash = view.elevation.cos().abs().max(0.2);
        let shift = 0.3 * view.elevation.sin();
        let scale = view.radius;
        let color = self.family.color();
        let bars = self.family.bars();
        const SUB: usize = 4;
        let mut data = Vec::with_capacity(n * n * CHANNELS);
        for py in 0..n {
            for px in 0..n {
                let mut hits = 0usize;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let u = ((px * SUB + sx) as f32 + 0.5) / (n * SUB) as f32 * 2.0 - 1.0;
                        let v = ((py * SUB + sy) as f32 + 0.5) / (n * SUB) as f32 * 2.0 - 1.0;
                        // invert: scale, elevation foreshortening, in-plane rotation
                        let (u, v) = (u * scale, (v - shift) * scale / squash);
                        let (x, y) = (c * u + s * v, -s * u + c * v);
                        if bars.iter().any(|b| x >= b[0] && x < b[2] && y >= b[1] && y < b[3]) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f32 / (SUB * SUB) as f32;
                for ch in color {
                    data.push(1.0 - cov * (1.0 - ch));
                }
            }
        }
        Image::new(Tensor::new(vec![n, n, CHANNELS], data)?)
    }
}

/// A source view, a target view, and the relative pose between them.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub family: ShapeFamily,
    pub source: Image,
    pub target: Image,
    pub relative: Pose,
}

pub fn view_pair(sprite: &Sprite, relative: Pose) -> Result<ViewPair> {
    let target_view = Pose::new(
        sprite.base.elevation + relative.elevation,
        sprite.base.azimuth + relative.azimuth,
        sprite.base.radius + relative.radius,
    );
    Ok(ViewPair {
        family: sprite.family,
        source: sprite.render(sprite.base)?,
        target: sprite.render(target_view)?,
        relative,
    })
}

/// Random family, base azimuth and relative pose drawn from the `Scene` stream.
pub fn random_pair(seed: u64, index: usize) -> Result<ViewPair> {
    let mut rng = StreamKey::new(seed, Purpose::Scene).at(0, index).rng();
    let family = ShapeFamily::ALL[rng.random_range(0..ShapeFamily::ALL.len())];
    let mut sprite = Sprite::new(family);
    sprite.base.azimuth = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
    let relative = Pose::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.5..1.5),
        rng.random_range(-0.2..0.3),
    );
    view_pair(&sprite, relative)
}
