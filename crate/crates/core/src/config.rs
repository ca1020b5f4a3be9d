//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown keys are rejected. [`RunConfig::dump`]
//! writes every key in a fixed order, and parsing the dump reproduces the
//! same settings. Time ranges are written `lo:hi` and mean `(lo, hi]`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::control::{FilterConfig, Pooling, TimeRange};
use crate::denoiser::Pose;
use crate::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::scene::ShapeFamily;
use crate::schedule::{Stage, DEFAULT_HOURGLASS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    /// Toy attention denoiser with seeded random weights.
    ToyRandom,
    /// Toy attention denoiser loaded from `weights`.
    Toy,
    /// Analytic Gaussian-mixture oracle.
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Hourglass,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub denoiser: DenoiserKind,
    pub weights: Option<PathBuf>,
    pub model_seed: u64,
    pub seed: u64,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub uniform_steps: usize,
    pub hourglass_stages: Vec<Stage>,
    pub filter: FilterConfig,
    pub pose: Pose,
    pub scene_family: ShapeFamily,
    pub scene_azimuth: f32,
    pub source_image: Option<PathBuf>,
    pub target_image: Option<PathBuf>,
    pub tau_init: usize,
    pub n_seeds: usize,
    pub ablate_images: usize,
    pub scene_seed: u64,
    pub out_dir: PathBuf,
    pub dump_latent: bool,
    pub dump_maps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserKind::ToyRandom,
            weights: None,
            model_seed: 0,
            seed: 0,
            train_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            schedule: ScheduleKind::Hourglass,
            uniform_steps: 25,
            hourglass_stages: DEFAULT_HOURGLASS.to_vec(),
            filter: FilterConfig::default(),
            pose: Pose::new(0.0, std::f32::consts::FRAC_PI_2, 0.0),
            scene_family: ShapeFamily::Glyph,
            scene_azimuth: 0.0,
            source_image: None,
            target_image: None,
            tau_init: 5,
            n_seeds: 4,
            ablate_images: 4,
            scene_seed: 0,
            out_dir: PathBuf::from("out"),
            dump_latent: false,
            dump_maps: false,
        }
    }
}

pub const PRESETS: [&str; 4] = ["default", "baseline-25", "hourglass", "resample"];

/// Every accepted key, in dump order.
pub const KEYS: [&str; 36] = [
    "denoiser",
    "weights",
    "model_seed",
    "seed",
    "train_steps",
    "beta_start",
    "beta_end",
    "schedule",
    "uniform_steps",
    "hourglass_stages",
    "resample",
    "resample_iters",
    "resample_range",
    "in_step",
    "pooling",
    "cross_step",
    "filter_range",
    "alpha_c",
    "alpha_h",
    "msa",
    "msa_range",
    "msa_layers",
    "pose_elevation",
    "pose_azimuth",
    "pose_radius",
    "scene_family",
    "scene_azimuth",
    "source_image",
    "target_image",
    "tau_init",
    "n_seeds",
    "ablate_images",
    "scene_seed",
    "out_dir",
    "dump_latent",
    "dump_maps",
];

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key} = '{value}': expected {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn range(key: &str, value: &str) -> Result<TimeRange> {
    let (lo, hi) = value.split_once(':').ok_or_else(|| bad(key, value, "lo:hi"))?;
    Ok(TimeRange::new(num(key, lo.trim())?, num(key, hi.trim())?))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "default" => {}
            "baseline-25" => {
                c.schedule = ScheduleKind::Uniform;
                c.uniform_steps = 25;
                c.filter = FilterConfig::disabled();
            }
            "hourglass" => c.filter = FilterConfig::disabled(),
            "resample" => {
                c.filter = FilterConfig::disabled();
                c.filter.resample = true;
                c.filter.resample_iters = FilterConfig::default().resample_iters;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}', expected one of {PRESETS:?}"
                )))
            }
        }
        Ok(c)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = &mut self.filter;
        match key.trim() {
            "denoiser" => {
                self.denoiser = match v {
                    "toy-random" => DenoiserKind::ToyRandom,
                    "toy" => DenoiserKind::Toy,
                    "gmm" => DenoiserKind::Gmm,
                    _ => return Err(bad(key, v, "toy-random, toy or gmm")),
                }
            }
            "weights" => self.weights = path(v),
            "model_seed" => self.model_seed = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "train_steps" => self.train_steps = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "hourglass" => ScheduleKind::Hourglass,
                    "uniform" => ScheduleKind::Uniform,
                    _ => return Err(bad(key, v, "hourglass or uniform")),
                }
            }
            "uniform_steps" => self.uniform_steps = num(key, v)?,
            "hourglass_stages" => {
                self.hourglass_stages = v
                    .split(',')
                    .map(|s| {
                        let p: Vec<&str> = s.trim().split(':').collect();
                        if p.len() != 3 {
                            return Err(bad(key, v, "lo:hi:count[,lo:hi:count...]"));
                        }
                        Ok(Stage::new(num(key, p[0])?, num(key, p[1])?, num(key, p[2])?))
                    })
                    .collect::<Result<_>>()?
            }
            "resample" => f.resample = flag(key, v)?,
            "resample_iters" => f.resample_iters = num(key, v)?,
            "resample_range" => f.resample_range = range(key, v)?,
            "in_step" => f.in_step = flag(key, v)?,
            "pooling" => {
                f.pooling = match v {
                    "min" => Pooling::Min,
                    "mean" => Pooling::Mean,
                    _ => match v.strip_prefix("ema:") {
                        Some(a) => Pooling::Ema(num(key, a)?),
                        None => return Err(bad(key, v, "min, mean or ema:<alpha>")),
                    },
                }
            }
            "cross_step" => f.cross_step = flag(key, v)?,
            "filter_range" => f.filter_range = range(key, v)?,
            "alpha_c" => f.alpha_c = num(key, v)?,
            "alpha_h" => f.alpha_h = num(key, v)?,
            "msa" => f.msa = flag(key, v)?,
            "msa_range" => f.msa_range = range(key, v)?,
            "msa_layers" => {
                f.msa_layers = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<BTreeSet<usize>>>()?
            }
            "pose_elevation" => self.pose.elevation = num(key, v)?,
            "pose_azimuth" => self.pose.azimuth = num(key, v)?,
            "pose_radius" => self.pose.radius = num(key, v)?,
            "scene_family" => self.scene_family = ShapeFamily::parse(v)?,
            "scene_azimuth" => self.scene_azimuth = num(key, v)?,
            "source_image" => self.source_image = path(v),
            "target_image" => self.target_image = path(v),
            "tau_init" => self.tau_init = num(key, v)?,
            "n_seeds" => self.n_seeds = num(key, v)?,
            "ablate_images" => self.ablate_images = num(key, v)?,
            "scene_seed" => self.scene_seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dump_latent" => self.dump_latent = flag(key, v)?,
            "dump_maps" => self.dump_maps = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k, v)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let f = &self.filter;
        let on = |b: bool| if b { "true" } else { "false" }.to_string();
        Ok(match key {
            "denoiser" => match self.denoiser {
                DenoiserKind::ToyRandom => "toy-random",
                DenoiserKind::Toy => "toy",
                DenoiserKind::Gmm => "gmm",
            }
            .into(),
            "weights" => show_path(&self.weights),
            "model_seed" => self.model_seed.to_string(),
            "seed" => self.seed.to_string(),
            "train_steps" => self.train_steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "schedule" => match self.schedule {
                ScheduleKind::Hourglass => "hourglass",
                ScheduleKind::Uniform => "uniform",
            }
            .into(),
            "uniform_steps" => self.uniform_steps.to_string(),
            "hourglass_stages" => self
                .hourglass_stages
                .iter()
                .map(|s| format!("{}:{}:{}", s.lo, s.hi, s.count))
                .collect::<Vec<_>>()
                .join(","),
            "resample" => on(f.resample),
            "resample_iters" => f.resample_iters.to_string(),
            "resample_range" => f.resample_range.to_string(),
            "in_step" => on(f.in_step),
            "pooling" => f.pooling.to_string(),
            "cross_step" => on(f.cross_step),
            "filter_range" => f.filter_range.to_string(),
            "alpha_c" => f.alpha_c.to_string(),
            "alpha_h" => f.alpha_h.to_string(),
            "msa" => on(f.msa),
            "msa_range" => f.msa_range.to_string(),
            "msa_layers" => f
                .msa_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "pose_elevation" => self.pose.elevation.to_string(),
            "pose_azimuth" => self.pose.azimuth.to_string(),
            "pose_radius" => self.pose.radius.to_string(),
            "scene_family" => self.scene_family.name().into(),
            "scene_azimuth" => self.scene_azimuth.to_string(),
            "source_image" => show_path(&self.source_image),
            "target_image" => show_path(&self.target_image),
            "tau_init" => self.tau_init.to_string(),
            "n_seeds" => self.n_seeds.to_string(),
            "ablate_images" => self.ablate_images.to_string(),
            "scene_seed" => self.scene_seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "dump_latent" => on(self.dump_latent),
            "dump_maps" => on(self.dump_maps),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        })
    }

    /// All keys and values in dump order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|k| (*k, self.get(k).expect("every listed key is known")))
            .collect()
    }

    pub fn dump(&self) -> String {
        let mut out = String::from("# z2h run configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses text on top of the defaults. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().merged(text)
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn merged(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
