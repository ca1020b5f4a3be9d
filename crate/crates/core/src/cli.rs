//! Command implementations behind the `z2h` binary.
//!
//! Each command takes an effective [`RunConfig`], writes its outputs under
//! `out_dir`, and leaves a `manifest.json` plus `config.txt` there so the run
//! can be repeated with `z2h <command> --config <out_dir>/config.txt`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{DenoiserKind, RunConfig, ScheduleKind};
use crate::control::gt_map_capture;
use crate::denoiser::weights::load_weights;
use crate::denoiser::{Condition, Denoiser, GmmDenoiser, Pose, ToyDenoiser, CHANNELS, LATENT_SIDE};
use crate::diffusion::{GmmPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::{read_pnm, write_pnm};
use crate::metrics::{iou_mask, mse, psnr_capped, seed_diversity, ssim, Image, IOU_BACKGROUND, IOU_TAU};
use crate::pipeline::{expected_nfe, generate, seed_sweep, Generation, GenerationConfig};
use crate::rng::sweep_seed;
use crate::scene::{random_pair, view_pair, Sprite, ViewPair};
use crate::schedule::{hourglass_schedule, uniform_schedule, TimestepSchedule};
use crate::tensor::Tensor;

/// Noise schedule described by the config.
pub fn noise_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::scaled_linear(cfg.train_steps, cfg.beta_start, cfg.beta_end)
}

pub fn timestep_schedule(cfg: &RunConfig) -> Result<TimestepSchedule> {
    match cfg.schedule {
        ScheduleKind::Hourglass => hourglass_schedule(cfg.train_steps, &cfg.hourglass_stages),
        ScheduleKind::Uniform => uniform_schedule(cfg.train_steps, cfg.uniform_steps),
    }
}

/// Two-component mixture over RGB latent pixels used by `denoiser = gmm`.
pub fn pixel_prior() -> GmmPrior {
    GmmPrior::isotropic(vec![vec![0.8, 0.8, 0.8], vec![-0.4, -0.2, 0.5]], 0.05).expect("valid prior")
}

pub fn build_denoiser(cfg: &RunConfig) -> Result<Box<dyn Denoiser>> {
    Ok(match cfg.denoiser {
        DenoiserKind::ToyRandom => Box::new(ToyDenoiser::random(cfg.model_seed)),
        DenoiserKind::Toy => {
            let path = cfg
                .weights
                .as_deref()
                .ok_or_else(|| Error::Config("denoiser = toy needs a weights path".into()))?;
            Box::new(ToyDenoiser::from_weights(load_weights(path)?)?)
        }
        DenoiserKind::Gmm => Box::new(GmmDenoiser::new(
            pixel_prior(),
            noise_schedule(cfg)?,
            vec![LATENT_SIDE, LATENT_SIDE, CHANNELS],
        )?),
    })
}

/// Source view and, when known, the true target view.
pub fn views(cfg: &RunConfig) -> Result<(Image, Option<Image>)> {
    match &cfg.source_image {
        Some(src) => {
            let target = cfg.target_image.as_deref().map(read_pnm).transpose()?;
            Ok((read_pnm(src)?, target))
        }
        None => {
            let mut sprite = Sprite::new(cfg.scene_family);
            sprite.base.azimuth = cfg.scene_azimuth;
            let pair = view_pair(&sprite, cfg.pose)?;
            Ok((pair.source, Some(pair.target)))
        }
    }
}

pub fn generation_config(cfg: &RunConfig, source: &Image, pose: Pose) -> Result<GenerationConfig> {
    let cond = Condition::new(pose, Some(source.to_latent()));
    let mut g = GenerationConfig::new(timestep_schedule(cfg)?, cfg.filter.clone(), cond, cfg.seed);
    g.noise = noise_schedule(cfg)?;
    if cfg.dump_maps {
        g.map_dump_dir = Some(cfg.out_dir.join("maps"));
    }
    g.validate()?;
    Ok(g)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Writes `manifest.json` and `config.txt` for a run.
pub fn write_manifest(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
    let manifest = json!({
        "tool": "z2h",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": extra,
        "config": config,
    });
    write_text(&cfg.out_dir.join("config.txt"), &cfg.dump())?;
    let path = cfg.out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// 64-bit FNV-1a over the little-endian bytes of a tensor's payload.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in t.data() {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug)]
pub struct SampleOutput {
    pub generation: Generation,
    pub image: Image,
    pub files: Vec<PathBuf>,
}

pub fn cmd_sample(cfg: &RunConfig, dump_tensor: Option<&Path>) -> Result<SampleOutput> {
    let den = build_denoiser(cfg)?;
    let (source, _) = views(cfg)?;
    let gcfg = generation_config(cfg, &source, cfg.pose)?;
    ensure_dir(&cfg.out_dir)?;
    let generation = generate(den.as_ref(), &gcfg)?;
    let image = Image::from_latent(&generation.sample)?;
    let mut files = Vec::new();
    let mut put = |name: &str, img: &Image| -> Result<()> {
        let p = cfg.out_dir.join(name);
        write_pnm(&p, img)?;
        files.push(p);
        Ok(())
    };
    put("input.ppm", &source)?;
    put("sample.ppm", &image)?;
    if let Some(s) = &generation.source_sample {
        put("source_branch.ppm", &Image::from_latent(s)?)?;
    }
    let mut latent_paths = Vec::new();
    if cfg.dump_latent {
        latent_paths.push(cfg.out_dir.join("sample.ztt"));
    }
    if let Some(p) = dump_tensor {
        latent_paths.push(p.to_path_buf());
    }
    for p in latent_paths {
        generation.sample.save_ztt(&p)?;
        files.push(p);
    }
    let diag = cfg.out_dir.join("diagnostics.json");
    write_json(&diag, &generation.diagnostics)?;
    files.push(diag);
    files.push(write_manifest(
        cfg,
        "sample",
        json!({ "dump_tensor": dump_tensor.map(|p| p.display().to_string()) }),
    )?);
    Ok(SampleOutput {
        generation,
        image,
        files,
    })
}

/// Module toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub hourglass: bool,
    pub resample: bool,
    pub amf: bool,
    pub msa: bool,
}

/// The six rows of the module ablation, in order.
pub const ABLATION_ROWS: [Toggles; 6] = [
    Toggles { hourglass: false, resample: false, amf: false, msa: false },
    Toggles { hourglass: true, resample: false, amf: false, msa: false },
    Toggles { hourglass: true, resample: true, amf: false, msa: false },
    Toggles { hourglass: true, resample: true, amf: true, msa: false },
    Toggles { hourglass: true, resample: true, amf: false, msa: true },
    Toggles { hourglass: true, resample: true, amf: true, msa: true },
];

impl Toggles {
    /// `base` with the four modules switched per this row. With every module
    /// off the schedule is uniform with `uniform_steps` steps.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.schedule = if self.hourglass {
            ScheduleKind::Hourglass
        } else {
            ScheduleKind::Uniform
        };
        c.filter.resample = self.resample;
        c.filter.set_amf(self.amf);
        c.filter.msa = self.msa;
        c
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub row: usize,
    #[serde(flatten)]
    pub toggles: Toggles,
    pub steps: usize,
    pub nfe: usize,
    pub nfe_total: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub diversity: f64,
    /// Hash of the first image's sample latent.
    pub hash: String,
}

pub const ABLATION_CSV_HEADER: &str = "row,hourglass,resample,amf,msa,steps,nfe,nfe_total,psnr,ssim,iou,diversity,hash";

impl AblationRow {
    pub fn csv(&self) -> String {
        let t = &self.toggles;
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.row,
            u8::from(t.hourglass),
            u8::from(t.resample),
            u8::from(t.amf),
            u8::from(t.msa),
            self.steps,
            self.nfe,
            self.nfe_total,
            self.psnr,
            self.ssim,
            self.iou,
            self.diversity,
            self.hash
        )
    }
}

/// Procedural evaluation set: `ablate_images` random sprite pairs.
pub fn image_set(cfg: &RunConfig) -> Result<Vec<ViewPair>> {
    if cfg.ablate_images == 0 {
        return Err(Error::Config("ablation image set is empty (ablate_images = 0)".into()));
    }
    (0..cfg.ablate_images).map(|i| random_pair(cfg.scene_seed, i)).collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PairMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl PairMetrics {
    pub fn of(a: &Image, b: &Image) -> Result<Self> {
        Ok(Self {
            mse: mse(a, b)?,
            psnr: psnr_capped(a, b)?,
            ssim: ssim(a, b)?,
            iou: iou_mask(a, b, IOU_BACKGROUND, IOU_TAU)?,
        })
    }

    fn mean(items: &[PairMetrics]) -> Self {
        let n = items.len() as f64;
        let sum = |f: fn(&PairMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            mse: sum(|m| m.mse),
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
            iou: sum(|m| m.iou),
        }
    }
}

fn ablation_row(cfg: &RunConfig, den: &dyn Denoiser, pairs: &[ViewPair], row: usize) -> Result<AblationRow> {
    let toggles = ABLATION_ROWS[row];
    let rc = toggles.apply(cfg);
    let per_pair: Vec<(PairMetrics, String, usize, usize)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut g = generation_config(&rc, &pair.source, pair.relative)?;
            g.seed = sweep_seed(cfg.seed, i as u64);
            g.map_dump_dir = None;
            let out = generate(den, &g)?;
            let img = Image::from_latent(&out.sample)?;
            Ok((
                PairMetrics::of(&img, &pair.target)?,
                tensor_hash(&out.sample),
                out.nfe.target,
                out.nfe.total(),
            ))
        })
        .collect::<Result<_>>()?;
    let first = &pairs[0];
    let mut g = generation_config(&rc, &first.source, first.relative)?;
    g.map_dump_dir = None;
    let samples = seed_sweep(den, &g, cfg.n_seeds)?
        .iter()
        .map(Image::from_latent)
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<PairMetrics> = per_pair.iter().map(|p| p.0).collect();
    let m = PairMetrics::mean(&metrics);
    let nfe = expected_nfe(&g.schedule, &g.filter);
    if per_pair.iter().any(|p| p.2 != nfe) {
        return Err(Error::Orchestration(format!("row {} NFE disagrees with the accounting", row + 1)));
    }
    Ok(AblationRow {
        row: row + 1,
        toggles,
        steps: g.schedule.len(),
        nfe,
        nfe_total: per_pair[0].3,
        psnr: m.psnr,
        ssim: m.ssim,
        iou: m.iou,
        diversity: seed_diversity(&samples)?,
        hash: per_pair[0].1.clone(),
    })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let den = build_denoiser(cfg)?;
    let pairs = image_set(cfg)?;
    let rows = (0..ABLATION_ROWS.len())
        .map(|r| ablation_row(cfg, den.as_ref(), &pairs, r))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&cfg.out_dir)?;
    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write_text(&cfg.out_dir.join("ablation.csv"), &csv)?;
    write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
    write_manifest(cfg, "ablate", json!({}))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Paired {
    pub with_gt: f64,
    pub without_gt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GtSeed {
    pub seed: u64,
    pub with_gt: PairMetrics,
    pub without_gt: PairMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct GtInjectReport {
    pub tau_init: usize,
    pub seeds: usize,
    pub mse: Paired,
    pub psnr: Paired,
    pub ssim: Paired,
    pub iou: Paired,
    /// Seeds where injection lowered the MSE to the target.
    pub wins: usize,
    pub overrides: usize,
    pub per_seed: Vec<GtSeed>,
}

pub fn cmd_gt_inject(cfg: &RunConfig) -> Result<GtInjectReport> {
    let den = build_denoiser(cfg)?;
    let (source, target) = views(cfg)?;
    let target = target.ok_or_else(|| Error::Config("gt-inject needs target_image".into()))?;
    if cfg.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be >= 1".into()));
    }
    let base = generation_config(cfg, &source, cfg.pose)?;
    let target_latent = target.to_latent();
    let per_seed: Vec<(GtSeed, usize, Option<(Image, Image)>)> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = sweep_seed(cfg.seed, i);
            let mut plain = base.clone();
            plain.seed = seed;
            if i > 0 {
                plain.map_dump_dir = None;
            }
            let maps = gt_map_capture(&target_latent, cfg.tau_init, den.as_ref(), &plain.condition, &plain.noise, seed)?;
            let mut inject = plain.clone();
            inject.map_dump_dir = None;
            inject.gt_maps = Some(maps);
            let without = generate(den.as_ref(), &plain)?;
            let with = generate(den.as_ref(), &inject)?;
            let (wi, wo) = (Image::from_latent(&with.sample)?, Image::from_latent(&without.sample)?);
            let rec = GtSeed {
                seed,
                with_gt: PairMetrics::of(&wi, &target)?,
                without_gt: PairMetrics::of(&wo, &target)?,
            };
            Ok((rec, with.diagnostics.overrides, (i == 0).then_some((wi, wo))))
        })
        .collect::<Result<_>>()?;
    let with: Vec<PairMetrics> = per_seed.iter().map(|s| s.0.with_gt).collect();
    let without: Vec<PairMetrics> = per_seed.iter().map(|s| s.0.without_gt).collect();
    let (mw, mo) = (PairMetrics::mean(&with), PairMetrics::mean(&without));
    let pair = |a: f64, b: f64| Paired {
        with_gt: a,
        without_gt: b,
    };
    let report = GtInjectReport {
        tau_init: cfg.tau_init,
        seeds: cfg.n_seeds,
        mse: pair(mw.mse, mo.mse),
        psnr: pair(mw.psnr, mo.psnr),
        ssim: pair(mw.ssim, mo.ssim),
        iou: pair(mw.iou, mo.iou),
        wins: per_seed.iter().filter(|s| s.0.with_gt.mse < s.0.without_gt.mse).count(),
        overrides: per_seed.iter().map(|s| s.1).sum(),
        per_seed: per_seed.iter().map(|s| s.0.clone()).collect(),
    };
    ensure_dir(&cfg.out_dir)?;
    if let Some((wi, wo)) = per_seed.iter().find_map(|s| s.2.as_ref()) {
        write_pnm(&cfg.out_dir.join("with_gt.ppm"), wi)?;
        write_pnm(&cfg.out_dir.join("without_gt.ppm"), wo)?;
        write_pnm(&cfg.out_dir.join("target.ppm"), &target)?;
    }
    write_json(&cfg.out_dir.join("gt_inject.json"), &report)?;
    write_manifest(cfg, "gt-inject", json!({}))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpKind {
    Hourglass,
    Uniform,
    /// β and ᾱ tables of the noise schedule.
    Noise,
}

/// JSON text for the requested schedule, optionally also written as ZTT1.
pub fn cmd_schedule_dump(cfg: &RunConfig, kind: DumpKind, tensor: Option<&Path>) -> Result<String> {
    let (text, t) = match kind {
        DumpKind::Hourglass | DumpKind::Uniform => {
            let mut c = cfg.clone();
            c.schedule = if kind == DumpKind::Hourglass {
                ScheduleKind::Hourglass
            } else {
                ScheduleKind::Uniform
            };
            let s = timestep_schedule(&c)?;
            let t = Tensor::new(vec![s.len()], s.steps().iter().map(|&x| x as f32).collect())?;
            (s.to_json(), t)
        }
        DumpKind::Noise => {
            let n = noise_schedule(cfg)?;
            let t = n.to_tensor();
            let steps = n.steps();
            let beta: Vec<f64> = (1..=steps).map(|i| n.beta(i)).collect::<Result<_>>()?;
            let ab: Vec<f64> = (0..=steps).map(|i| n.alpha_bar(i)).collect::<Result<_>>()?;
            (json!({ "beta": beta, "alpha_bar": ab }).to_string(), t)
        }
    };
    if let Some(p) = tensor {
        t.save_ztt(p)?;
    }
    Ok(text)
}

pub fn cmd_metrics(a: &Path, b: &Path) -> Result<PairMetrics> {
    PairMetrics::of(&read_pnm(a)?, &read_pnm(b)?)
}

pub fn diversity_of_files(paths: &[PathBuf]) -> Result<f64> {
    let imgs = paths.iter().map(|p| read_pnm(p)).collect::<Result<Vec<_>>>()?;
    seed_diversity(&imgs)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiversityRow {
    pub resample_iters: usize,
    pub nfe: usize,
    pub diversity: f64,
}

/// Seed diversity of `n_seeds` generations for each resampling count.
pub fn cmd_diversity(cfg: &RunConfig, iters: &[usize]) -> Result<Vec<DiversityRow>> {
    if iters.is_empty() {
        return Err(Error::Config("no resampling counts given".into()));
    }
    let den = build_denoiser(cfg)?;
    let (source, _) = views(cfg)?;
    let rows = iters
        .iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.filter.resample = true;
            c.filter.resample_iters = r;
            let mut g = generation_config(&c, &source, cfg.pose)?;
            g.map_dump_dir = None;
            let samples = seed_sweep(den.as_ref(), &g, cfg.n_seeds)?
                .iter()
                .map(Image::from_latent)
                .collect::<Result<Vec<_>>>()?;
            Ok(DiversityRow {
                resample_iters: r,
                nfe: expected_nfe(&g.schedule, &g.filter),
                diversity: seed_diversity(&samples)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("diversity.json"), &rows)?;
    write_manifest(cfg, "diversity", json!({ "iters": iters }))?;
    Ok(rows)
}

#[derive(Parser, Debug)]
#[command(name = "z2h", version, about = "Test-time attention-map filtering for diffusion view synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Flat key = value configuration file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Start from a named preset instead of the defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Write every self-attention map used as `layer{L}_t{t}_r{r}.ztt`.
    #[arg(long)]
    dump_maps: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::preset(self.preset.as_deref().unwrap_or("default"))?;
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c = c.merged(&text)?;
        }
        for kv in &self.set {
            c.set_pair(kv)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if self.dump_maps {
            c.dump_maps = true;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one target view.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the final latent as ZTT1.
        #[arg(long)]
        dump_tensor: Option<PathBuf>,
    },
    /// Six-row module ablation over a procedural image set.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Generate with and without ground-truth map injection.
    GtInject {
        #[command(flatten)]
        run: RunArgs,
        /// Capture timestep for the ground-truth maps.
        #[arg(long)]
        tau_init: Option<usize>,
    },
    /// Print a timestep or noise schedule as JSON.
    ScheduleDump {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "hourglass")]
        kind: DumpKind,
        /// Number of steps for `--kind uniform`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        dump_tensor: Option<PathBuf>,
    },
    /// PSNR, SSIM, IoU and MSE between two PPM/PGM images.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Seed diversity of image files, or of generations per resampling count.
    Diversity {
        #[command(flatten)]
        run: RunArgs,
        /// Images to compare; when empty, samples are generated.
        images: Vec<PathBuf>,
        /// Resampling counts to sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,5,15")]
        iters: Vec<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Print the effective configuration.
    DumpConfig {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("Z2H_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("Z2H_THREADS = '{v}' is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<String> {
    configure_threads()?;
    match cmd {
        Command::Sample { run, dump_tensor } => {
            let cfg = run.resolve()?;
            let out = cmd_sample(&cfg, dump_tensor.as_deref())?;
            let d = &out.generation.diagnostics;
            Ok(format!(
                "wrote {} (steps {}, nfe {}, nfe_total {})",
                cfg.out_dir.join("sample.ppm").display(),
                d.steps,
                d.nfe,
                d.nfe_total
            ))
        }
        Command::Ablate { run, format } => {
            let rows = cmd_ablate(&run.resolve()?)?;
            Ok(match format {
                Format::Json => to_json(&rows),
                Format::Csv => std::iter::once(ABLATION_CSV_HEADER.to_string())
                    .chain(rows.iter().map(AblationRow::csv))
                    .collect::<Vec<_>>()
                    .join("\n"),
            })
        }
        Command::GtInject { run, tau_init } => {
            let mut cfg = run.resolve()?;
            if let Some(t) = tau_init {
                cfg.tau_init = t;
            }
            Ok(to_json(&cmd_gt_inject(&cfg)?))
        }
        Command::ScheduleDump {
            run,
            kind,
            steps,
            dump_tensor,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(n) = steps {
                cfg.uniform_steps = n;
            }
            cmd_schedule_dump(&cfg, kind, dump_tensor.as_deref())
        }
        Command::Metrics { a, b, format } => {
            let m = cmd_metrics(&a, &b)?;
            Ok(match format {
                Format::Json => to_json(&m),
                Format::Csv => format!("mse,psnr,ssim,iou\n{:.9},{:.9},{:.9},{:.9}", m.mse, m.psnr, m.ssim, m.iou),
            })
        }
        Command::Diversity {
            run,
            images,
            iters,
            format,
        } => {
            if !images.is_empty() {
                let d = diversity_of_files(&images)?;
                return Ok(match format {
                    Format::Json => json!({ "images": images.len(), "diversity": d }).to_string(),
                    Format::Csv => format!("images,diversity\n{},{d:.9}", images.len()),
                });
            }
            let rows = cmd_diversity(&run.resolve()?, &iters)?;
            Ok(match format {
                Format::Json => to_json(&rows),
                Format::Csv => std::iter::once("resample_iters,nfe,diversity".to_string())
                    .chain(rows.iter().map(|r| format!("{},{},{:.9}", r.resample_iters, r.nfe, r.diversity)))
                    .collect::<Vec<_>>()
                    .join("\n"),
            })
        }
        Command::DumpConfig { run } => Ok(run.resolve()?.dump().trim_end().to_string()),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_match_module_grid() {
        let pattern: Vec<[bool; 4]> = ABLATION_ROWS
            .iter()
            .map(|t| [t.hourglass, t.resample, t.amf, t.msa])
            .collect();
        assert_eq!(
            pattern,
            vec![
                [false, false, false, false],
                [true, false, false, false],
                [true, true, false, false],
                [true, true, true, false],
                [true, true, false, true],
                [true, true, true, true],
            ]
        );
    }

    #[test]
    fn row_one_is_the_baseline_preset() {
        let base = RunConfig::default();
        let row = ABLATION_ROWS[0].apply(&base);
        let preset = RunConfig::preset("baseline-25").unwrap();
        assert_eq!(timestep_schedule(&row).unwrap(), timestep_schedule(&preset).unwrap());
        assert_eq!(expected_nfe(&timestep_schedule(&row).unwrap(), &row.filter), 25);
        assert!(!row.filter.msa && !row.filter.amf() && !row.filter.resample);
    }

    #[test]
    fn hash_is_stable() {
        let t = Tensor::new(vec![2], vec![1.0, -0.0]).unwrap();
        assert_eq!(tensor_hash(&t), tensor_hash(&t.clone()));
        assert_ne!(tensor_hash(&t), tensor_hash(&Tensor::zeros(&[2]).unwrap()));
    }

    #[test]
    fn empty_image_set_rejected() {
        let mut c = RunConfig::default();
        c.ablate_images = 0;
        assert!(matches!(image_set(&c), Err(Error::Config(_))));
    }
}
