//! Generation: schedule walk, per-step resampling, dual-branch mutual
//! self-attention, filtering callouts, and NFE accounting.
//!
//! Random streams are keyed by `(seed, branch, timestep, iteration)`:
//!
//! | draw             | purpose        | timestep | iteration |
//! |------------------|----------------|----------|-----------|
//! | initial latent   | `InitialNoise` | 0        | 0         |
//! | resample noise   | `Renoise`      | t        | r         |
//!
//! Branch 0 is the target view, branch 1 the identity-pose source view.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{check_injection_maps, msa_substitute, CapturedMaps, FilterConfig, FilterState};
use crate::denoiser::{AttentionHooks, Condition, Denoiser, NoHooks};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{sweep_seed, Purpose, StreamKey};
use crate::schedule::TimestepSchedule;
use crate::tensor::{AttentionMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    Single,
    DualMsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Target = 0,
    Source = 1,
}

impl Branch {
    fn stream(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub noise: NoiseSchedule,
    pub schedule: TimestepSchedule,
    pub filter: FilterConfig,
    pub condition: Condition,
    pub seed: u64,
    pub branch_mode: BranchMode,
    pub gt_maps: Option<CapturedMaps>,
    /// Write every self-attention map the target (and source) branch uses.
    pub map_dump_dir: Option<PathBuf>,
}

impl GenerationConfig {
    pub fn new(schedule: TimestepSchedule, filter: FilterConfig, condition: Condition, seed: u64) -> Self {
        let branch_mode = if filter.msa {
            BranchMode::DualMsa
        } else {
            BranchMode::Single
        };
        Self {
            noise: NoiseSchedule::default(),
            schedule,
            filter,
            condition,
            seed,
            branch_mode,
            gt_maps: None,
            map_dump_dir: None,
        }
    }

    /// Identity-pose condition for the source branch.
    pub fn source_condition(&self) -> Condition {
        Condition::identity(self.condition.source_image.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let t_max = self.noise.steps();
        self.filter.validate(t_max)?;
        if self.schedule.is_empty() || self.schedule.steps()[0] > t_max {
            return Err(Error::Config(format!("schedule must be non-empty and within (0, {t_max}]")));
        }
        if self.filter.msa && self.branch_mode != BranchMode::DualMsa {
            return Err(Error::Config("mutual self-attention needs branch mode dual-msa".into()));
        }
        Ok(())
    }
}

/// Denoiser evaluations per branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NfeCounter {
    pub target: usize,
    pub source: usize,
}

impl NfeCounter {
    pub fn total(&self) -> usize {
        self.target + self.source
    }

    fn bump(&mut self, b: Branch) -> usize {
        let c = match b {
            Branch::Target => &mut self.target,
            Branch::Source => &mut self.source,
        };
        *c += 1;
        *c
    }
}

/// One denoiser evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub branch: Branch,
    pub t: usize,
    pub r: usize,
    pub nfe: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub map_dumps: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub nfe: usize,
    pub nfe_source: usize,
    pub nfe_total: usize,
    pub seed: u64,
    pub branch_mode: BranchMode,
    pub schedule: Vec<usize>,
    pub hook_calls: usize,
    pub overrides: usize,
    pub warnings: Vec<String>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub sample: Tensor,
    pub source_sample: Option<Tensor>,
    pub nfe: NfeCounter,
    pub diagnostics: Diagnostics,
}

/// `|S \ Ω| + R · |S ∩ Ω|` for one branch.
pub fn expected_nfe(schedule: &TimestepSchedule, filter: &FilterConfig) -> usize {
    schedule.steps().iter().map(|&t| filter.rounds_at(t)).sum()
}

type KvStore = BTreeMap<usize, (Tensor, Tensor)>;

enum MsaRole<'a> {
    Off,
    Record(&'a mut KvStore),
    Substitute(&'a KvStore),
}

struct BranchHooks<'a> {
    branch: Branch,
    t: usize,
    r: usize,
    rounds: usize,
    filter: &'a FilterConfig,
    state: &'a mut FilterState,
    msa: MsaRole<'a>,
    gt: Option<&'a CapturedMaps>,
    dump: Option<&'a Path>,
    dumped: Vec<String>,
    calls: usize,
    overrides: usize,
}

impl AttentionHooks for BranchHooks<'_> {
    fn self_attention_kv(&mut self, layer_id: usize, k: Tensor, v: Tensor) -> Result<(Tensor, Tensor)> {
        match &mut self.msa {
            MsaRole::Off => Ok((k, v)),
            MsaRole::Record(store) => {
                store.insert(layer_id, (k.clone(), v.clone()));
                Ok((k, v))
            }
            MsaRole::Substitute(store) => {
                let src = store.get(&layer_id).map(|(k, v)| (k, v));
                msa_substitute(k, v, src, self.t, layer_id, self.filter)
            }
        }
    }

    fn self_attention_scores(&mut self, layer_id: usize, scores: Tensor) -> Result<Tensor> {
        self.calls += 1;
        let out = match self.gt.and_then(|m| m.get(&layer_id)) {
            Some(gt) => {
                gt.scores.ensure_shape(scores.shape(), "injected map")?;
                self.overrides += 1;
                gt.scores.clone()
            }
            None => self
                .state
                .apply(self.filter, scores, layer_id, self.t, self.r, self.rounds)?,
        };
        if let Some(dir) = self.dump {
            let map = AttentionMap::new(out, layer_id, self.t, self.r)?;
            let dir = match self.branch {
                Branch::Target => dir.to_path_buf(),
                Branch::Source => dir.join("source"),
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(map.dump_name());
            map.scores.save_ztt(&path)?;
            self.dumped.push(path.display().to_string());
            return Ok(map.scores);
        }
        Ok(out)
    }
}

struct BranchState {
    branch: Branch,
    cond: Condition,
    z: Tensor,
    filter: FilterState,
}

/// Runs one generation.
pub fn generate(denoiser: &dyn Denoiser, cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if let Some(maps) = &cfg.gt_maps {
        check_injection_maps(denoiser, maps)?;
        if cfg.branch_mode == BranchMode::DualMsa {
            warnings.push("gt injection combined with dual-msa: injected maps take precedence over target scores".into());
        }
    }
    let shape = denoiser.latent_shape();
    let init = |b: Branch| {
        StreamKey::new(cfg.seed, Purpose::InitialNoise)
            .branch(b.stream())
            .gaussian(&shape)
    };
    let mut branches = Vec::new();
    if cfg.branch_mode == BranchMode::DualMsa {
        branches.push(BranchState {
            branch: Branch::Source,
            cond: cfg.source_condition(),
            z: init(Branch::Source)?,
            filter: FilterState::default(),
        });
    }
    branches.push(BranchState {
        branch: Branch::Target,
        cond: cfg.condition.clone(),
        z: init(Branch::Target)?,
        filter: FilterState::default(),
    });

    let mut nfe = NfeCounter::default();
    let mut records = Vec::new();
    let (mut hook_calls, mut overrides) = (0, 0);
    let steps = cfg.schedule.steps();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = cfg.schedule.next_after(i);
        let rounds = cfg.filter.rounds_at(t);
        for r in 1..=rounds {
            let mut kv = KvStore::new();
            for st in branches.iter_mut() {
                let msa = match (cfg.branch_mode, st.branch) {
                    (BranchMode::Single, _) => MsaRole::Off,
                    (BranchMode::DualMsa, Branch::Source) => MsaRole::Record(&mut kv),
                    (BranchMode::DualMsa, Branch::Target) => MsaRole::Substitute(&kv),
                };
                let mut hooks = BranchHooks {
                    branch: st.branch,
                    t,
                    r,
                    rounds,
                    filter: &cfg.filter,
                    state: &mut st.filter,
                    msa,
                    gt: match st.branch {
                        Branch::Target => cfg.gt_maps.as_ref(),
                        Branch::Source => None,
                    },
                    dump: cfg.map_dump_dir.as_deref(),
                    dumped: Vec::new(),
                    calls: 0,
                    overrides: 0,
                };
                let eps = denoiser.predict_eps(&st.z, t, &st.cond, &mut hooks)?;
                let count = nfe.bump(st.branch);
                hook_calls += hooks.calls;
                overrides += hooks.overrides;
                records.push(StepRecord {
                    branch: st.branch,
                    t,
                    r,
                    nfe: count,
                    map_dumps: hooks.dumped,
                });
                eps.ensure_finite("predicted noise")?;
                let z_prev = cfg.noise.ddim_step(&st.z, &eps, t, t_prev)?;
                st.z = if r < rounds {
                    let noise = StreamKey::new(cfg.seed, Purpose::Renoise)
                        .branch(st.branch.stream())
                        .at(t, r)
                        .gaussian(&shape)?;
                    cfg.noise.renoise(&z_prev, t_prev, t, &noise)?
                } else {
                    z_prev
                };
            }
        }
    }

    let mut source_sample = None;
    let mut sample = None;
    for st in branches {
        st.z.ensure_finite("generated sample")?;
        match st.branch {
            Branch::Source => source_sample = Some(st.z),
            Branch::Target => sample = Some(st.z),
        }
    }
    let diagnostics = Diagnostics {
        steps: steps.len(),
        nfe: nfe.target,
        nfe_source: nfe.source,
        nfe_total: nfe.total(),
        seed: cfg.seed,
        branch_mode: cfg.branch_mode,
        schedule: steps.to_vec(),
        hook_calls,
        overrides,
        warnings,
        records,
    };
    Ok(Generation {
        sample: sample.expect("target branch always runs"),
        source_sample,
        nfe,
        diagnostics,
    })
}

/// Reference sampler: deterministic DDIM over `schedule` with no hooks, no
/// resampling and the target branch's initial-noise stream.
pub fn plain_ddim(
    denoiser: &dyn Denoiser,
    noise: &NoiseSchedule,
    schedule: &TimestepSchedule,
    cond: &Condition,
    seed: u64,
) -> Result<Tensor> {
    let mut z = StreamKey::new(seed, Purpose::InitialNoise)
        .branch(Branch::Target.stream())
        .gaussian(&denoiser.latent_shape())?;
    for (i, &t) in schedule.steps().iter().enumerate() {
        let eps = denoiser.predict_eps(&z, t, cond, &mut NoHooks)?;
        z = noise.ddim_step(&z, &eps, t, schedule.next_after(i))?;
    }
    Ok(z)
}

/// Generations for seeds `sweep_seed(cfg.seed, i)`, `i = 0..n_seeds`, run in parallel.
pub fn seed_sweep(denoiser: &dyn Denoiser, cfg: &GenerationConfig, n_seeds: usize) -> Result<Vec<Tensor>> {
    if n_seeds == 0 {
        return Err(Error::Config("seed sweep needs at least one seed".into()));
    }
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = sweep_seed(cfg.seed, i);
            c.map_dump_dir = None;
            generate(denoiser, &c).map(|g| g.sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TimeRange;
    use crate::diffusion::GmmPrior;
    use crate::denoiser::GmmDenoiser;
    use crate::schedule::{hourglass_schedule, uniform_schedule, DEFAULT_HOURGLASS};

    fn gmm() -> GmmDenoiser {
        let prior = GmmPrior::isotropic(vec![vec![1.0, -1.0], vec![-1.0, 0.5]], 0.2).unwrap();
        GmmDenoiser::batched(prior, NoiseSchedule::default(), 4).unwrap()
    }

    #[test]
    fn default_nfe_is_66_per_branch() {
        let sched = hourglass_schedule(1000, &DEFAULT_HOURGLASS).unwrap();
        let cfg = GenerationConfig::new(sched, FilterConfig::default(), Condition::default(), 0);
        let g = generate(&gmm(), &cfg).unwrap();
        assert_eq!(g.nfe.target, 66);
        assert_eq!(g.nfe.source, 66);
        assert_eq!(g.diagnostics.steps, 26);
        assert_eq!(g.diagnostics.hook_calls, 0);
        assert!(g.source_sample.is_some());
    }

    #[test]
    fn msa_requires_dual_mode() {
        let sched = uniform_schedule(1000, 5).unwrap();
        let mut cfg = GenerationConfig::new(sched, FilterConfig::default(), Condition::default(), 0);
        cfg.branch_mode = BranchMode::Single;
        assert!(matches!(generate(&gmm(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_matches_plain_ddim() {
        let sched = uniform_schedule(1000, 25).unwrap();
        let cfg = GenerationConfig::new(sched.clone(), FilterConfig::disabled(), Condition::default(), 9);
        let g = generate(&gmm(), &cfg).unwrap();
        assert_eq!(g.nfe.target, 25);
        let plain = plain_ddim(&gmm(), &cfg.noise, &sched, &cfg.condition, 9).unwrap();
        assert_eq!(g.sample, plain);
    }

    #[test]
    fn resampling_changes_outcome_and_is_reproducible() {
        let sched = uniform_schedule(1000, 10).unwrap();
        let mut filter = FilterConfig::disabled();
        filter.resample = true;
        filter.resample_iters = 3;
        filter.resample_range = TimeRange::new(500, 1000);
        let cfg = GenerationConfig::new(sched, filter, Condition::default(), 2);
        let a = generate(&gmm(), &cfg).unwrap();
        let b = generate(&gmm(), &cfg).unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.nfe.target, 5 + 5 * 3);
        let rec: Vec<(usize, usize)> = a.diagnostics.records.iter().take(4).map(|r| (r.t, r.r)).collect();
        assert_eq!(rec, vec![(1000, 1), (1000, 2), (1000, 3), (900, 1)]);
    }

    #[test]
    fn sweep_first_seed_is_plain_generation() {
        let sched = uniform_schedule(1000, 8).unwrap();
        let cfg = GenerationConfig::new(sched, FilterConfig::disabled(), Condition::default(), 31);
        let one = seed_sweep(&gmm(), &cfg, 1).unwrap();
        assert_eq!(one[0], generate(&gmm(), &cfg).unwrap().sample);
        let three = seed_sweep(&gmm(), &cfg, 3).unwrap();
        assert_eq!(three, seed_sweep(&gmm(), &cfg, 3).unwrap());
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(three[i].squared_distance(&three[j]).unwrap() > 0.0);
            }
        }
        assert!(seed_sweep(&gmm(), &cfg, 0).is_err());
    }
}
