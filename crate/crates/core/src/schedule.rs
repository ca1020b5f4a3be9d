//! Timestep schedules: uniform DDIM subsampling and the three-stage
//! hourglass scheme that samples the first and last stages more densely.

use serde::Serialize;

use crate::error::{Error, Result};

/// One sampling stage over the half-open interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

impl Stage {
    pub const fn new(lo: usize, hi: usize, count: usize) -> Self {
        Self { lo, hi, count }
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo
    }

    /// Steps per unit of `t`.
    pub fn density(&self) -> f64 {
        self.count as f64 / self.width() as f64
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo < t && t <= self.hi
    }
}

/// Default hourglass stages: 10 early, 6 middle, 10 late steps over T = 1000.
pub const DEFAULT_HOURGLASS: [Stage; 3] = [
    Stage::new(800, 1000, 10),
    Stage::new(200, 800, 6),
    Stage::new(0, 200, 10),
];

/// Strictly decreasing sequence of timesteps in `[1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimestepSchedule {
    steps: Vec<usize>,
    stages: Vec<Stage>,
    /// `(τ_m, τ_e)` when the schedule was built from three stages.
    stage_bounds: Option<(usize, usize)>,
    /// Early-to-middle density ratio λ_den, when `stage_bounds` is set.
    density_ratio: Option<f64>,
}

impl TimestepSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_bounds(&self) -> Option<(usize, usize)> {
        self.stage_bounds
    }

    pub fn density_ratio(&self) -> Option<f64> {
        self.density_ratio
    }

    /// Target step after index `i` (0 after the final step).
    pub fn next_after(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    pub fn count_in(&self, lo: usize, hi: usize) -> usize {
        self.steps.iter().filter(|&&t| lo < t && t <= hi).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.steps).expect("integers serialize")
    }
}

/// `n` steps evenly spread over `(0, T]`, starting at `T`.
pub fn uniform_schedule(t_max: usize, n: usize) -> Result<TimestepSchedule> {
    if n == 0 || n > t_max {
        return Err(Error::Schedule(format!("need 1 <= n <= {t_max}, got {n}")));
    }
    let mut s = hourglass_schedule(t_max, &[Stage::new(0, t_max, n)])?;
    s.stage_bounds = None;
    s.density_ratio = None;
    Ok(s)
}

/// Concatenates per-stage uniform grids `hi - i·(hi-lo)/k`, `i = 0..k`.
///
/// Stages must tile `(0, T]` from the top down. Positions are rounded to the
/// nearest integer; a rounded position that collides with the previous step
/// is decremented.
pub fn hourglass_schedule(t_max: usize, stages: &[Stage]) -> Result<TimestepSchedule> {
    if stages.is_empty() {
        return Err(Error::Schedule("at least one stage is required".into()));
    }
    let mut expected_hi = t_max;
    for st in stages {
        if st.hi != expected_hi {
            return Err(Error::Schedule(format!(
                "stage ({}, {}] leaves a gap or overlap; expected upper bound {expected_hi}",
                st.lo, st.hi
            )));
        }
        if st.lo >= st.hi {
            return Err(Error::Schedule(format!("empty stage ({}, {}]", st.lo, st.hi)));
        }
        if st.count == 0 || st.count > st.width() {
            return Err(Error::Schedule(format!(
                "stage ({}, {}] cannot hold {} steps",
                st.lo, st.hi, st.count
            )));
        }
        expected_hi = st.lo;
    }
    if expected_hi != 0 {
        return Err(Error::Schedule(format!(
            "stages stop at {expected_hi}, they must reach 0"
        )));
    }

    let mut steps: Vec<usize> = Vec::new();
    for st in stages {
        let stride = st.width() as f64 / st.count as f64;
        for i in 0..st.count {
            let mut t = (st.hi as f64 - i as f64 * stride).round() as usize;
            if let Some(&prev) = steps.last() {
                if t >= prev {
                    t = prev - 1;
                }
            }
            if t <= st.lo {
                return Err(Error::Schedule(format!(
                    "stage ({}, {}] ran out of room while placing step {i}",
                    st.lo, st.hi
                )));
            }
            steps.push(t);
        }
    }

    let (stage_bounds, density_ratio) = match stages {
        [early, middle, _late] => (
            Some((middle.lo, early.lo)),
            Some(early.density() / middle.density()),
        ),
        _ => (None, None),
    };
    Ok(TimestepSchedule {
        steps,
        stages: stages.to_vec(),
        stage_bounds,
        density_ratio,
    })
}

/// Three stages with boundaries `τ_m < τ_e < T`, `early_count` steps in the
/// first stage, and first/last stages `density_ratio` times as dense as the
/// middle one. Counts are rounded to the nearest integer.
pub fn hourglass_from_density(
    t_max: usize,
    tau_m: usize,
    tau_e: usize,
    early_count: usize,
    density_ratio: f64,
) -> Result<TimestepSchedule> {
    if !(0 < tau_m && tau_m < tau_e && tau_e < t_max) || !(density_ratio > 0.0) {
        return Err(Error::Schedule(format!(
            "need 0 < tau_m < tau_e < T and a positive ratio, got {tau_m}, {tau_e}, {density_ratio}"
        )));
    }
    let early_density = early_count as f64 / (t_max - tau_e) as f64;
    let middle = (early_density / density_ratio * (tau_e - tau_m) as f64).round() as usize;
    let late = (early_density * tau_m as f64).round() as usize;
    hourglass_schedule(
        t_max,
        &[
            Stage::new(tau_e, t_max, early_count),
            Stage::new(tau_m, tau_e, middle.max(1)),
            Stage::new(0, tau_m, late.max(1)),
        ],
    )
}
