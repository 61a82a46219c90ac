//! Parametric phase profiles and the alignment of demonstration timing.
//!
//! A phase profile maps time to a phase in `[0, 1]` through the integrated
//! beta(2, 2) density (a smoothstep), shifted at both ends by the two
//! parameters `delta1` and `delta2`: in normalized time the ramp runs from
//! `delta1` to `1 + delta2`. Alignment assigns one profile per demonstration
//! by alternating between (a) averaging the demonstrations in phase domain
//! and (b) refitting each profile against that average, until the summed
//! squared error stops decreasing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Trajectory;
use crate::math;
use crate::{basis::BasisConfig, promp};

#[derive(Error, Debug)]
pub enum AlignError {
    #[error("alignment needs at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("trajectory {index} has {len} samples, need at least {min}")]
    TooFewSamples { index: usize, len: usize, min: usize },
    #[error("trajectory {index} has {got} dimensions, expected {expected}")]
    DimensionMismatch { index: usize, got: usize, expected: usize },
    #[error(
        "alignment objective increased from {previous} to {current} at iteration {iteration} \
         (trace: {trace:?})"
    )]
    Diverged {
        iteration: usize,
        previous: f64,
        current: f64,
        trace: Vec<f64>,
    },
    #[error("invalid phase profile: ramp start {start} not before ramp end {end}")]
    InvalidProfile { start: f64, end: f64 },
}

/// Two-parameter sigmoidal phase profile of a trial with duration `duration`
/// seconds. `delta1` shifts the ramp start and `delta2` the ramp end, both in
/// normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub delta1: f64,
    pub delta2: f64,
    pub duration: f64,
}

impl PhaseProfile {
    pub fn new(delta1: f64, delta2: f64, duration: f64) -> Result<Self, AlignError> {
        let start = delta1;
        let end = 1.0 + delta2;
        if !(start < end) || !duration.is_finite() || duration <= 0.0 {
            return Err(AlignError::InvalidProfile { start, end });
        }
        Ok(Self { delta1, delta2, duration })
    }

    /// The reference profile: a plain smoothstep over the whole trial.
    pub fn reference(duration: f64) -> Self {
        Self { delta1: 0.0, delta2: 0.0, duration }
    }

    fn ramp(&self) -> (f64, f64) {
        (self.delta1, 1.0 + self.delta2)
    }

    /// Phase at time `t` (seconds): 0 before the ramp, 1 after it,
    /// `3x^2 - 2x^3` in between.
    pub fn phase_at(&self, t: f64) -> f64 {
        let (start, end) = self.ramp();
        let x = (t / self.duration - start) / (end - start);
        math::smoothstep(x)
    }

    /// Exact derivative of [`Self::phase_at`] in 1/seconds.
    pub fn phase_velocity(&self, t: f64) -> f64 {
        let (start, end) = self.ramp();
        let width = end - start;
        let x = (t / self.duration - start) / width;
        math::smoothstep_deriv(x) / (width * self.duration)
    }

    /// Time (seconds) at which the profile reaches `phi`; ramp start for
    /// `phi = 0` and ramp end for `phi = 1`.
    pub fn time_at_phase(&self, phi: f64) -> f64 {
        let (start, end) = self.ramp();
        let x = math::smoothstep_inv(phi);
        (start + x * (end - start)) * self.duration
    }
}

/// A phase map for projection and phase statistics: either a fitted
/// sigmoidal profile or the plain linear map `t / duration` used when
/// fitting without alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhaseMap {
    Beta(PhaseProfile),
    Linear { duration: f64 },
}

impl PhaseMap {
    pub fn phase_at(&self, t: f64) -> f64 {
        match self {
            PhaseMap::Beta(p) => p.phase_at(t),
            PhaseMap::Linear { duration } => (t / duration).clamp(0.0, 1.0),
        }
    }

    pub fn phase_velocity(&self, t: f64) -> f64 {
        match self {
            PhaseMap::Beta(p) => p.phase_velocity(t),
            PhaseMap::Linear { duration } => {
                if (0.0..=*duration).contains(&t) {
                    1.0 / duration
                } else {
                    0.0
                }
            }
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            PhaseMap::Beta(p) => p.duration,
            PhaseMap::Linear { duration } => *duration,
        }
    }
}

/// Options steering the alignment loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOptions {
    /// Maximum outer iterations of the average/refit alternation.
    pub max_iter: usize,
    /// Relative objective decrease below which the loop stops.
    pub tol: f64,
    /// Grid resolution per delta axis for the coarse search.
    pub grid_steps: usize,
    /// Deltas are searched inside `[-delta_bound, delta_bound]`.
    pub delta_bound: f64,
    /// Objective tolerance of the local simplex refinement.
    pub refine_tol: f64,
    /// Floor applied to the phase standard deviation.
    pub sigma_floor: f64,
    /// Compare basis reconstructions instead of raw samples.
    pub project_mp: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
            grid_steps: 21,
            delta_bound: 0.3,
            refine_tol: 1e-6,
            sigma_floor: 0.01,
            project_mp: false,
        }
    }
}

/// Outcome of the alignment: one profile per demonstration, the phase-domain
/// average, and the objective trace across outer iterations.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub profiles: Vec<PhaseProfile>,
    /// Phase-domain average sampled on the uniform phase grid, one column
    /// per dimension.
    pub mean_trajectory: DMatrix<f64>,
    pub iterations: usize,
    pub final_objective: f64,
    /// Objective after every outer iteration, non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Values of one trajectory resampled at the times where a candidate profile
/// reaches each grid phase. Times outside the recording clamp to its ends.
fn resample_at_profile(
    traj: &Trajectory,
    profile: &PhaseProfile,
    grid: &[f64],
) -> DMatrix<f64> {
    let dims = traj.dims();
    let mut out = DMatrix::zeros(grid.len(), dims);
    for (g, phi) in grid.iter().enumerate() {
        let t = profile.time_at_phase(*phi);
        let row = traj.sample_at(t);
        out.row_mut(g).copy_from(&row.transpose());
    }
    out
}

/// Squared alignment error of resampled values against the current average,
/// integrated over the phase grid by the trapezoid rule.
fn alignment_objective(resampled: &DMatrix<f64>, mean: &DMatrix<f64>, grid_h: f64) -> f64 {
    let g = resampled.nrows();
    let mut integrand = vec![0.0; g];
    for i in 0..g {
        let mut acc = 0.0;
        for d in 0..resampled.ncols() {
            let diff = resampled[(i, d)] - mean[(i, d)];
            acc += diff * diff;
        }
        integrand[i] = acc;
    }
    math::trapezoid(&integrand, grid_h)
}

/// Pointwise phase-domain average of the resampled trajectories. Sums are
/// order-independent, so permuting the demonstrations permutes nothing here.
fn phase_domain_mean(resampled: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (g, dims) = resampled[0].shape();
    let mut mean = DMatrix::zeros(g, dims);
    let mut column = vec![0.0; resampled.len()];
    for i in 0..g {
        for d in 0..dims {
            for (k, r) in resampled.iter().enumerate() {
                column[k] = r[(i, d)];
            }
            mean[(i, d)] = math::stable_mean(&column);
        }
    }
    mean
}

/// Assign a phase profile to every demonstration by alternating averaging
/// and per-trajectory refitting.
///
/// The average is always indexed by the fixed reference profile; each
/// refit step runs a coarse grid search over `(delta1, delta2)` followed by
/// a simplex refinement, and keeps the previous deltas unless the objective
/// strictly improves, which makes the trace non-increasing.
pub fn align(
    trajectories: &[Trajectory],
    config: &BasisConfig,
    opts: &AlignOptions,
) -> Result<AlignmentResult, AlignError> {
    if trajectories.len() < 2 {
        return Err(AlignError::TooFewTrajectories(trajectories.len()));
    }
    let dims = trajectories[0].dims();
    let min_len = 2 * config.n_features();
    for (index, traj) in trajectories.iter().enumerate() {
        if traj.dims() != dims {
            return Err(AlignError::DimensionMismatch {
                index,
                got: traj.dims(),
                expected: dims,
            });
        }
        if traj.len() < min_len {
            return Err(AlignError::TooFewSamples {
                index,
                len: traj.len(),
                min: min_len,
            });
        }
    }

    let grid = crate::phase_grid();
    let grid_h = grid[1] - grid[0];
    let bound = opts.delta_bound;

    // When comparing basis reconstructions, each trajectory is replaced by
    // its projection through the current profile at every outer iteration.
    let working_set = |profiles: &[PhaseProfile]| -> Vec<Trajectory> {
        if !opts.project_mp {
            return trajectories.to_vec();
        }
        trajectories
            .iter()
            .zip(profiles)
            .map(|(traj, profile)| {
                promp::reconstruct(traj, &PhaseMap::Beta(*profile), config)
                    .unwrap_or_else(|_| traj.clone())
            })
            .collect()
    };

    let mut profiles: Vec<PhaseProfile> = trajectories
        .iter()
        .map(|t| PhaseProfile::reference(t.duration()))
        .collect();

    let mut trace = Vec::new();
    let mut previous = f64::INFINITY;
    let mut mean = DMatrix::zeros(grid.len(), dims);
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let working = working_set(&profiles);

        let resampled: Vec<DMatrix<f64>> = working
            .iter()
            .zip(&profiles)
            .map(|(traj, profile)| resample_at_profile(traj, profile, &grid))
            .collect();
        mean = phase_domain_mean(&resampled);

        let objective: f64 = math::stable_sum(
            &resampled
                .iter()
                .map(|r| alignment_objective(r, &mean, grid_h))
                .collect::<Vec<_>>(),
        );
        trace.push(objective);
        if objective > previous * (1.0 + 1e-12) {
            return Err(AlignError::Diverged {
                iteration: iter,
                previous,
                current: objective,
                trace,
            });
        }
        let decrease = previous - objective;
        if decrease.is_finite() && decrease < opts.tol * previous.max(1e-300) {
            break;
        }
        previous = objective;
        if iter + 1 == opts.max_iter {
            // keep profiles consistent with the reported mean and objective
            break;
        }

        // Refit every profile against the fixed average; embarrassingly
        // parallel, collected back in input order.
        profiles = working
            .par_iter()
            .zip(profiles.par_iter())
            .map(|(traj, current)| {
                refit_profile(traj, current, &mean, &grid, grid_h, bound, opts)
            })
            .collect();
    }

    let final_objective = *trace.last().unwrap();
    Ok(AlignmentResult {
        profiles,
        mean_trajectory: mean,
        iterations,
        final_objective,
        objective_trace: trace,
    })
}

fn refit_profile(
    traj: &Trajectory,
    current: &PhaseProfile,
    mean: &DMatrix<f64>,
    grid: &[f64],
    grid_h: f64,
    bound: f64,
    opts: &AlignOptions,
) -> PhaseProfile {
    let duration = traj.duration();
    let objective = |d1: f64, d2: f64| -> f64 {
        let candidate = PhaseProfile { delta1: d1, delta2: d2, duration };
        let resampled = resample_at_profile(traj, &candidate, grid);
        alignment_objective(&resampled, mean, grid_h)
    };

    let mut best = [current.delta1, current.delta2];
    let mut best_value = objective(best[0], best[1]);

    let steps = opts.grid_steps.max(2);
    for i in 0..steps {
        let d1 = -bound + 2.0 * bound * i as f64 / (steps - 1) as f64;
        for j in 0..steps {
            let d2 = -bound + 2.0 * bound * j as f64 / (steps - 1) as f64;
            let v = objective(d1, d2);
            if v < best_value {
                best_value = v;
                best = [d1, d2];
            }
        }
    }

    let step = 2.0 * bound / (steps - 1) as f64;
    let (refined, refined_value) = math::nelder_mead_2d(
        objective,
        best,
        step,
        [-bound, bound],
        opts.refine_tol,
        200,
    );
    if refined_value < best_value {
        best = refined;
    }
    PhaseProfile { delta1: best[0], delta2: best[1], duration }
}

/// Per-time empirical mean and standard deviation of the aligned phases.
/// The deviation is floored so downstream priors stay proper even for
/// identical or single profiles.
pub fn phase_distribution(
    profiles: &[PhaseMap],
    time_grid: &[f64],
    sigma_floor: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(time_grid.len());
    let mut sigma = Vec::with_capacity(time_grid.len());
    let mut phases = vec![0.0; profiles.len()];
    for &t in time_grid {
        for (k, p) in profiles.iter().enumerate() {
            phases[k] = p.phase_at(t);
        }
        let (m, v) = math::stable_mean_var(&phases);
        mu.push(m);
        sigma.push(v.sqrt().max(sigma_floor));
    }
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template(phi: f64) -> [f64; 2] {
        // Smooth planar curve with enough shape variation to pin the timing.
        let reach = 10.0 * phi.powi(3) - 15.0 * phi.powi(4) + 6.0 * phi.powi(5);
        [reach, 0.4 * (std::f64::consts::PI * phi).sin() + 0.2 * reach]
    }

    fn warped_trajectory(profile: &PhaseProfile, dt: f64) -> Trajectory {
        let len = (profile.duration / dt).round() as usize + 1;
        let mut samples = DMatrix::zeros(len, 2);
        for j in 0..len {
            let p = template(profile.phase_at(j as f64 * dt));
            samples[(j, 0)] = p[0];
            samples[(j, 1)] = p[1];
        }
        Trajectory::new(samples, dt).unwrap()
    }

    #[test]
    fn phase_saturates_and_passes_through_midpoint() {
        let p = PhaseProfile::reference(2.0);
        assert_abs_diff_eq!(p.phase_at(0.0), 0.0);
        assert_abs_diff_eq!(p.phase_at(1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.phase_at(2.0), 1.0);
        assert_abs_diff_eq!(p.phase_at(5.0), 1.0);
    }

    #[test]
    fn shifted_profile_matches_hand_evaluation() {
        // x = (0.55 - 0.2) / 0.7 = 0.5 -> smoothstep gives 0.5
        let p = PhaseProfile::new(0.2, -0.1, 1.0).unwrap();
        assert_abs_diff_eq!(p.phase_at(0.55), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn velocity_is_zero_outside_support_and_peaks_mid_ramp() {
        let p = PhaseProfile::new(0.2, 0.0, 1.0).unwrap();
        assert_eq!(p.phase_velocity(0.1), 0.0);
        let r = PhaseProfile::reference(1.0);
        assert_abs_diff_eq!(r.phase_velocity(0.5), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn velocity_matches_finite_differences() {
        let profiles = [
            PhaseProfile::reference(1.0),
            PhaseProfile::new(0.15, -0.1, 0.8).unwrap(),
            PhaseProfile::new(-0.2, 0.25, 1.7).unwrap(),
        ];
        let h = 1e-7;
        for p in &profiles {
            for i in 0..=1000 {
                let t = i as f64 / 1000.0 * p.duration;
                let fd = (p.phase_at(t + h) - p.phase_at(t - h)) / (2.0 * h);
                assert_abs_diff_eq!(p.phase_velocity(t), fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn time_at_phase_inverts_phase_at() {
        let p = PhaseProfile::new(-0.05, 0.12, 1.3).unwrap();
        for i in 0..=50 {
            let phi = i as f64 / 50.0;
            assert_abs_diff_eq!(p.phase_at(p.time_at_phase(phi)), phi, epsilon = 1e-10);
        }
    }

    #[test]
    fn identical_trajectories_align_to_reference() {
        let traj = warped_trajectory(&PhaseProfile::reference(1.0), 0.01);
        let cfg = BasisConfig::with_defaults(9).unwrap();
        let result = align(&[traj.clone(), traj], &cfg, &AlignOptions::default()).unwrap();
        assert!(result.final_objective <= 1e-10);
        for p in &result.profiles {
            assert_abs_diff_eq!(p.delta1, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(p.delta2, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn known_deltas_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut trajs = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..4 {
            let d1 = rng.gen_range(-0.15..0.15);
            let d2 = rng.gen_range(-0.15..0.15);
            // antithetic pair removes the common-gauge freedom of the fit
            for (a, b) in [(d1, d2), (-d1, -d2)] {
                let p = PhaseProfile::new(a, b, 1.0).unwrap();
                truth.push(p);
                trajs.push(warped_trajectory(&p, 0.01));
            }
        }
        let cfg = BasisConfig::with_defaults(9).unwrap();
        let result = align(&trajs, &cfg, &AlignOptions::default()).unwrap();
        let mean_err: f64 = result
            .profiles
            .iter()
            .zip(&truth)
            .map(|(r, t)| ((r.delta1 - t.delta1).abs() + (r.delta2 - t.delta2).abs()) / 2.0)
            .sum::<f64>()
            / truth.len() as f64;
        assert!(mean_err <= 0.02, "mean delta error {mean_err}");
    }

    #[test]
    fn objective_trace_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs: Vec<Trajectory> = (0..6)
            .map(|_| {
                let p = PhaseProfile::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(0.8..1.2),
                )
                .unwrap();
                warped_trajectory(&p, 0.01)
            })
            .collect();
        let cfg = BasisConfig::with_defaults(9).unwrap();
        let result = align(&trajs, &cfg, &AlignOptions::default()).unwrap();
        for w in result.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn alignment_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|_| {
                let p = PhaseProfile::new(
                    rng.gen_range(-0.12..0.12),
                    rng.gen_range(-0.12..0.12),
                    1.0,
                )
                .unwrap();
                warped_trajectory(&p, 0.01)
            })
            .collect();
        let cfg = BasisConfig::with_defaults(9).unwrap();
        let opts = AlignOptions::default();
        let forward = align(&trajs, &cfg, &opts).unwrap();
        let reversed: Vec<Trajectory> = trajs.iter().rev().cloned().collect();
        let backward = align(&reversed, &cfg, &opts).unwrap();
        for (i, p) in forward.profiles.iter().enumerate() {
            let q = &backward.profiles[trajs.len() - 1 - i];
            assert_eq!(p.delta1, q.delta1);
            assert_eq!(p.delta2, q.delta2);
        }
    }

    #[test]
    fn phase_distribution_floors_sigma() {
        let p = PhaseMap::Beta(PhaseProfile::reference(1.0));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let (mu, sigma) = phase_distribution(&[p], &grid, 0.01);
        for (m, s) in mu.iter().zip(&sigma) {
            assert!(*s == 0.01);
            assert!((0.0..=1.0).contains(m));
        }
        let (mu2, _) = phase_distribution(&[p, p, p], &grid, 0.01);
        for (a, b) in mu.iter().zip(&mu2) {
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn phase_is_monotone_nondecreasing(
            d1 in -0.3f64..0.3,
            d2 in -0.3f64..0.3,
            duration in 0.2f64..3.0,
        ) {
            let p = PhaseProfile::new(d1, d2, duration).unwrap();
            let mut last = p.phase_at(0.0);
            for i in 1..1000 {
                let t = i as f64 / 999.0 * duration;
                let phi = p.phase_at(t);
                prop_assert!(phi >= last - 1e-15);
                prop_assert!((0.0..=1.0).contains(&phi));
                last = phi;
            }
        }
    }
}
