//! The probabilistic movement primitive model.
//!
//! A model is a Gaussian over basis weights together with a time-indexed
//! phase distribution. Fitting is a two-step procedure: every demonstration
//! is first reduced to a weight vector and a phase profile, then the weight
//! distribution and the phase statistics are estimated empirically.
//! Conditioning updates the weight distribution so sampled trajectories pass
//! through a via-point at a chosen phase.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{self, BasisConfig};
use crate::data::Trajectory;
use crate::math;
use crate::phase::{self, AlignError, AlignOptions, AlignmentResult, PhaseMap, PhaseProfile};

#[derive(Error, Debug)]
pub enum ProMPError {
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("trajectory has {len} samples, need at least {min} for projection")]
    TooShortForProjection { len: usize, min: usize },
    #[error("normal equations are rank deficient; use a positive ridge")]
    RankDeficient,
    #[error("fitting needs at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("via-point has {got} dimensions, model observes {expected}")]
    ViaPointDimension { got: usize, expected: usize },
    #[error("innovation matrix is singular; use a positive observation noise")]
    SingularInnovation,
    #[error("time grid must be uniform and contain at least 2 points")]
    NonUniformGrid,
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ridge regularization applied to the projection normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `factor * trace(G) / N` where `G` is the Gram matrix. Keeps the
    /// solve well-posed near phase saturation where rows repeat.
    ScaledTrace(f64),
    Absolute(f64),
    None,
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::ScaledTrace(1e-8)
    }
}

/// Time-indexed normal distribution of phase, stored on an explicit grid so
/// recognition does not depend on training-set retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePrior {
    pub time_grid: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PhasePrior {
    /// Linear interpolation of `(mu, sigma)` at time `t`; clamps to the
    /// first and last grid values outside the grid.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let grid = &self.time_grid;
        if t <= grid[0] {
            return (self.mu[0], self.sigma[0]);
        }
        if t >= *grid.last().unwrap() {
            return (*self.mu.last().unwrap(), *self.sigma.last().unwrap());
        }
        let mut hi = grid.partition_point(|g| *g < t).max(1);
        if hi >= grid.len() {
            hi = grid.len() - 1;
        }
        let lo = hi - 1;
        let span = grid[hi] - grid[lo];
        let frac = if span > 0.0 { (t - grid[lo]) / span } else { 0.0 };
        (
            self.mu[lo] + (self.mu[hi] - self.mu[lo]) * frac,
            self.sigma[lo] + (self.sigma[hi] - self.sigma[lo]) * frac,
        )
    }
}

/// A fitted movement primitive: weight distribution, phase prior and the
/// basis it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct ProMPModel {
    label: String,
    basis: BasisConfig,
    weight_mean: DVector<f64>,
    weight_cov: DMatrix<f64>,
    phase_prior: PhasePrior,
    prior_prob: f64,
}

/// One demonstration reduced to model coordinates.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub trajectory: Trajectory,
    pub weights: DVector<f64>,
    pub profile: PhaseMap,
}

/// How demonstration timing is handled during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseModel {
    /// Solve the alignment problem and use the fitted profiles.
    Aligned,
    /// Identity phase `t / duration`; the baseline without time warping.
    Linear,
}

/// Options of the two-step fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub align: AlignOptions,
    pub ridge: Ridge,
    /// Covariance regularization factor: `gamma = cov_reg * mean(diag)`.
    pub cov_reg: f64,
    pub phase_model: PhaseModel,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            align: AlignOptions::default(),
            ridge: Ridge::default(),
            cov_reg: 1e-6,
            phase_model: PhaseModel::Aligned,
        }
    }
}

/// Fit outcome: the model plus everything a report needs.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ProMPModel,
    pub demonstrations: Vec<Demonstration>,
    pub alignment: Option<AlignmentResult>,
    pub warnings: Vec<String>,
}

/// How [`ProMPModel::generate`] picks its weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    /// Emit the mean trajectory.
    Deterministic,
    /// Draw weights from the model distribution.
    Stochastic { seed: u64 },
}

/// Project a trajectory onto the basis: ridge-regularized least squares of
/// the stacked feature rows against the samples, solved per dimension and
/// concatenated dimension-major.
pub fn project_weights(
    traj: &Trajectory,
    map: &PhaseMap,
    config: &BasisConfig,
    ridge: Ridge,
) -> Result<DVector<f64>, ProMPError> {
    let n = config.n_features();
    if traj.len() < n {
        return Err(ProMPError::TooShortForProjection { len: traj.len(), min: n });
    }

    let rows = traj.len();
    let mut design = DMatrix::zeros(rows, n);
    for j in 0..rows {
        let phi = map.phase_at(traj.time_of(j));
        let row = basis::eval_features(config, phi)?;
        design.row_mut(j).copy_from(&row.values.transpose());
    }

    let gram = design.transpose() * &design;
    let lambda = match ridge {
        Ridge::ScaledTrace(f) => f * gram.trace() / n as f64,
        Ridge::Absolute(a) => a,
        Ridge::None => 0.0,
    };
    let mut lhs = gram;
    for i in 0..n {
        lhs[(i, i)] += lambda;
    }
    let chol = Cholesky::new(lhs).ok_or(ProMPError::RankDeficient)?;
    if lambda == 0.0 {
        // an unregularized solve with a numerically vanishing pivot is rank
        // deficient even when the factorization happens to go through
        let diag = chol.l_dirty().diagonal();
        if diag.min() <= 1e-8 * diag.max() {
            return Err(ProMPError::RankDeficient);
        }
    }

    let mut weights = DVector::zeros(n * traj.dims());
    for d in 0..traj.dims() {
        let y = traj.samples().column(d);
        let rhs = design.transpose() * y;
        let w = chol.solve(&rhs);
        weights.rows_mut(d * n, n).copy_from(&w);
    }
    Ok(weights)
}

/// Basis reconstruction of a trajectory at its own sample times.
pub fn reconstruct(
    traj: &Trajectory,
    map: &PhaseMap,
    config: &BasisConfig,
) -> Result<Trajectory, ProMPError> {
    let weights = project_weights(traj, map, config, Ridge::default())?;
    let n = config.n_features();
    let mut samples = DMatrix::zeros(traj.len(), traj.dims());
    for j in 0..traj.len() {
        let phi = map.phase_at(traj.time_of(j));
        let row = basis::eval_features(config, phi)?;
        for d in 0..traj.dims() {
            samples[(j, d)] = row.values.dot(&weights.rows(d * n, n));
        }
    }
    let mut out = Trajectory::new(samples, traj.dt())?;
    if let Some(label) = traj.label() {
        out = out.with_label(label);
    }
    Ok(out)
}

/// Two-step fit: reduce each demonstration to `(weights, profile)`, then
/// estimate the weight distribution and phase prior empirically.
pub fn fit_model(
    trajectories: &[Trajectory],
    config: &BasisConfig,
    opts: &FitOptions,
) -> Result<FitResult, ProMPError> {
    if trajectories.len() < 2 {
        return Err(ProMPError::TooFewTrajectories(trajectories.len()));
    }
    let mut warnings = Vec::new();

    let (maps, alignment): (Vec<PhaseMap>, Option<AlignmentResult>) = match opts.phase_model {
        PhaseModel::Aligned => {
            let result = phase::align(trajectories, config, &opts.align)?;
            let maps = result.profiles.iter().map(|p| PhaseMap::Beta(*p)).collect();
            (maps, Some(result))
        }
        PhaseModel::Linear => {
            let maps = trajectories
                .iter()
                .map(|t| PhaseMap::Linear { duration: t.duration() })
                .collect();
            (maps, None)
        }
    };

    let mut demonstrations = Vec::with_capacity(trajectories.len());
    for (traj, map) in trajectories.iter().zip(&maps) {
        let weights = project_weights(traj, map, config, opts.ridge)?;
        demonstrations.push(Demonstration {
            trajectory: traj.clone(),
            weights,
            profile: *map,
        });
    }

    let dim = demonstrations[0].weights.len();
    if demonstrations.len() <= dim {
        warnings.push(format!(
            "{} demonstrations for {} weight dimensions; covariance is rank deficient and \
             regularized",
            demonstrations.len(),
            dim
        ));
    }

    let mut weight_mean = DVector::zeros(dim);
    let mut column = vec![0.0; demonstrations.len()];
    for i in 0..dim {
        for (k, demo) in demonstrations.iter().enumerate() {
            column[k] = demo.weights[i];
        }
        weight_mean[i] = math::stable_mean(&column);
    }

    let mut weight_cov = DMatrix::zeros(dim, dim);
    let denom = (demonstrations.len() - 1) as f64;
    for demo in &demonstrations {
        let diff = &demo.weights - &weight_mean;
        weight_cov.ger(1.0 / denom, &diff, &diff, 1.0);
    }
    math::symmetrize(&mut weight_cov);
    let gamma = cov_jitter(&weight_cov, opts.cov_reg);
    for i in 0..dim {
        weight_cov[(i, i)] += gamma;
    }

    // Phase statistics on a grid spanning the longest demonstration.
    let dt = trajectories.iter().map(|t| t.dt()).fold(f64::INFINITY, f64::min);
    let max_duration = trajectories.iter().map(|t| t.duration()).fold(0.0, f64::max);
    let steps = (max_duration / dt).round() as usize;
    let time_grid: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let (mu, sigma) = phase::phase_distribution(&maps, &time_grid, opts.align.sigma_floor);

    let label = trajectories[0].label().unwrap_or("").to_string();
    let model = ProMPModel {
        label,
        basis: config.clone(),
        weight_mean,
        weight_cov,
        phase_prior: PhasePrior { time_grid, mu, sigma },
        prior_prob: 1.0,
    };
    Ok(FitResult { model, demonstrations, alignment, warnings })
}

fn cov_jitter(cov: &DMatrix<f64>, factor: f64) -> f64 {
    let mean_diag = cov.diagonal().mean();
    if mean_diag > 0.0 {
        factor * mean_diag
    } else {
        1e-12
    }
}

impl ProMPModel {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn basis(&self) -> &BasisConfig {
        &self.basis
    }

    pub fn weight_mean(&self) -> &DVector<f64> {
        &self.weight_mean
    }

    pub fn weight_cov(&self) -> &DMatrix<f64> {
        &self.weight_cov
    }

    pub fn phase_prior(&self) -> &PhasePrior {
        &self.phase_prior
    }

    pub fn prior_prob(&self) -> f64 {
        self.prior_prob
    }

    pub fn set_prior_prob(&mut self, p: f64) {
        self.prior_prob = p.clamp(0.0, 1.0);
    }

    /// Length of the weight vector, `N * dims`.
    pub fn weight_dim(&self) -> usize {
        self.weight_mean.len()
    }

    /// Observed dimensions.
    pub fn dims(&self) -> usize {
        self.weight_mean.len() / self.basis.n_features()
    }

    /// Diagonal jitter added to observation covariances, derived from the
    /// stored weight covariance scale.
    pub fn obs_jitter(&self) -> f64 {
        cov_jitter(&self.weight_cov, 1e-6)
    }

    /// Build a model from explicit parameters (mainly for tests and tools).
    pub fn from_parts(
        label: impl Into<String>,
        basis: BasisConfig,
        weight_mean: DVector<f64>,
        weight_cov: DMatrix<f64>,
        phase_prior: PhasePrior,
        prior_prob: f64,
    ) -> Result<Self, ProMPError> {
        let model = Self {
            label: label.into(),
            basis,
            weight_mean,
            weight_cov,
            phase_prior,
            prior_prob,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ProMPError> {
        let dim = self.weight_mean.len();
        let n = self.basis.n_features();
        let invalid = |msg: String| ProMPError::InvalidModel(msg);
        if dim == 0 || dim % n != 0 {
            return Err(invalid(format!(
                "weight dimension {dim} is not a multiple of the feature count {n}"
            )));
        }
        if self.weight_cov.shape() != (dim, dim) {
            return Err(invalid(format!(
                "covariance shape {:?} does not match weight dimension {dim}",
                self.weight_cov.shape()
            )));
        }
        let asym = (&self.weight_cov - self.weight_cov.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(invalid(format!("covariance asymmetry {asym} exceeds 1e-10")));
        }
        let min_eig = math::symmetric_eigenvalues_desc(&self.weight_cov)
            .last()
            .copied()
            .unwrap_or(0.0);
        if min_eig < -1e-10 {
            return Err(invalid(format!("covariance eigenvalue {min_eig} below -1e-10")));
        }
        let p = &self.phase_prior;
        if p.time_grid.len() < 2
            || p.mu.len() != p.time_grid.len()
            || p.sigma.len() != p.time_grid.len()
        {
            return Err(invalid("phase prior grid and statistics lengths disagree".into()));
        }
        if p.mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid("phase prior mean outside [0, 1]".into()));
        }
        if p.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("phase prior sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_prob) {
            return Err(invalid(format!("prior probability {} outside [0, 1]", self.prior_prob)));
        }
        Ok(())
    }

    /// Gaussian conditioning on the via-point `y_star` at phase `phi_star`:
    /// the posterior weight distribution given `y(phi_star) = y_star`
    /// observed with variance `obs_noise`.
    pub fn condition(
        &self,
        phi_star: f64,
        y_star: &DVector<f64>,
        obs_noise: f64,
    ) -> Result<ProMPModel, ProMPError> {
        let dims = self.dims();
        if y_star.len() != dims {
            return Err(ProMPError::ViaPointDimension { got: y_star.len(), expected: dims });
        }
        let obs = basis::position_observation_matrix(&self.basis, phi_star, dims)?;
        let cross = &self.weight_cov * obs.transpose();
        let mut innovation = &obs * &cross;
        for i in 0..dims {
            innovation[(i, i)] += obs_noise;
        }
        math::symmetrize(&mut innovation);
        let chol = Cholesky::new(innovation).ok_or(ProMPError::SingularInnovation)?;

        let residual = y_star - &obs * &self.weight_mean;
        let weight_mean = &self.weight_mean + &cross * chol.solve(&residual);
        let mut weight_cov = &self.weight_cov - &cross * chol.solve(&cross.transpose());
        math::symmetrize(&mut weight_cov);

        Ok(ProMPModel {
            label: self.label.clone(),
            basis: self.basis.clone(),
            weight_mean,
            weight_cov,
            phase_prior: self.phase_prior.clone(),
            prior_prob: self.prior_prob,
        })
    }

    /// Emit a trajectory on a uniform time grid through the given profile.
    ///
    /// Deterministic mode plays back the mean weights; stochastic mode draws
    /// one weight vector through a PSD-safe symmetric factorization, so
    /// exactly conditioned (rank-deficient) models sample correctly. With
    /// velocity observations enabled the output columns interleave value and
    /// derivative per dimension.
    pub fn generate(
        &self,
        mode: GenerateMode,
        time_grid: &[f64],
        profile: &PhaseProfile,
    ) -> Result<Trajectory, ProMPError> {
        if time_grid.len() < 2 {
            return Err(ProMPError::NonUniformGrid);
        }
        let dt = time_grid[1] - time_grid[0];
        if !(dt > 0.0) {
            return Err(ProMPError::NonUniformGrid);
        }
        for w in time_grid.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(ProMPError::NonUniformGrid);
            }
        }

        let weights = match mode {
            GenerateMode::Deterministic => self.weight_mean.clone(),
            GenerateMode::Stochastic { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let z = DVector::from_iterator(
                    self.weight_dim(),
                    (0..self.weight_dim()).map(|_| StandardNormal.sample(&mut rng)),
                );
                &self.weight_mean + math::psd_factor(&self.weight_cov) * z
            }
        };

        let dims = self.dims();
        let n = self.basis.n_features();
        let rows_per_dim = self.basis.rows_per_dim();
        let mut samples = DMatrix::zeros(time_grid.len(), dims * rows_per_dim);
        for (j, &t) in time_grid.iter().enumerate() {
            let phi = profile.phase_at(t);
            let phi_dot = profile.phase_velocity(t);
            let block = basis::observation_matrix(&self.basis, phi, phi_dot)?;
            for d in 0..dims {
                let w = weights.rows(d * n, n);
                for r in 0..rows_per_dim {
                    samples[(j, d * rows_per_dim + r)] = block.row(r).transpose().dot(&w);
                }
            }
        }
        let mut out = Trajectory::new(samples, dt)?;
        out = out.with_label(self.label.clone());
        Ok(out)
    }

    pub fn save_json<W: Write>(&self, writer: &mut W) -> Result<(), ProMPError> {
        let file = ModelFile {
            label: self.label.clone(),
            basis: self.basis.clone(),
            mu_w: self.weight_mean.iter().copied().collect(),
            sigma_w: row_major(&self.weight_cov),
            phase_prior: self.phase_prior.clone(),
            prior_prob: self.prior_prob,
            format_version: 1,
        };
        serde_json::to_writer_pretty(&mut *writer, &file)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn save_json_file(&self, path: impl AsRef<Path>) -> Result<(), ProMPError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_json(&mut file)
    }

    pub fn load_json<R: Read>(reader: R) -> Result<Self, ProMPError> {
        let file: ModelFile = serde_json::from_reader(reader)?;
        if file.format_version != 1 {
            return Err(ProMPError::InvalidModel(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let dim = file.mu_w.len();
        if file.sigma_w.len() != dim * dim {
            return Err(ProMPError::InvalidModel(format!(
                "sigma_w has {} entries, expected {}",
                file.sigma_w.len(),
                dim * dim
            )));
        }
        let model = ProMPModel {
            label: file.label,
            basis: file.basis,
            weight_mean: DVector::from_vec(file.mu_w),
            weight_cov: DMatrix::from_row_slice(dim, dim, &file.sigma_w),
            phase_prior: file.phase_prior,
            prior_prob: file.prior_prob,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load_json_file(path: impl AsRef<Path>) -> Result<Self, ProMPError> {
        Self::load_json(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    label: String,
    basis: BasisConfig,
    mu_w: Vec<f64>,
    sigma_w: Vec<f64>,
    phase_prior: PhasePrior,
    prior_prob: f64,
    format_version: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn default_basis() -> BasisConfig {
        BasisConfig::with_defaults(9).unwrap()
    }

    fn smooth_trajectory(seed: u64, dims: usize) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 101;
        let mut samples = DMatrix::zeros(len, dims);
        let coeffs: Vec<[f64; 3]> = (0..dims)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)])
            .collect();
        for j in 0..len {
            let s = j as f64 / (len - 1) as f64;
            for d in 0..dims {
                let [a, b, c] = coeffs[d];
                samples[(j, d)] = a * s + b * (std::f64::consts::PI * s).sin() + c * s * s;
            }
        }
        Trajectory::new(samples, 0.01).unwrap()
    }

    fn synthetic_from_weights(w: &DVector<f64>, config: &BasisConfig, dims: usize) -> Trajectory {
        let n = config.n_features();
        let len = 120;
        let dt = 0.01;
        let profile = PhaseProfile::reference((len - 1) as f64 * dt);
        let mut samples = DMatrix::zeros(len, dims);
        for j in 0..len {
            let phi = profile.phase_at(j as f64 * dt);
            let row = basis::eval_features(config, phi).unwrap();
            for d in 0..dims {
                samples[(j, d)] = row.values.dot(&w.rows(d * n, n));
            }
        }
        Trajectory::new(samples, dt).unwrap()
    }

    #[test]
    fn projection_recovers_exact_weights() {
        let config = default_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = DVector::from_iterator(18, (0..18).map(|_| rng.gen_range(-1.0..1.0)));
        let traj = synthetic_from_weights(&w0, &config, 2);
        let map = PhaseMap::Beta(PhaseProfile::reference(traj.duration()));
        let w = project_weights(&traj, &map, &config, Ridge::Absolute(1e-10)).unwrap();
        assert!((w - w0).abs().max() < 1e-8);
    }

    #[test]
    fn constant_trajectory_projects_to_constant_weights() {
        let config = default_basis();
        let samples = DMatrix::from_element(80, 1, 0.7);
        let traj = Trajectory::new(samples, 0.01).unwrap();
        let map = PhaseMap::Beta(PhaseProfile::reference(traj.duration()));
        let w = project_weights(&traj, &map, &config, Ridge::default()).unwrap();
        let rebuilt = reconstruct(&traj, &map, &config).unwrap();
        for j in 0..traj.len() {
            assert_abs_diff_eq!(rebuilt.samples()[(j, 0)], 0.7, epsilon = 1e-6);
        }
        for i in 0..9 {
            assert_abs_diff_eq!(w[i], 0.7, epsilon = 1e-5);
        }
    }

    #[test]
    fn projection_residual_matches_independent_solver() {
        let config = default_basis();
        let traj = smooth_trajectory(5, 1);
        let map = PhaseMap::Beta(PhaseProfile::reference(traj.duration()));
        let w = project_weights(&traj, &map, &config, Ridge::Absolute(0.0)).unwrap();

        // independent route: dense SVD least squares on the stacked system
        let mut design = DMatrix::zeros(traj.len(), 9);
        for j in 0..traj.len() {
            let row = basis::eval_features(&config, map.phase_at(traj.time_of(j))).unwrap();
            design.row_mut(j).copy_from(&row.values.transpose());
        }
        let y = traj.samples().column(0).into_owned();
        let w_ref = design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-14)
            .expect("svd solve");

        let res = (&design * &w - &y).norm();
        let res_ref = (&design * &w_ref - &y).norm();
        assert_abs_diff_eq!(res, res_ref, epsilon = 1e-9);
    }

    #[test]
    fn rank_deficient_projection_without_ridge_errors() {
        let config = default_basis();
        // constant phase: every design row identical, Gram rank 1
        let samples = DMatrix::from_fn(40, 1, |j, _| j as f64);
        let traj = Trajectory::new(samples, 0.01).unwrap();
        let map = PhaseMap::Linear { duration: f64::INFINITY };
        let err = project_weights(&traj, &map, &config, Ridge::None).unwrap_err();
        assert!(matches!(err, ProMPError::RankDeficient));
        assert!(err.to_string().contains("ridge"));
    }

    #[test]
    fn identical_demonstrations_collapse_to_floor_covariance() {
        let traj = smooth_trajectory(3, 2);
        let trajs = vec![traj.clone(), traj.clone(), traj];
        let result = fit_model(&trajs, &default_basis(), &FitOptions::default()).unwrap();
        let model = &result.model;
        assert_eq!(model.weight_dim(), 18);
        let common = &result.demonstrations[0].weights;
        assert!((model.weight_mean() - common).abs().max() < 1e-12);
        for i in 0..18 {
            for j in 0..18 {
                let expected = if i == j { 1e-12 } else { 0.0 };
                assert_abs_diff_eq!(model.weight_cov()[(i, j)], expected, epsilon = 1e-13);
            }
        }
        assert!(!result.warnings.is_empty());
    }

    #[test]
    fn jointspace_fit_has_63_parameters() {
        let demos = data::gen_jointspace(7, 11, 21);
        let result = fit_model(&demos, &default_basis(), &FitOptions::default()).unwrap();
        assert_eq!(result.model.weight_dim(), 63);
    }

    #[test]
    fn conditioning_on_the_mean_is_a_no_op() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov1")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let phi = 0.5;
        let obs = basis::position_observation_matrix(model.basis(), phi, 2).unwrap();
        let y_star = &obs * model.weight_mean();
        let posterior = model.condition(phi, &y_star, 1e-6).unwrap();
        assert!((posterior.weight_mean() - model.weight_mean()).abs().max() < 1e-10);
    }

    #[test]
    fn conditioning_contracts_covariance() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov2")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let y_star = DVector::from_vec(vec![-0.05, 0.18]);
        let posterior = model.condition(0.5, &y_star, 1e-6).unwrap();
        let shrink = model.weight_cov() - posterior.weight_cov();
        let eigs = math::symmetric_eigenvalues_desc(&shrink);
        assert!(*eigs.last().unwrap() >= -1e-8, "min eig {}", eigs.last().unwrap());
        assert!(posterior.weight_cov().trace() <= model.weight_cov().trace());
    }

    #[test]
    fn conditioning_twice_is_idempotent() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov3")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let y_star = DVector::from_vec(vec![-0.1, 0.3]);
        let once = model.condition(0.4, &y_star, 1e-12).unwrap();
        let twice = once.condition(0.4, &y_star, 1e-12).unwrap();
        assert!((twice.weight_mean() - once.weight_mean()).abs().max() < 1e-6);
    }

    #[test]
    fn conditioned_samples_pass_through_the_via_point() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov1")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let phi_star = 0.5;
        // in-distribution via-point: a sample from the model itself
        let sampled = model
            .generate(
                GenerateMode::Stochastic { seed: 404 },
                &[0.0, 0.5, 1.0],
                &PhaseProfile::reference(1.0),
            )
            .unwrap();
        let y_star = sampled.row(1);
        let obs_noise = 1e-6;
        let posterior = model.condition(phi_star, &y_star, obs_noise).unwrap();
        let tol = 3.0 * (obs_noise + 1e-6).sqrt();
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let profile = PhaseProfile::reference(1.0);
        let at_star = profile.time_at_phase(phi_star);
        for seed in 0..50 {
            let traj = posterior
                .generate(GenerateMode::Stochastic { seed }, &grid, &profile)
                .unwrap();
            let y = traj.sample_at(at_star);
            let dist = (y - &y_star).norm();
            assert!(dist <= tol, "sample {seed} misses the via-point by {dist}");
        }
    }

    #[test]
    fn zero_obs_noise_with_singular_innovation_errors() {
        let config = default_basis();
        let prior = PhasePrior {
            time_grid: vec![0.0, 1.0],
            mu: vec![0.0, 1.0],
            sigma: vec![0.01, 0.01],
        };
        let model = ProMPModel::from_parts(
            "degenerate",
            config,
            DVector::zeros(9),
            DMatrix::zeros(9, 9),
            prior,
            1.0,
        )
        .unwrap();
        let err = model.condition(0.5, &DVector::zeros(1), 0.0).unwrap_err();
        assert!(matches!(err, ProMPError::SingularInnovation));
        assert!(err.to_string().contains("observation noise"));
    }

    #[test]
    fn deterministic_generation_is_bit_identical() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov4")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let profile = PhaseProfile::reference(0.99);
        let a = model.generate(GenerateMode::Deterministic, &grid, &profile).unwrap();
        let b = model.generate(GenerateMode::Deterministic, &grid, &profile).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn zero_covariance_sampling_equals_the_mean() {
        let config = default_basis();
        let prior = PhasePrior {
            time_grid: vec![0.0, 1.0],
            mu: vec![0.0, 1.0],
            sigma: vec![0.01, 0.01],
        };
        let mut mean = DVector::zeros(9);
        for i in 0..9 {
            mean[i] = i as f64 * 0.1;
        }
        let model = ProMPModel::from_parts(
            "frozen",
            config,
            mean,
            DMatrix::zeros(9, 9),
            prior,
            1.0,
        )
        .unwrap();
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.02).collect();
        let profile = PhaseProfile::reference(1.0);
        let det = model.generate(GenerateMode::Deterministic, &grid, &profile).unwrap();
        let sto = model
            .generate(GenerateMode::Stochastic { seed: 8 }, &grid, &profile)
            .unwrap();
        assert_eq!(det.samples(), sto.samples());
    }

    #[test]
    fn monte_carlo_mean_matches_deterministic_trajectory() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov1")).cloned().collect();
        let model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let profile = PhaseProfile::reference(1.0);
        let det = model.generate(GenerateMode::Deterministic, &grid, &profile).unwrap();

        let draws = 10_000;
        let mut sums: DMatrix<f64> = DMatrix::zeros(grid.len(), 2);
        let mut sq_sums: DMatrix<f64> = DMatrix::zeros(grid.len(), 2);
        for seed in 0..draws {
            let t = model
                .generate(GenerateMode::Stochastic { seed }, &grid, &profile)
                .unwrap();
            for j in 0..grid.len() {
                for d in 0..2 {
                    let v = t.samples()[(j, d)];
                    sums[(j, d)] += v;
                    sq_sums[(j, d)] += v * v;
                }
            }
        }
        for j in 0..grid.len() {
            for d in 0..2 {
                let mean = sums[(j, d)] / draws as f64;
                let var = (sq_sums[(j, d)] - sums[(j, d)].powi(2) / draws as f64)
                    / (draws - 1) as f64;
                let se = (var / draws as f64).sqrt();
                let diff = (mean - det.samples()[(j, d)]).abs();
                assert!(
                    diff <= 3.0 * se + 1e-12,
                    "grid {j} dim {d}: diff {diff} > 3 se {se}"
                );
            }
        }
    }

    #[test]
    fn model_json_round_trips() {
        let (train, _) = data::gen_reaching(&data::BenchmarkSpec::default());
        let trajs: Vec<Trajectory> =
            train.iter().filter(|t| t.label() == Some("mov2")).cloned().collect();
        let mut model = fit_model(&trajs, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        model.set_prior_prob(0.25);
        let mut buf = Vec::new();
        model.save_json(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        assert!(text.contains("\"mu_w\""));
        let back = ProMPModel::load_json(buf.as_slice()).unwrap();
        assert_eq!(back.label(), model.label());
        assert_eq!(back.weight_mean(), model.weight_mean());
        assert_eq!(back.weight_cov(), model.weight_cov());
        assert_eq!(back.prior_prob(), 0.25);
    }

    #[test]
    fn span_round_trip_reproduces_weights() {
        let config = default_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let w0 = DVector::from_iterator(9, (0..9).map(|_| rng.gen_range(-2.0..2.0)));
            let traj = synthetic_from_weights(&w0, &config, 1);
            let map = PhaseMap::Beta(PhaseProfile::reference(traj.duration()));
            let w = project_weights(&traj, &map, &config, Ridge::Absolute(1e-10)).unwrap();
            assert!((&w - &w0).abs().max() < 1e-8);
            let rebuilt = reconstruct(&traj, &map, &config).unwrap();
            let diff = (rebuilt.samples() - traj.samples()).abs().max();
            assert!(diff < 1e-8);
        }
    }

    #[test]
    fn aligned_fit_shrinks_covariance_on_jittered_data() {
        let demos = data::gen_jointspace(7, 11, 31);
        let aligned = fit_model(&demos, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let unaligned = fit_model(
            &demos,
            &default_basis(),
            &FitOptions { phase_model: PhaseModel::Linear, ..Default::default() },
        )
        .unwrap()
        .model;
        assert!(
            aligned.weight_cov().trace() < unaligned.weight_cov().trace(),
            "aligned trace {} vs unaligned {}",
            aligned.weight_cov().trace(),
            unaligned.weight_cov().trace()
        );
    }

    #[test]
    fn zero_jitter_fits_agree_across_phase_models() {
        let spec = data::JointspaceSpec {
            timing_jitter: 0.0,
            spatial_noise: 0.0,
            duration_range: (1.2, 1.2),
            ..Default::default()
        };
        let demos = data::gen_jointspace_with(&spec);
        let aligned = fit_model(&demos, &default_basis(), &FitOptions::default())
            .unwrap()
            .model;
        let unaligned = fit_model(
            &demos,
            &default_basis(),
            &FitOptions { phase_model: PhaseModel::Linear, ..Default::default() },
        )
        .unwrap()
        .model;
        let diff = (aligned.weight_cov() - unaligned.weight_cov()).abs().max();
        assert!(diff < 1e-10, "covariances differ by {diff}");
    }
}
