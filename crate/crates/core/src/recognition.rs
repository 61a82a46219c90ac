//! Streaming movement recognition and per-sample phase posteriors.
//!
//! The likelihood of an observation under a model marginalizes the phase:
//! a Gaussian observation density is integrated against the time-indexed
//! phase prior over the phase grid with the trapezoid rule. Observations of
//! a stream are treated as independent, so log-likelihoods accumulate by
//! addition and the predicted label is the running maximum-a-posteriori
//! model.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis;
use crate::data::Trajectory;
use crate::math::{self, GaussianChol};
use crate::promp::{fit_model, FitOptions, FitResult, ProMPError, ProMPModel};

#[derive(Error, Debug)]
pub enum RecognitionError {
    #[error("library needs at least one model")]
    EmptyLibrary,
    #[error("duplicate model label {0:?}")]
    DuplicateLabel(String),
    #[error("model priors must be non-negative with positive total mass")]
    InvalidPriors,
    #[error("observation stream is empty")]
    EmptyStream,
    #[error("observations must be time-ordered: t[{index}] = {t} precedes {previous}")]
    UnorderedStream { index: usize, t: f64, previous: f64 },
    #[error("observation has {got} dimensions, library models observe {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("observation contains non-finite values")]
    NonFinite,
    #[error("phase estimates must match the observation count: {phases} vs {observations}")]
    PhaseCountMismatch { phases: usize, observations: usize },
    #[error("trajectory {index} has no label")]
    MissingLabel { index: usize },
    #[error(transparent)]
    ProMP(#[from] ProMPError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A set of labelled movement primitives with prior probabilities.
#[derive(Debug, Clone)]
pub struct MovementLibrary {
    models: Vec<ProMPModel>,
    priors: Vec<f64>,
}

impl MovementLibrary {
    /// Build a library from models, normalizing their stored prior
    /// probabilities to sum to one.
    pub fn new(models: Vec<ProMPModel>) -> Result<Self, RecognitionError> {
        if models.is_empty() {
            return Err(RecognitionError::EmptyLibrary);
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &models {
            if !seen.insert(m.label().to_string()) {
                return Err(RecognitionError::DuplicateLabel(m.label().to_string()));
            }
        }
        let raw: Vec<f64> = models.iter().map(|m| m.prior_prob()).collect();
        let total: f64 = raw.iter().sum();
        if raw.iter().any(|p| *p < 0.0) || !(total > 0.0) {
            return Err(RecognitionError::InvalidPriors);
        }
        let priors = raw.iter().map(|p| p / total).collect();
        Ok(Self { models, priors })
    }

    pub fn models(&self) -> &[ProMPModel] {
        &self.models
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.label()).collect()
    }

    /// Fit one model per distinct trajectory label and assemble the library
    /// with uniform priors. Fit reports are returned in label order.
    pub fn fit(
        trajectories: &[Trajectory],
        config: &basis::BasisConfig,
        opts: &FitOptions,
    ) -> Result<(Self, Vec<FitResult>), RecognitionError> {
        let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
        for (index, traj) in trajectories.iter().enumerate() {
            let label = traj
                .label()
                .ok_or(RecognitionError::MissingLabel { index })?
                .to_string();
            groups.entry(label).or_default().push(traj.clone());
        }
        if groups.is_empty() {
            return Err(RecognitionError::EmptyLibrary);
        }
        let prior = 1.0 / groups.len() as f64;
        let mut fits = Vec::with_capacity(groups.len());
        let mut models = Vec::with_capacity(groups.len());
        for (_, group) in groups {
            let mut fit = fit_model(&group, config, opts)?;
            fit.model.set_prior_prob(prior);
            models.push(fit.model.clone());
            fits.push(fit);
        }
        Ok((Self::new(models)?, fits))
    }
}

/// Per-model quantities cached on the phase grid: projected observation
/// mean and factored observation covariance at every grid phase.
struct ModelGridCache {
    means: Vec<DVector<f64>>,
    chols: Vec<GaussianChol>,
}

impl ModelGridCache {
    fn build(model: &ProMPModel, grid: &[f64]) -> Result<Self, RecognitionError> {
        let dims = model.dims();
        let jitter = model.obs_jitter();
        let mut means = Vec::with_capacity(grid.len());
        let mut chols = Vec::with_capacity(grid.len());
        for &phi in grid {
            let obs = basis::position_observation_matrix(model.basis(), phi, dims)
                .map_err(ProMPError::from)?;
            let mean = &obs * model.weight_mean();
            let mut cov = &obs * model.weight_cov() * obs.transpose();
            for i in 0..dims {
                cov[(i, i)] += jitter;
            }
            math::symmetrize(&mut cov);
            let chol = GaussianChol::new(cov).ok_or_else(|| {
                ProMPError::InvalidModel(format!(
                    "observation covariance not positive definite at phase {phi}"
                ))
            })?;
            means.push(mean);
            chols.push(chol);
        }
        Ok(Self { means, chols })
    }

    /// Gaussian log density of `y` at every grid phase.
    fn log_densities(&self, y: &DVector<f64>, out: &mut [f64]) {
        for (g, out_g) in out.iter_mut().enumerate() {
            let diff = y - &self.means[g];
            *out_g = self.chols[g].log_pdf(&diff);
        }
    }

    /// Single-phase Gaussian log density used by the perception route.
    fn log_density_at(
        model: &ProMPModel,
        phi: f64,
        y: &DVector<f64>,
    ) -> Result<f64, RecognitionError> {
        let dims = model.dims();
        let obs = basis::position_observation_matrix(model.basis(), phi, dims)
            .map_err(ProMPError::from)?;
        let mean = &obs * model.weight_mean();
        let mut cov = &obs * model.weight_cov() * obs.transpose();
        for i in 0..dims {
            cov[(i, i)] += model.obs_jitter();
        }
        math::symmetrize(&mut cov);
        let chol = GaussianChol::new(cov).ok_or_else(|| {
            ProMPError::InvalidModel(format!(
                "observation covariance not positive definite at phase {phi}"
            ))
        })?;
        Ok(chol.log_pdf(&(y - mean)))
    }
}

/// Evaluator over a fixed phase grid, reusable across a whole stream.
pub struct LibraryEvaluator<'a> {
    library: &'a MovementLibrary,
    grid: Vec<f64>,
    grid_h: f64,
    caches: Vec<ModelGridCache>,
}

impl<'a> LibraryEvaluator<'a> {
    pub fn new(library: &'a MovementLibrary) -> Result<Self, RecognitionError> {
        Self::with_grid(library, crate::phase_grid())
    }

    /// Evaluator on a custom phase grid (used to check quadrature
    /// convergence).
    pub fn with_grid(
        library: &'a MovementLibrary,
        grid: Vec<f64>,
    ) -> Result<Self, RecognitionError> {
        let caches = library
            .models
            .iter()
            .map(|m| ModelGridCache::build(m, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        let grid_h = grid[1] - grid[0];
        Ok(Self { library, grid, grid_h, caches })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn check_observation(&self, y: &DVector<f64>) -> Result<(), RecognitionError> {
        let expected = self.library.models[0].dims();
        if y.len() != expected {
            return Err(RecognitionError::DimensionMismatch { got: y.len(), expected });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(RecognitionError::NonFinite);
        }
        Ok(())
    }

    /// Grid weights of the truncated, grid-renormalized phase prior of one
    /// model at time `t`.
    fn prior_weights(&self, model_idx: usize, t: f64, out: &mut [f64]) -> f64 {
        let (mu, sigma) = self.library.models[model_idx].phase_prior().at(t);
        for (g, w) in out.iter_mut().enumerate() {
            *w = math::normal_pdf(self.grid[g], mu, sigma);
        }
        math::trapezoid(out, self.grid_h)
    }

    /// Evaluate one observation against every model: the per-model log of
    /// the phase-marginalized likelihood and the mixture phase posterior,
    /// sharing one pass of grid densities per model.
    pub fn observe(
        &self,
        y: &DVector<f64>,
        t: f64,
    ) -> Result<(Vec<f64>, PhasePosterior), RecognitionError> {
        self.check_observation(y)?;
        let g = self.grid.len();
        let k_count = self.library.len();

        let mut log_liks = Vec::with_capacity(k_count);
        let mut per_model_log = vec![vec![f64::NEG_INFINITY; g]; k_count];
        let mut posterior_shift = f64::NEG_INFINITY;
        let mut log_dens = vec![0.0; g];
        let mut prior = vec![0.0; g];

        for k in 0..k_count {
            self.caches[k].log_densities(y, &mut log_dens);
            let mass = self.prior_weights(k, t, &mut prior);
            let log_prior_k = self.library.priors[k].ln();

            // trapezoid of N * prior / mass under a max shift, so long
            // streams of tiny densities cannot underflow
            let mut shift = f64::NEG_INFINITY;
            for i in 0..g {
                if prior[i] > 0.0 {
                    let v = log_dens[i] + prior[i].ln();
                    per_model_log[k][i] = log_prior_k + v - mass.ln();
                    shift = shift.max(v);
                    posterior_shift = posterior_shift.max(per_model_log[k][i]);
                }
            }
            if !shift.is_finite() {
                log_liks.push(f64::NEG_INFINITY);
                continue;
            }
            let mut acc = 0.0;
            for i in 0..g {
                if prior[i] > 0.0 {
                    let coeff = if i == 0 || i == g - 1 { 0.5 } else { 1.0 };
                    acc += coeff * (log_dens[i] + prior[i].ln() - shift).exp();
                }
            }
            log_liks.push(shift + (acc * self.grid_h).ln() - mass.ln());
        }

        if !posterior_shift.is_finite() {
            posterior_shift = 0.0;
        }
        let mut mixture = vec![0.0; g];
        let mut per_model = vec![vec![0.0; g]; k_count];
        for k in 0..k_count {
            for i in 0..g {
                let v = per_model_log[k][i];
                if v.is_finite() {
                    let e = (v - posterior_shift).exp();
                    per_model[k][i] = e;
                    mixture[i] += e;
                }
            }
        }
        normalize_in_place(&mut mixture);
        for row in &mut per_model {
            normalize_in_place(row);
        }

        // grid argmax; ties resolve to the lower phase
        let mut map_index = 0;
        for i in 1..g {
            if mixture[i] > mixture[map_index] {
                map_index = i;
            }
        }
        let posterior = PhasePosterior {
            grid: self.grid.clone(),
            mixture,
            per_model,
            map_index,
        };
        Ok((log_liks, posterior))
    }

    /// Log of the phase-marginalized observation likelihood of model `k`.
    pub fn log_obs_likelihood(
        &self,
        k: usize,
        y: &DVector<f64>,
        t: f64,
    ) -> Result<f64, RecognitionError> {
        Ok(self.observe(y, t)?.0[k])
    }

    /// Mixture phase posterior of one observation.
    pub fn phase_posterior(
        &self,
        y: &DVector<f64>,
        t: f64,
    ) -> Result<PhasePosterior, RecognitionError> {
        Ok(self.observe(y, t)?.1)
    }
}

fn normalize_in_place(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        for v in row.iter_mut() {
            *v /= total;
        }
    } else {
        let uniform = 1.0 / row.len() as f64;
        row.fill(uniform);
    }
}

/// Posterior over the phase grid for a single observation.
#[derive(Debug, Clone)]
pub struct PhasePosterior {
    pub grid: Vec<f64>,
    pub mixture: Vec<f64>,
    pub per_model: Vec<Vec<f64>>,
    pub map_index: usize,
}

impl PhasePosterior {
    pub fn map_phase(&self) -> f64 {
        self.grid[self.map_index]
    }
}

/// Phase-marginalized likelihood of a single observation under one model.
pub fn obs_likelihood(
    model: &ProMPModel,
    y: &DVector<f64>,
    t: f64,
) -> Result<f64, RecognitionError> {
    let library = MovementLibrary::new(vec![model.clone()])?;
    let evaluator = LibraryEvaluator::new(&library)?;
    Ok(evaluator.log_obs_likelihood(0, y, t)?.exp())
}

/// As [`obs_likelihood`] on an explicit grid resolution.
pub fn obs_likelihood_on_grid(
    model: &ProMPModel,
    y: &DVector<f64>,
    t: f64,
    grid_len: usize,
) -> Result<f64, RecognitionError> {
    let library = MovementLibrary::new(vec![model.clone()])?;
    let evaluator = LibraryEvaluator::with_grid(&library, math::uniform_grid(grid_len))?;
    Ok(evaluator.log_obs_likelihood(0, y, t)?.exp())
}

/// Mixture phase posterior of a single observation against a library.
pub fn phase_posterior(
    library: &MovementLibrary,
    y: &DVector<f64>,
    t: f64,
) -> Result<PhasePosterior, RecognitionError> {
    LibraryEvaluator::new(library)?.phase_posterior(y, t)
}

/// Everything recorded while classifying one observation stream.
#[derive(Debug, Clone)]
pub struct RecognitionTrace {
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    /// Accumulated log-likelihood per model (rows) and step (columns).
    pub cumulative_log_likelihood: DMatrix<f64>,
    /// Instantaneous per-step log-likelihood terms, same layout.
    pub step_log_likelihood: DMatrix<f64>,
    /// Predicted model index per step.
    pub label_indices: Vec<usize>,
    /// Predicted label per step.
    pub labels_over_time: Vec<String>,
    /// Most likely phase per step.
    pub phase_map_over_time: Vec<f64>,
    /// Phase posterior per step (rows) over the grid (columns).
    pub phase_posteriors: DMatrix<f64>,
}

impl RecognitionTrace {
    /// Final predicted model index.
    pub fn final_label_index(&self) -> usize {
        *self.label_indices.last().unwrap()
    }

    pub fn final_label(&self) -> &str {
        self.labels_over_time.last().unwrap()
    }

    /// Predicted model index after observing a fraction of the stream.
    pub fn label_index_at_fraction(&self, fraction: f64) -> usize {
        let last = self.label_indices.len() - 1;
        let idx = ((last as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
        self.label_indices[idx.min(last)]
    }

    /// CSV export: `t`, one cumulative log-likelihood column per model,
    /// the predicted label and the most likely phase.
    pub fn write_csv<W: Write>(&self, writer: &mut W) -> Result<(), RecognitionError> {
        write!(writer, "t")?;
        for label in &self.labels {
            write!(writer, ",loglik_{label}")?;
        }
        writeln!(writer, ",predicted_label,map_phase")?;
        for step in 0..self.times.len() {
            write!(writer, "{:.16e}", self.times[step])?;
            for k in 0..self.labels.len() {
                write!(writer, ",{:.16e}", self.cumulative_log_likelihood[(k, step)])?;
            }
            writeln!(
                writer,
                ",{},{:.16e}",
                self.labels_over_time[step], self.phase_map_over_time[step]
            )?;
        }
        Ok(())
    }
}

fn check_stream(observations: &[(f64, DVector<f64>)]) -> Result<(), RecognitionError> {
    if observations.is_empty() {
        return Err(RecognitionError::EmptyStream);
    }
    for (i, win) in observations.windows(2).enumerate() {
        if win[1].0 < win[0].0 {
            return Err(RecognitionError::UnorderedStream {
                index: i + 1,
                t: win[1].0,
                previous: win[0].0,
            });
        }
    }
    Ok(())
}

/// Classify a time-ordered observation stream by accumulating per-model
/// log-likelihoods; the label at each step maximizes the running sum plus
/// the log prior, ties resolving to the lowest model index.
pub fn classify_stream(
    library: &MovementLibrary,
    observations: &[(f64, DVector<f64>)],
) -> Result<RecognitionTrace, RecognitionError> {
    check_stream(observations)?;
    let evaluator = LibraryEvaluator::new(library)?;
    let k_count = library.len();
    let t_count = observations.len();
    let g = evaluator.grid.len();

    let mut step = DMatrix::zeros(k_count, t_count);
    let mut cumulative = DMatrix::zeros(k_count, t_count);
    let mut posteriors = DMatrix::zeros(t_count, g);
    let mut map_phase = Vec::with_capacity(t_count);
    let mut indices = Vec::with_capacity(t_count);

    for (i, (t, y)) in observations.iter().enumerate() {
        let (log_liks, posterior) = evaluator.observe(y, *t)?;
        for k in 0..k_count {
            let ll = log_liks[k];
            step[(k, i)] = ll;
            cumulative[(k, i)] = if i == 0 { ll } else { cumulative[(k, i - 1)] + ll };
        }
        for gi in 0..g {
            posteriors[(i, gi)] = posterior.mixture[gi];
        }
        map_phase.push(posterior.map_phase());
        indices.push(argmax_posterior(&cumulative, library, i));
    }

    let labels: Vec<String> = library.labels().iter().map(|s| s.to_string()).collect();
    let labels_over_time = indices.iter().map(|&k| labels[k].clone()).collect();
    Ok(RecognitionTrace {
        times: observations.iter().map(|(t, _)| *t).collect(),
        labels,
        cumulative_log_likelihood: cumulative,
        step_log_likelihood: step,
        label_indices: indices,
        labels_over_time,
        phase_map_over_time: map_phase,
        phase_posteriors: posteriors,
    })
}

fn argmax_posterior(cumulative: &DMatrix<f64>, library: &MovementLibrary, step: usize) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for k in 0..library.len() {
        let value = cumulative[(k, step)] + library.priors[k].ln();
        if value > best_value {
            best_value = value;
            best = k;
        }
    }
    best
}

/// Classify a stream with externally supplied phase estimates: the phase
/// integral is replaced by a single Gaussian evaluation at each estimate.
/// The phase posterior row degenerates to the nearest grid cell.
pub fn classify_with_phases(
    library: &MovementLibrary,
    observations: &[(f64, DVector<f64>)],
    phases: &[f64],
) -> Result<RecognitionTrace, RecognitionError> {
    check_stream(observations)?;
    if phases.len() != observations.len() {
        return Err(RecognitionError::PhaseCountMismatch {
            phases: phases.len(),
            observations: observations.len(),
        });
    }
    let grid = crate::phase_grid();
    let g = grid.len();
    let k_count = library.len();
    let t_count = observations.len();

    let mut step = DMatrix::zeros(k_count, t_count);
    let mut cumulative = DMatrix::zeros(k_count, t_count);
    let mut posteriors = DMatrix::zeros(t_count, g);
    let mut indices = Vec::with_capacity(t_count);

    for (i, (_, y)) in observations.iter().enumerate() {
        let phi = phases[i].clamp(0.0, 1.0);
        for (k, model) in library.models.iter().enumerate() {
            let ll = ModelGridCache::log_density_at(model, phi, y)?;
            step[(k, i)] = ll;
            cumulative[(k, i)] = if i == 0 { ll } else { cumulative[(k, i - 1)] + ll };
        }
        let cell = ((phi * (g - 1) as f64).round() as usize).min(g - 1);
        posteriors[(i, cell)] = 1.0;
        indices.push(argmax_posterior(&cumulative, library, i));
    }

    let labels: Vec<String> = library.labels().iter().map(|s| s.to_string()).collect();
    let labels_over_time = indices.iter().map(|&k| labels[k].clone()).collect();
    Ok(RecognitionTrace {
        times: observations.iter().map(|(t, _)| *t).collect(),
        labels,
        cumulative_log_likelihood: cumulative,
        step_log_likelihood: step,
        label_indices: indices,
        labels_over_time,
        phase_map_over_time: phases.to_vec(),
        phase_posteriors: posteriors,
    })
}
