//! Normalized bell-shaped basis features over phase.
//!
//! The feature vector is a softmax-style normalization of Gaussian bumps,
//! `values_i = exp(-(phi - c_i)^2 / h_i) / sum_k exp(-(phi - c_k)^2 / h_k)`,
//! so the features form a partition of unity at every phase. Trajectories are
//! reconstructed as weighted sums of these features; velocities come from the
//! analytic phase-derivative and the chain rule through the phase map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum BasisError {
    #[error("need at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("centers must be strictly increasing and inside [0, 1]")]
    InvalidCenters,
    #[error("widths must all be positive")]
    InvalidWidths,
    #[error("centers ({centers}) and widths ({widths}) must have equal length")]
    LengthMismatch { centers: usize, widths: usize },
    #[error("phase {0} outside [0, 1]")]
    PhaseOutOfRange(f64),
}

/// Configuration of the feature system: centers, squared-length-scale widths
/// and whether observations carry velocity rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(rename = "n")]
    n_features: usize,
    centers: Vec<f64>,
    widths: Vec<f64>,
    include_velocity: bool,
}

impl BasisConfig {
    /// Evenly spaced centers `c_k = (k-1)/(N-1)` with a shared width of
    /// `0.15`, position-only observations.
    pub fn with_defaults(n_features: usize) -> Result<Self, BasisError> {
        let centers = (0..n_features)
            .map(|k| k as f64 / (n_features - 1).max(1) as f64)
            .collect();
        Self::new(centers, vec![0.15; n_features], false)
    }

    pub fn new(
        centers: Vec<f64>,
        widths: Vec<f64>,
        include_velocity: bool,
    ) -> Result<Self, BasisError> {
        if centers.len() < 2 {
            return Err(BasisError::TooFewFeatures(centers.len()));
        }
        if centers.len() != widths.len() {
            return Err(BasisError::LengthMismatch {
                centers: centers.len(),
                widths: widths.len(),
            });
        }
        let increasing = centers.windows(2).all(|w| w[0] < w[1]);
        let in_range = centers.iter().all(|c| (0.0..=1.0).contains(c));
        if !increasing || !in_range {
            return Err(BasisError::InvalidCenters);
        }
        if widths.iter().any(|h| *h <= 0.0 || !h.is_finite()) {
            return Err(BasisError::InvalidWidths);
        }
        Ok(Self {
            n_features: centers.len(),
            centers,
            widths,
            include_velocity,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn include_velocity(&self) -> bool {
        self.include_velocity
    }

    pub fn set_include_velocity(&mut self, include: bool) {
        self.include_velocity = include;
    }

    /// Rows contributed per observed dimension: 1, or 2 with velocities.
    pub fn rows_per_dim(&self) -> usize {
        if self.include_velocity {
            2
        } else {
            1
        }
    }
}

/// Feature values and their derivatives with respect to phase at one point.
#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub values: DVector<f64>,
    pub derivatives: DVector<f64>,
}

/// Evaluate the normalized features and their exact phase-derivatives.
///
/// The unnormalized bumps are shifted by the largest exponent before
/// exponentiation; the shift cancels in both the values and the derivatives.
pub fn eval_features(config: &BasisConfig, phi: f64) -> Result<FeatureRow, BasisError> {
    if !(0.0..=1.0).contains(&phi) || phi.is_nan() {
        return Err(BasisError::PhaseOutOfRange(phi));
    }
    Ok(eval_features_unchecked(config, phi))
}

pub(crate) fn eval_features_unchecked(config: &BasisConfig, phi: f64) -> FeatureRow {
    let n = config.n_features;
    let mut exponents = Vec::with_capacity(n);
    let mut max_exp = f64::NEG_INFINITY;
    for i in 0..n {
        let d = phi - config.centers[i];
        let e = -d * d / config.widths[i];
        max_exp = max_exp.max(e);
        exponents.push(e);
    }

    let mut bumps = DVector::zeros(n);
    let mut bump_derivs = DVector::zeros(n);
    let mut total = 0.0;
    let mut total_deriv = 0.0;
    for i in 0..n {
        let g = (exponents[i] - max_exp).exp();
        let dg = g * (-2.0 * (phi - config.centers[i]) / config.widths[i]);
        bumps[i] = g;
        bump_derivs[i] = dg;
        total += g;
        total_deriv += dg;
    }

    let values = &bumps / total;
    // Quotient rule: (g_i / S)' = g_i'/S - (g_i/S) * S'/S.
    let derivatives = &bump_derivs / total - &values * (total_deriv / total);
    FeatureRow { values, derivatives }
}

/// Observation matrix for a single dimension: a `1 x N` feature row, or
/// `2 x N` with the chain-rule velocity row when the config carries
/// velocities.
pub fn observation_matrix(
    config: &BasisConfig,
    phi: f64,
    phi_dot: f64,
) -> Result<DMatrix<f64>, BasisError> {
    let row = eval_features(config, phi)?;
    let n = config.n_features;
    if config.include_velocity {
        let mut m = DMatrix::zeros(2, n);
        m.row_mut(0).copy_from(&row.values.transpose());
        m.row_mut(1).copy_from(&(row.derivatives * phi_dot).transpose());
        Ok(m)
    } else {
        Ok(DMatrix::from_row_slice(1, n, row.values.as_slice()))
    }
}

/// Block-diagonal observation matrix for `dims` dimensions sharing one
/// weight block each: `(rows_per_dim * dims) x (N * dims)`, block `d`
/// occupying columns `d*N .. (d+1)*N`.
pub fn block_observation_matrix(
    config: &BasisConfig,
    phi: f64,
    phi_dot: f64,
    dims: usize,
) -> Result<DMatrix<f64>, BasisError> {
    let block = observation_matrix(config, phi, phi_dot)?;
    Ok(block_diagonal(&block, dims))
}

/// Position-only block-diagonal observation matrix (`dims x (N * dims)`),
/// independent of the velocity flag. Used for projection, conditioning and
/// likelihoods, which all observe positions.
pub fn position_observation_matrix(
    config: &BasisConfig,
    phi: f64,
    dims: usize,
) -> Result<DMatrix<f64>, BasisError> {
    let row = eval_features(config, phi)?;
    let block = DMatrix::from_row_slice(1, config.n_features, row.values.as_slice());
    Ok(block_diagonal(&block, dims))
}

fn block_diagonal(block: &DMatrix<f64>, dims: usize) -> DMatrix<f64> {
    let (r, n) = block.shape();
    let mut m = DMatrix::zeros(r * dims, n * dims);
    for d in 0..dims {
        m.view_mut((d * r, d * n), (r, n)).copy_from(block);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Independent evaluation of the normalized features, kept free of the
    /// max-shift and reused as the finite-difference oracle. Extends the
    /// formula smoothly outside [0, 1] so central differences work at the
    /// domain edges.
    fn oracle_values(config: &BasisConfig, phi: f64) -> Vec<f64> {
        let g: Vec<f64> = config
            .centers()
            .iter()
            .zip(config.widths())
            .map(|(c, h)| (-(phi - c) * (phi - c) / h).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.iter().map(|v| v / s).collect()
    }

    fn default9() -> BasisConfig {
        BasisConfig::with_defaults(9).unwrap()
    }

    #[test]
    fn defaults_match_stated_layout() {
        let cfg = default9();
        assert_eq!(cfg.n_features(), 9);
        assert_abs_diff_eq!(cfg.centers()[0], 0.0);
        assert_abs_diff_eq!(cfg.centers()[8], 1.0);
        assert_abs_diff_eq!(cfg.centers()[4], 0.5);
        assert!(cfg.widths().iter().all(|h| *h == 0.15));
    }

    #[test]
    fn values_sum_to_one_at_midpoint() {
        let row = eval_features(&default9(), 0.5).unwrap();
        assert_abs_diff_eq!(row.values.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn values_symmetric_about_center() {
        let row = eval_features(&default9(), 0.5).unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(row.values[i], row.values[8 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn partition_of_unity_and_zero_derivative_sum_on_grid() {
        let cfg = default9();
        for i in 0..1000 {
            let phi = i as f64 / 999.0;
            let row = eval_features(&cfg, phi).unwrap();
            assert_abs_diff_eq!(row.values.sum(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(row.derivatives.sum(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_at_zero() {
        let cfg = default9();
        let h = 1e-6;
        let row = eval_features(&cfg, 0.0).unwrap();
        let plus = oracle_values(&cfg, h);
        let minus = oracle_values(&cfg, -h);
        for i in 0..9 {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            assert_abs_diff_eq!(row.derivatives[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_on_grid() {
        let cfg = default9();
        let h = 1e-6;
        for k in 0..1000 {
            let phi = k as f64 / 999.0;
            let row = eval_features(&cfg, phi).unwrap();
            let plus = oracle_values(&cfg, phi + h);
            let minus = oracle_values(&cfg, phi - h);
            for i in 0..9 {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                assert_abs_diff_eq!(row.derivatives[i], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = default9();
        let a = eval_features(&cfg, 0.337).unwrap();
        let b = eval_features(&cfg, 0.337).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.derivatives, b.derivatives);
    }

    #[test]
    fn phase_out_of_range_is_rejected() {
        assert!(matches!(
            eval_features(&default9(), 1.2),
            Err(BasisError::PhaseOutOfRange(_))
        ));
        assert!(matches!(
            eval_features(&default9(), -0.01),
            Err(BasisError::PhaseOutOfRange(_))
        ));
    }

    #[test]
    fn zero_phase_velocity_zeroes_the_velocity_row() {
        let mut cfg = default9();
        cfg.set_include_velocity(true);
        let m = observation_matrix(&cfg, 0.3, 0.0).unwrap();
        assert_eq!(m.nrows(), 2);
        assert_abs_diff_eq!(m.row(1).norm(), 0.0);
    }

    #[test]
    fn position_only_matrix_equals_feature_values() {
        let cfg = default9();
        let m = observation_matrix(&cfg, 0.42, 1.0).unwrap();
        let row = eval_features(&cfg, 0.42).unwrap();
        assert_eq!(m.nrows(), 1);
        for i in 0..9 {
            assert_eq!(m[(0, i)], row.values[i]);
        }
    }

    #[test]
    fn velocity_row_is_linear_in_phase_velocity() {
        let mut cfg = default9();
        cfg.set_include_velocity(true);
        let m1 = observation_matrix(&cfg, 0.3, 1.0).unwrap();
        let m2 = observation_matrix(&cfg, 0.3, 2.0).unwrap();
        for i in 0..9 {
            assert_relative_eq!(m2[(1, i)], 2.0 * m1[(1, i)], epsilon = 1e-14);
        }
    }

    #[test]
    fn block_matrix_replicates_rows_per_dimension() {
        let cfg = default9();
        let m = block_observation_matrix(&cfg, 0.5, 1.0, 3).unwrap();
        assert_eq!(m.shape(), (3, 27));
        let row = eval_features(&cfg, 0.5).unwrap();
        for d in 0..3 {
            for i in 0..9 {
                assert_eq!(m[(d, d * 9 + i)], row.values[i]);
            }
        }
        // off-block entries stay zero
        assert_eq!(m[(0, 9)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(2, 17)], 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(BasisConfig::new(vec![0.5], vec![0.1], false).is_err());
        assert!(BasisConfig::new(vec![0.5, 0.2], vec![0.1, 0.1], false).is_err());
        assert!(BasisConfig::new(vec![0.2, 0.5], vec![0.1, -0.1], false).is_err());
        assert!(BasisConfig::new(vec![0.2, 1.5], vec![0.1, 0.1], false).is_err());
    }
}
