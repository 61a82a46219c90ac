//! Small numeric helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Uniform grid of `n` points on `[0, 1]`, endpoints included.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = 1.0 / (n - 1) as f64;
    (0..n).map(|i| i as f64 * h).collect()
}

/// Trapezoid rule over uniformly spaced values with spacing `h`.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    h * (0.5 * (values[0] + values[values.len() - 1]) + interior)
}

/// Sum that does not depend on the order of the addends: sorts by total
/// order before accumulating, so permuting the inputs is bit-exact.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// Order-independent mean.
pub fn stable_mean(values: &[f64]) -> f64 {
    stable_sum(values) / values.len() as f64
}

/// Order-independent mean and unbiased variance. A single value yields
/// variance zero.
pub fn stable_mean_var(values: &[f64]) -> (f64, f64) {
    let mean = stable_mean(values);
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = stable_sum(&sq) / (values.len() - 1) as f64;
    (mean, var)
}

/// Integrated-and-normalized beta(2, 2) density: `3x^2 - 2x^3` on `[0, 1]`.
pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Derivative of [`smoothstep`] inside `[0, 1]`, zero outside.
pub fn smoothstep_deriv(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    6.0 * x * (1.0 - x)
}

/// Inverse of [`smoothstep`] on `[0, 1]` (closed form via the triple-angle
/// identity).
pub fn smoothstep_inv(y: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    let x = 0.5 - ((1.0 - 2.0 * y).asin() / 3.0).sin();
    x.clamp(0.0, 1.0)
}

/// Normal density.
pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Force exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Symmetric factor `L` with `L L^T = m` for a positive *semi*-definite
/// matrix: eigendecomposition with negative eigenvalues clamped to zero.
/// Unlike Cholesky this tolerates the rank-deficient covariances produced
/// by exact conditioning.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let mut factor = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn symmetric_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let mut vals: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Cached Cholesky factorization of a Gaussian observation covariance,
/// giving cheap repeated log-density evaluations.
pub struct GaussianChol {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianChol {
    /// `None` when the covariance is not positive definite.
    pub fn new(cov: DMatrix<f64>) -> Option<Self> {
        let dim = cov.nrows();
        let chol = Cholesky::new(cov)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Some(Self { chol, log_norm })
    }

    /// Log density of the zero-mean Gaussian at `diff`.
    pub fn log_pdf(&self, diff: &DVector<f64>) -> f64 {
        let solved = self.chol.solve(diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }
}

/// Nelder-Mead refinement of a 2-d objective inside a box. Returns the best
/// point found and its value; never returns a point worse than the start.
pub fn nelder_mead_2d<F>(
    f: F,
    start: [f64; 2],
    step: f64,
    bounds: [f64; 2],
    tol: f64,
    max_iter: usize,
) -> ([f64; 2], f64)
where
    F: Fn(f64, f64) -> f64,
{
    let clamp = |p: [f64; 2]| [p[0].clamp(bounds[0], bounds[1]), p[1].clamp(bounds[0], bounds[1])];
    let eval = |p: [f64; 2]| f(p[0], p[1]);

    let mut simplex = [
        clamp(start),
        clamp([start[0] + step, start[1]]),
        clamp([start[0], start[1] + step]),
    ];
    let mut values = [eval(simplex[0]), eval(simplex[1]), eval(simplex[2])];

    for _ in 0..max_iter {
        // Sort ascending; stable tie handling keeps the search deterministic.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = [simplex[order[0]], simplex[order[1]], simplex[order[2]]];
        values = [values[order[0]], values[order[1]], values[order[2]]];

        if values[2] - values[0] < tol {
            break;
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let reflect = |alpha: f64| {
            clamp([
                centroid[0] + alpha * (centroid[0] - simplex[2][0]),
                centroid[1] + alpha * (centroid[1] - simplex[2][1]),
            ])
        };

        let xr = reflect(1.0);
        let fr = eval(xr);
        if fr < values[0] {
            let xe = reflect(2.0);
            let fe = eval(xe);
            if fe < fr {
                simplex[2] = xe;
                values[2] = fe;
            } else {
                simplex[2] = xr;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = xr;
            values[2] = fr;
        } else {
            let xc = reflect(-0.5);
            let fc = eval(xc);
            if fc < values[2] {
                simplex[2] = xc;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = clamp([
                        0.5 * (simplex[0][0] + simplex[i][0]),
                        0.5 * (simplex[0][1] + simplex[i][1]),
                    ]);
                    values[i] = eval(simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..3 {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best], values[best])
}
