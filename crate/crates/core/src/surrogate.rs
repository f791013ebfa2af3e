//! Weighted local surrogate `h(z) = θ0 + θᵀz`.
//!
//! Both fits work on weight-centered data, so the intercept is never
//! penalized and always equals `ȳ_w − θᵀ z̄_w`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("ridge penalty must be finite and nonnegative, got {0}")]
    InvalidPenalty(f64),
    #[error("non-finite value in the design or response")]
    NonFinite,
    #[error("linear solve failed: {0}")]
    Solve(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    WeightedLinear,
    BayesianRidge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub kind: SurrogateKind,
    pub ridge_lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_variances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_precision: Option<f64>,
}

impl SurrogateModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }
}

/// Validated, weight-centered and row-scaled regression problem.
struct Centered {
    /// `√w_j (z_j − z̄_w)`, J × m.
    x: DMatrix<f64>,
    /// `√w_j (y_j − ȳ_w)`.
    y: DVector<f64>,
    z_mean: DVector<f64>,
    y_mean: f64,
}

fn check_inputs(z: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<usize, SurrogateError> {
    let rows = z.len();
    if rows == 0 {
        return Err(SurrogateError::ShapeMismatch("no observations".into()));
    }
    if y.len() != rows || w.len() != rows {
        return Err(SurrogateError::ShapeMismatch(format!(
            "{rows} rows, {} responses, {} weights",
            y.len(),
            w.len()
        )));
    }
    let m = z[0].len();
    if let Some(bad) = z.iter().position(|r| r.len() != m) {
        return Err(SurrogateError::ShapeMismatch(format!(
            "row {bad} has {} features, expected {m}",
            z[bad].len()
        )));
    }
    if z.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFinite);
    }
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(SurrogateError::InvalidWeights);
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(SurrogateError::AllZeroWeights);
    }
    Ok(m)
}

fn center(z: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Centered, SurrogateError> {
    let m = check_inputs(z, y, w)?;
    let rows = z.len();
    let total: f64 = w.iter().sum();
    let mut z_mean = DVector::zeros(m);
    let mut y_mean = 0.0;
    for ((row, &yj), &wj) in z.iter().zip(y).zip(w) {
        for (acc, &v) in z_mean.iter_mut().zip(row) {
            *acc += wj * v;
        }
        y_mean += wj * yj;
    }
    z_mean /= total;
    y_mean /= total;

    let x = DMatrix::from_fn(rows, m, |j, i| w[j].sqrt() * (z[j][i] - z_mean[i]));
    let y = DVector::from_fn(rows, |j, _| w[j].sqrt() * (y[j] - y_mean));
    Ok(Centered {
        x,
        y,
        z_mean,
        y_mean,
    })
}

/// Weighted least squares with an unpenalized intercept and optional ridge
/// penalty on `θ`. Rank-deficient designs get the minimum-norm `θ`.
pub fn fit_weighted_linear(
    z: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    ridge_lambda: f64,
) -> Result<SurrogateModel, SurrogateError> {
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(SurrogateError::InvalidPenalty(ridge_lambda));
    }
    let c = center(z, y, w)?;
    let (rows, m) = c.x.shape();

    // Ridge enters as √λ·I rows appended to the scaled design.
    let (design, rhs) = if ridge_lambda > 0.0 {
        let mut design = DMatrix::zeros(rows + m, m);
        design.rows_mut(0, rows).copy_from(&c.x);
        design
            .rows_mut(rows, m)
            .fill_diagonal(ridge_lambda.sqrt());
        let mut rhs = DVector::zeros(rows + m);
        rhs.rows_mut(0, rows).copy_from(&c.y);
        (design, rhs)
    } else {
        (c.x, c.y)
    };

    let theta = min_norm_solve(design, &rhs)?;
    let intercept = c.y_mean - theta.dot(&c.z_mean);
    Ok(SurrogateModel {
        intercept,
        coefficients: theta.iter().copied().collect(),
        kind: SurrogateKind::WeightedLinear,
        ridge_lambda,
        posterior_variances: None,
        noise_precision: None,
        prior_precision: None,
    })
}

fn min_norm_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, SurrogateError> {
    let (rows, cols) = a.shape();
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    if s_max == 0.0 {
        return Ok(DVector::zeros(cols));
    }
    let eps = s_max * rows.max(cols) as f64 * f64::EPSILON;
    svd.solve(b, eps).map_err(|e| SurrogateError::Solve(e.to_string()))
}

/// Settings for the evidence-maximization loop of [`fit_bayesian_ridge_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesianRidgeOptions {
    pub max_iter: usize,
    /// Relative change below which both precisions count as converged.
    pub tol: f64,
    /// Gamma hyperprior shape/rate on the noise precision.
    pub noise_shape: f64,
    pub noise_rate: f64,
    /// Gamma hyperprior shape/rate on the prior precision.
    pub prior_shape: f64,
    pub prior_rate: f64,
    /// Holds the prior precision fixed instead of estimating it.
    pub fixed_prior_precision: Option<f64>,
}

impl Default for BayesianRidgeOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            noise_shape: 1e-6,
            noise_rate: 1e-6,
            prior_shape: 1e-6,
            prior_rate: 1e-6,
            fixed_prior_precision: None,
        }
    }
}

pub fn fit_bayesian_ridge(
    z: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
) -> Result<SurrogateModel, SurrogateError> {
    fit_bayesian_ridge_with(z, y, w, BayesianRidgeOptions::default())
}

/// Conjugate Bayesian linear regression on `√w`-scaled rows with an
/// isotropic zero-mean Gaussian prior on `θ`. Noise and prior precisions are
/// re-estimated by MacKay's fixed-point updates.
pub fn fit_bayesian_ridge_with(
    z: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    opts: BayesianRidgeOptions,
) -> Result<SurrogateModel, SurrogateError> {
    let c = center(z, y, w)?;
    let (rows, m) = c.x.shape();
    let n = rows as f64;

    let svd = c.x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let s = &svd.singular_values;
    let uty = u.transpose() * &c.y;

    let posterior_mean = |noise: f64, prior: f64| -> DVector<f64> {
        let scaled = DVector::from_fn(s.len(), |k, _| s[k] / (s[k] * s[k] + prior / noise) * uty[k]);
        vt.transpose() * scaled
    };

    let variance = c.y.norm_squared() / n;
    let mut noise = 1.0 / (variance + f64::EPSILON);
    let mut prior = opts.fixed_prior_precision.unwrap_or(1.0);
    for _ in 0..opts.max_iter {
        let theta = posterior_mean(noise, prior);
        let sse = (&c.y - &c.x * &theta).norm_squared();
        let gamma: f64 = s
            .iter()
            .map(|&sk| noise * sk * sk / (prior + noise * sk * sk))
            .sum();
        let next_prior = match opts.fixed_prior_precision {
            Some(fixed) => fixed,
            None => (gamma + 2.0 * opts.prior_shape) / (theta.norm_squared() + 2.0 * opts.prior_rate),
        };
        let next_noise = (n - gamma + 2.0 * opts.noise_shape) / (sse + 2.0 * opts.noise_rate);
        let settled = ((next_noise - noise) / noise).abs() < opts.tol
            && ((next_prior - prior) / prior).abs() < opts.tol;
        noise = next_noise;
        prior = next_prior;
        if settled {
            break;
        }
    }

    let theta = posterior_mean(noise, prior);
    let precision =
        DMatrix::<f64>::identity(m, m) * prior + c.x.transpose() * &c.x * noise;
    let covariance = precision
        .cholesky()
        .ok_or_else(|| SurrogateError::Solve("posterior precision is not positive definite".into()))?
        .inverse();
    let intercept = c.y_mean - theta.dot(&c.z_mean);
    let model = SurrogateModel {
        intercept,
        coefficients: theta.iter().copied().collect(),
        kind: SurrogateKind::BayesianRidge,
        ridge_lambda: prior / noise,
        posterior_variances: Some(covariance.diagonal().iter().copied().collect()),
        noise_precision: Some(noise),
        prior_precision: Some(prior),
    };
    if model.coefficients.iter().any(|v| !v.is_finite()) || !model.intercept.is_finite() {
        return Err(SurrogateError::NonFinite);
    }
    Ok(model)
}

pub fn predict(model: &SurrogateModel, z: &[f64]) -> Result<f64, SurrogateError> {
    if z.len() != model.coefficients.len() {
        return Err(SurrogateError::ShapeMismatch(format!(
            "model has {} coefficients, feature vector has {}",
            model.coefficients.len(),
            z.len()
        )));
    }
    Ok(model.intercept
        + model
            .coefficients
            .iter()
            .zip(z)
            .map(|(t, v)| t * v)
            .sum::<f64>())
}

/// `(1/J) Σ w_j (h(z_j) − y_j)²`.
pub fn surrogate_loss(
    model: &SurrogateModel,
    z: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
) -> Result<f64, SurrogateError> {
    if z.len() != y.len() || z.len() != w.len() || z.is_empty() {
        return Err(SurrogateError::ShapeMismatch(format!(
            "{} rows, {} responses, {} weights",
            z.len(),
            y.len(),
            w.len()
        )));
    }
    let mut total = 0.0;
    for ((row, &yj), &wj) in z.iter().zip(y).zip(w) {
        let r = predict(model, row)? - yj;
        total += wj * r * r;
    }
    Ok(total / z.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn exhaustive(m: usize) -> Vec<Vec<f64>> {
        (1..(1u32 << m))
            .map(|code| (0..m).map(|i| f64::from((code >> (m - 1 - i)) & 1)).collect())
            .collect()
    }

    #[test]
    fn two_points_define_a_line() {
        let model = fit_weighted_linear(&[vec![0.0], vec![1.0]], &[0.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(model.intercept, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.coefficients[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_response() {
        let z = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let model = fit_weighted_linear(&z, &[2.5; 3], &[1.0, 0.2, 0.7], 0.0).unwrap();
        assert_abs_diff_eq!(model.intercept, 2.5, epsilon = 1e-12);
        assert!(model.coefficients.iter().all(|c| c.abs() < 1e-12));
        // Fully collinear with the intercept.
        let z = vec![vec![1.0], vec![1.0]];
        let model = fit_weighted_linear(&z, &[4.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(model.coefficients, [0.0]);
        assert_abs_diff_eq!(model.intercept, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_takes_minimum_norm() {
        // Columns 0 and 1 identical: θ0 + θ1 = 2 split evenly.
        let z = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        let model = fit_weighted_linear(&z, &[0.0, 2.0, 2.0], &[1.0; 3], 0.0).unwrap();
        assert_abs_diff_eq!(model.coefficients[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(model.coefficients[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn residuals_are_weight_orthogonal() {
        let z = exhaustive(4);
        let y: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, r)| 0.3 * r[0] - 1.2 * r[2] + ((j * 7919) % 13) as f64 / 10.0)
            .collect();
        let w: Vec<f64> = (0..z.len()).map(|j| 0.1 + (j % 5) as f64 / 4.0).collect();
        let model = fit_weighted_linear(&z, &y, &w, 0.0).unwrap();
        let resid: Vec<f64> = z
            .iter()
            .zip(&y)
            .map(|(r, yj)| predict(&model, r).unwrap() - yj)
            .collect();
        let intercept_dot: f64 = resid.iter().zip(&w).map(|(r, wj)| r * wj).sum();
        assert_abs_diff_eq!(intercept_dot, 0.0, epsilon = 1e-8);
        for i in 0..4 {
            let dot: f64 = resid
                .iter()
                .zip(&w)
                .zip(&z)
                .map(|((r, wj), row)| r * wj * row[i])
                .sum();
            assert_abs_diff_eq!(dot, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn weight_scale_invariance_and_ols_equivalence() {
        let z = exhaustive(3);
        let y: Vec<f64> = (0..z.len()).map(|j| (j as f64).sin()).collect();
        let w: Vec<f64> = (0..z.len()).map(|j| 0.5 + j as f64).collect();
        let a = fit_weighted_linear(&z, &y, &w, 0.0).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * 37.0).collect();
        let b = fit_weighted_linear(&z, &y, &scaled, 0.0).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        let uniform = fit_weighted_linear(&z, &y, &[3.0; 7], 0.0).unwrap();
        let ones = fit_weighted_linear(&z, &y, &[1.0; 7], 0.0).unwrap();
        for (x, y) in uniform.coefficients.iter().zip(&ones.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn ridge_shrinks_toward_zero() {
        let z = exhaustive(3);
        let y: Vec<f64> = z.iter().map(|r| 2.0 * r[0] + r[1]).collect();
        let free = fit_weighted_linear(&z, &y, &[1.0; 7], 0.0).unwrap();
        let ridge = fit_weighted_linear(&z, &y, &[1.0; 7], 5.0).unwrap();
        let norm = |m: &SurrogateModel| m.coefficients.iter().map(|c| c * c).sum::<f64>();
        assert!(norm(&ridge) < norm(&free));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            fit_weighted_linear(&[vec![0.0]], &[1.0], &[0.0], 0.0),
            Err(SurrogateError::AllZeroWeights)
        ));
        assert!(matches!(
            fit_weighted_linear(&[vec![0.0], vec![1.0, 2.0]], &[1.0, 1.0], &[1.0, 1.0], 0.0),
            Err(SurrogateError::ShapeMismatch(_))
        ));
        assert!(matches!(
            fit_weighted_linear(&[vec![0.0]], &[1.0, 2.0], &[1.0], 0.0),
            Err(SurrogateError::ShapeMismatch(_))
        ));
        assert!(matches!(
            fit_bayesian_ridge(&[vec![0.0]], &[1.0], &[0.0]),
            Err(SurrogateError::AllZeroWeights)
        ));
        assert!(fit_weighted_linear(&[vec![0.0]], &[1.0], &[-1.0], 0.0).is_err());
    }

    #[test]
    fn predict_examples() {
        let model = SurrogateModel {
            intercept: 0.0,
            coefficients: vec![1.0, 2.0],
            kind: SurrogateKind::WeightedLinear,
            ridge_lambda: 0.0,
            posterior_variances: None,
            noise_precision: None,
            prior_precision: None,
        };
        assert_eq!(predict(&model, &[1.0, 1.0]).unwrap(), 3.0);
        let shifted = SurrogateModel {
            intercept: -0.25,
            ..model.clone()
        };
        assert_eq!(predict(&shifted, &[0.0, 0.0]).unwrap(), -0.25);
        assert!(predict(&model, &[1.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        let model = SurrogateModel {
            intercept: 0.0,
            coefficients: vec![0.0],
            kind: SurrogateKind::WeightedLinear,
            ridge_lambda: 0.0,
            posterior_variances: None,
            noise_precision: None,
            prior_precision: None,
        };
        let z = vec![vec![0.0], vec![0.0]];
        assert_eq!(surrogate_loss(&model, &z, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(surrogate_loss(&model, &z, &[1.0, -1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(surrogate_loss(&model, &z, &[1.0, 2.0], &[1.0, 0.5]).unwrap(), 1.5);
    }

    #[test]
    fn bayesian_zero_response() {
        let z = exhaustive(3);
        let model = fit_bayesian_ridge(&z, &[0.0; 7], &[1.0; 7]).unwrap();
        assert!(model.coefficients.iter().all(|c| c.abs() < 1e-9));
        assert!(model.posterior_variances.unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bayesian_single_observation() {
        let model = fit_bayesian_ridge(&[vec![1.0, 0.0]], &[3.0], &[0.8]).unwrap();
        assert_eq!(model.coefficients, [0.0, 0.0]);
        assert_abs_diff_eq!(model.intercept, 3.0, epsilon = 1e-12);
        let vars = model.posterior_variances.unwrap();
        assert!(vars.iter().all(|&v| v > 0.0 && v.is_finite()));
        // Closed form: no centered signal, so the prior settles at
        // (0 + 2a)/(0 + 2b) = 1 and the variances equal 1/prior.
        assert_abs_diff_eq!(model.prior_precision.unwrap(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vars[0], 1.0, epsilon = 1e-9);
    }
}
