//! Brute-force reference computations used by tests and `verify`.
//!
//! Nothing here calls into the closed-form policy algebra or the loss; each
//! routine recomputes what it needs from the raw spec and policy parameters.

pub mod quadrature;
pub mod verify;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::policy::{GaussianMixturePolicy, ValueGradients};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PEAK_GRID: usize = 4000;

fn quad_tol() -> f64 {
    1e-13
}

/// `-(1/beta) ln` of the tilted partition integral for component `k`, by
/// per-coordinate adaptive quadrature.
pub fn partition_quadrature(
    policy: &GaussianMixturePolicy,
    k: usize,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
) -> Result<f64> {
    let m_dim = spec.action_dim;
    if m_dim > 3 {
        return Err(Error::invalid("action_dim", "partition quadrature supports M <= 3"));
    }
    let comp = policy
        .components
        .get(k)
        .ok_or_else(|| Error::invalid("component", format!("{k} out of range")))?;
    let mut mean = comp.offset.clone();
    if let Some(g) = &comp.gain {
        for (i, mi) in mean.iter_mut().enumerate() {
            *mi += (0..x.len()).map(|j| g.get(i, j) * x[j]).sum::<f64>();
        }
    }
    let sd = comp.std;
    let var = sd * sd;
    let beta = spec.inverse_temperature;
    let x_sq: f64 = x.iter().map(|v| v * v).sum();
    let curv = spec.cost_action_coeff * x_sq * vg.grad_c;

    let mut log_z = 0.0;
    for (i, &u) in mean.iter().enumerate() {
        let mi = vg.projected[i];
        let exponent = move |a: f64| -(a - u) * (a - u) / (2.0 * var) - beta * (0.5 * curv * a * a + mi * a);
        let width = 12.0 * sd + (beta * var * mi).abs();
        let (mut peak_at, mut peak) = (u, exponent(u));
        for j in 0..=PEAK_GRID {
            let a = u - width + 2.0 * width * j as f64 / PEAK_GRID as f64;
            let e = exponent(a);
            if e > peak {
                peak = e;
                peak_at = a;
            }
        }
        let norm = 0.5 * (LN_2PI + var.ln());
        let integrand = |a: f64| (exponent(a) - peak).exp();
        let val = quadrature::integrate_window(&integrand, peak_at, width, quad_tol())?;
        log_z += peak - norm + val.ln();
    }
    Ok(-log_z / beta)
}

/// `ln ∫ N(a | mean, cov) exp(-1/2 a^T C a - D^T a) da` for symmetric `C` with
/// `cov^{-1} + C` positive definite.
pub fn gaussian_integral_log(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<f64> {
    let cov_inv = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("cov", "not positive definite"))?
        .inverse();
    let precision = &cov_inv + c;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("precision", "cov^-1 + C not positive definite"))?;
    let h = &cov_inv * mean - d;
    let sol = chol.solve(&h);
    let log_det_cov = 2.0 * cov.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum();
    let log_det_prec = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    Ok(-0.5 * log_det_cov - 0.5 * log_det_prec + 0.5 * h.dot(&sol) - 0.5 * mean.dot(&(&cov_inv * mean)))
}

/// Component Hamiltonian from the general matrix Gaussian integral with
/// `C = beta c1(x) J_C I` and `D = beta m`.
pub fn hamiltonian_from_matrix_integral(
    policy: &GaussianMixturePolicy,
    k: usize,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
) -> Result<f64> {
    let m_dim = spec.action_dim;
    let comp = &policy.components[k];
    let mean = DVector::from_vec(comp.mean(x));
    let cov = DMatrix::identity(m_dim, m_dim) * (comp.std * comp.std);
    let beta = spec.inverse_temperature;
    let x_sq: f64 = x.iter().map(|v| v * v).sum();
    let c = DMatrix::identity(m_dim, m_dim) * (beta * spec.cost_action_coeff * x_sq * vg.grad_c);
    let d = DVector::from_iterator(m_dim, vg.projected.iter().map(|v| beta * v));
    Ok(-gaussian_integral_log(&mean, &cov, &c, &d)? / beta)
}

fn drift_direct(spec: &ModelSpec, x: &[f64], a: &[f64]) -> Vec<f64> {
    (0..spec.state_dim)
        .map(|i| {
            let mut v = spec.drift_offset[i];
            for (j, xj) in x.iter().enumerate() {
                v += spec.drift_gain.get(i, j) * xj;
            }
            for (j, aj) in a.iter().enumerate() {
                v += (spec.control_offset.get(i, j) + x[i] * spec.control_gain.get(i, j)) * aj;
            }
            v
        })
        .collect()
}

/// Log of the Euler transition density `x -> x_next` with drift evaluated at
/// the mean action and covariance `diag(sigma^2) dt`.
pub fn transition_density(spec: &ModelSpec, x: &[f64], x_next: &[f64], mean_action: &[f64], dt: f64) -> f64 {
    let mu = drift_direct(spec, x, mean_action);
    let mut out = 0.0;
    for i in 0..spec.state_dim {
        let var = spec.volatility[i] * spec.volatility[i] * dt;
        let r = x_next[i] - x[i] - mu[i] * dt;
        out += -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var;
    }
    out
}

/// Discrete path action `sum_i (dx_i - mu_i dt)^2 / (2 sigma_i^2 dt)` for one step.
pub fn step_action(spec: &ModelSpec, x: &[f64], x_next: &[f64], mean_action: &[f64], dt: f64) -> f64 {
    let mu = drift_direct(spec, x, mean_action);
    (0..spec.state_dim)
        .map(|i| {
            let r = x_next[i] - x[i] - mu[i] * dt;
            r * r / (2.0 * spec.volatility[i] * spec.volatility[i] * dt)
        })
        .sum()
}

/// Action difference between drift under `target_action` and under `behavior_action`.
pub fn delta_s_general(
    spec: &ModelSpec,
    x: &[f64],
    x_next: &[f64],
    target_action: &[f64],
    behavior_action: &[f64],
    dt: f64,
) -> f64 {
    step_action(spec, x, x_next, target_action, dt) - step_action(spec, x, x_next, behavior_action, dt)
}

/// One-dimensional form: `(mu1 - mu0)/sigma^2 * ((mu1 + mu0)/2 dt - dx)`.
pub fn delta_s_scalar(target_drift: f64, behavior_drift: f64, sigma: f64, dx: f64, dt: f64) -> f64 {
    (target_drift - behavior_drift) / (sigma * sigma) * (0.5 * (target_drift + behavior_drift) * dt - dx)
}

/// KL divergence between isotropic Gaussians `N(mp, vp I)` and `N(mq, vq I)`.
pub fn isotropic_gaussian_kl(mp: &[f64], vp: f64, mq: &[f64], vq: f64) -> f64 {
    let dim = mp.len() as f64;
    let d2: f64 = mp.iter().zip(mq).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * (dim * (vp / vq) + d2 / vq - dim + dim * (vq / vp).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

/// Compares `analytic` against a 5-point central-difference gradient of `f`.
/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
pub fn finite_difference_check(
    f: &dyn Fn(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    step: f64,
    floor: f64,
) -> FiniteDifferenceReport {
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut relative_errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut at = |delta: f64| {
            probe[i] = point[i] + delta;
            let v = f(&probe);
            probe[i] = point[i];
            v
        };
        let d = (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step);
        let denom = analytic[i].abs().max(d.abs()).max(floor);
        relative_errors.push((d - analytic[i]).abs() / denom);
        numeric.push(d);
    }
    let (worst_index, max_relative_error) = relative_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    FiniteDifferenceReport {
        numeric,
        relative_errors,
        max_relative_error,
        worst_index,
    }
}
