//! Controlled-diffusion environment: affine drift in the action, linear-quadratic
//! running cost, diagonal volatility and a convex terminal utility.
//!
//! ```text
//! mu(x, a)  = mu0(x) + mu1(x) a,    mu0(x) = b0 + A0 x,    mu1(x) = B1 + diag(x) G1
//! c(x, a)   = c0 |x|^2 + 1/2 c1 |x|^2 |a|^2
//! dC        = (c + r C) dt,         J(x, C, T) = U(C)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Dense row-major matrix, serialized as nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// `scale` on the main diagonal of a possibly rectangular matrix.
    pub fn scaled_identity(rows: usize, cols: usize, scale: f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = scale;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            check_dim("matrix row", m, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix data", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `y = self * v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `y = self^T * v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Convex terminal penalty `U(z)` applied to the accumulated cost at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalUtility {
    #[default]
    Quadratic,
    Absolute,
}

impl TerminalUtility {
    pub fn value(self, z: f64) -> f64 {
        match self {
            TerminalUtility::Quadratic => z * z,
            TerminalUtility::Absolute => z.abs(),
        }
    }
}

/// The environment specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `b0` in `mu0(x) = b0 + A0 x`, length N.
    pub drift_offset: Vec<f64>,
    /// `A0`, N x N.
    pub drift_gain: Matrix,
    /// `B1` in `mu1(x) = B1 + diag(x) G1`, N x M.
    pub control_offset: Matrix,
    /// `G1`, N x M; row `i` is scaled by `x_i`.
    pub control_gain: Matrix,
    /// Diagonal volatility, length N, strictly positive.
    pub volatility: Vec<f64>,
    pub cost_state_coeff: f64,
    pub cost_action_coeff: f64,
    pub discount_rate: f64,
    pub inverse_temperature: f64,
    pub horizon: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub terminal_utility: TerminalUtility,
}

impl ModelSpec {
    /// Drift and cost specification used for the 10-dimensional experiment
    /// (`b0 = 0.1`, `A0 = 0.2 I`, `B1 = 0.1 I`, `G1 = 0.2 I`, `c0 = 1`, `c1 = 5`),
    /// with the default volatility 0.1, `r = 0.03`, `beta = 1` and 40 steps on `[0, 1]`.
    pub fn reference(state_dim: usize, action_dim: usize) -> Self {
        ModelSpec {
            state_dim,
            action_dim,
            drift_offset: vec![0.1; state_dim],
            drift_gain: Matrix::scaled_identity(state_dim, state_dim, 0.2),
            control_offset: Matrix::scaled_identity(state_dim, action_dim, 0.1),
            control_gain: Matrix::scaled_identity(state_dim, action_dim, 0.2),
            volatility: vec![0.1; state_dim],
            cost_state_coeff: 1.0,
            cost_action_coeff: 5.0,
            discount_rate: 0.03,
            inverse_temperature: 1.0,
            horizon: 1.0,
            n_steps: 40,
            terminal_utility: TerminalUtility::Quadratic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim;
        let m = self.action_dim;
        if n == 0 {
            return Err(Error::invalid("state_dim", "must be positive"));
        }
        if m == 0 {
            return Err(Error::invalid("action_dim", "must be positive"));
        }
        check_dim("drift_offset", n, self.drift_offset.len())?;
        check_dim("drift_gain rows", n, self.drift_gain.rows())?;
        check_dim("drift_gain cols", n, self.drift_gain.cols())?;
        for (name, mat) in [
            ("control_offset", &self.control_offset),
            ("control_gain", &self.control_gain),
        ] {
            if mat.rows() != n || mat.cols() != m {
                return Err(Error::invalid(
                    name,
                    format!("expected {n}x{m}, got {}x{}", mat.rows(), mat.cols()),
                ));
            }
        }
        check_dim("volatility", n, self.volatility.len())?;
        if self.volatility.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("volatility", "entries must be positive and finite"));
        }
        if !(self.cost_state_coeff >= 0.0) {
            return Err(Error::invalid("cost_state_coeff", "must be >= 0"));
        }
        if !(self.cost_action_coeff >= 0.0) {
            return Err(Error::invalid("cost_action_coeff", "must be >= 0"));
        }
        if !(self.discount_rate >= 0.0) {
            return Err(Error::invalid("discount_rate", "must be >= 0"));
        }
        if !(self.inverse_temperature > 0.0) || !self.inverse_temperature.is_finite() {
            return Err(Error::invalid("inverse_temperature", "must be > 0"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::invalid("horizon", "must be > 0"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time_grid(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.n_steps).map(|i| i as f64 * dt).collect()
    }

    pub fn beta(&self) -> f64 {
        self.inverse_temperature
    }

    /// `mu0(x)`, length N.
    pub fn base_drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.drift_gain.mul_vec(x);
        for (o, b) in out.iter_mut().zip(&self.drift_offset) {
            *o += b;
        }
        out
    }

    /// `mu1(x)`, N x M.
    pub fn control_matrix(&self, x: &[f64]) -> Matrix {
        let mut out = self.control_offset.clone();
        if !self.control_gain.is_zero() {
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..self.action_dim {
                    let v = out.get(i, j) + xi * self.control_gain.get(i, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    /// `c0(x) = c0 |x|^2`
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        self.cost_state_coeff * norm_sq(x)
    }

    /// `c1(x) = c1 |x|^2`
    pub fn action_cost_weight(&self, x: &[f64]) -> f64 {
        self.cost_action_coeff * norm_sq(x)
    }

    /// `mu(x, a) = mu0(x) + mu1(x) a`
    pub fn drift(&self, x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_dim("drift state", self.state_dim, x.len())?;
        check_dim("drift action", self.action_dim, a.len())?;
        Ok(self.drift_unchecked(x, a))
    }

    pub(crate) fn drift_unchecked(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = self.base_drift(x);
        let push = self.control_matrix(x).mul_vec(a);
        for (o, p) in out.iter_mut().zip(push) {
            *o += p;
        }
        out
    }

    /// `c(x, a) = c0(x) + 1/2 c1(x) |a|^2`
    pub fn running_cost(&self, x: &[f64], a: &[f64]) -> Result<f64> {
        check_dim("running_cost state", self.state_dim, x.len())?;
        check_dim("running_cost action", self.action_dim, a.len())?;
        Ok(self.running_cost_from_sq(x, norm_sq(a)))
    }

    /// Running cost given `E|a|^2` (or a realized `|a|^2`).
    pub fn running_cost_from_sq(&self, x: &[f64], action_sq: f64) -> f64 {
        let nx = norm_sq(x);
        self.cost_state_coeff * nx + 0.5 * self.cost_action_coeff * nx * action_sq
    }

    pub fn terminal_utility(&self, z: f64) -> f64 {
        self.terminal_utility.value(z)
    }
}

/// `(x, C, t)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendedState {
    pub x: Vec<f64>,
    pub cost: f64,
    pub t: f64,
}

impl ExtendedState {
    pub fn new(x: Vec<f64>, cost: f64, t: f64) -> Self {
        ExtendedState { x, cost, t }
    }
}

/// One logged path on the shared time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "x")]
    pub states: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub costs: Vec<f64>,
    #[serde(rename = "t")]
    pub times: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn state(&self, i: usize) -> ExtendedState {
        ExtendedState::new(self.states[i].clone(), self.costs[i], self.times[i])
    }

    pub fn terminal_cost(&self) -> f64 {
        *self.costs.last().expect("empty trajectory")
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let len = self.times.len();
        if len < 2 {
            return Err(Error::invalid("trajectory", "needs at least two grid points"));
        }
        check_dim("trajectory states", len, self.states.len())?;
        check_dim("trajectory costs", len, self.costs.len())?;
        for s in &self.states {
            check_dim("trajectory state", state_dim, s.len())?;
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("trajectory", "time grid must be strictly increasing"));
        }
        Ok(())
    }
}

/// A collection of trajectories produced from one spec and behavioral policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec_fingerprint: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.len() * self.n_steps
    }

    pub fn validate(&self) -> Result<()> {
        for (i, tr) in self.trajectories.iter().enumerate() {
            tr.validate(self.state_dim).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })?;
            check_dim("trajectory steps", self.n_steps, tr.n_steps())?;
        }
        if let Some(first) = self.trajectories.first() {
            if self.trajectories.iter().any(|t| t.times != first.times) {
                return Err(Error::invalid("dataset", "trajectories must share one time grid"));
            }
        }
        Ok(())
    }
}
