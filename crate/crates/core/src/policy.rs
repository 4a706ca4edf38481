//! Gaussian-mixture policies and the closed-form posterior transform.
//!
//! The behavioral policy is `pi0(a|x) = sum_k w_k N(a | u_k(x), s_k I)` with
//! isotropic variances `s_k = std_k^2`. Tilting it by
//! `exp(-beta (1/2 c1(x) J_C |a|^2 + a.m))`, `m = mu1(x)^T dJ/dx`, keeps every
//! component Gaussian:
//!
//! ```text
//! d_k      = 1 + beta s_k c1 J_C
//! H_k      = (c1 J_C |u_k|^2 + 2 u_k.m - beta s_k |m|^2) / (2 d_k) + M/(2 beta) ln d_k
//! w_k[J]   ∝ w_k exp(-beta H_k)
//! u_k[J]   = (u_k - beta s_k m) / d_k
//! Om_k[J]  = s_k / d_k
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{dot, norm_sq, ExtendedState, Matrix, ModelSpec};

/// Lower bound on `1 + beta s_k c1 J_C`.
pub const CURVATURE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One mixture component with state-affine mean `gain * x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyComponent {
    /// M x N; omitted for constant means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Matrix>,
    pub offset: Vec<f64>,
    pub std: f64,
}

impl PolicyComponent {
    pub fn constant(offset: Vec<f64>, std: f64) -> Self {
        PolicyComponent {
            gain: None,
            offset,
            std,
        }
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        match &self.gain {
            None => self.offset.clone(),
            Some(g) => {
                let mut out = g.mul_vec(x);
                for (o, b) in out.iter_mut().zip(&self.offset) {
                    *o += b;
                }
                out
            }
        }
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixturePolicy {
    pub weights: Vec<f64>,
    pub components: Vec<PolicyComponent>,
}

impl GaussianMixturePolicy {
    /// Builds a policy, renormalizing the weights onto the simplex.
    pub fn new(weights: Vec<f64>, components: Vec<PolicyComponent>) -> Result<Self> {
        let mut p = GaussianMixturePolicy {
            weights,
            components,
        };
        p.normalize()?;
        Ok(p)
    }

    fn normalize(&mut self) -> Result<()> {
        check_dim("policy weights", self.components.len(), self.weights.len())?;
        if self.components.is_empty() {
            return Err(Error::invalid("policy", "needs at least one component"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("policy.weights", "must be finite and >= 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("policy.weights", "must not all be zero"));
        }
        if total != 1.0 {
            for w in &mut self.weights {
                *w /= total;
            }
        }
        Ok(())
    }

    /// K components with uniform weights, constant means drawn from `mean_range`
    /// per action coordinate and variances drawn from `variance_range`.
    pub fn random_constant<R: Rng + ?Sized>(
        action_dim: usize,
        n_components: usize,
        mean_range: (f64, f64),
        variance_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let components = (0..n_components)
            .map(|_| {
                let offset = (0..action_dim)
                    .map(|_| rng.random_range(mean_range.0..=mean_range.1))
                    .collect();
                let var: f64 = rng.random_range(variance_range.0..=variance_range.1);
                PolicyComponent::constant(offset, var.sqrt())
            })
            .collect();
        GaussianMixturePolicy::new(vec![1.0 / n_components as f64; n_components], components)
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let mut copy = self.clone();
        copy.normalize()?;
        for (k, c) in self.components.iter().enumerate() {
            check_dim("policy component offset", spec.action_dim, c.offset.len())?;
            if let Some(g) = &c.gain {
                if g.rows() != spec.action_dim || g.cols() != spec.state_dim {
                    return Err(Error::invalid(
                        format!("policy.components[{k}].gain"),
                        format!("expected {}x{}", spec.action_dim, spec.state_dim),
                    ));
                }
            }
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(Error::invalid(
                    format!("policy.components[{k}].std"),
                    "must be positive",
                ));
            }
        }
        Ok(())
    }

    /// The action distribution at state `x`.
    pub fn at(&self, x: &[f64]) -> IsotropicMixture {
        IsotropicMixture {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean(x)).collect(),
            variances: self.components.iter().map(PolicyComponent::variance).collect(),
        }
    }

    pub fn mean_action(&self, x: &[f64]) -> Vec<f64> {
        self.at(x).mean()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        self.at(x).sample(rng)
    }

    pub fn log_density(&self, x: &[f64], a: &[f64]) -> f64 {
        self.at(x).log_density(a)
    }

    pub fn expected_squared_norm(&self, x: &[f64]) -> f64 {
        self.at(x).expected_squared_norm()
    }
}

/// A Gaussian mixture over actions with isotropic components, evaluated at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropicMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl IsotropicMixture {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, u) in self.weights.iter().zip(&self.means) {
            for (o, ui) in out.iter_mut().zip(u) {
                *o += w * ui;
            }
        }
        out
    }

    /// `E|a|^2 = sum_k w_k (|u_k|^2 + M s_k)`
    pub fn expected_squared_norm(&self) -> f64 {
        let m = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, u), s)| w * (norm_sq(u) + m * s))
            .sum()
    }

    pub fn log_density(&self, a: &[f64]) -> f64 {
        let m = a.len() as f64;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, u), s)| {
                let d2: f64 = a.iter().zip(u).map(|(p, q)| (p - q) * (p - q)).sum();
                w.ln() - 0.5 * m * (LN_2PI + s.ln()) - 0.5 * d2 / s
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.weights
            .iter()
            .rposition(|&w| w > 0.0)
            .unwrap_or(self.weights.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.sample_component(rng);
        let sd = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|u| {
                let z: f64 = rng.sample(StandardNormal);
                u + sd * z
            })
            .collect()
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Value and input derivatives of `J` at one extended state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGradients {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_c: f64,
    /// `mu1(x)^T dJ/dx`, length M.
    pub projected: Vec<f64>,
}

impl ValueGradients {
    pub fn new(spec: &ModelSpec, x: &[f64], value: f64, grad_x: Vec<f64>, grad_c: f64) -> Self {
        let projected = spec.control_matrix(x).tr_mul_vec(&grad_x);
        ValueGradients {
            value,
            grad_x,
            grad_c,
            projected,
        }
    }

    pub fn zero(spec: &ModelSpec) -> Self {
        ValueGradients {
            value: 0.0,
            grad_x: vec![0.0; spec.state_dim],
            grad_c: 0.0,
            projected: vec![0.0; spec.action_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_c.is_finite()
            && self.grad_x.iter().all(|v| v.is_finite())
            && self.projected.iter().all(|v| v.is_finite())
    }
}

/// What to do when `1 + beta s_k c1 J_C` drops to the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureGuard {
    Raise,
    Clamp,
}

/// Per-component quantities of the tilted mixture.
#[derive(Debug, Clone)]
pub(crate) struct Tilt {
    pub denom: Vec<f64>,
    pub clamped: Vec<bool>,
    pub hamiltonians: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    /// `(1/beta) ln sum_k w_k exp(-beta H_k)`
    pub log_partition: f64,
}

impl Tilt {
    pub fn n_clamped(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }

    pub fn mean_action(&self) -> Vec<f64> {
        let m = self.means.first().map_or(0, Vec::len);
        let mut out = vec![0.0; m];
        for (w, u) in self.weights.iter().zip(&self.means) {
            for (o, ui) in out.iter_mut().zip(u) {
                *o += w * ui;
            }
        }
        out
    }

    pub fn into_mixture(self) -> IsotropicMixture {
        IsotropicMixture {
            weights: self.weights,
            means: self.means,
            variances: self.variances,
        }
    }
}

pub(crate) fn tilt(
    prior: &IsotropicMixture,
    c1x: f64,
    grad_c: f64,
    m: &[f64],
    beta: f64,
    guard: CurvatureGuard,
) -> Result<Tilt> {
    let k_count = prior.weights.len();
    let dim = m.len() as f64;
    let m_sq = norm_sq(m);
    let curv = c1x * grad_c;
    let mut denom = Vec::with_capacity(k_count);
    let mut clamped = Vec::with_capacity(k_count);
    let mut hamiltonians = Vec::with_capacity(k_count);
    let mut means = Vec::with_capacity(k_count);
    let mut variances = Vec::with_capacity(k_count);
    for (k, (u, &s)) in prior.means.iter().zip(&prior.variances).enumerate() {
        let raw = 1.0 + beta * s * curv;
        let (d, was_clamped) = if raw > CURVATURE_FLOOR {
            (raw, false)
        } else {
            match guard {
                CurvatureGuard::Raise => {
                    return Err(Error::CurvatureCollapse {
                        component: k,
                        value: raw,
                    })
                }
                CurvatureGuard::Clamp => (CURVATURE_FLOOR, true),
            }
        };
        let numer = curv * norm_sq(u) + 2.0 * dot(u, m) - beta * s * m_sq;
        hamiltonians.push(0.5 * numer / d + 0.5 * dim / beta * d.ln());
        means.push(u.iter().zip(m).map(|(ui, mi)| (ui - beta * s * mi) / d).collect());
        variances.push(s / d);
        denom.push(d);
        clamped.push(was_clamped);
    }

    let (weights, log_partition) = boltzmann(&prior.weights, &hamiltonians, beta);
    Ok(Tilt {
        denom,
        clamped,
        hamiltonians,
        means,
        variances,
        weights,
        log_partition,
    })
}

/// Reweights `w_k` by `exp(-beta H_k)` in log space. Returns the normalized
/// weights and `(1/beta) ln sum_k w_k exp(-beta H_k)`.
pub(crate) fn boltzmann(prior: &[f64], h: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = prior
        .iter()
        .zip(h)
        .map(|(w, hk)| w.ln() - beta * hk)
        .collect();
    let lse = log_sum_exp(&logits);
    let weights = if h.iter().all(|&v| v == h[0]) {
        // equal energies leave the prior untouched
        prior.to_vec()
    } else {
        let mut w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        w
    };
    (weights, lse / beta)
}

/// The value-gradient-dependent mixture at one extended state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPolicy {
    pub mixture: IsotropicMixture,
    pub at: ExtendedState,
}

impl PosteriorPolicy {
    pub fn weights(&self) -> &[f64] {
        &self.mixture.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.mixture.means
    }

    /// Isotropic covariance scalars.
    pub fn covariances(&self) -> &[f64] {
        &self.mixture.variances
    }

    pub fn mean_action(&self) -> Vec<f64> {
        self.mixture.mean()
    }
}

fn check_gradients(spec: &ModelSpec, policy: &GaussianMixturePolicy, vg: &ValueGradients, x: &[f64]) -> Result<()> {
    check_dim("state", spec.state_dim, x.len())?;
    check_dim("projected gradient", spec.action_dim, vg.projected.len())?;
    check_dim(
        "policy action dim",
        spec.action_dim,
        policy.components.first().map_or(0, |c| c.offset.len()),
    )
}

fn tilt_at(
    policy: &GaussianMixturePolicy,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
    guard: CurvatureGuard,
) -> Result<Tilt> {
    check_gradients(spec, policy, vg, x)?;
    tilt(
        &policy.at(x),
        spec.action_cost_weight(x),
        vg.grad_c,
        &vg.projected,
        spec.beta(),
        guard,
    )
}

/// `H_k[J]` for component `k`.
pub fn component_hamiltonian(
    policy: &GaussianMixturePolicy,
    k: usize,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
) -> Result<f64> {
    if k >= policy.n_components() {
        return Err(Error::invalid("component", format!("{k} out of range")));
    }
    Ok(tilt_at(policy, vg, x, spec, CurvatureGuard::Raise)?.hamiltonians[k])
}

pub fn posterior_policy(
    policy: &GaussianMixturePolicy,
    vg: &ValueGradients,
    at: &ExtendedState,
    spec: &ModelSpec,
) -> Result<PosteriorPolicy> {
    let t = tilt_at(policy, vg, &at.x, spec, CurvatureGuard::Raise)?;
    Ok(PosteriorPolicy {
        mixture: t.into_mixture(),
        at: at.clone(),
    })
}

/// `<a>[J] = sum_k w_k[J] u_k[J]`
pub fn expected_action_optimal(
    policy: &GaussianMixturePolicy,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
) -> Result<Vec<f64>> {
    Ok(tilt_at(policy, vg, x, spec, CurvatureGuard::Raise)?.mean_action())
}

/// `(<a>[J] + <a>_0, <a>[J] - <a>_0)`
pub fn expected_action_sum_diff(
    policy: &GaussianMixturePolicy,
    vg: &ValueGradients,
    x: &[f64],
    spec: &ModelSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let opt = expected_action_optimal(policy, vg, x, spec)?;
    let base = policy.mean_action(x);
    let plus = opt.iter().zip(&base).map(|(a, b)| a + b).collect();
    let minus = opt.iter().zip(&base).map(|(a, b)| a - b).collect();
    Ok((plus, minus))
}

/// Deterministic limit `a = -m / (c1(x) J_C)`.
pub fn zero_temperature_action(vg: &ValueGradients, x: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    check_dim("state", spec.state_dim, x.len())?;
    let c1x = spec.action_cost_weight(x);
    if c1x == 0.0 {
        return Err(Error::DegenerateCost("c1(x) = 0".into()));
    }
    if vg.grad_c.abs() < CURVATURE_FLOOR {
        return Err(Error::DegenerateCost(format!("|dJ/dC| = {:e} below floor", vg.grad_c.abs())));
    }
    Ok(vg.projected.iter().map(|m| -m / (c1x * vg.grad_c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::quadrature::integrate;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_component(m: usize) -> GaussianMixturePolicy {
        GaussianMixturePolicy::new(
            vec![0.3, 0.7],
            vec![
                PolicyComponent::constant((0..m).map(|i| 0.2 + 0.1 * i as f64).collect(), 0.5),
                PolicyComponent::constant((0..m).map(|i| -0.4 + 0.05 * i as f64).collect(), 0.3),
            ],
        )
        .unwrap()
    }

    fn spec_1d(beta: f64) -> ModelSpec {
        let mut spec = ModelSpec::reference(1, 1);
        spec.inverse_temperature = beta;
        spec
    }

    fn vg_with(spec: &ModelSpec, x: &[f64], grad_x: Vec<f64>, grad_c: f64) -> ValueGradients {
        ValueGradients::new(spec, x, 0.0, grad_x, grad_c)
    }

    #[test]
    fn symmetric_mixture_has_zero_mean() {
        let p = GaussianMixturePolicy::new(
            vec![0.5, 0.5],
            vec![
                PolicyComponent::constant(vec![0.3, -0.2], 0.4),
                PolicyComponent::constant(vec![-0.3, 0.2], 0.4),
            ],
        )
        .unwrap();
        assert_eq!(p.mean_action(&[1.0]), vec![0.0, 0.0]);
        let single = GaussianMixturePolicy::new(
            vec![1.0],
            vec![PolicyComponent {
                gain: Some(Matrix::from_rows(&[vec![2.0], vec![-1.0]]).unwrap()),
                offset: vec![0.1, 0.2],
                std: 0.3,
            }],
        )
        .unwrap();
        let mean = single.mean_action(&[0.5]);
        assert!((mean[0] - 1.1).abs() < 1e-15 && (mean[1] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_action_matches_sampling() {
        let p = two_component(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let a = p.sample_action(&[0.0], &mut rng);
            for i in 0..3 {
                sum[i] += a[i];
                sum_sq[i] += a[i] * a[i];
            }
        }
        let mean = p.mean_action(&[0.0]);
        for i in 0..3 {
            let mc = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mc * mc;
            let se = (var / n as f64).sqrt();
            assert!((mc - mean[i]).abs() < 4.0 * se, "dim {i}: {mc} vs {}", mean[i]);
        }
    }

    #[test]
    fn degenerate_component_returns_its_mean() {
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.7, -0.1], 1e-12)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = p.sample_action(&[0.0], &mut rng);
        assert!((a[0] - 0.7).abs() < 1e-9 && (a[1] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = two_component(2);
        let a = p.sample_action(&[0.0], &mut ChaCha8Rng::seed_from_u64(5));
        let b = p.sample_action(&[0.0], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn component_frequencies_match_weights() {
        let p = GaussianMixturePolicy::new(
            vec![0.2, 0.5, 0.3],
            (0..3).map(|k| PolicyComponent::constant(vec![k as f64], 0.1)).collect(),
        )
        .unwrap();
        let mix = p.at(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[mix.sample_component(&mut rng)] += 1;
        }
        for k in 0..3 {
            let w = p.weights[k];
            let freq = counts[k] as f64 / n as f64;
            let se = (w * (1.0 - w) / n as f64).sqrt();
            assert!((freq - w).abs() < 4.0 * se, "k={k}: {freq} vs {w}");
        }
    }

    #[test]
    fn log_density_at_mode() {
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.1, 0.2, 0.3], 0.4)]).unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI * 0.16f64).ln();
        assert!((p.log_density(&[0.0], &[0.1, 0.2, 0.3]) - want).abs() < 1e-13);
    }

    #[test]
    fn equal_components_average() {
        let c1 = PolicyComponent::constant(vec![0.5], 0.3);
        let c2 = PolicyComponent::constant(vec![-0.2], 0.6);
        let mix = GaussianMixturePolicy::new(vec![0.5, 0.5], vec![c1.clone(), c2.clone()]).unwrap();
        let p1 = GaussianMixturePolicy::new(vec![1.0], vec![c1]).unwrap();
        let p2 = GaussianMixturePolicy::new(vec![1.0], vec![c2]).unwrap();
        for a in [-1.0, 0.0, 0.3, 2.0] {
            let want = (0.5 * (p1.log_density(&[0.0], &[a]).exp() + p2.log_density(&[0.0], &[a]).exp())).ln();
            assert!((mix.log_density(&[0.0], &[a]) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let p1 = two_component(1);
        let z = integrate(&|a: f64| p1.log_density(&[0.0], &[a]).exp(), -8.0, 8.0, 1e-12).unwrap();
        assert!((z - 1.0).abs() < 1e-6, "1-d mass {z}");
        let p2 = two_component(2);
        let inner = |a0: f64| integrate(&|a1: f64| p2.log_density(&[0.0], &[a0, a1]).exp(), -8.0, 8.0, 1e-12).unwrap();
        let z2 = integrate(&inner, -8.0, 8.0, 1e-10).unwrap();
        assert!((z2 - 1.0).abs() < 1e-6, "2-d mass {z2}");
    }

    #[test]
    fn expected_squared_norm_examples() {
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.0; 5], 1.0)]).unwrap();
        assert_eq!(p.expected_squared_norm(&[0.0]), 5.0);
        // |u|^2 = 0.25, s = 0.04, M = 5
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.5, 0.0, 0.0, 0.0, 0.0], 0.2)]).unwrap();
        assert!((p.expected_squared_norm(&[0.0]) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn expected_squared_norm_matches_sampling() {
        let p = two_component(4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = norm_sq(&p.sample_action(&[0.0], &mut rng));
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - p.expected_squared_norm(&[0.0])).abs() < 4.0 * se);
    }

    #[test]
    fn zero_gradients_give_zero_hamiltonians_and_prior() {
        let spec = ModelSpec::reference(3, 2);
        let p = two_component(2);
        let x = [0.2, 0.1, -0.3];
        let vg = ValueGradients::zero(&spec);
        for k in 0..2 {
            assert_eq!(component_hamiltonian(&p, k, &vg, &x, &spec).unwrap(), 0.0);
        }
        for beta in [1e-3, 1.0, 1e3] {
            let mut s = spec.clone();
            s.inverse_temperature = beta;
            let post = posterior_policy(&p, &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &s).unwrap();
            let prior = p.at(&x);
            assert_eq!(post.mixture, prior);
            assert_eq!(expected_action_optimal(&p, &vg, &x, &s).unwrap(), p.mean_action(&x));
            let (plus, minus) = expected_action_sum_diff(&p, &vg, &x, &s).unwrap();
            assert_eq!(minus, vec![0.0, 0.0]);
            let base = p.mean_action(&x);
            assert_eq!(plus, base.iter().map(|b| 2.0 * b).collect::<Vec<_>>());
        }
    }

    // Closed-form scalar case M = 1: the tilted integral of a single Gaussian.
    #[test]
    fn hamiltonian_matches_quadrature_example() {
        let spec = spec_1d(1.0);
        // c1(x) = 5 |x|^2 = 5 at x = 1; mu1(1) = 0.1 + 0.2 = 0.3, so grad_x = 0.4 / 0.3 gives m = 0.4
        let x = [1.0];
        let vg = vg_with(&spec, &x, vec![0.4 / 0.3], 1.0);
        assert!((vg.projected[0] - 0.4).abs() < 1e-15);
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.3], 0.5)]).unwrap();
        let h = component_hamiltonian(&p, 0, &vg, &x, &spec).unwrap();
        let integrand = |a: f64| {
            let dens = (-(a - 0.3) * (a - 0.3) / (2.0 * 0.25)).exp() / (2.0 * std::f64::consts::PI * 0.25).sqrt();
            dens * (-(0.5 * 5.0 * a * a + 0.4 * a)).exp()
        };
        let z = integrate(&integrand, -8.0, 8.0, 1e-14).unwrap();
        assert!((h + z.ln()).abs() < 1e-8, "{h} vs {}", -z.ln());
    }

    // Series expansion at small beta:
    //   H0 = 1/2 (|u|^2 + M s) c' + u.m
    //   H1 = -s (1/2 |m|^2 + 1/2 c'^2 |u|^2 + c' u.m + M/4 s c'^2),  c' = c1 J_C
    #[test]
    fn high_temperature_series_limit() {
        let base = ModelSpec::reference(2, 2);
        let x = [0.4, -0.3];
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.3, -0.2], 0.6)]).unwrap();
        let vg = vg_with(&base, &x, vec![0.7, -1.1], 1.3);
        let m = &vg.projected;
        let u = &p.components[0].offset;
        let s = 0.36;
        let cp = base.action_cost_weight(&x) * vg.grad_c;
        let h0 = 0.5 * (norm_sq(u) + 2.0 * s) * cp + dot(u, m);
        let h1 = -s * (0.5 * norm_sq(m) + 0.5 * cp * cp * norm_sq(u) + cp * dot(u, m) + 0.5 * s * cp * cp);
        let mut prev = f64::INFINITY;
        for beta in [1e-1, 1e-2, 1e-3, 1e-4] {
            let mut spec = base.clone();
            spec.inverse_temperature = beta;
            let h = component_hamiltonian(&p, 0, &vg, &x, &spec).unwrap();
            let rem = ((h - h0 - beta * h1) / beta).abs();
            assert!(rem < prev, "remainder not shrinking at beta {beta}: {rem}");
            prev = rem;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn low_temperature_posterior_is_deterministic() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.inverse_temperature = 1e6;
        let x = [0.5, 0.2];
        let p = two_component(1);
        let vg = vg_with(&spec, &x, vec![0.8, -0.5], 1.0);
        let a_det = zero_temperature_action(&vg, &x, &spec).unwrap();
        let post = posterior_policy(&p, &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &spec).unwrap();
        for (u, &c) in post.means().iter().zip(post.covariances()) {
            assert!((u[0] - a_det[0]).abs() < 1e-3);
            assert!(c < 1e-5);
        }
        spec.inverse_temperature = 1e8;
        let ea = expected_action_optimal(&p, &vg, &x, &spec).unwrap();
        assert!((ea[0] - a_det[0]).abs() < 1e-4);
    }

    #[test]
    fn zero_temperature_action_examples() {
        let spec = ModelSpec::reference(1, 1);
        // c1(x) = 5 x^2 = 2 at x^2 = 0.4; mu1(x) = 0.1 + 0.2 x
        let x = [0.4f64.sqrt()];
        let mu1 = 0.1 + 0.2 * x[0];
        let vg = vg_with(&spec, &x, vec![4.0 / mu1], 1.0);
        let a = zero_temperature_action(&vg, &x, &spec).unwrap();
        assert!((a[0] + 2.0).abs() < 1e-12);
        let vg0 = vg_with(&spec, &x, vec![0.0], 1.0);
        assert_eq!(zero_temperature_action(&vg0, &x, &spec).unwrap(), vec![-0.0]);
        assert!(matches!(zero_temperature_action(&vg0, &[0.0], &spec), Err(Error::DegenerateCost(_))));
        let vgc = vg_with(&spec, &x, vec![1.0], 0.0);
        assert!(matches!(zero_temperature_action(&vgc, &x, &spec), Err(Error::DegenerateCost(_))));
    }

    #[test]
    fn curvature_collapse_is_reported() {
        let spec = ModelSpec::reference(1, 1);
        let x = [1.0];
        let p = two_component(1);
        // 1 + beta s c1 J_C <= 0 for J_C very negative
        let vg = vg_with(&spec, &x, vec![0.1], -100.0);
        let err = posterior_policy(&p, &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &spec).unwrap_err();
        assert!(matches!(err, Error::CurvatureCollapse { .. }));
        assert!(component_hamiltonian(&p, 0, &vg, &x, &spec).is_err());
        let t = tilt(&p.at(&x), spec.action_cost_weight(&x), -100.0, &vg.projected, 1.0, CurvatureGuard::Clamp).unwrap();
        assert_eq!(t.n_clamped(), 2);
        assert!(t.log_partition.is_finite());
    }

    #[test]
    fn posterior_by_sampling_matches_mean() {
        let spec = ModelSpec::reference(2, 2);
        let x = [0.6, 0.4];
        let p = two_component(2);
        let vg = vg_with(&spec, &x, vec![1.5, -0.7], 0.8);
        let post = posterior_policy(&p, &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &spec).unwrap();
        let direct = expected_action_optimal(&p, &vg, &x, &spec).unwrap();
        assert_eq!(direct, post.mean_action());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 400_000;
        let mut s = [0.0; 2];
        let mut ss = [0.0; 2];
        for _ in 0..n {
            let a = post.mixture.sample(&mut rng);
            for i in 0..2 {
                s[i] += a[i];
                ss[i] += a[i] * a[i];
            }
        }
        for i in 0..2 {
            let mean = s[i] / n as f64;
            let se = ((ss[i] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - direct[i]).abs() < 4.0 * se);
        }
    }

    proptest! {
        #[test]
        fn posterior_weights_on_simplex(
            gx in prop::collection::vec(-3.0f64..3.0, 2),
            gc in 0.0f64..3.0,
            beta in 0.01f64..50.0,
        ) {
            let mut spec = ModelSpec::reference(2, 2);
            spec.inverse_temperature = beta;
            let x = [0.3, -0.6];
            let vg = vg_with(&spec, &x, gx, gc);
            let post = posterior_policy(&two_component(2), &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &spec).unwrap();
            let total: f64 = post.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(post.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        }

        #[test]
        fn covariances_shrink_for_positive_curvature(gc in 1e-3f64..5.0, gx in -2.0f64..2.0) {
            let spec = ModelSpec::reference(1, 1);
            let x = [0.8];
            let p = two_component(1);
            let vg = vg_with(&spec, &x, vec![gx], gc);
            let post = posterior_policy(&p, &vg, &ExtendedState::new(x.to_vec(), 0.0, 0.0), &spec).unwrap();
            for (c, comp) in post.covariances().iter().zip(&p.components) {
                prop_assert!(*c < comp.variance());
            }
        }

        #[test]
        fn boltzmann_shift_invariance(shift in -500.0f64..500.0, h0 in -300.0f64..300.0, h1 in -300.0f64..300.0) {
            let prior = [0.4, 0.6];
            let (w, lse) = boltzmann(&prior, &[h0, h1], 1.0);
            let (ws, lses) = boltzmann(&prior, &[h0 + shift, h1 + shift], 1.0);
            prop_assert!(w.iter().all(|v| v.is_finite()));
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((lses - (lse - shift)).abs() < 1e-9 * (1.0 + lse.abs() + shift.abs()));
        }
    }
}
