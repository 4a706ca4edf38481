//! Monte Carlo return distributions, regularized cost and policy slices.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{ExtendedState, ModelSpec};
use crate::policy::{posterior_policy, GaussianMixturePolicy, IsotropicMixture};
use crate::rng::{substream, Purpose};
use crate::simulator::{simulate_path, ActionMode, PolicySource};
use crate::value_net::ValueNetwork;

/// Default inner sample count for per-state KL estimates.
pub const DEFAULT_KL_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub quantiles: Quantiles,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let n = samples.len();
        let mean = if n == 0 { f64::NAN } else { samples.iter().sum::<f64>() / n as f64 };
        let variance = if n < 2 {
            0.0
        } else {
            samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            n,
            mean,
            variance,
            std_error: if n == 0 { f64::NAN } else { (variance / n as f64).sqrt() },
            quantiles: Quantiles {
                q05: quantile(&sorted, 0.05),
                q25: quantile(&sorted, 0.25),
                q50: quantile(&sorted, 0.50),
                q75: quantile(&sorted, 0.75),
                q95: quantile(&sorted, 0.95),
            },
        }
    }
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Empirical law of the terminal accumulated cost `Z_T = C_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnDistribution {
    pub samples: Vec<f64>,
    pub summary: Summary,
}

impl ReturnDistribution {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let summary = Summary::of(&samples);
        ReturnDistribution { samples, summary }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample"]).map_err(csv_err)?;
        for v in &self.samples {
            w.write_record([v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn check_start(spec: &ModelSpec, start: &ExtendedState) -> Result<()> {
    check_dim("start state", spec.state_dim, start.x.len())?;
    let dt = spec.dt();
    let k = start.t / dt;
    if !(start.t >= 0.0) || start.t > spec.horizon || (k - k.round()).abs() > 1e-9 {
        return Err(Error::invalid("start.t", "must lie on the time grid in [0, T]"));
    }
    Ok(())
}

/// Simulates `n_mc` paths from `start` and collects `C_T`.
pub fn estimate_return_distribution(
    spec: &ModelSpec,
    source: &PolicySource,
    start: &ExtendedState,
    n_mc: usize,
    seed: u64,
    mode: ActionMode,
) -> Result<ReturnDistribution> {
    spec.validate()?;
    check_start(spec, start)?;
    let samples: Vec<Result<f64>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::Trajectory, i as u64);
            simulate_path(spec, source, start, mode, &mut rng, None)
                .map(|(tr, _)| tr.terminal_cost())
                .map_err(|e| Error::Trajectory {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect();
    Ok(ReturnDistribution::from_samples(samples.into_iter().collect::<Result<_>>()?))
}

/// `E U(Z_T)`, the KL regularizer and their sum, each with a standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizedCost {
    pub expected_utility: f64,
    pub expected_utility_se: f64,
    pub kl_term: f64,
    pub kl_term_se: f64,
    pub total: f64,
    pub total_se: f64,
    pub n_paths: usize,
}

/// Sampled `KL(p || q)` with `n` draws from `p`.
pub fn sampled_kl<R: rand::Rng + ?Sized>(p: &IsotropicMixture, q: &IsotropicMixture, n: usize, rng: &mut R) -> f64 {
    if p == q {
        return 0.0;
    }
    let mut acc = 0.0;
    for _ in 0..n {
        let a = p.sample(rng);
        acc += p.log_density(&a) - q.log_density(&a);
    }
    acc / n as f64
}

/// Per path: `U(C_T) + (1/beta) sum_s e^{-r s} KL(pi || pi0)(x_s) dt`.
pub fn estimate_regularized_cost(
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    source: &PolicySource,
    start: &ExtendedState,
    n_mc: usize,
    seed: u64,
    n_kl: usize,
    mode: ActionMode,
) -> Result<RegularizedCost> {
    spec.validate()?;
    check_start(spec, start)?;
    if n_kl == 0 {
        return Err(Error::invalid("n_kl", "must be >= 1"));
    }
    let dt = spec.dt();
    let beta = spec.beta();
    let per_path: Vec<Result<(f64, f64)>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::Trajectory, i as u64);
            let mut kl_rng = substream(seed, Purpose::Divergence, i as u64);
            let mut observer = |_step: usize, state: &ExtendedState, mix: &IsotropicMixture| -> Result<f64> {
                let base = policy0.at(&state.x);
                let kl = sampled_kl(mix, &base, n_kl, &mut kl_rng);
                Ok((-spec.discount_rate * state.t).exp() * kl * dt / beta)
            };
            simulate_path(spec, source, start, mode, &mut rng, Some(&mut observer))
                .map(|(tr, kl)| (spec.terminal_utility(tr.terminal_cost()), kl))
                .map_err(|e| Error::Trajectory {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect();
    let pairs: Vec<(f64, f64)> = per_path.into_iter().collect::<Result<_>>()?;
    let utility: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let kl: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let total: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
    let (su, sk, st) = (Summary::of(&utility), Summary::of(&kl), Summary::of(&total));
    Ok(RegularizedCost {
        expected_utility: su.mean,
        expected_utility_se: su.std_error,
        kl_term: sk.mean,
        kl_term_se: sk.std_error,
        total: st.mean,
        total_se: st.std_error,
        n_paths: n_mc,
    })
}

pub const EVALUATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEvaluation {
    pub returns: Summary,
    pub regularized_cost: RegularizedCost,
}

/// `behavior.total - extracted.total` with its combined standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Improvement {
    pub difference: f64,
    pub combined_se: f64,
    pub z_score: f64,
    /// Extracted cost exceeds the behavioral one by at most 2 standard errors.
    pub not_worse: bool,
    /// Extracted cost is lower by at least 2 standard errors.
    pub strictly_better: bool,
}

impl Improvement {
    pub fn between(behavior: &RegularizedCost, extracted: &RegularizedCost) -> Self {
        let difference = behavior.total - extracted.total;
        let combined_se = (behavior.total_se.powi(2) + extracted.total_se.powi(2)).sqrt();
        Improvement {
            difference,
            combined_se,
            z_score: if combined_se > 0.0 { difference / combined_se } else { 0.0 },
            not_worse: -difference <= 2.0 * combined_se,
            strictly_better: difference >= 2.0 * combined_se && difference > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub seed: u64,
    pub n_paths: usize,
    pub n_kl: usize,
    pub action_mode: ActionMode,
    pub start: ExtendedState,
    pub behavior: PolicyEvaluation,
    pub extracted: PolicyEvaluation,
    pub improvement: Improvement,
}

/// Return samples and regularized-cost estimates under `policy0` and under the
/// policy extracted from `net`, on common random numbers.
pub struct Comparison {
    pub behavior_returns: ReturnDistribution,
    pub extracted_returns: ReturnDistribution,
    pub report: EvaluationReport,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_policies(
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    net: &ValueNetwork,
    start: &ExtendedState,
    n_paths: usize,
    seed: u64,
    n_kl: usize,
    mode: ActionMode,
) -> Result<Comparison> {
    policy0.validate(spec)?;
    check_dim("network state_dim", spec.state_dim, net.state_dim())?;
    let behavior = PolicySource::Behavior(policy0);
    let extracted = PolicySource::Posterior { prior: policy0, net };
    let behavior_returns = estimate_return_distribution(spec, &behavior, start, n_paths, seed, mode)?;
    let extracted_returns = estimate_return_distribution(spec, &extracted, start, n_paths, seed, mode)?;
    let behavior_cost = estimate_regularized_cost(spec, policy0, &behavior, start, n_paths, seed, n_kl, mode)?;
    let extracted_cost = estimate_regularized_cost(spec, policy0, &extracted, start, n_paths, seed, n_kl, mode)?;
    let improvement = Improvement::between(&behavior_cost, &extracted_cost);
    let report = EvaluationReport {
        format_version: EVALUATION_FORMAT_VERSION,
        seed,
        n_paths,
        n_kl,
        action_mode: mode,
        start: start.clone(),
        behavior: PolicyEvaluation {
            returns: behavior_returns.summary.clone(),
            regularized_cost: behavior_cost,
        },
        extracted: PolicyEvaluation {
            returns: extracted_returns.summary.clone(),
            regularized_cost: extracted_cost,
        },
        improvement,
    };
    Ok(Comparison {
        behavior_returns,
        extracted_returns,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub sweep_value: f64,
    pub component: usize,
    pub mean: Vec<f64>,
    pub weight: f64,
    pub cov_scalar: f64,
    pub collapsed: bool,
}

/// Posterior mixture along `x[sweep_dim] = v`, other coordinates from `anchor`.
pub fn policy_slice_export(
    net: &ValueNetwork,
    policy0: &GaussianMixturePolicy,
    spec: &ModelSpec,
    sweep_dim: usize,
    grid: &[f64],
    anchor: &ExtendedState,
) -> Result<Vec<SliceRow>> {
    if sweep_dim >= spec.state_dim {
        return Err(Error::invalid(
            "dim",
            format!("{sweep_dim} out of range for state_dim {}", spec.state_dim),
        ));
    }
    check_dim("anchor state", spec.state_dim, anchor.x.len())?;
    let mut rows = Vec::with_capacity(grid.len() * policy0.n_components());
    for &v in grid {
        let mut at = anchor.clone();
        at.x[sweep_dim] = v;
        let vg = net.input_gradients(spec, &at)?;
        match posterior_policy(policy0, &vg, &at, spec) {
            Ok(post) => {
                for k in 0..policy0.n_components() {
                    rows.push(SliceRow {
                        sweep_value: v,
                        component: k,
                        mean: post.means()[k].clone(),
                        weight: post.weights()[k],
                        cov_scalar: post.covariances()[k],
                        collapsed: false,
                    });
                }
            }
            Err(Error::CurvatureCollapse { .. }) => {
                for k in 0..policy0.n_components() {
                    rows.push(SliceRow {
                        sweep_value: v,
                        component: k,
                        mean: vec![f64::NAN; spec.action_dim],
                        weight: f64::NAN,
                        cov_scalar: f64::NAN,
                        collapsed: true,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn write_slice_csv<W: Write>(rows: &[SliceRow], action_dim: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sweep_value".to_string(), "component".to_string()];
    header.extend((0..action_dim).map(|j| format!("mean_{j}")));
    header.extend(["weight", "cov_scalar", "collapsed_flag"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.sweep_value.to_string(), r.component.to_string()];
        rec.extend(r.mean.iter().map(|v| v.to_string()));
        rec.push(r.weight.to_string());
        rec.push(r.cov_scalar.to_string());
        rec.push(u8::from(r.collapsed).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Largest ratio, over components and action coordinates, of the central
/// difference slope of the posterior mean at the probe values to the largest
/// slope magnitude anywhere on the grid. Any collapsed row makes the ratio infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub worst_ratio: f64,
    pub worst_component: usize,
    pub worst_action_dim: usize,
    pub worst_probe: f64,
    pub collapsed_rows: usize,
}

pub fn slice_flatness(rows: &[SliceRow], n_components: usize, probes: &[f64]) -> Result<FlatnessReport> {
    let collapsed_rows = rows.iter().filter(|r| r.collapsed).count();
    let mut report = FlatnessReport {
        worst_ratio: 0.0,
        worst_component: 0,
        worst_action_dim: 0,
        worst_probe: f64::NAN,
        collapsed_rows,
    };
    if collapsed_rows > 0 {
        report.worst_ratio = f64::INFINITY;
        return Ok(report);
    }
    for k in 0..n_components {
        let series: Vec<&SliceRow> = rows.iter().filter(|r| r.component == k).collect();
        if series.len() < 3 {
            return Err(Error::invalid("grid", "needs at least three points"));
        }
        let action_dim = series[0].mean.len();
        for j in 0..action_dim {
            let slopes: Vec<(f64, f64)> = series
                .windows(3)
                .map(|w| {
                    let s = (w[2].mean[j] - w[0].mean[j]) / (w[2].sweep_value - w[0].sweep_value);
                    (w[1].sweep_value, s.abs())
                })
                .collect();
            let max = slopes.iter().map(|s| s.1).fold(0.0, f64::max);
            for &p in probes {
                let (_, at) = slopes
                    .iter()
                    .copied()
                    .min_by(|a, b| (a.0 - p).abs().total_cmp(&(b.0 - p).abs()))
                    .expect("non-empty");
                let ratio = if max > 0.0 { at / max } else { 0.0 };
                if !(ratio <= report.worst_ratio) {
                    report.worst_ratio = ratio;
                    report.worst_component = k;
                    report.worst_action_dim = j;
                    report.worst_probe = p;
                }
            }
        }
    }
    Ok(report)
}

/// `lo:hi:n` grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::invalid("grid", format!("expected lo:hi:n, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !(lo.is_finite() && hi.is_finite()) || (n > 1 && !(hi > lo)) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::isotropic_gaussian_kl;
    use crate::policy::PolicyComponent;
    use crate::simulator::InitialStates;
    use crate::value_net::Architecture;
    use rand::SeedableRng;

    fn policy(m: usize) -> GaussianMixturePolicy {
        GaussianMixturePolicy::new(
            vec![0.5, 0.5],
            vec![
                PolicyComponent::constant(vec![0.3; m], 0.5),
                PolicyComponent::constant(vec![-0.1; m], 0.6),
            ],
        )
        .unwrap()
    }

    fn small_net(state_dim: usize, seed: u64, scale: f64) -> ValueNetwork {
        let mut net = ValueNetwork::initialize(
            Architecture {
                state_dim,
                hidden: vec![6],
            },
            seed,
        )
        .unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v * scale).collect();
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn summary_is_consistent() {
        let samples: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64).collect();
        let s = Summary::of(&samples);
        assert_eq!(s.quantiles.q50, 50.0);
        assert_eq!(s.quantiles.q05, 5.0);
        assert!(s.quantiles.q05 <= s.quantiles.q25 && s.quantiles.q75 <= s.quantiles.q95);
        assert!((s.mean - 50.0).abs() < 1e-12);
        let var = samples.iter().map(|v| (v - 50.0) * (v - 50.0)).sum::<f64>() / 100.0;
        assert!((s.variance - var).abs() < 1e-12);
    }

    #[test]
    fn noiseless_deterministic_paths_have_zero_variance() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.volatility = vec![1e-300; 2];
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.2], 0.4)]).unwrap();
        let start = ExtendedState::new(vec![0.1, 0.2], 0.0, 0.0);
        let d = estimate_return_distribution(&spec, &PolicySource::Behavior(&p), &start, 50, 1, ActionMode::Effective).unwrap();
        assert!(d.samples.windows(2).all(|w| w[0] == w[1]));
        assert!(d.summary.variance < 1e-28 * d.summary.mean.powi(2));
    }

    #[test]
    fn zero_cost_gives_zero_returns() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.cost_state_coeff = 0.0;
        spec.cost_action_coeff = 0.0;
        let start = ExtendedState::new(vec![0.1, 0.2], 0.0, 0.0);
        let d = estimate_return_distribution(&spec, &PolicySource::Behavior(&policy(1)), &start, 64, 3, ActionMode::Sampled).unwrap();
        assert!(d.samples.iter().all(|&v| v == 0.0));
    }

    // dx = b dt + s dW from x0, r = 0, c1 = 0: E C_T = c0 * int_0^T E x_t^2 dt
    // with the discrete Euler moments E x_k^2 = (x0 + b k dt)^2 + s^2 k dt.
    #[test]
    fn mean_cost_matches_moment_integral() {
        let mut spec = ModelSpec::reference(1, 1);
        spec.discount_rate = 0.0;
        spec.cost_action_coeff = 0.0;
        spec.drift_gain = crate::model::Matrix::zeros(1, 1);
        spec.control_offset = crate::model::Matrix::zeros(1, 1);
        spec.control_gain = crate::model::Matrix::zeros(1, 1);
        spec.volatility = vec![0.3];
        let (x0, b, s) = (0.4, 0.1, 0.3);
        let dt = spec.dt();
        let fine: f64 = (0..spec.n_steps)
            .map(|k| {
                let t = k as f64 * dt;
                spec.cost_state_coeff * ((x0 + b * t).powi(2) + s * s * t) * dt
            })
            .sum();
        let start = ExtendedState::new(vec![x0], 0.0, 0.0);
        let d = estimate_return_distribution(&spec, &PolicySource::Behavior(&policy(1)), &start, 20_000, 9, ActionMode::Effective).unwrap();
        assert!((d.summary.mean - fine).abs() < 4.0 * d.summary.std_error, "{} vs {fine}", d.summary.mean);
    }

    #[test]
    fn behavior_policy_has_zero_kl() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let start = ExtendedState::new(vec![0.3, 0.2], 0.0, 0.0);
        let r = estimate_regularized_cost(&spec, &p, &PolicySource::Behavior(&p), &start, 200, 1, 16, ActionMode::Effective).unwrap();
        assert_eq!(r.kl_term, 0.0);
        assert_eq!(r.total, r.expected_utility);
        let zero = ValueNetwork::zeros(Architecture {
            state_dim: 2,
            hidden: vec![3],
        })
        .unwrap();
        let src = PolicySource::Posterior { prior: &p, net: &zero };
        let r2 = estimate_regularized_cost(&spec, &p, &src, &start, 200, 1, 16, ActionMode::Effective).unwrap();
        assert_eq!(r2, r);
    }

    #[test]
    fn sampled_kl_matches_closed_form() {
        let p = IsotropicMixture {
            weights: vec![1.0],
            means: vec![vec![0.3, -0.2]],
            variances: vec![0.2],
        };
        let q = IsotropicMixture {
            weights: vec![1.0],
            means: vec![vec![0.1, 0.1]],
            variances: vec![0.35],
        };
        let exact = isotropic_gaussian_kl(&p.means[0], 0.2, &q.means[0], 0.35);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<f64> = (0..20_000).map(|_| sampled_kl(&p, &q, 1, &mut rng)).collect();
        let s = Summary::of(&draws);
        assert!((s.mean - exact).abs() < 4.0 * s.std_error, "{} vs {exact}", s.mean);
    }

    #[test]
    fn behavior_estimates_are_seed_consistent() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let start = ExtendedState::new(vec![0.3, 0.2], 0.0, 0.0);
        let a = estimate_regularized_cost(&spec, &p, &PolicySource::Behavior(&p), &start, 3000, 1, 4, ActionMode::Sampled).unwrap();
        let b = estimate_regularized_cost(&spec, &p, &PolicySource::Behavior(&p), &start, 3000, 2, 4, ActionMode::Sampled).unwrap();
        let se = (a.total_se.powi(2) + b.total_se.powi(2)).sqrt();
        assert!((a.total - b.total).abs() < 4.0 * se);
    }

    #[test]
    fn kl_term_is_nonnegative() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let net = small_net(2, 4, 0.5);
        let start = ExtendedState::new(vec![0.3, 0.2], 0.0, 0.0);
        let src = PolicySource::Posterior { prior: &p, net: &net };
        let r = estimate_regularized_cost(&spec, &p, &src, &start, 300, 5, 16, ActionMode::Effective).unwrap();
        assert!(r.kl_term > -2.0 * r.kl_term_se);
        assert!(r.kl_term > 0.0);
    }

    #[test]
    fn evaluation_does_not_touch_the_network() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let net = small_net(2, 4, 0.5);
        let before = net.clone();
        let start = ExtendedState::new(vec![0.3, 0.2], 0.0, 0.0);
        let src = PolicySource::Posterior { prior: &p, net: &net };
        estimate_return_distribution(&spec, &src, &start, 10, 1, ActionMode::Sampled).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn slices_from_zero_network_equal_prior() {
        let spec = ModelSpec::reference(3, 2);
        let p = policy(2);
        let zero = ValueNetwork::zeros(Architecture {
            state_dim: 3,
            hidden: vec![4],
        })
        .unwrap();
        let anchor = ExtendedState::new(InitialStates::default().mean(3), 0.0, 0.0);
        let grid = parse_grid("-5:5:11").unwrap();
        let rows = policy_slice_export(&zero, &p, &spec, 1, &grid, &anchor).unwrap();
        assert_eq!(rows.len(), 22);
        for r in &rows {
            assert_eq!(r.mean, p.components[r.component].offset);
            assert_eq!(r.weight, 0.5);
        }
        let flat = slice_flatness(&rows, 2, &[-3.0, 3.0]).unwrap();
        assert_eq!(flat.worst_ratio, 0.0);
    }

    #[test]
    fn single_point_slice_matches_posterior() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let net = small_net(2, 8, 0.3);
        let anchor = ExtendedState::new(vec![0.1, 0.1], 0.2, 0.0);
        let rows = policy_slice_export(&net, &p, &spec, 0, &[0.7], &anchor).unwrap();
        let at = ExtendedState::new(vec![0.7, 0.1], 0.2, 0.0);
        let post = posterior_policy(&p, &net.input_gradients(&spec, &at).unwrap(), &at, &spec).unwrap();
        for r in &rows {
            assert_eq!(r.mean, post.means()[r.component]);
            assert_eq!(r.weight, post.weights()[r.component]);
        }
        let mut buf = Vec::new();
        write_slice_csv(&rows, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sweep_value,component,mean_0,weight,cov_scalar,collapsed_flag\n"));
    }

    #[test]
    fn collapsed_rows_are_flagged() {
        let spec = ModelSpec::reference(1, 1);
        let p = policy(1);
        let mut net = ValueNetwork::zeros(Architecture {
            state_dim: 1,
            hidden: vec![],
        })
        .unwrap();
        net.set_params(&[0.0, -100.0, 0.0, 0.0]).unwrap();
        let rows = policy_slice_export(&net, &p, &spec, 0, &[0.0, 1.0], &ExtendedState::new(vec![0.0], 0.0, 0.0)).unwrap();
        assert!(!rows[0].collapsed);
        assert!(rows[2].collapsed && rows[3].collapsed);
        let grid = parse_grid("-1:1:5").unwrap();
        let rows = policy_slice_export(&net, &p, &spec, 0, &grid, &ExtendedState::new(vec![0.0], 0.0, 0.0)).unwrap();
        let flat = slice_flatness(&rows, 2, &[0.0]).unwrap();
        assert!(flat.collapsed_rows > 0 && flat.worst_ratio.is_infinite());
    }

    #[test]
    fn zero_network_comparison_is_identical_and_round_trips() {
        let spec = ModelSpec::reference(2, 1);
        let p = policy(1);
        let zero = ValueNetwork::zeros(Architecture {
            state_dim: 2,
            hidden: vec![3],
        })
        .unwrap();
        let start = ExtendedState::new(vec![0.1, 0.1], 0.0, 0.0);
        let c = compare_policies(&spec, &p, &zero, &start, 100, 4, 4, ActionMode::Sampled).unwrap();
        assert_eq!(c.behavior_returns, c.extracted_returns);
        assert_eq!(c.report.improvement.difference, 0.0);
        assert!(c.report.improvement.not_worse && !c.report.improvement.strictly_better);
        let text = serde_json::to_string_pretty(&c.report).unwrap();
        let back: EvaluationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c.report);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-5:5:201").unwrap();
        assert_eq!(g.len(), 201);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[200], 5.0);
        assert_eq!(parse_grid("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("a:b").is_err());
    }
}
