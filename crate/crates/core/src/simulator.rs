//! Euler-Maruyama simulation of the extended state `(x, C)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::fingerprint;
use crate::error::{check_dim, Error, Result};
use crate::model::{norm_sq, Dataset, ExtendedState, ModelSpec, Trajectory};
use crate::policy::{posterior_policy, GaussianMixturePolicy, IsotropicMixture};
use crate::rng::{substream, Purpose};
use crate::value_net::ValueNetwork;

/// Distribution of `x_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStates {
    /// Every coordinate independently uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
    Point { x: Vec<f64> },
}

impl Default for InitialStates {
    fn default() -> Self {
        InitialStates::Uniform { low: 0.05, high: 0.15 }
    }
}

impl InitialStates {
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InitialStates::Uniform { low, high } => (0..dim)
                .map(|_| if low == high { *low } else { rng.random_range(*low..*high) })
                .collect(),
            InitialStates::Point { x } => x.clone(),
        }
    }

    pub fn mean(&self, dim: usize) -> Vec<f64> {
        match self {
            InitialStates::Uniform { low, high } => vec![0.5 * (low + high); dim],
            InitialStates::Point { x } => x.clone(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            InitialStates::Uniform { low, high } => {
                if !(low <= high) || !low.is_finite() || !high.is_finite() {
                    return Err(Error::invalid("initial_states", "need finite low <= high"));
                }
            }
            InitialStates::Point { x } => check_dim("initial state", dim, x.len())?,
        }
        Ok(())
    }
}

/// How actions enter the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Drift at the mean action, cost at `E|a|^2`.
    #[default]
    Effective,
    /// One sampled action per step for both drift and cost.
    Sampled,
}

/// Which policy acts.
#[derive(Debug, Clone, Copy)]
pub enum PolicySource<'a> {
    Behavior(&'a GaussianMixturePolicy),
    Posterior {
        prior: &'a GaussianMixturePolicy,
        net: &'a ValueNetwork,
    },
}

impl PolicySource<'_> {
    pub fn prior(&self) -> &GaussianMixturePolicy {
        match self {
            PolicySource::Behavior(p) => p,
            PolicySource::Posterior { prior, .. } => prior,
        }
    }

    /// Action distribution at `state`.
    pub fn at(&self, spec: &ModelSpec, state: &ExtendedState) -> Result<IsotropicMixture> {
        match self {
            PolicySource::Behavior(p) => Ok(p.at(&state.x)),
            PolicySource::Posterior { prior, net } => {
                let vg = net.input_gradients(spec, state)?;
                Ok(posterior_policy(prior, &vg, state, spec)?.mixture)
            }
        }
    }
}

/// `mu0(x) + mu1(x) <a>`
pub fn effective_drift(spec: &ModelSpec, mean_action: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.drift(x, mean_action)
}

/// `x + drift dt + sigma * sqrt(dt) * noise`
pub fn step_euler(x: &[f64], drift: &[f64], spec: &ModelSpec, dt: f64, noise: &[f64]) -> Vec<f64> {
    let sq = dt.sqrt();
    x.iter()
        .zip(drift)
        .zip(spec.volatility.iter().zip(noise))
        .map(|((xi, di), (si, zi))| xi + di * dt + si * sq * zi)
        .collect()
}

/// `C + (c + r C) dt`
pub fn accumulate_cost(cost: f64, running_cost: f64, spec: &ModelSpec, dt: f64) -> f64 {
    cost + (running_cost + spec.discount_rate * cost) * dt
}

/// Per-step hook used by the evaluator; receives the step index, state and
/// acting distribution.
pub(crate) type StepObserver<'a> = dyn FnMut(usize, &ExtendedState, &IsotropicMixture) -> Result<f64> + 'a;

/// Simulates one path from `start` (on the time grid) to the horizon. Returns
/// the trajectory and the sum of the observer's outputs.
pub(crate) fn simulate_path(
    spec: &ModelSpec,
    source: &PolicySource,
    start: &ExtendedState,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
    mut observer: Option<&mut StepObserver>,
) -> Result<(Trajectory, f64)> {
    let dt = spec.dt();
    let first = (start.t / dt).round() as usize;
    let n = spec.state_dim;
    let mut states = vec![start.x.clone()];
    let mut costs = vec![start.cost];
    let mut times = vec![first as f64 * dt];
    let mut observed = 0.0;
    let mut noise = vec![0.0; n];
    for step in first..spec.n_steps {
        let state = ExtendedState::new(states.last().unwrap().clone(), *costs.last().unwrap(), *times.last().unwrap());
        let mix = source.at(spec, &state).map_err(|e| Error::AtState {
            x: state.x.clone(),
            cost: state.cost,
            t: state.t,
            source: Box::new(e),
        })?;
        if let Some(obs) = observer.as_deref_mut() {
            observed += obs(step, &state, &mix)?;
        }
        let (action, action_sq) = match mode {
            ActionMode::Effective => (mix.mean(), mix.expected_squared_norm()),
            ActionMode::Sampled => {
                let a = mix.sample(rng);
                let sq = norm_sq(&a);
                (a, sq)
            }
        };
        for z in noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        let drift = spec.drift_unchecked(&state.x, &action);
        let running = spec.running_cost_from_sq(&state.x, action_sq);
        let x_next = step_euler(&state.x, &drift, spec, dt, &noise);
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("simulation", format!("state diverged at step {step}")));
        }
        states.push(x_next);
        costs.push(accumulate_cost(state.cost, running, spec, dt));
        times.push((step + 1) as f64 * dt);
    }
    Ok((Trajectory { states, costs, times }, observed))
}

/// Runs `n_traj` independent paths; each draws `x_0` and then its noise from
/// the `(seed, trajectory index)` substream.
pub(crate) fn simulate_many(
    spec: &ModelSpec,
    source: &PolicySource,
    n_traj: usize,
    seed: u64,
    initial: &InitialStates,
    mode: ActionMode,
) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    initial.validate(spec.state_dim)?;
    let results: Vec<Result<Trajectory>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::Trajectory, i as u64);
            let x0 = initial.sample(spec.state_dim, &mut rng);
            simulate_path(spec, source, &ExtendedState::new(x0, 0.0, 0.0), mode, &mut rng, None)
                .map(|(t, _)| t)
                .map_err(|e| Error::Trajectory {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect();
    results.into_iter().collect()
}

fn assemble(spec: &ModelSpec, policy: &GaussianMixturePolicy, seed: u64, trajectories: Vec<Trajectory>) -> Dataset {
    Dataset {
        spec_fingerprint: fingerprint(spec, policy),
        seed,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        n_steps: spec.n_steps,
        horizon: spec.horizon,
        trajectories,
    }
}

/// Behavioral dataset: effective drift at `<a>_0` and running cost at `E|a|^2`.
pub fn simulate_dataset(
    spec: &ModelSpec,
    policy: &GaussianMixturePolicy,
    n_traj: usize,
    seed: u64,
    initial: &InitialStates,
) -> Result<Dataset> {
    policy.validate(spec)?;
    let trajectories = simulate_many(spec, &PolicySource::Behavior(policy), n_traj, seed, initial, ActionMode::Effective)?;
    Ok(assemble(spec, policy, seed, trajectories))
}

/// Paths under the posterior policy extracted from `net`.
pub fn simulate_under_value(
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    net: &ValueNetwork,
    n_traj: usize,
    seed: u64,
    initial: &InitialStates,
    mode: ActionMode,
) -> Result<Dataset> {
    policy0.validate(spec)?;
    check_dim("network state_dim", spec.state_dim, net.state_dim())?;
    let source = PolicySource::Posterior { prior: policy0, net };
    let trajectories = simulate_many(spec, &source, n_traj, seed, initial, mode)?;
    Ok(assemble(spec, policy0, seed, trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use crate::policy::PolicyComponent;
    use crate::value_net::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

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

    #[test]
    fn drift_and_step_basics() {
        let spec = ModelSpec::reference(3, 2);
        let x = [0.2, -0.1, 0.4];
        assert_eq!(effective_drift(&spec, &[0.0, 0.0], &x).unwrap(), spec.base_drift(&x));
        assert_eq!(
            effective_drift(&spec, &[0.3, -0.2], &x).unwrap(),
            spec.drift(&x, &[0.3, -0.2]).unwrap()
        );
        assert_eq!(step_euler(&x, &[0.0; 3], &spec, 0.025, &[0.0; 3]), x.to_vec());
        let mut quiet = spec.clone();
        quiet.volatility = vec![0.0; 3];
        let d = [1.0, 2.0, -1.0];
        let y = step_euler(&x, &d, &quiet, 0.1, &[5.0, 5.0, 5.0]);
        for i in 0..3 {
            assert!((y[i] - (x[i] + 0.1 * d[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn euler_step_moments() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.volatility = vec![0.2, 0.4];
        let x = [0.3, 0.5];
        let drift = [0.7, -0.2];
        let dt = 0.025;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut s = [0.0; 2];
        let mut ss = [0.0; 2];
        let mut cross = 0.0;
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let y = step_euler(&x, &drift, &spec, dt, &z);
            let inc = [(y[0] - x[0]) / dt, (y[1] - x[1]) / dt];
            for i in 0..2 {
                s[i] += inc[i];
                ss[i] += inc[i] * inc[i];
            }
            cross += (y[0] - x[0] - drift[0] * dt) * (y[1] - x[1] - drift[1] * dt);
        }
        for i in 0..2 {
            let mean = s[i] / n as f64;
            let var = ss[i] / n as f64 - mean * mean;
            assert!((mean - drift[i]).abs() < 4.0 * (var / n as f64).sqrt());
            // covariance of the increment itself is sigma^2 dt
            let cov = var * dt * dt;
            let want = spec.volatility[i].powi(2) * dt;
            assert!((cov / want - 1.0).abs() < 0.05, "{cov} vs {want}");
        }
        assert!((cross / n as f64).abs() < 0.05 * 0.2 * 0.4 * dt);
    }

    #[test]
    fn cost_accumulation_examples() {
        let mut spec = ModelSpec::reference(1, 1);
        spec.discount_rate = 0.0;
        assert!((accumulate_cost(0.0, 1.0, &spec, 0.025) - 0.025).abs() < 1e-17);
        assert_eq!(accumulate_cost(0.7, 0.0, &spec, 0.025), 0.7);
    }

    // Constant running cost c with discount r: C(T) = c (e^{rT} - 1) / r.
    #[test]
    fn discounted_cost_converges_first_order() {
        let mut spec = ModelSpec::reference(1, 1);
        spec.discount_rate = 0.03;
        let c = 2.0;
        let exact = c * ((0.03f64).exp() - 1.0) / 0.03;
        let run = |n: usize| {
            let dt = 1.0 / n as f64;
            (0..n).fold(0.0, |acc, _| accumulate_cost(acc, c, &spec, dt))
        };
        let e1 = (run(40) - exact).abs();
        let e2 = (run(80) - exact).abs();
        assert!(e1 > 0.0 && (e1 / e2 - 2.0).abs() < 0.05, "{e1} {e2}");
    }

    #[test]
    fn datasets_are_reproducible() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.n_steps = 10;
        let a = simulate_dataset(&spec, &policy(1), 16, 42, &InitialStates::default()).unwrap();
        let b = simulate_dataset(&spec, &policy(1), 16, 42, &InitialStates::default()).unwrap();
        let c = simulate_dataset(&spec, &policy(1), 16, 43, &InitialStates::default()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a.trajectories, c.trajectories);
        for tr in &a.trajectories {
            assert_eq!(tr.costs[0], 0.0);
            assert!(tr.costs.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn noiseless_paths_follow_the_ode() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.volatility = vec![1e-300; 2];
        let p = GaussianMixturePolicy::new(vec![1.0], vec![PolicyComponent::constant(vec![0.4], 0.5)]).unwrap();
        let init = InitialStates::Point { x: vec![0.1, 0.2] };
        let ds = simulate_dataset(&spec, &p, 3, 1, &init).unwrap();
        assert!(ds.trajectories.windows(2).all(|w| w[0] == w[1]));
        // fine-step reference for dx = mu0(x) + mu1(x) a
        let mut x = vec![0.1, 0.2];
        let fine = 4000;
        let h = 1.0 / fine as f64;
        for _ in 0..fine {
            let d = spec.drift(&x, &[0.4]).unwrap();
            let mid: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + 0.5 * h * b).collect();
            let d2 = spec.drift(&mid, &[0.4]).unwrap();
            for i in 0..2 {
                x[i] += h * d2[i];
            }
        }
        let end = ds.trajectories[0].states.last().unwrap();
        for i in 0..2 {
            assert!((end[i] - x[i]).abs() < 1e-3, "{} vs {}", end[i], x[i]);
        }
    }

    #[test]
    fn paper_scale_paths_stay_bounded() {
        let spec = ModelSpec::reference(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GaussianMixturePolicy::random_constant(5, 2, (-0.5, 0.5), (0.2, 0.4), &mut rng).unwrap();
        let ds = simulate_dataset(&spec, &p, 10_000, 7, &InitialStates::default()).unwrap();
        assert_eq!(ds.trajectories.len(), 10_000);
        for (lo, hi) in ds.state_bounds() {
            assert!(lo.is_finite() && hi.is_finite() && lo > -1.0 && hi < 1.5, "{lo} {hi}");
        }
    }

    #[test]
    fn zero_network_reproduces_behavior_paths() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.n_steps = 12;
        let net = ValueNetwork::zeros(Architecture {
            state_dim: 2,
            hidden: vec![4],
        })
        .unwrap();
        let p = policy(1);
        let a = simulate_dataset(&spec, &p, 8, 5, &InitialStates::default()).unwrap();
        let b = simulate_under_value(&spec, &p, &net, 8, 5, &InitialStates::default(), ActionMode::Effective).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collapse_carries_trajectory_index() {
        let mut spec = ModelSpec::reference(1, 1);
        spec.n_steps = 4;
        let mut net = ValueNetwork::zeros(Architecture {
            state_dim: 1,
            hidden: vec![],
        })
        .unwrap();
        // J = -100 C gives J_C = -100 everywhere
        net.set_params(&[0.0, -100.0, 0.0, 0.0]).unwrap();
        let err = simulate_under_value(
            &spec,
            &policy(1),
            &net,
            3,
            1,
            &InitialStates::Point { x: vec![1.0] },
            ActionMode::Effective,
        )
        .unwrap_err();
        match err {
            Error::Trajectory { index, source } => {
                assert_eq!(index, 0);
                assert!(matches!(source.root(), Error::CurvatureCollapse { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn effective_and_sampled_modes_agree_in_mean() {
        let mut spec = ModelSpec::reference(2, 1);
        spec.volatility = vec![0.1, 0.1];
        let mut net = ValueNetwork::initialize(
            Architecture {
                state_dim: 2,
                hidden: vec![4],
            },
            3,
        )
        .unwrap();
        let mut params = net.params();
        for v in params.iter_mut() {
            *v *= 0.1;
        }
        net.set_params(&params).unwrap();
        let p = policy(1);
        let init = InitialStates::Point { x: vec![0.5, 0.5] };
        let n = 4000;
        let a = simulate_under_value(&spec, &p, &net, n, 1, &init, ActionMode::Effective).unwrap();
        let b = simulate_under_value(&spec, &p, &net, n, 2, &init, ActionMode::Sampled).unwrap();
        let stats = |d: &Dataset| {
            let v: Vec<f64> = d.trajectories.iter().map(|t| t.terminal_cost()).collect();
            let m = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (m, var / n as f64)
        };
        let (ma, va) = stats(&a);
        let (mb, vb) = stats(&b);
        assert!((ma - mb).abs() < 4.0 * (va + vb).sqrt(), "{ma} vs {mb}");
    }

    #[test]
    fn halving_dt_changes_mean_cost_by_order_dt() {
        let run = |n_steps: usize| {
            let mut spec = ModelSpec::reference(2, 1);
            spec.n_steps = n_steps;
            let ds = simulate_dataset(&spec, &policy(1), 4000, 11, &InitialStates::Point { x: vec![0.5, 0.4] }).unwrap();
            ds.trajectories.iter().map(|t| t.terminal_cost()).sum::<f64>() / 4000.0
        };
        let (c20, c40, c80) = (run(20), run(40), run(80));
        let d1 = (c20 - c40).abs();
        let d2 = (c40 - c80).abs();
        assert!(d1 < 0.05 * c40 && d2 < d1 + 0.01 * c40, "{c20} {c40} {c80}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn effective_drift_matches_dense_product(xs in prop::collection::vec(-2.0f64..2.0, 3), a in prop::collection::vec(-1.0f64..1.0, 2)) {
            let mut spec = ModelSpec::reference(3, 2);
            spec.control_gain = Matrix::from_rows(&[vec![0.1, -0.3], vec![0.5, 0.2], vec![0.0, 0.7]]).unwrap();
            let dense = nalgebra::DMatrix::from_fn(3, 2, |i, j| spec.control_offset.get(i, j) + xs[i] * spec.control_gain.get(i, j));
            let a0 = nalgebra::DMatrix::from_fn(3, 3, |i, j| spec.drift_gain.get(i, j));
            let want = nalgebra::DVector::from_vec(spec.drift_offset.clone()) + a0 * nalgebra::DVector::from_vec(xs.clone()) + dense * nalgebra::DVector::from_vec(a.clone());
            let got = effective_drift(&spec, &a, &xs).unwrap();
            for i in 0..3 {
                prop_assert!((got[i] - want[i]).abs() < 1e-14);
            }
        }
    }
}
