use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softhjb::evaluator::Summary;
use softhjb::policy::posterior_policy;
use softhjb::simulator::{simulate_dataset, InitialStates};
use softhjb::trainer::epoch_order;
use softhjb::value_net::{Architecture, ValueNetwork};
use softhjb::{ExtendedState, GaussianMixturePolicy, ModelSpec, TerminalUtility, ValueGradients};

fn random_policy(seed: u64, action_dim: usize, k: usize) -> GaussianMixturePolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GaussianMixturePolicy::random_constant(action_dim, k, (-1.0, 1.0), (0.1, 0.5), &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadratic_utility_is_even(z in -1e6f64..1e6) {
        let u = TerminalUtility::Quadratic;
        prop_assert_eq!(u.value(z), u.value(-z));
        prop_assert_eq!(u.value(0.0), 0.0);
    }

    #[test]
    fn zero_gradients_leave_prior_unchanged(log_beta in -6.0f64..6.0, seed in 0u64..1000, x0 in -3.0f64..3.0) {
        let mut spec = ModelSpec::reference(2, 2);
        spec.inverse_temperature = 10f64.powf(log_beta);
        let policy = random_policy(seed, 2, 3);
        let post = posterior_policy(&policy, &ValueGradients::zero(&spec), &ExtendedState::new(vec![x0, 0.1], 0.3, 0.2), &spec).unwrap();
        for k in 0..3 {
            prop_assert!((post.weights()[k] - policy.weights[k]).abs() < 1e-12);
            prop_assert_eq!(post.covariances()[k], policy.components[k].variance());
            prop_assert_eq!(&post.means()[k], &policy.components[k].offset);
        }
    }

    #[test]
    fn accumulated_cost_is_nondecreasing(seed in 0u64..500, r in 0.0f64..0.5) {
        let mut spec = ModelSpec::reference(3, 2);
        spec.discount_rate = r;
        spec.n_steps = 10;
        let ds = simulate_dataset(&spec, &random_policy(seed, 2, 2), 4, seed, &InitialStates::Uniform { low: -1.0, high: 1.0 }).unwrap();
        for tr in &ds.trajectories {
            prop_assert_eq!(tr.costs[0], 0.0);
            for w in tr.costs.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }

    #[test]
    fn summaries_are_ordered(samples in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let s = Summary::of(&samples);
        let q = &s.quantiles;
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ordered = [lo, q.q05, q.q25, q.q50, q.q75, q.q95, hi];
        prop_assert!(ordered.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.variance >= 0.0);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        prop_assert!((s.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }

    #[test]
    fn network_json_round_trip_is_bit_exact(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 3), c in 0.0f64..3.0, t in 0.0f64..1.0) {
        let net = ValueNetwork::initialize(Architecture { state_dim: 3, hidden: vec![5, 4] }, seed).unwrap();
        let back = ValueNetwork::from_json(&net.to_json().unwrap()).unwrap();
        prop_assert_eq!(net.eval(&x, c, t).unwrap().to_bits(), back.eval(&x, c, t).unwrap().to_bits());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(seed in 0u64..1000, epoch in 0usize..50) {
        let mut spec = ModelSpec::reference(2, 1);
        spec.n_steps = 5;
        let ds = simulate_dataset(&spec, &random_policy(1, 1, 2), 6, 3, &InitialStates::default()).unwrap();
        let order = epoch_order(&ds, seed, epoch);
        prop_assert_eq!(&order, &epoch_order(&ds, seed, epoch));
        let mut keys: Vec<(usize, usize)> = order.iter().map(|s| (s.trajectory, s.step)).collect();
        keys.sort();
        let all: Vec<(usize, usize)> = (0..6).flat_map(|i| (0..5).map(move |j| (i, j))).collect();
        prop_assert_eq!(keys, all);
    }
}
