use isnet_core::estimator::{psi_stack, BlockWeights};
use isnet_core::model::{param_distance, presets};
use isnet_core::{
    identify_closed_form, moments, project_theta, simulate, validate, EstimationMode, NetworkParams,
    ParamLayout, ProjectionConfig, SimOptions,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn network(seed: u64, n: usize, zero_diagonal: bool) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    presets::random_network(&mut rng, n, zero_diagonal, 0.9)
}

fn mode_strategy() -> impl Strategy<Value = EstimationMode> {
    prop::sample::select(EstimationMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_feasible(
        mode in mode_strategy(),
        n in 1usize..5,
        seed in any::<u64>(),
        raw in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let template = network(seed, n, mode.forbids_self_loops());
        let layout = ParamLayout::new(n, mode, 4.0);
        let config = ProjectionConfig::default();
        let mut x = layout.pack(&template).unwrap();
        for (v, r) in x.iter_mut().zip(&raw) {
            *v += r;
        }
        let once = project_theta(&x, &layout, &template, &config).unwrap();
        prop_assert!(validate(&once, mode).bounds_ok());
        let packed = layout.pack(&once).unwrap();
        let twice = project_theta(&packed, &layout, &template, &config).unwrap();
        prop_assert_eq!(layout.pack(&twice).unwrap(), packed);
    }

    #[test]
    fn distance_is_a_metric(seeds in prop::array::uniform3(any::<u64>()), n in 1usize..5) {
        let layout = ParamLayout::new(n, EstimationMode::KnownServices, 4.0);
        let [a, b, c] = seeds.map(|s| network(s, n, false));
        let d = |x: &NetworkParams, y: &NetworkParams| param_distance(x, y, &layout).unwrap().0;
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn closed_form_round_trip(seed in any::<u64>(), n in prop::sample::select(vec![1usize, 2, 3, 5])) {
        let truth = network(seed, n, false);
        let target = moments::observed_moments(&truth, 4.0).unwrap();
        let cf = identify_closed_form(&target, &truth.services, 4.0).unwrap();
        let err_q = (&cf.q - truth.q.matrix()).amax();
        let err_l = cf
            .lambda
            .iter()
            .zip(&truth.lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prop_assert!(err_q <= 1e-8 && err_l <= 1e-8, "q {} lambda {}", err_q, err_l);
    }

    #[test]
    fn moment_residual_vanishes_at_the_generating_point(
        mode in mode_strategy(),
        seed in any::<u64>(),
        n in 1usize..5,
        p in prop::collection::vec(0.3f64..1.0, 5),
    ) {
        let mut truth = network(seed, n, mode.forbids_self_loops());
        truth.p = p[..n].to_vec();
        let target = moments::observed_moments(&truth, 4.0).unwrap();
        let layout = ParamLayout::new(n, mode, 4.0);
        let theta = layout.unpack(&layout.pack(&truth).unwrap(), &truth).unwrap();
        let psi = psi_stack(&theta, &target, 4.0, mode.lag2_use(), &BlockWeights::default()).unwrap();
        prop_assert!(psi.amax() <= 1e-12 * (1.0 + target.alpha1.amax()), "{}", psi.amax());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_deterministic_under_seed(seed in any::<u64>(), net in any::<u64>()) {
        let params = network(net, 3, false);
        let opts = SimOptions::default();
        let a = simulate(&params, 4.0, 500, seed, &opts).unwrap();
        let b = simulate(&params, 4.0, 500, seed, &opts).unwrap();
        prop_assert_eq!(a.counts(), b.counts());
        let c = simulate(&params, 4.0, 500, seed.wrapping_add(1), &opts).unwrap();
        prop_assert_ne!(a.counts(), c.counts());
    }
}
