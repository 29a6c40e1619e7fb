use mafqi::game::*;
use mafqi::oracle::discretize;
use mafqi::quad::gauss_legendre;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_spec(gamma: f64) -> GameSpec {
    GameSpec::symmetric(2, 1, 2, gamma, 1.0).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn zero_components_give_zero_reward() {
    let spec = small_spec(0.5);
    let k = AgentKernel::uniform(2);
    let z = LocalFn::Zero { actions: 2 };
    let g = Game::decomposable(spec, vec![(z.clone(), k.clone()), (z, k)]).unwrap();
    let mut r = rng(1);
    for _ in 0..100 {
        let s = g.sample_initial(&mut r);
        for ja in 0..4 {
            assert_eq!(g.reward(&s, &g.spec.decode_action(ja)), 0.0);
        }
    }
}

#[test]
fn component_rewards_add_up() {
    let spec = small_spec(0.5);
    let r1 = LocalFn::Linear { slope: vec![vec![0.0], vec![0.5]], bias: vec![0.0, 0.0] };
    let r2 = LocalFn::Linear { slope: vec![vec![-0.5], vec![-0.5]], bias: vec![0.0, 0.0] };
    let k = AgentKernel::uniform(2);
    let g = Game::decomposable(spec, vec![(r1, k.clone()), (r2, k)]).unwrap();
    assert!((g.reward(&[0.5, 0.5], &[1, 0])).abs() < 1e-15);
}

#[test]
fn uniform_components_give_unit_density() {
    let spec = small_spec(0.5);
    let k = AgentKernel::uniform(2);
    let z = LocalFn::Zero { actions: 2 };
    let g = Game::decomposable(spec, vec![(z.clone(), k.clone()), (z, k)]).unwrap();
    let s = [0.3, 0.8];
    let res = 32;
    let mut x = vec![0.0; 2];
    let mut total = 0.0;
    for node in 0..res * res {
        grid_point(node, res, &mut x);
        let p = g.kernel_density(&x, &s, &[0, 1]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        total += p;
    }
    assert!((total / (res * res) as f64 - 1.0).abs() < 1e-9);
}

#[test]
fn component_count_and_reward_bound_are_checked() {
    let spec = small_spec(0.5);
    let k = AgentKernel::uniform(2);
    let z = LocalFn::Zero { actions: 2 };
    assert!(matches!(
        Game::decomposable(spec.clone(), vec![(z.clone(), k.clone())]),
        Err(mafqi::Error::Config(_))
    ));
    let big = LocalFn::constant(1, vec![0.6, 0.0]);
    assert!(matches!(
        Game::decomposable(spec, vec![(big, k.clone()), (z, k)]),
        Err(mafqi::Error::BoundViolation { .. })
    ));
}

#[test]
fn unnormalized_kernel_is_rejected() {
    let spec = small_spec(0.5);
    let z = LocalFn::Zero { actions: 2 };
    let bad = AgentKernel { uniform_weight: 0.7, bumps: vec![vec![], vec![]] };
    let ok = AgentKernel::uniform(2);
    assert!(matches!(
        Game::decomposable(spec, vec![(z.clone(), bad), (z, ok)]),
        Err(mafqi::Error::InvalidKernel(_))
    ));
}

#[test]
fn identity_kernel_returns_current_state() {
    let spec = small_spec(0.5);
    let g = Game::generic(spec, RewardModel::Xnor { scale: 1.0 }, KernelModel::Identity).unwrap();
    let s = [0.123, 0.987];
    assert_eq!(g.sample_transition(&s, &[0, 1], &mut rng(3)), s.to_vec());
}

#[test]
fn reverse_engineering_at_zero_discount_returns_qstar() {
    let spec = small_spec(0.0);
    let q = AdditiveFn {
        components: vec![
            LocalFn::Linear { slope: vec![vec![0.3], vec![-0.2]], bias: vec![0.1, 0.0] },
            LocalFn::Cosine { amp: vec![0.2, 0.1], freq: vec![vec![3.0], vec![1.0]], phase: vec![0.0, 0.5], offset: vec![0.0, 0.1] },
        ],
    };
    let kernel = KernelModel::Coupled { center: CenterMap::Product, width: 0.2, uniform_weight: 0.2, action_shift: 0.1 };
    let g = Game::reverse_engineered(spec.clone(), q.clone(), kernel, ExpectationRule::default()).unwrap();
    let mut r = rng(4);
    for _ in 0..50 {
        let s = g.sample_initial(&mut r);
        for ja in 0..4 {
            let a = spec.decode_action(ja);
            assert_eq!(g.reward(&s, &a), q.eval(&spec, &s, &a));
        }
    }
}

#[test]
fn constant_qstar_gives_constant_reward() {
    let spec = small_spec(0.6);
    let c = 0.2;
    let q = AdditiveFn { components: vec![LocalFn::constant(1, vec![c, c]), LocalFn::constant(1, vec![c, c])] };
    let kernel = KernelModel::Coupled { center: CenterMap::Product, width: 0.1, uniform_weight: 0.3, action_shift: 0.2 };
    let g = Game::reverse_engineered(spec, q, kernel, ExpectationRule::GaussLegendre { panels: 8, order: 4 }).unwrap();
    let mut r = rng(5);
    for _ in 0..50 {
        let s = g.sample_initial(&mut r);
        let d = g.reward(&s, &[1, 0]) - 2.0 * c * (1.0 - 0.6);
        assert!(d.abs() < 1e-9, "{d}");
    }
}

#[test]
fn value_iteration_recovers_reverse_engineered_qstar() {
    let spec = small_spec(0.5);
    let q = AdditiveFn {
        components: vec![
            LocalFn::Linear { slope: vec![vec![0.0], vec![0.3]], bias: vec![0.0, 0.0] },
            LocalFn::Linear { slope: vec![vec![0.0], vec![0.3]], bias: vec![0.0, 0.0] },
        ],
    };
    let kernel = KernelModel::Coupled { center: CenterMap::Product, width: 0.05, uniform_weight: 0.0, action_shift: 0.0 };
    let res = 32;
    let g = Game::reverse_engineered(spec.clone(), q.clone(), kernel, ExpectationRule::MidpointGrid { resolution: res }).unwrap();
    let tg = discretize::<f64>(&g, res).unwrap();
    let vi = tg.value_iteration(1e-12).unwrap();
    let exact = tg.tabulate(|s, a| q.eval(&spec, s, a));
    assert!(vi.q.sup_diff(&exact) < 1e-9, "{}", vi.q.sup_diff(&exact));
}

#[test]
fn mixture_histogram_matches_density() {
    let spec = small_spec(0.5);
    let g = random_decomposable(spec, 2, &mut rng(11)).unwrap();
    let (s, a) = ([0.4, 0.7], [1, 0]);
    let bins = 8;
    let (x, w) = gauss_legendre(6);
    let mut expected = vec![0.0; bins * bins];
    for (cell, e) in expected.iter_mut().enumerate() {
        let (i, j) = (cell / bins, cell % bins);
        for (xu, wu) in x.iter().zip(&w) {
            for (xv, wv) in x.iter().zip(&w) {
                let p = [(i as f64 + 0.5 + 0.5 * xu) / bins as f64, (j as f64 + 0.5 + 0.5 * xv) / bins as f64];
                *e += 0.25 * wu * wv * g.kernel_density(&p, &s, &a).unwrap() / (bins * bins) as f64;
            }
        }
    }
    assert!((expected.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    let draws = 100_000;
    let mut counts = vec![0usize; bins * bins];
    let mut r = rng(12);
    for _ in 0..draws {
        let n = g.sample_transition(&s, &a, &mut r);
        let c = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
        counts[c(n[0]) * bins + c(n[1])] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, &e)| (o as f64 - draws as f64 * e).powi(2) / (draws as f64 * e))
        .sum();
    let p = 1.0 - ChiSquared::new((bins * bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn reverse_engineered_bellman_audit_is_small() {
    let spec = small_spec(0.3);
    let g = random_reverse_engineered(spec, ExpectationRule::GaussLegendre { panels: 16, order: 6 }, &mut rng(13)).unwrap();
    let b = g.bellman_audit().unwrap();
    assert!(b < 1e-4, "{b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_reassembles_joint_evaluators(seed in any::<u64>(), bumps in 0usize..3) {
        let spec = GameSpec::new(2, 1, vec![2, 3], 0.7, 1.0).unwrap();
        let g = random_decomposable(spec.clone(), bumps, &mut rng(seed)).unwrap();
        let dec = g.decomposition().unwrap();
        let mut r = rng(seed ^ 1);
        for _ in 0..20 {
            let s = g.sample_initial(&mut r);
            let sn = g.sample_initial(&mut r);
            for ja in 0..spec.joint_actions() {
                let a = spec.decode_action(ja);
                let sum: f64 = (0..2).map(|i| dec.rewards[i].eval(spec.local_state(&s, i), a[i])).sum();
                prop_assert!((g.reward(&s, &a) - sum).abs() <= 1e-12);
                let mix: f64 = (0..2)
                    .map(|i| g.component_density(i, &sn, spec.local_state(&s, i), a[i]).unwrap())
                    .sum::<f64>() / 2.0;
                let p = g.kernel_density(&sn, &s, &a).unwrap();
                prop_assert!((p - mix).abs() <= 1e-12 * p.max(1.0));
            }
        }
    }

    #[test]
    fn rewards_respect_bound_and_samples_stay_in_box(seed in any::<u64>()) {
        let spec = GameSpec::symmetric(2, 2, 2, 0.5, 2.0).unwrap();
        let g = random_decomposable(spec.clone(), 1, &mut rng(seed)).unwrap();
        prop_assert!(g.audit_reward_bound() <= spec.r_max);
        let mut r = rng(seed);
        let s = g.sample_initial(&mut r);
        for ja in 0..4 {
            let a = spec.decode_action(ja);
            let n = g.sample_transition(&s, &a, &mut r);
            prop_assert!(n.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>()) {
        let g = random_decomposable(small_spec(0.5), 2, &mut rng(seed)).unwrap();
        let s = [0.25, 0.75];
        let a = g.sample_transition(&s, &[0, 1], &mut rng(seed ^ 7));
        let b = g.sample_transition(&s, &[0, 1], &mut rng(seed ^ 7));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrip_is_exact(seed in any::<u64>(), reverse in any::<bool>()) {
        let spec = small_spec(0.4);
        let g = if reverse {
            random_reverse_engineered(spec, ExpectationRule::MidpointGrid { resolution: 8 }, &mut rng(seed)).unwrap()
        } else {
            random_decomposable(spec, 2, &mut rng(seed)).unwrap()
        };
        let back = Game::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn action_encoding_roundtrips(sizes in proptest::collection::vec(1usize..4, 1..4)) {
        let spec = GameSpec::new(sizes.len(), 1, sizes.clone(), 0.5, 1.0).unwrap();
        for ja in 0..spec.joint_actions() {
            prop_assert_eq!(spec.encode_action(&spec.decode_action(ja)), ja);
        }
    }
}
