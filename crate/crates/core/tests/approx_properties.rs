use mafqi::approx::*;
use mafqi::game::GameSpec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Net whose head `h` outputs the constant `values[h]`.
fn constant_net(values: &[f64], clamp: f64) -> TwoLayerNet<f64> {
    let mut net = TwoLayerNet::zeros(1, 1, values.len(), Some(clamp));
    for (h, &v) in values.iter().enumerate() {
        net.heads[h].a[0] = v;
        net.heads[h].c[0] = 1.0;
    }
    net
}

fn cosine(amplitude: f64, frequency: Vec<f64>, phase: f64, offset: f64) -> SpectralTarget {
    SpectralTarget::CosineMixture(FrequencyMixture {
        dim: frequency.len(),
        offset,
        terms: vec![CosineTerm { amplitude, frequency, phase }],
    })
}

#[test]
fn decomposed_sum_and_argmax() {
    let q = DecomposedQ::new(vec![constant_net(&[0.1, 0.9], 5.0), constant_net(&[0.5, 0.2], 5.0)], 1).unwrap();
    let s = [0.3, 0.6];
    assert_eq!(q.igm_argmax(&s), vec![1, 0]);
    assert_eq!(q.joint_argmax(&s), vec![1, 0]);
    let q2 = DecomposedQ::new(vec![constant_net(&[0.3, 0.3], 5.0), constant_net(&[-0.1, -0.1], 5.0)], 1).unwrap();
    assert!((q2.total(&s, &[1, 0]) - 0.2).abs() < 1e-15);
    assert_eq!(q2.igm_argmax(&s), vec![0, 0]);
    let z = DecomposedQ::<f64>::zeros(&GameSpec::symmetric(3, 2, 2, 0.5, 1.0).unwrap(), 8);
    assert_eq!(z.total(&[0.1; 6], &[1, 0, 1]), 0.0);
}

#[test]
fn spectral_norm_examples() {
    assert_eq!(spectral_norm_gamma(&cosine(1.0, vec![1.0], 0.0, 0.0)).unwrap(), 1.0);
    assert_eq!(spectral_norm_gamma(&cosine(3.0, vec![1.0, 2.0], 0.0, 0.0)).unwrap(), 27.0);
    assert_eq!(spectral_norm_gamma(&cosine(0.0, vec![1.0], 0.0, 0.0)).unwrap(), 0.0);
    assert!(matches!(
        spectral_norm_gamma(&SpectralTarget::Tabulated { dim: 1, values: vec![0.0] }),
        Err(mafqi::Error::Unsupported(_))
    ));
}

#[test]
fn barron_zero_target_gives_zero_net() {
    let net = barron_monte_carlo_net::<f64, _>(&cosine(0.0, vec![1.0], 0.0, 0.0), 16, &mut rng(1)).unwrap();
    assert_eq!(net.v, 0.0);
    for x in [-1.0, -0.3, 0.0, 0.8] {
        assert_eq!(net.eval(&[x]), 0.0);
    }
}

#[test]
fn barron_wide_net_meets_rate() {
    let target = cosine(1.0, vec![1.0], 0.0, -1.0);
    let g = spectral_norm_gamma(&target).unwrap();
    let f = |x: f64| x.cos() - 1.0;
    let m = 4096;
    let mut r = rng(2);
    let xs: Vec<f64> = (0..2000).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut mean = 0.0;
    for seed in 0..50 {
        let net = barron_monte_carlo_net::<f64, _>(&target, m, &mut rng(100 + seed)).unwrap();
        assert!(net.sampled.path_norm() <= 4.0 * g + 1e-12);
        mean += xs.iter().map(|&x| (net.eval(&[x]) - f(x)).powi(2)).sum::<f64>() / xs.len() as f64;
    }
    mean /= 50.0;
    assert!(mean <= 16.0 * g * g / m as f64, "{mean}");
}

#[test]
fn fit_zero_targets_from_zero_init_stays_zero() {
    let spec = GameSpec::symmetric(2, 1, 2, 0.5, 1.0).unwrap();
    let init = DecomposedQ::<f64>::zeros(&spec, 8);
    let mut r = rng(3);
    let data: Vec<Example> = (0..64)
        .map(|_| Example { state: vec![r.random(), r.random()], action: vec![r.random_range(0..2), r.random_range(0..2)], target: 0.0 })
        .collect();
    let (q, stats) = fit_least_squares(&data, &FitConfig::default(), &init).unwrap();
    assert_eq!(stats.final_loss, 0.0);
    assert_eq!(q.path_norm(), 0.0);
}

fn teacher_data(n: usize, seed: u64) -> (GameSpec, Vec<Example>) {
    let spec = GameSpec::symmetric(1, 1, 1, 0.0, 10.0).unwrap();
    let teacher = TwoLayerNet::<f64>::random(1, 4, 1, None, &mut rng(seed));
    let mut r = rng(seed ^ 9);
    let data = (0..n)
        .map(|_| {
            let s: f64 = r.random();
            Example { state: vec![s], action: vec![0], target: teacher.raw(&[2.0 * s - 1.0], 0) }
        })
        .collect();
    (spec, data)
}

#[test]
fn student_fits_teacher() {
    let (spec, data) = teacher_data(1024, 4);
    let init = DecomposedQ::<f64>::random(&spec, 64, &mut rng(5));
    let (q, stats) = fit_least_squares(&data, &FitConfig::default(), &init).unwrap();
    assert!(stats.final_loss <= 1e-3, "{}", stats.final_loss);
    assert!((mean_squared_error(&q, &data) - stats.final_loss).abs() < 1e-12);
}

#[test]
fn fitting_is_deterministic_and_respects_budget() {
    let (spec, data) = teacher_data(256, 6);
    let init = DecomposedQ::<f64>::random(&spec, 16, &mut rng(7));
    let cfg = FitConfig { epochs: 20, budget: 0.5, ..FitConfig::default() };
    let (a, _) = fit_least_squares(&data, &cfg, &init).unwrap();
    let (b, _) = fit_least_squares(&data, &cfg, &init).unwrap();
    assert_eq!(a, b);
    assert!(a.path_norm() <= 0.5 * (1.0 + 1e-12));
    assert!(matches!(fit_least_squares(&[], &cfg, &init), Err(mafqi::Error::Input(_))));
}

#[test]
fn diverging_fit_reports_step() {
    let (spec, mut data) = teacher_data(64, 8);
    data.iter_mut().for_each(|e| e.target = 1e300);
    let init = DecomposedQ::<f64>::random(&spec, 8, &mut rng(9));
    let mut q = init.clone();
    q.nets[0].clamp = None;
    let err = fit_least_squares(&data, &FitConfig::default(), &q).unwrap_err();
    assert!(matches!(err, mafqi::Error::Divergence { .. }), "{err:?}");
}

#[test]
fn monte_carlo_projection_of_product() {
    let sampler = UniformBlocks::new(1, &[1, 1]);
    let f = |x: &[Block]| x[0].state[0] * x[1].state[0];
    let p = mc_project_decomposable(f, &sampler, 100_000, 1, None).unwrap();
    assert!((p.mean.value - 0.25).abs() < 0.003);
    for x in [0.1, 0.5, 0.9] {
        let c = p.component(0, &Block { state: vec![x], action: 0 }).unwrap();
        assert!((c.value - x / 2.0).abs() < 4.0 * c.std_error + 1e-3);
    }
    assert!(matches!(
        mc_project_decomposable(f, &sampler, 1, 1, None),
        Err(mafqi::Error::Precondition(_))
    ));
    assert!(matches!(
        mc_project_decomposable(f, &sampler, 100, 1, Some(50)),
        Err(mafqi::Error::BudgetExhausted(50))
    ));
}

#[test]
fn monte_carlo_projection_fixes_additive_functions() {
    let sampler = UniformBlocks::new(1, &[2, 2]);
    let f = |x: &[Block]| (3.0 * x[0].state[0]).sin() + x[0].action as f64 - x[1].state[0].powi(2) * (1.0 + x[1].action as f64);
    let p = mc_project_decomposable(f, &sampler, 2000, 2, None).unwrap();
    let mut r = rng(10);
    for _ in 0..20 {
        let x: Vec<Block> = (0..2).map(|_| Block { state: vec![r.random()], action: r.random_range(0..2) }).collect();
        let e = p.project(&x).unwrap();
        assert!((e.value - f(&x)).abs() <= 3.0 * e.std_error + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn path_norm_dominates_lipschitz_ratio(seed in any::<u64>(), dim in 1usize..4) {
        let net = TwoLayerNet::<f64>::random(dim, 16, 1, None, &mut rng(seed));
        let pn = net.path_norm();
        let mut r = rng(seed ^ 1);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let d = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!((net.raw(&x, 0) - net.raw(&y, 0)).abs() <= pn * d + 1e-12);
        }
    }

    #[test]
    fn truncated_outputs_stay_in_range(seed in any::<u64>()) {
        let spec = GameSpec::symmetric(3, 1, 2, 0.9, 1.0).unwrap();
        let mut q = DecomposedQ::<f64>::random(&spec, 8, &mut rng(seed));
        q.nets.iter_mut().for_each(|n| n.heads.iter_mut().for_each(|h| h.a.iter_mut().for_each(|a| *a *= 100.0)));
        let mut r = rng(seed ^ 2);
        for _ in 0..100 {
            let s: Vec<f64> = (0..3).map(|_| r.random()).collect();
            let a: Vec<usize> = (0..3).map(|_| r.random_range(0..2)).collect();
            prop_assert!(q.total(&s, &a).abs() <= spec.q_max() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn decentralized_argmax_matches_enumeration(seed in any::<u64>()) {
        let spec = GameSpec::symmetric(3, 2, 3, 0.5, 1.0).unwrap();
        let q = DecomposedQ::<f64>::random(&spec, 6, &mut rng(seed));
        let mut r = rng(seed ^ 3);
        for _ in 0..10 {
            let s: Vec<f64> = (0..6).map(|_| r.random()).collect();
            prop_assert_eq!(q.igm_argmax(&s), q.joint_argmax(&s));
        }
    }

    #[test]
    fn permuting_agents_preserves_total(seed in any::<u64>()) {
        let spec = GameSpec::symmetric(2, 1, 2, 0.5, 1.0).unwrap();
        let q = DecomposedQ::<f64>::random(&spec, 6, &mut rng(seed));
        let swapped = DecomposedQ::new(vec![q.nets[1].clone(), q.nets[0].clone()], 1).unwrap();
        let mut r = rng(seed ^ 4);
        let s: Vec<f64> = vec![r.random(), r.random()];
        let a = vec![r.random_range(0..2), r.random_range(0..2)];
        prop_assert_eq!(q.total(&s, &a), swapped.total(&[s[1], s[0]], &[a[1], a[0]]));
    }

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>()) {
        let spec = GameSpec::new(2, 2, vec![2, 3], 0.5, 1.0).unwrap();
        let q = DecomposedQ::<f64>::random(&spec, 5, &mut rng(seed));
        let mut buf = Vec::new();
        q.write_checkpoint(&mut buf).unwrap();
        prop_assert_eq!(DecomposedQ::<f64>::read_checkpoint(&buf[..]).unwrap(), q);
    }

    #[test]
    fn barron_path_norm_is_bounded(seed in any::<u64>(), m in 1usize..64, amp in -2.0f64..2.0, w0 in -3.0f64..3.0, w1 in -3.0f64..3.0, phase in -3.0f64..3.0) {
        let target = cosine(amp, vec![w0, w1], phase, 0.0);
        let g = spectral_norm_gamma(&target).unwrap();
        let net = barron_monte_carlo_net::<f64, _>(&target, m, &mut rng(seed)).unwrap();
        prop_assert!(net.v <= 2.0 * g + 1e-12);
        prop_assert!(net.sampled.path_norm() <= 4.0 * g + 1e-12);
    }
}
