use mafqi::approx::{AdditiveCritic, DecomposedQ, Example};
use mafqi::fqi::*;
use mafqi::game::*;
use mafqi::oracle::*;
use mafqi::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn game(gamma: f64, seed: u64) -> Game {
    random_decomposable(GameSpec::symmetric(2, 1, 2, gamma, 1.0).unwrap(), 2, &mut rng(seed)).unwrap()
}

fn small_cfg(iterations: usize, seed: u64) -> FqiConfig {
    let mut cfg = FqiConfig { iterations, samples: 256, width: 8, seed, ..FqiConfig::default() };
    cfg.fit.epochs = 5;
    cfg
}

#[test]
fn single_sample_is_reproducible() {
    let g = game(0.5, 1);
    let sampler = FqiConfig::default().sampler(&g.spec);
    let a = sample_sigma(&g, &sampler, 1, 42);
    assert_eq!(a.len(), 1);
    assert_eq!(a, sample_sigma(&g, &sampler, 1, 42));
}

#[test]
fn uniform_sigma_moments() {
    let g = game(0.5, 2);
    let n = 100_000;
    let batch = sample_sigma(&g, &FqiConfig::default().sampler(&g.spec), n, 3);
    for j in 0..2 {
        let m = batch.iter().map(|t| t.state[j]).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01);
    }
    let mut counts = [0usize; 4];
    for t in &batch {
        counts[g.spec.encode_action(&t.action)] += 1;
        assert!(t.reward.abs() <= g.spec.r_max);
    }
    let e = n as f64 / 4.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    assert!(1.0 - ChiSquared::new(3.0).unwrap().cdf(stat) > 0.01);
}

#[test]
fn zero_critic_and_zero_discount_targets_are_rewards() {
    let g = game(0.7, 4);
    let batch = sample_sigma(&g, &FqiConfig::default().sampler(&g.spec), 200, 5);
    let zero = DecomposedQ::<f64>::zeros(&g.spec, 4);
    let rand_q = DecomposedQ::<f64>::random(&g.spec, 4, &mut rng(6));
    let y0 = compute_targets(&zero, &batch, 0.7, None, ArgmaxRule::Decentralized);
    let y1 = compute_targets(&rand_q, &batch, 0.0, None, ArgmaxRule::Decentralized);
    for ((t, a), b) in batch.iter().zip(y0).zip(y1) {
        assert_eq!(a, t.reward);
        assert_eq!(b, t.reward);
    }
}

#[test]
fn zero_iterations_return_zero_critic() {
    let g = game(0.5, 7);
    let cfg = small_cfg(0, 1);
    let mut fitter = NetworkFitter::<f64>::new(&g.spec, &cfg);
    let out = run_mafqi::<f64, _>(&g, &cfg, &mut fitter, None).unwrap();
    assert!(out.report.records.is_empty());
    assert_eq!(out.policy.act(&[0.3, 0.9]), vec![0, 0]);
    assert_eq!(out.critic.total(&[0.3, 0.9], &[1, 1]), 0.0);
    let mut buf = Vec::new();
    out.report.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().trim(), CONVERGENCE_COLUMNS.join(","));
}

#[test]
fn exact_fitter_reproduces_value_iteration() {
    let g = game(0.9, 8);
    let tg = discretize::<f64>(&g, 16).unwrap();
    let vi = tg.value_iteration(1e-12).unwrap();
    let qstar_norm = vi.q.sup_abs();
    let cfg = FqiConfig { iterations: 20, samples: 16, ..FqiConfig::default() };
    let mut fitter = ExactTabularFitter { tg: &tg };
    let mut reference = tg.zeros();
    let mut worst = 0.0f64;
    let mut k_seen = 0;
    run_mafqi_observed(&g, &cfg, &mut fitter, Some(Audit { tg: &tg, qstar: &vi.q }), |k, critic| {
        reference = tg.bellman_apply(&reference).unwrap();
        let table = tg.tabulate(|s, a| critic.total(s, a));
        worst = worst.max(table.sup_diff(&reference));
        assert!(vi.q.sup_diff(&table) <= 0.9f64.powi(k as i32) * qstar_norm + 1e-8);
        k_seen = k;
    })
    .unwrap();
    assert_eq!(k_seen, 20);
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn heldout_estimator_is_used_without_audit() {
    let g = game(0.5, 9);
    let cfg = small_cfg(2, 2);
    let mut fitter = NetworkFitter::<f64>::new(&g.spec, &cfg);
    let out = run_mafqi::<f64, _>(&g, &cfg, &mut fitter, None).unwrap();
    assert_eq!(out.report.eps_estimator, "heldout");
    assert!(out.report.records.iter().all(|r| r.eps_k.is_finite() && r.sup_err.is_none()));
}

#[test]
fn runs_are_deterministic() {
    let g = game(0.8, 10);
    let tg = discretize::<f64>(&g, 8).unwrap();
    let vi = tg.value_iteration(1e-10).unwrap();
    let cfg = small_cfg(3, 11);
    let run = || {
        let mut fitter = NetworkFitter::<f64>::new(&g.spec, &cfg);
        let out = run_mafqi(&g, &cfg, &mut fitter, Some(Audit { tg: &tg, qstar: &vi.q })).unwrap();
        let mut csv = Vec::new();
        out.report.write_csv(&mut csv).unwrap();
        (out.report, out.critic, csv)
    };
    let (ra, ca, xa) = run();
    let (rb, cb, xb) = run();
    assert_eq!(ra, rb);
    assert_eq!(ca, cb);
    assert_eq!(xa, xb);
}

struct Exploding;

impl CriticFitter for Exploding {
    type Critic = DecomposedQ<f64>;

    fn zero(&self, spec: &GameSpec) -> DecomposedQ<f64> {
        DecomposedQ::zeros(spec, 2)
    }

    fn fit(&mut self, prev: &DecomposedQ<f64>, _data: &[Example], ctx: FitContext) -> Result<(DecomposedQ<f64>, f64)> {
        if ctx.iteration == 3 {
            return Err(Error::Divergence { iteration: None, step: 17 });
        }
        Ok((prev.clone(), 0.0))
    }
}

#[test]
fn divergence_carries_iteration() {
    let g = game(0.5, 12);
    let err = run_mafqi::<f64, _>(&g, &small_cfg(5, 0), &mut Exploding, None).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration: Some(3), step: 17 }), "{err:?}");
}

#[test]
fn invalid_config_is_rejected() {
    let g = game(0.5, 13);
    let mut cfg = small_cfg(1, 0);
    cfg.samples = 0;
    let mut fitter = NetworkFitter::<f64>::new(&g.spec, &cfg);
    assert!(matches!(run_mafqi::<f64, _>(&g, &cfg, &mut fitter, None), Err(Error::Config(_))));
    let bad = r#"{"iterations": 1, "samples": 4, "width": 2, "colour": 1}"#;
    assert!(serde_json::from_str::<FqiConfig>(bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decentralized_targets_match_joint_enumeration(seed in any::<u64>(), gamma in 0.0f64..0.99) {
        let g = random_decomposable(GameSpec::new(2, 1, vec![2, 3], gamma, 1.0).unwrap(), 1, &mut rng(seed)).unwrap();
        let q = DecomposedQ::<f64>::random(&g.spec, 6, &mut rng(seed ^ 1));
        let batch = sample_sigma(&g, &FqiConfig::default().sampler(&g.spec), 64, seed);
        let a = compute_targets(&q, &batch, gamma, Some(g.q_max()), ArgmaxRule::Decentralized);
        let b = compute_targets(&q, &batch, gamma, Some(g.q_max()), ArgmaxRule::Joint);
        prop_assert_eq!(&a, &b);
        let unclamped = compute_targets(&q, &batch, gamma, None, ArgmaxRule::Decentralized);
        prop_assert!(unclamped.iter().all(|y| y.abs() <= g.q_max() * (1.0 + 1e-12)));
    }
}
