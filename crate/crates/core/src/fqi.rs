//! Multi-agent fitted Q-iteration: sample from `σ`, build Bellman targets
//! with decentralized argmax, regress onto additive critics, repeat.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{fit_least_squares, AdditiveCritic, DecomposedQ, Example, FitConfig, SeparableSampler, UniformBlocks};
use crate::error::{Error, Result};
use crate::game::{ExpectationRule, Game, GameSpec};
use crate::oracle::{QTable, Sigma, TabularGame};
use crate::scalar::Real;

/// Column header of the convergence CSV.
pub const CONVERGENCE_COLUMNS: [&str; 7] = [
    "k",
    "train_loss",
    "eps_k",
    "sup_err",
    "l1_mu_err",
    "path_norm_max",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FqiConfig {
    /// Number of iterations `K`.
    pub iterations: usize,
    /// Samples drawn per iteration.
    pub samples: usize,
    /// Hidden width of every per-agent network.
    pub width: usize,
    /// Per-agent action weights of `σ`; uniform when absent. Local states
    /// are always uniform.
    #[serde(default)]
    pub action_weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub target_clamp: bool,
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Fill the `wall_seconds` column; off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn yes() -> bool {
    true
}

impl Default for FqiConfig {
    fn default() -> Self {
        FqiConfig {
            iterations: 10,
            samples: 1024,
            width: 32,
            action_weights: None,
            fit: FitConfig::default(),
            seed: 0,
            target_clamp: true,
            warm_start: true,
            record_wall_time: false,
        }
    }
}

impl FqiConfig {
    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if let Some(w) = &self.action_weights {
            let ok = w.len() == spec.agents
                && w.iter().zip(&spec.actions).all(|(wi, &n)| {
                    wi.len() == n && wi.iter().all(|&x| x >= 0.0 && x.is_finite()) && wi.iter().sum::<f64>() > 0.0
                });
            if !ok {
                return Err(Error::Config("action_weights must give nonnegative weights per agent action".into()));
            }
        }
        self.fit.validate()
    }

    pub fn sampler(&self, spec: &GameSpec) -> UniformBlocks {
        let mut s = UniformBlocks::new(spec.state_dim, &spec.actions);
        if let Some(w) = &self.action_weights {
            s.action_weights = w.clone();
        }
        s
    }
}

/// One observed transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<usize>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Draw `n` i.i.d. transitions with `(s, a) ~ σ`. Sample `j` uses stream
/// `j` of a generator seeded with `seed`, so results do not depend on the
/// thread count.
pub fn sample_sigma(game: &Game, sigma: &UniformBlocks, n: usize, seed: u64) -> Vec<Transition> {
    let spec = &game.spec;
    (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut state = Vec::with_capacity(spec.joint_dim());
            let mut action = Vec::with_capacity(spec.agents);
            for i in 0..spec.agents {
                let b = sigma.sample_block(i, &mut rng);
                state.extend(b.state);
                action.push(b.action);
            }
            let reward = game.reward(&state, &action);
            let next_state = game.sample_transition(&state, &action, &mut rng);
            Transition {
                state,
                action,
                reward,
                next_state,
            }
        })
        .collect()
}

/// How the bootstrap action at `s'` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgmaxRule {
    /// Concatenated per-agent argmaxes.
    Decentralized,
    /// Enumeration of all joint actions.
    Joint,
}

/// `Y_j = R_j + γ Q(s'_j, a*)`, optionally clamped to `±clamp`.
pub fn compute_targets(
    critic: &impl AdditiveCritic,
    batch: &[Transition],
    gamma: f64,
    clamp: Option<f64>,
    rule: ArgmaxRule,
) -> Vec<f64> {
    batch
        .par_iter()
        .map(|t| {
            let y = if gamma == 0.0 {
                t.reward
            } else {
                let a = match rule {
                    ArgmaxRule::Decentralized => critic.igm_argmax(&t.next_state),
                    ArgmaxRule::Joint => critic.joint_argmax(&t.next_state),
                };
                t.reward + gamma * critic.total(&t.next_state, &a)
            };
            match clamp {
                Some(c) => y.clamp(-c, c),
                None => y,
            }
        })
        .collect()
}

/// Per-iteration context handed to a fitter.
#[derive(Debug, Clone, Copy)]
pub struct FitContext {
    pub iteration: usize,
    pub seed: u64,
}

/// Regression step of the iteration.
pub trait CriticFitter {
    type Critic: AdditiveCritic + Clone;

    /// The all-zero critic `Q̃_0`.
    fn zero(&self, spec: &GameSpec) -> Self::Critic;

    /// Fit the next critic; returns it with its training loss.
    fn fit(&mut self, prev: &Self::Critic, data: &[Example], ctx: FitContext) -> Result<(Self::Critic, f64)>;
}

/// Fits per-agent two-layer networks by [`fit_least_squares`].
#[derive(Debug, Clone)]
pub struct NetworkFitter<S: Real> {
    pub spec: GameSpec,
    pub width: usize,
    pub fit: FitConfig,
    pub warm_start: bool,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Real> NetworkFitter<S> {
    pub fn new(spec: &GameSpec, cfg: &FqiConfig) -> Self {
        NetworkFitter {
            spec: spec.clone(),
            width: cfg.width,
            fit: cfg.fit.clone(),
            warm_start: cfg.warm_start,
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<S: Real> CriticFitter for NetworkFitter<S> {
    type Critic = DecomposedQ<S>;

    fn zero(&self, spec: &GameSpec) -> DecomposedQ<S> {
        DecomposedQ::zeros(spec, self.width)
    }

    fn fit(&mut self, prev: &DecomposedQ<S>, data: &[Example], ctx: FitContext) -> Result<(DecomposedQ<S>, f64)> {
        let init = if self.warm_start && ctx.iteration > 1 {
            prev.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            rng.set_stream(1);
            DecomposedQ::random(&self.spec, self.width, &mut rng)
        };
        let cfg = FitConfig {
            seed: ctx.seed,
            ..self.fit.clone()
        };
        let (q, stats) = fit_least_squares(data, &cfg, &init)?;
        Ok((q, stats.final_loss))
    }
}

/// Additive critic stored as per-agent tables over `(local cell, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCritic {
    pub resolution: usize,
    pub state_dim: usize,
    pub actions: Vec<usize>,
    pub components: Vec<Vec<f64>>,
}

impl TabularCritic {
    fn cell(&self, s_i: &[f64]) -> usize {
        s_i.iter().fold(0, |acc, &x| {
            acc * self.resolution + ((x * self.resolution as f64).floor().max(0.0) as usize).min(self.resolution - 1)
        })
    }
}

impl AdditiveCritic for TabularCritic {
    fn agents(&self) -> usize {
        self.actions.len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn local_actions(&self, agent: usize) -> usize {
        self.actions[agent]
    }

    fn local_value(&self, agent: usize, s_i: &[f64], a_i: usize) -> f64 {
        self.components[agent][self.cell(s_i) * self.actions[agent] + a_i]
    }
}

/// Test fitter that ignores the data and returns the exact projection of
/// the tabular Bellman image of the previous critic. On a decomposable game
/// this reproduces value iteration from zero.
#[derive(Debug, Clone)]
pub struct ExactTabularFitter<'a, S: Real> {
    pub tg: &'a TabularGame<S>,
}

impl<S: Real> CriticFitter for ExactTabularFitter<'_, S> {
    type Critic = TabularCritic;

    fn zero(&self, spec: &GameSpec) -> TabularCritic {
        TabularCritic {
            resolution: self.tg.resolution,
            state_dim: spec.state_dim,
            actions: spec.actions.clone(),
            components: spec
                .actions
                .iter()
                .map(|&n| vec![0.0; n * self.tg.local_nodes()])
                .collect(),
        }
    }

    fn fit(&mut self, prev: &TabularCritic, data: &[Example], _ctx: FitContext) -> Result<(TabularCritic, f64)> {
        let table = self.tg.tabulate(|s, a| S::of(prev.total(s, a)));
        let tq = self.tg.bellman_apply(&table)?;
        let proj = self.tg.exact_decomposable_projection(&tq, &Sigma::Uniform)?;
        let next = TabularCritic {
            components: proj
                .components
                .iter()
                .map(|c| c.iter().map(|x| x.to64()).collect())
                .collect(),
            ..prev.clone()
        };
        let loss = crate::approx::mean_squared_error(&next, data);
        Ok((next, loss))
    }
}

/// Tabular ground truth used to audit each iterate.
#[derive(Debug, Clone, Copy)]
pub struct Audit<'a, S: Real> {
    pub tg: &'a TabularGame<S>,
    pub qstar: &'a QTable<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub train_loss: f64,
    /// `‖T Q̃_{k−1} − Q̃_k‖_σ`.
    pub eps_k: f64,
    /// `‖Q* − Q̃_k‖∞` on the audit grid.
    pub sup_err: Option<f64>,
    /// `‖Q* − Q^{π_k}‖_{1,μ}` with `μ` uniform on the audit grid.
    pub l1_mu_err: Option<f64>,
    pub path_norm_max: Option<f64>,
    pub wall_seconds: Option<f64>,
    /// `‖Q̃_k − Proj(T Q̃_{k−1})‖∞` on the audit grid.
    pub proj_eps_sup: Option<f64>,
    /// `‖Q* − Q^{π_k}‖∞` on the audit grid.
    pub policy_gap_sup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub gamma: f64,
    pub agents: usize,
    pub r_max: f64,
    /// `"grid"` when `ε_k` is computed on the audit grid, `"heldout"` when
    /// estimated on a fresh `σ` sample.
    pub eps_estimator: String,
    pub records: Vec<IterationRecord>,
}

impl ConvergenceReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CONVERGENCE_COLUMNS)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.k.to_string(),
                r.train_loss.to_string(),
                r.eps_k.to_string(),
                opt(r.sup_err),
                opt(r.l1_mu_err),
                opt(r.path_norm_max),
                opt(r.wall_seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Largest `ε_k`.
    pub fn eps_max(&self) -> f64 {
        self.records.iter().map(|r| r.eps_k).fold(0.0, f64::max)
    }
}

/// Product of per-agent greedy rules.
#[derive(Debug, Clone)]
pub struct GreedyJointPolicy<C> {
    pub critic: C,
}

impl<C: AdditiveCritic> GreedyJointPolicy<C> {
    pub fn act(&self, s: &[f64]) -> Vec<usize> {
        self.critic.igm_argmax(s)
    }
}

#[derive(Debug, Clone)]
pub struct FqiOutcome<C> {
    pub critic: C,
    pub policy: GreedyJointPolicy<C>,
    pub report: ConvergenceReport,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for iteration `k` and purpose tag `tag`.
pub fn derive_seed(seed: u64, k: usize, tag: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(k as u64)) ^ tag)
}

pub fn run_mafqi<S: Real, F: CriticFitter>(
    game: &Game,
    cfg: &FqiConfig,
    fitter: &mut F,
    audit: Option<Audit<'_, S>>,
) -> Result<FqiOutcome<F::Critic>> {
    run_mafqi_observed(game, cfg, fitter, audit, |_, _| {})
}

/// As [`run_mafqi`], calling `observe(k, &Q̃_k)` after every fit.
pub fn run_mafqi_observed<S: Real, F: CriticFitter>(
    game: &Game,
    cfg: &FqiConfig,
    fitter: &mut F,
    audit: Option<Audit<'_, S>>,
    mut observe: impl FnMut(usize, &F::Critic),
) -> Result<FqiOutcome<F::Critic>> {
    let spec = &game.spec;
    cfg.validate(spec)?;
    if let Some(a) = &audit {
        if a.tg.spec.agents != spec.agents || a.tg.spec.actions != spec.actions || a.tg.spec.state_dim != spec.state_dim {
            return Err(Error::Config("audit grid does not match the game".into()));
        }
        if a.qstar.nodes != a.tg.nodes() || a.qstar.actions != a.tg.joint_actions() {
            return Err(Error::shape("Q* shaped like the audit grid", format!("{} x {}", a.qstar.nodes, a.qstar.actions)));
        }
    }
    let sampler = cfg.sampler(spec);
    let gamma = spec.gamma;
    let q_max = spec.q_max();
    let clamp = cfg.target_clamp.then_some(q_max);
    let mut critic = fitter.zero(spec);
    let mut report = ConvergenceReport {
        gamma,
        agents: spec.agents,
        r_max: spec.r_max,
        eps_estimator: if audit.is_some() { "grid" } else { "heldout" }.to_string(),
        records: Vec::with_capacity(cfg.iterations),
    };
    let grid_sigma = audit.map(|a| grid_sigma(a.tg, &sampler));
    let mut prev_table = audit.map(|a| a.tg.tabulate(|s, act| S::of(critic.total(s, act))));

    for k in 1..=cfg.iterations {
        let start = Instant::now();
        let batch = sample_sigma(game, &sampler, cfg.samples, derive_seed(cfg.seed, k, 1));
        let targets = compute_targets(&critic, &batch, gamma, clamp, ArgmaxRule::Decentralized);
        let examples: Vec<Example> = batch
            .into_iter()
            .zip(targets)
            .map(|(t, y)| Example {
                state: t.state,
                action: t.action,
                target: y,
            })
            .collect();
        let ctx = FitContext {
            iteration: k,
            seed: derive_seed(cfg.seed, k, 2),
        };
        let (next, train_loss) = fitter.fit(&critic, &examples, ctx).map_err(|e| match e {
            Error::Divergence { step, .. } => Error::Divergence {
                iteration: Some(k),
                step,
            },
            other => other,
        })?;
        let wall = start.elapsed().as_secs_f64();
        observe(k, &next);

        let mut record = IterationRecord {
            k,
            train_loss,
            eps_k: 0.0,
            sup_err: None,
            l1_mu_err: None,
            path_norm_max: next.path_norm_max(),
            wall_seconds: cfg.record_wall_time.then_some(wall),
            proj_eps_sup: None,
            policy_gap_sup: None,
        };
        if let (Some(a), Some(prev_tab), Some((weights, sigma))) = (&audit, &prev_table, &grid_sigma) {
            let tg = a.tg;
            let cur = tg.tabulate(|s, act| S::of(next.total(s, act)));
            let tq = tg.bellman_apply(prev_tab)?;
            let mut acc = 0.0;
            for ((&t, &c), &w) in tq.values.iter().zip(&cur.values).zip(weights) {
                acc += w * (t - c).to64().powi(2);
            }
            record.eps_k = acc.sqrt();
            let proj = tg.exact_decomposable_projection(&tq, sigma)?;
            record.proj_eps_sup = Some(cur.sup_diff(&proj.table).to64());
            record.sup_err = Some(a.qstar.sup_diff(&cur).to64());
            let q_pi = tg.policy_eval(&cur.greedy())?;
            record.policy_gap_sup = Some(a.qstar.sup_diff(&q_pi).to64());
            record.l1_mu_err = Some(a.qstar.mean_abs_diff(&q_pi).to64());
            prev_table = Some(cur);
        } else {
            record.eps_k = heldout_eps(game, &sampler, &critic, &next, cfg.samples, derive_seed(cfg.seed, k, 3));
        }
        report.records.push(record);
        critic = next;
    }
    Ok(FqiOutcome {
        policy: GreedyJointPolicy { critic: critic.clone() },
        critic,
        report,
    })
}

fn grid_sigma<S: Real>(tg: &TabularGame<S>, sampler: &UniformBlocks) -> (Vec<f64>, Sigma) {
    let marg: Vec<Vec<f64>> = sampler
        .action_weights
        .iter()
        .map(|w| {
            let t: f64 = w.iter().sum();
            w.iter().map(|x| x / t).collect()
        })
        .collect();
    let ja = tg.joint_actions();
    let ln = tg.local_nodes() as f64;
    let weights = (0..tg.nodes() * ja)
        .map(|row| {
            let a = row % ja;
            (0..marg.len()).map(|i| marg[i][tg.local_action(i, a)] / ln).product()
        })
        .collect();
    let separable = marg
        .iter()
        .map(|m| (0..tg.local_nodes()).flat_map(|_| m.iter().map(|&x| x / ln)).collect())
        .collect();
    (weights, Sigma::Separable(separable))
}

fn heldout_eps(
    game: &Game,
    sampler: &UniformBlocks,
    prev: &impl AdditiveCritic,
    next: &impl AdditiveCritic,
    n: usize,
    seed: u64,
) -> f64 {
    let rule = ExpectationRule::GaussLegendre { panels: 8, order: 4 };
    let batch = sample_sigma(game, sampler, n, seed);
    let total: f64 = batch
        .par_iter()
        .map(|t| {
            let cont = game.expect_additive(&t.state, &t.action, &rule, |i, x| {
                prev.local_values(i, x).into_iter().fold(f64::NEG_INFINITY, f64::max)
            });
            let tq = t.reward + game.spec.gamma * cont;
            (tq - next.total(&t.state, &t.action)).powi(2)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    (total / n as f64).sqrt()
}
