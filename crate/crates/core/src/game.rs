//! Cooperative Markov games on per-agent state boxes `[0,1]^d` with finite
//! per-agent action sets.
//!
//! A joint state is stored agent-major: coordinate `j` of agent `i` lives at
//! index `i * d + j`. Joint actions are slices of per-agent action indices.
//! Every transition kernel in this module is a finite mixture of product
//! measures over the `N·d` coordinates, which gives exact sampling, cheap
//! density evaluation and exact discretization from a single description.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{CompositeRule, TruncNormal};

/// Current version of the JSON game document.
pub const GAME_SCHEMA_VERSION: u32 = 1;

const NORMALIZATION_TOL: f64 = 1e-6;
const MAX_AUDIT_POINTS: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameKind {
    Decomposable,
    ReverseEngineered,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub agents: usize,
    pub state_dim: usize,
    pub actions: Vec<usize>,
    pub gamma: f64,
    pub r_max: f64,
    pub kind: GameKind,
}

impl GameSpec {
    pub fn new(agents: usize, state_dim: usize, actions: Vec<usize>, gamma: f64, r_max: f64) -> Result<Self> {
        let spec = GameSpec {
            agents,
            state_dim,
            actions,
            gamma,
            r_max,
            kind: GameKind::Generic,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same action count for every agent.
    pub fn symmetric(agents: usize, state_dim: usize, actions: usize, gamma: f64, r_max: f64) -> Result<Self> {
        Self::new(agents, state_dim, vec![actions; agents], gamma, r_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Config("agents must be at least 1".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be at least 1".into()));
        }
        if self.actions.len() != self.agents {
            return Err(Error::Config(format!(
                "actions lists {} agents, expected {}",
                self.actions.len(),
                self.agents
            )));
        }
        if self.actions.iter().any(|&a| a == 0) {
            return Err(Error::Config("every agent needs at least one action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} outside [0, 1)", self.gamma)));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::Config(format!("r_max = {} must be positive and finite", self.r_max)));
        }
        Ok(())
    }

    pub fn q_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// Length of a joint state vector.
    pub fn joint_dim(&self) -> usize {
        self.agents * self.state_dim
    }

    pub fn joint_actions(&self) -> usize {
        self.actions.iter().product()
    }

    /// Row-major joint action index, last agent varying fastest.
    pub fn encode_action(&self, a: &[usize]) -> usize {
        a.iter().zip(&self.actions).fold(0, |acc, (&ai, &n)| acc * n + ai)
    }

    pub fn decode_action(&self, mut idx: usize) -> Vec<usize> {
        let mut a = vec![0; self.agents];
        for i in (0..self.agents).rev() {
            a[i] = idx % self.actions[i];
            idx /= self.actions[i];
        }
        a
    }

    pub fn local_state<'a>(&self, s: &'a [f64], agent: usize) -> &'a [f64] {
        &s[agent * self.state_dim..(agent + 1) * self.state_dim]
    }
}

/// Per-agent function of `(s_i, a_i)`, used for reward components and for
/// the components of an exact additive Q-function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LocalFn {
    Zero { actions: usize },
    /// `slope[a] · s_i + bias[a]`
    Linear { slope: Vec<Vec<f64>>, bias: Vec<f64> },
    /// `amp[a] · cos(freq[a] · s_i + phase[a]) + offset[a]`
    Cosine {
        amp: Vec<f64>,
        freq: Vec<Vec<f64>>,
        phase: Vec<f64>,
        offset: Vec<f64>,
    },
}

impl LocalFn {
    /// Action-dependent constant.
    pub fn constant(state_dim: usize, values: Vec<f64>) -> Self {
        LocalFn::Linear {
            slope: vec![vec![0.0; state_dim]; values.len()],
            bias: values,
        }
    }

    pub fn actions(&self) -> usize {
        match self {
            LocalFn::Zero { actions } => *actions,
            LocalFn::Linear { bias, .. } => bias.len(),
            LocalFn::Cosine { amp, .. } => amp.len(),
        }
    }

    pub fn eval(&self, s: &[f64], a: usize) -> f64 {
        match self {
            LocalFn::Zero { .. } => 0.0,
            LocalFn::Linear { slope, bias } => dot(&slope[a], s) + bias[a],
            LocalFn::Cosine {
                amp,
                freq,
                phase,
                offset,
            } => amp[a] * (dot(&freq[a], s) + phase[a]).cos() + offset[a],
        }
    }

    /// Upper bound on `|f|` over the box (exact for linear functions).
    pub fn sup_abs(&self) -> f64 {
        match self {
            LocalFn::Zero { .. } => 0.0,
            LocalFn::Linear { slope, bias } => slope
                .iter()
                .zip(bias)
                .map(|(w, &b)| {
                    let hi: f64 = w.iter().map(|&x| x.max(0.0)).sum::<f64>() + b;
                    let lo: f64 = w.iter().map(|&x| x.min(0.0)).sum::<f64>() + b;
                    hi.abs().max(lo.abs())
                })
                .fold(0.0, f64::max),
            LocalFn::Cosine { amp, offset, .. } => amp
                .iter()
                .zip(offset)
                .map(|(a, o)| a.abs() + o.abs())
                .fold(0.0, f64::max),
        }
    }

    /// Lipschitz constant with respect to the sup norm on `s_i`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            LocalFn::Zero { .. } => 0.0,
            LocalFn::Linear { slope, .. } => slope.iter().map(|w| l1(w)).fold(0.0, f64::max),
            LocalFn::Cosine { amp, freq, .. } => amp
                .iter()
                .zip(freq)
                .map(|(a, w)| a.abs() * l1(w))
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self, state_dim: usize, actions: usize) -> Result<()> {
        if self.actions() != actions {
            return Err(Error::Config(format!(
                "local function has {} actions, expected {actions}",
                self.actions()
            )));
        }
        let check = |rows: &Vec<Vec<f64>>, what: &str| {
            if rows.len() != actions || rows.iter().any(|r| r.len() != state_dim) {
                return Err(Error::Config(format!("{what} must be {actions} x {state_dim}")));
            }
            Ok(())
        };
        match self {
            LocalFn::Zero { .. } => Ok(()),
            LocalFn::Linear { slope, .. } => check(slope, "slope"),
            LocalFn::Cosine {
                freq, phase, offset, ..
            } => {
                if phase.len() != actions || offset.len() != actions {
                    return Err(Error::Config("cosine phase/offset length mismatch".into()));
                }
                check(freq, "freq")
            }
        }
    }

    fn finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            LocalFn::Zero { .. } => true,
            LocalFn::Linear { slope, bias } => all(bias) && slope.iter().all(|r| all(r)),
            LocalFn::Cosine {
                amp,
                freq,
                phase,
                offset,
            } => all(amp) && all(phase) && all(offset) && freq.iter().all(|r| all(r)),
        }
    }
}

/// Exact additive function `Σ_i f_i(s_i, a_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFn {
    pub components: Vec<LocalFn>,
}

impl AdditiveFn {
    pub fn eval(&self, spec: &GameSpec, s: &[f64], a: &[usize]) -> f64 {
        self.components
            .iter()
            .enumerate()
            .map(|(i, f)| f.eval(spec.local_state(s, i), a[i]))
            .sum()
    }

    /// `max_{a_i} f_i(s_i, a_i)`.
    pub fn local_max(&self, agent: usize, s_i: &[f64]) -> f64 {
        let f = &self.components[agent];
        (0..f.actions()).map(|a| f.eval(s_i, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_a Σ_i f_i(s_i, a_i)`, which separates across agents.
    pub fn max_value(&self, spec: &GameSpec, s: &[f64]) -> f64 {
        (0..self.components.len())
            .map(|i| self.local_max(i, spec.local_state(s, i)))
            .sum()
    }

    pub fn sup_abs(&self) -> f64 {
        self.components.iter().map(LocalFn::sup_abs).sum()
    }

    fn validate(&self, spec: &GameSpec) -> Result<()> {
        if self.components.len() != spec.agents {
            return Err(Error::Config(format!(
                "{} additive components for {} agents",
                self.components.len(),
                spec.agents
            )));
        }
        for (f, &n) in self.components.iter().zip(&spec.actions) {
            f.validate(spec.state_dim, n)?;
        }
        Ok(())
    }
}

/// One-dimensional factor of a product measure on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor1D {
    Uniform,
    Normal(TruncNormal),
    Point(f64),
}

impl Factor1D {
    pub fn pdf(&self, x: f64) -> Option<f64> {
        match self {
            Factor1D::Uniform => Some(if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 }),
            Factor1D::Normal(tn) => Some(tn.pdf(x)),
            Factor1D::Point(_) => None,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Factor1D::Uniform => rng.random::<f64>(),
            Factor1D::Normal(tn) => tn.quantile(rng.random::<f64>()),
            Factor1D::Point(x) => *x,
        }
    }

    /// Cell weights on the midpoint grid with `res` cells: the density at
    /// the cell midpoints, renormalized to sum to one. Point masses snap to
    /// the cell that contains them.
    pub fn midpoint_weights(&self, res: usize) -> MidpointWeights {
        match self {
            Factor1D::Uniform => MidpointWeights::Uniform,
            Factor1D::Point(x) => MidpointWeights::OneHot(cell_of(*x, res)),
            Factor1D::Normal(tn) => {
                let raw: Vec<f64> = (0..res)
                    .map(|k| {
                        let z = (midpoint(k, res) - tn.mu) / tn.sigma;
                        (-0.5 * z * z).exp()
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                if total > 0.0 && total.is_finite() {
                    MidpointWeights::Dense(raw.into_iter().map(|w| w / total).collect())
                } else {
                    MidpointWeights::OneHot(cell_of(tn.mu, res))
                }
            }
        }
    }
}

/// Discretized one-dimensional factor.
#[derive(Debug, Clone, PartialEq)]
pub enum MidpointWeights {
    Uniform,
    Dense(Vec<f64>),
    OneHot(usize),
}

impl MidpointWeights {
    pub fn weight(&self, k: usize, res: usize) -> f64 {
        match self {
            MidpointWeights::Uniform => 1.0 / res as f64,
            MidpointWeights::Dense(w) => w[k],
            MidpointWeights::OneHot(j) => {
                if *j == k {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn midpoint(k: usize, res: usize) -> f64 {
    (k as f64 + 0.5) / res as f64
}

pub(crate) fn cell_of(x: f64, res: usize) -> usize {
    ((x * res as f64).floor().max(0.0) as usize).min(res - 1)
}

/// Weighted product measure over all `N·d` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTerm {
    pub weight: f64,
    pub factors: Vec<Factor1D>,
}

impl ProductTerm {
    fn density(&self, x: &[f64]) -> Option<f64> {
        let mut p = self.weight;
        for (f, &xi) in self.factors.iter().zip(x) {
            p *= f.pdf(xi)?;
        }
        Some(p)
    }
}

/// Truncated product-Gaussian bump whose center moves with the owning
/// agent's local state: `center_j = offset_j + gain_j · s_i[j mod d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub weight: f64,
    pub offset: Vec<f64>,
    pub gain: Vec<f64>,
    pub width: Vec<f64>,
}

/// Per-agent kernel component: a full probability density over the joint
/// box that depends only on `(s_i, a_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentKernel {
    pub uniform_weight: f64,
    /// `bumps[a_i]` lists the mixture bumps used under local action `a_i`.
    pub bumps: Vec<Vec<Bump>>,
}

impl AgentKernel {
    pub fn uniform(actions: usize) -> Self {
        AgentKernel {
            uniform_weight: 1.0,
            bumps: vec![Vec::new(); actions],
        }
    }

    pub fn terms(&self, s_i: &[f64], a_i: usize, scale: f64) -> Vec<ProductTerm> {
        let joint_dim = self
            .bumps
            .iter()
            .flatten()
            .map(|b| b.offset.len())
            .next()
            .unwrap_or(0);
        self.terms_with_dim(s_i, a_i, scale, joint_dim)
    }

    fn terms_with_dim(&self, s_i: &[f64], a_i: usize, scale: f64, joint_dim: usize) -> Vec<ProductTerm> {
        let d = s_i.len();
        let mut out = Vec::with_capacity(1 + self.bumps[a_i].len());
        if self.uniform_weight > 0.0 {
            out.push(ProductTerm {
                weight: scale * self.uniform_weight,
                factors: vec![Factor1D::Uniform; joint_dim],
            });
        }
        for b in &self.bumps[a_i] {
            let factors = (0..joint_dim)
                .map(|j| {
                    let mu = (b.offset[j] + b.gain[j] * s_i[j % d]).clamp(0.0, 1.0);
                    Factor1D::Normal(TruncNormal { mu, sigma: b.width[j] })
                })
                .collect();
            out.push(ProductTerm {
                weight: scale * b.weight,
                factors,
            });
        }
        out
    }

    fn validate(&self, spec: &GameSpec, agent: usize) -> Result<()> {
        let n = spec.joint_dim();
        let na = spec.actions[agent];
        let bad = |msg: String| Err(Error::InvalidKernel(format!("agent {agent}: {msg}")));
        if self.bumps.len() != na {
            return bad(format!("{} bump lists for {na} actions", self.bumps.len()));
        }
        if !(self.uniform_weight >= 0.0) {
            return bad("negative uniform weight".into());
        }
        for (a, bumps) in self.bumps.iter().enumerate() {
            let mut total = self.uniform_weight;
            for b in bumps {
                if b.offset.len() != n || b.gain.len() != n || b.width.len() != n {
                    return bad(format!("bump vectors must have length {n}"));
                }
                if !(b.weight >= 0.0) {
                    return bad("negative bump weight".into());
                }
                if b.width.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                    return bad("bump widths must be positive".into());
                }
                for j in 0..n {
                    let (lo, hi) = (b.offset[j], b.offset[j] + b.gain[j]);
                    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                        return bad(format!("bump center leaves [0,1] in coordinate {j}"));
                    }
                }
                total += b.weight;
            }
            if (total - 1.0).abs() > 1e-12 {
                return bad(format!("mixture weights for action {a} sum to {total}"));
            }
        }
        // quadrature normalization at the audit nodes of the local state
        let rule = CompositeRule::new(0.0, 1.0, 64, 8);
        let res = audit_resolution(spec.state_dim, 1);
        let mut s_i = vec![0.0; spec.state_dim];
        for node in 0..res.pow(spec.state_dim as u32) {
            grid_point(node, res, &mut s_i);
            for a in 0..na {
                for term in self.terms_with_dim(&s_i, a, 1.0, n) {
                    let mass: f64 = term
                        .factors
                        .iter()
                        .map(|f| rule.integrate(|x| f.pdf(x).unwrap_or(0.0)))
                        .product();
                    if (mass - 1.0).abs() > NORMALIZATION_TOL {
                        return bad(format!(
                            "component density integrates to {mass} at s_i = {s_i:?}, a_i = {a}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMap {
    /// Every coordinate `j` is centered at `Π_i s_i[j mod d]`.
    Product,
    /// Coordinate `j` is centered at `s[j]`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelModel {
    /// Next state uniform on the joint box.
    Uniform,
    /// Next state equals the current state.
    Identity,
    /// Uniform mixture `(1/N) Σ_i density_i(· | s_i, a_i)`.
    Mixture { components: Vec<AgentKernel> },
    /// Truncated Gaussian around a center that couples all agents, shifted
    /// by `action_shift · ([all actions agree] − 1/2)`, mixed with the
    /// uniform density.
    Coupled {
        center: CenterMap,
        width: f64,
        uniform_weight: f64,
        action_shift: f64,
    },
}

impl KernelModel {
    pub fn terms(&self, spec: &GameSpec, s: &[f64], a: &[usize]) -> Vec<ProductTerm> {
        let n = spec.joint_dim();
        match self {
            KernelModel::Uniform => vec![ProductTerm {
                weight: 1.0,
                factors: vec![Factor1D::Uniform; n],
            }],
            KernelModel::Identity => vec![ProductTerm {
                weight: 1.0,
                factors: s.iter().map(|&x| Factor1D::Point(x)).collect(),
            }],
            KernelModel::Mixture { components } => {
                let scale = 1.0 / spec.agents as f64;
                let mut out = Vec::new();
                for (i, c) in components.iter().enumerate() {
                    out.extend(c.terms_with_dim(spec.local_state(s, i), a[i], scale, n));
                }
                out
            }
            KernelModel::Coupled {
                center,
                width,
                uniform_weight,
                action_shift,
            } => {
                let d = spec.state_dim;
                let agree = a.iter().all(|&x| x == a[0]);
                let shift = action_shift * (if agree { 0.5 } else { -0.5 });
                let factors = (0..n)
                    .map(|j| {
                        let base = match center {
                            CenterMap::Product => (0..spec.agents).map(|i| s[i * d + j % d]).product(),
                            CenterMap::Identity => s[j],
                        };
                        Factor1D::Normal(TruncNormal {
                            mu: (base + shift).clamp(0.0, 1.0),
                            sigma: *width,
                        })
                    })
                    .collect();
                let mut out = Vec::with_capacity(2);
                if *uniform_weight > 0.0 {
                    out.push(ProductTerm {
                        weight: *uniform_weight,
                        factors: vec![Factor1D::Uniform; n],
                    });
                }
                if *uniform_weight < 1.0 {
                    out.push(ProductTerm {
                        weight: 1.0 - uniform_weight,
                        factors,
                    });
                }
                out
            }
        }
    }

    fn validate(&self, spec: &GameSpec) -> Result<()> {
        match self {
            KernelModel::Uniform | KernelModel::Identity => Ok(()),
            KernelModel::Mixture { components } => {
                if components.len() != spec.agents {
                    return Err(Error::Config(format!(
                        "{} kernel components for {} agents",
                        components.len(),
                        spec.agents
                    )));
                }
                for (i, c) in components.iter().enumerate() {
                    c.validate(spec, i)?;
                }
                Ok(())
            }
            KernelModel::Coupled {
                width, uniform_weight, ..
            } => {
                if !(0.0..=1.0).contains(uniform_weight) {
                    return Err(Error::InvalidKernel("uniform_weight outside [0,1]".into()));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(Error::InvalidKernel("coupled width must be positive".into()));
                }
                let rule = CompositeRule::new(0.0, 1.0, 64, 8);
                for mu in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let tn = TruncNormal { mu, sigma: *width };
                    let mass = rule.integrate(|x| tn.pdf(x));
                    if (mass - 1.0).abs() > NORMALIZATION_TOL {
                        return Err(Error::InvalidKernel(format!(
                            "coupled factor integrates to {mass} at center {mu}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// How the reverse-engineered reward evaluates `E_{s'}[max_a Q*(s', a)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ExpectationRule {
    /// Midpoint nodes with the same per-factor weights the tabular
    /// discretization uses, so the oracle at this resolution recovers `Q*`
    /// to machine precision.
    MidpointGrid { resolution: usize },
    GaussLegendre { panels: usize, order: usize },
    MonteCarlo { draws: usize, seed: u64 },
}

impl Default for ExpectationRule {
    fn default() -> Self {
        ExpectationRule::MidpointGrid { resolution: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RewardModel {
    Additive { components: Vec<LocalFn> },
    /// `scale` when all agents choose the same action index, else 0.
    Xnor { scale: f64 },
    /// Additive part plus `scale · Π_i s_i[0]` when all actions agree.
    Interaction { components: Vec<LocalFn>, scale: f64 },
    /// `R = Q* − γ E[max_a' Q*(s', a')]`.
    FromOptimalQ { qstar: AdditiveFn, rule: ExpectationRule },
}

/// Borrowed view of the per-agent decomposition of a game.
#[derive(Debug, Clone, Copy)]
pub struct Decomposition<'a> {
    pub rewards: &'a [LocalFn],
    pub kernels: &'a [AgentKernel],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub spec: GameSpec,
    pub reward: RewardModel,
    pub kernel: KernelModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDocument {
    pub schema_version: u32,
    pub game: Game,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Game {
    /// Decomposable game from per-agent `(reward, kernel)` pairs.
    pub fn decomposable(mut spec: GameSpec, components: Vec<(LocalFn, AgentKernel)>) -> Result<Game> {
        spec.validate()?;
        if components.len() != spec.agents {
            return Err(Error::Config(format!(
                "{} component pairs for {} agents",
                components.len(),
                spec.agents
            )));
        }
        let bound = spec.r_max / spec.agents as f64;
        for (i, (r, _)) in components.iter().enumerate() {
            r.validate(spec.state_dim, spec.actions[i])?;
            let m = r.sup_abs();
            if m > bound * (1.0 + 1e-12) {
                return Err(Error::BoundViolation {
                    max_abs: m,
                    r_max: bound,
                });
            }
        }
        let (rewards, kernels): (Vec<_>, Vec<_>) = components.into_iter().unzip();
        spec.kind = GameKind::Decomposable;
        Game::from_parts(
            spec,
            RewardModel::Additive { components: rewards },
            KernelModel::Mixture { components: kernels },
        )
    }

    /// Game whose optimal Q-function is the supplied additive `qstar`.
    pub fn reverse_engineered(
        mut spec: GameSpec,
        qstar: AdditiveFn,
        kernel: KernelModel,
        rule: ExpectationRule,
    ) -> Result<Game> {
        spec.validate()?;
        qstar.validate(&spec)?;
        let bound = qstar.sup_abs();
        if bound > spec.q_max() {
            return Err(Error::Precondition(format!(
                "qstar bound {bound} exceeds q_max = {}",
                spec.q_max()
            )));
        }
        spec.kind = GameKind::ReverseEngineered;
        Game::from_parts(spec, RewardModel::FromOptimalQ { qstar, rule }, kernel)
    }

    pub fn generic(mut spec: GameSpec, reward: RewardModel, kernel: KernelModel) -> Result<Game> {
        spec.kind = GameKind::Generic;
        Game::from_parts(spec, reward, kernel)
    }

    /// Validating constructor shared by all builders and by deserialization.
    pub fn from_parts(spec: GameSpec, reward: RewardModel, kernel: KernelModel) -> Result<Game> {
        spec.validate()?;
        match (&spec.kind, &reward, &kernel) {
            (GameKind::Decomposable, RewardModel::Additive { .. }, KernelModel::Mixture { .. }) => {}
            (GameKind::Decomposable, _, _) => {
                return Err(Error::Config(
                    "decomposable games need an additive reward and a mixture kernel".into(),
                ))
            }
            (GameKind::ReverseEngineered, RewardModel::FromOptimalQ { .. }, _) => {}
            (GameKind::ReverseEngineered, _, _) => {
                return Err(Error::Config("reverse-engineered games need a from_optimal_q reward".into()))
            }
            _ => {}
        }
        match &reward {
            RewardModel::Additive { components } | RewardModel::Interaction { components, .. } => {
                AdditiveFn {
                    components: components.clone(),
                }
                .validate(&spec)?;
                if components.iter().any(|f| !f.finite()) {
                    return Err(Error::Config("non-finite reward parameter".into()));
                }
            }
            RewardModel::FromOptimalQ { qstar, rule } => {
                qstar.validate(&spec)?;
                match *rule {
                    ExpectationRule::MidpointGrid { resolution } if resolution == 0 => {
                        return Err(Error::Config("expectation resolution must be positive".into()))
                    }
                    ExpectationRule::GaussLegendre { panels, order } if panels == 0 || order == 0 => {
                        return Err(Error::Config("quadrature panels and order must be positive".into()))
                    }
                    ExpectationRule::MonteCarlo { draws, .. } if draws == 0 => {
                        return Err(Error::Config("Monte-Carlo draws must be positive".into()))
                    }
                    _ => {}
                }
            }
            RewardModel::Xnor { .. } => {}
        }
        kernel.validate(&spec)?;
        let game = Game { spec, reward, kernel };
        let worst = game.audit_reward_bound();
        if worst > game.spec.r_max * (1.0 + 1e-12) {
            return Err(Error::BoundViolation {
                max_abs: worst,
                r_max: game.spec.r_max,
            });
        }
        Ok(game)
    }

    pub fn q_max(&self) -> f64 {
        self.spec.q_max()
    }

    pub fn decomposition(&self) -> Option<Decomposition<'_>> {
        match (&self.reward, &self.kernel) {
            (RewardModel::Additive { components: r }, KernelModel::Mixture { components: k }) => {
                Some(Decomposition { rewards: r, kernels: k })
            }
            _ => None,
        }
    }

    pub fn reward(&self, s: &[f64], a: &[usize]) -> f64 {
        let spec = &self.spec;
        match &self.reward {
            RewardModel::Additive { components } => components
                .iter()
                .enumerate()
                .map(|(i, f)| f.eval(spec.local_state(s, i), a[i]))
                .sum(),
            RewardModel::Xnor { scale } => {
                if a.iter().all(|&x| x == a[0]) {
                    *scale
                } else {
                    0.0
                }
            }
            RewardModel::Interaction { components, scale } => {
                let base: f64 = components
                    .iter()
                    .enumerate()
                    .map(|(i, f)| f.eval(spec.local_state(s, i), a[i]))
                    .sum();
                let agree = a.iter().all(|&x| x == a[0]);
                let prod: f64 = (0..spec.agents).map(|i| s[i * spec.state_dim]).product();
                base + if agree { scale * prod } else { 0.0 }
            }
            RewardModel::FromOptimalQ { qstar, rule } => {
                let next = self.expect_additive(s, a, rule, |i, x| qstar.local_max(i, x));
                qstar.eval(spec, s, a) - spec.gamma * next
            }
        }
    }

    /// Mixture-of-products description of `P(· | s, a)`.
    pub fn kernel_terms(&self, s: &[f64], a: &[usize]) -> Vec<ProductTerm> {
        self.kernel.terms(&self.spec, s, a)
    }

    /// Terms of agent `i`'s kernel component, unscaled (total weight one).
    pub fn component_terms(&self, agent: usize, s_i: &[f64], a_i: usize) -> Option<Vec<ProductTerm>> {
        match &self.kernel {
            KernelModel::Mixture { components } => {
                Some(components[agent].terms_with_dim(s_i, a_i, 1.0, self.spec.joint_dim()))
            }
            _ => None,
        }
    }

    /// Density of `s_next` under `P(· | s, a)`; `None` for kernels with
    /// point masses.
    pub fn kernel_density(&self, s_next: &[f64], s: &[f64], a: &[usize]) -> Option<f64> {
        let mut p = 0.0;
        for t in self.kernel_terms(s, a) {
            p += t.density(s_next)?;
        }
        Some(p)
    }

    pub fn component_density(&self, agent: usize, s_next: &[f64], s_i: &[f64], a_i: usize) -> Option<f64> {
        let mut p = 0.0;
        for t in self.component_terms(agent, s_i, a_i)? {
            p += t.density(s_next)?;
        }
        Some(p)
    }

    /// Draw `s' ~ P(· | s, a)`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[f64], a: &[usize], rng: &mut R) -> Vec<f64> {
        let terms = self.kernel_terms(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = terms.len() - 1;
        for (k, t) in terms.iter().enumerate() {
            acc += t.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        terms[chosen].factors.iter().map(|f| f.sample(rng)).collect()
    }

    /// Draw from the initial distribution (uniform on the joint box).
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.spec.joint_dim()).map(|_| rng.random::<f64>()).collect()
    }

    /// `E_{s' ~ P(·|s,a)} [Σ_i f(i, s'_i)]` under the given rule.
    pub fn expect_additive(
        &self,
        s: &[f64],
        a: &[usize],
        rule: &ExpectationRule,
        f: impl Fn(usize, &[f64]) -> f64,
    ) -> f64 {
        let spec = &self.spec;
        let d = spec.state_dim;
        if let ExpectationRule::MonteCarlo { draws, seed } = *rule {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_point(s, a));
            let mut total = 0.0;
            for _ in 0..draws {
                let next = self.sample_transition(s, a, &mut rng);
                total += (0..spec.agents).map(|i| f(i, spec.local_state(&next, i))).sum::<f64>();
            }
            return total / draws as f64;
        }
        let gl = match *rule {
            ExpectationRule::GaussLegendre { panels, order } => Some(CompositeRule::new(0.0, 1.0, panels, order)),
            _ => None,
        };
        let mut total = 0.0;
        let mut x = vec![0.0; d];
        for term in self.kernel_terms(s, a) {
            for i in 0..spec.agents {
                let axes: Vec<(Vec<f64>, Vec<f64>)> = term.factors[i * d..(i + 1) * d]
                    .iter()
                    .map(|fac| axis_rule(fac, rule, gl.as_ref()))
                    .collect();
                total += term.weight * tensor_expectation(&axes, &mut x, |x| f(i, x));
            }
        }
        total
    }

    /// Largest `|R|` over the audit grid.
    pub fn audit_reward_bound(&self) -> f64 {
        let spec = &self.spec;
        let res = audit_resolution(spec.joint_dim(), spec.joint_actions());
        let mut s = vec![0.0; spec.joint_dim()];
        let mut worst = 0.0f64;
        for node in 0..res.pow(spec.joint_dim() as u32) {
            grid_point(node, res, &mut s);
            for ja in 0..spec.joint_actions() {
                let a = spec.decode_action(ja);
                let r = self.reward(&s, &a);
                worst = worst.max(if r.is_finite() { r.abs() } else { f64::INFINITY });
            }
        }
        worst
    }

    /// For reverse-engineered games: the largest `|R + γ E[V*] − Q*|` on the
    /// audit grid with the expectation computed by a fine reference rule,
    /// i.e. the Bellman-optimality residual of `qstar` caused by the
    /// reward's quadrature rule.
    pub fn bellman_audit(&self) -> Option<f64> {
        let RewardModel::FromOptimalQ { qstar, .. } = &self.reward else {
            return None;
        };
        let spec = &self.spec;
        let reference = ExpectationRule::GaussLegendre { panels: 64, order: 8 };
        let res = audit_resolution(spec.joint_dim(), spec.joint_actions());
        let mut s = vec![0.0; spec.joint_dim()];
        let mut worst = 0.0f64;
        for node in 0..res.pow(spec.joint_dim() as u32) {
            grid_point(node, res, &mut s);
            for ja in 0..spec.joint_actions() {
                let a = spec.decode_action(ja);
                let next = self.expect_additive(&s, &a, &reference, |i, x| qstar.local_max(i, x));
                let residual = self.reward(&s, &a) + spec.gamma * next - qstar.eval(spec, &s, &a);
                worst = worst.max(residual.abs());
            }
        }
        Some(worst)
    }

    pub fn to_document(&self) -> GameDocument {
        GameDocument {
            schema_version: GAME_SCHEMA_VERSION,
            game: self.clone(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Game> {
        Ok(GameDocument::from_json(text)?.game)
    }
}

impl GameDocument {
    /// Parse and re-validate a game document.
    pub fn from_json(text: &str) -> Result<GameDocument> {
        let doc: GameDocument = serde_json::from_str(text)?;
        if doc.schema_version != GAME_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported game schema version {}",
                doc.schema_version
            )));
        }
        let g = doc.game;
        let game = Game::from_parts(g.spec, g.reward, g.kernel)?;
        Ok(GameDocument {
            schema_version: doc.schema_version,
            game,
            provenance: doc.provenance,
        })
    }
}

fn axis_rule(fac: &Factor1D, rule: &ExpectationRule, gl: Option<&CompositeRule>) -> (Vec<f64>, Vec<f64>) {
    match (fac, rule) {
        (Factor1D::Point(x), ExpectationRule::MidpointGrid { resolution }) => {
            (vec![midpoint(cell_of(*x, *resolution), *resolution)], vec![1.0])
        }
        (Factor1D::Point(x), _) => (vec![*x], vec![1.0]),
        (_, ExpectationRule::MidpointGrid { resolution }) => {
            let r = *resolution;
            let w = fac.midpoint_weights(r);
            let nodes = (0..r).map(|k| midpoint(k, r)).collect();
            let weights = (0..r).map(|k| w.weight(k, r)).collect();
            (nodes, weights)
        }
        (_, _) => {
            let gl = gl.expect("quadrature rule prepared");
            let mut weights: Vec<f64> = gl
                .nodes
                .iter()
                .zip(&gl.weights)
                .map(|(&x, &w)| w * fac.pdf(x).unwrap_or(0.0))
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            (gl.nodes.clone(), weights)
        }
    }
}

fn tensor_expectation(axes: &[(Vec<f64>, Vec<f64>)], x: &mut [f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let d = axes.len();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for j in 0..d {
            x[j] = axes[j].0[idx[j]];
            w *= axes[j].1[idx[j]];
        }
        if w != 0.0 {
            total += w * f(x);
        }
        let mut j = d;
        loop {
            if j == 0 {
                return total;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < axes[j].0.len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

fn hash_point(s: &[f64], a: &[usize]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    let mut mix = |v: u64| {
        h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    };
    s.iter().for_each(|x| mix(x.to_bits()));
    a.iter().for_each(|&x| mix(x as u64));
    h
}

/// Per-dimension resolution of the audit grid: 16 unless the grid would
/// exceed a fixed point budget.
pub fn audit_resolution(dims: usize, actions: usize) -> usize {
    let mut res = 16usize;
    while res > 2 && (res as f64).powi(dims as i32) * actions as f64 > MAX_AUDIT_POINTS as f64 {
        res -= 1;
    }
    res
}

/// Midpoint coordinates of flat grid index `node`, first coordinate slowest.
pub fn grid_point(mut node: usize, res: usize, out: &mut [f64]) {
    for j in (0..out.len()).rev() {
        out[j] = midpoint(node % res, res);
        node /= res;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

fn random_local_fn<R: Rng + ?Sized>(state_dim: usize, actions: usize, bound: f64, rng: &mut R) -> LocalFn {
    let f = if rng.random::<bool>() {
        LocalFn::Linear {
            slope: (0..actions)
                .map(|_| (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            bias: (0..actions).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    } else {
        LocalFn::Cosine {
            amp: (0..actions).map(|_| rng.random_range(0.2..1.0)).collect(),
            freq: (0..actions)
                .map(|_| (0..state_dim).map(|_| rng.random_range(-6.0..6.0)).collect())
                .collect(),
            phase: (0..actions).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
            offset: (0..actions).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    };
    let m = f.sup_abs();
    if m == 0.0 {
        return f;
    }
    let k = bound / m;
    match f {
        LocalFn::Linear { slope, bias } => LocalFn::Linear {
            slope: slope.into_iter().map(|w| w.into_iter().map(|x| x * k).collect()).collect(),
            bias: bias.into_iter().map(|x| x * k).collect(),
        },
        LocalFn::Cosine {
            amp,
            freq,
            phase,
            offset,
        } => LocalFn::Cosine {
            amp: amp.into_iter().map(|x| x * k).collect(),
            freq,
            phase,
            offset: offset.into_iter().map(|x| x * k).collect(),
        },
        z => z,
    }
}

fn random_agent_kernel<R: Rng + ?Sized>(joint_dim: usize, actions: usize, bumps: usize, rng: &mut R) -> AgentKernel {
    let uniform_weight = if bumps == 0 { 1.0 } else { rng.random_range(0.1..0.5) };
    let w = (1.0 - uniform_weight) / bumps.max(1) as f64;
    let bumps = (0..actions)
        .map(|_| {
            (0..bumps)
                .map(|_| {
                    let mut offset = Vec::with_capacity(joint_dim);
                    let mut gain = Vec::with_capacity(joint_dim);
                    for _ in 0..joint_dim {
                        let (o, e): (f64, f64) = (rng.random(), rng.random());
                        offset.push(o);
                        gain.push(e - o);
                    }
                    Bump {
                        weight: w,
                        offset,
                        gain,
                        width: (0..joint_dim).map(|_| rng.random_range(0.05..0.3)).collect(),
                    }
                })
                .collect()
        })
        .collect();
    AgentKernel { uniform_weight, bumps }
}

/// Random decomposable game: each agent gets a linear or cosine reward
/// with sup norm `0.9 r_max / N` and a kernel mixing the uniform density
/// with `bumps` state-following bumps per action.
pub fn random_decomposable<R: Rng + ?Sized>(spec: GameSpec, bumps: usize, rng: &mut R) -> Result<Game> {
    spec.validate()?;
    let bound = 0.9 * spec.r_max / spec.agents as f64;
    let components = (0..spec.agents)
        .map(|i| {
            let r = random_local_fn(spec.state_dim, spec.actions[i], bound, rng);
            (r, random_agent_kernel(spec.joint_dim(), spec.actions[i], bumps, rng))
        })
        .collect();
    Game::decomposable(spec, components)
}

/// Random reverse-engineered game: additive `Q*` with sup norm
/// `0.9 r_max / (1+γ)` and a coupled kernel centered on the coordinate
/// products.
pub fn random_reverse_engineered<R: Rng + ?Sized>(spec: GameSpec, rule: ExpectationRule, rng: &mut R) -> Result<Game> {
    spec.validate()?;
    let bound = 0.9 * spec.r_max / ((1.0 + spec.gamma) * spec.agents as f64);
    let qstar = AdditiveFn {
        components: (0..spec.agents)
            .map(|i| random_local_fn(spec.state_dim, spec.actions[i], bound, rng))
            .collect(),
    };
    let kernel = KernelModel::Coupled {
        center: CenterMap::Product,
        width: rng.random_range(0.1..0.3),
        uniform_weight: rng.random_range(0.1..0.4),
        action_shift: rng.random_range(0.0..0.4),
    };
    Game::reverse_engineered(spec, qstar, kernel, rule)
}
