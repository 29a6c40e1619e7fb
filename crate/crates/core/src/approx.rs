//! Two-layer ReLU networks, the additive per-agent critic, least-squares
//! fitting with a path-norm budget, Monte-Carlo projection onto additive
//! functions and the random-feature construction for cosine mixtures.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::scalar::{argmax_lowest, Real};

const NET_MAGIC: &[u8; 8] = b"MAFQINN\0";
const CRITIC_MAGIC: &[u8; 8] = b"MAFQIDQ\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of one output head: `f(x) = Σ_k a_k relu(b_k · x + c_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S> {
    pub a: Vec<S>,
    /// Row-major `width × input_dim`.
    pub b: Vec<S>,
    pub c: Vec<S>,
}

/// Width-`M` two-layer ReLU network with one independent hidden layer per
/// output head and optional output truncation to `[-clamp, clamp]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet<S: Real> {
    input_dim: usize,
    width: usize,
    pub heads: Vec<Head<S>>,
    pub clamp: Option<S>,
}

impl<S: Real> TwoLayerNet<S> {
    pub fn zeros(input_dim: usize, width: usize, heads: usize, clamp: Option<S>) -> Self {
        let head = Head {
            a: vec![S::zero(); width],
            b: vec![S::zero(); width * input_dim],
            c: vec![S::zero(); width],
        };
        TwoLayerNet {
            input_dim,
            width,
            heads: vec![head; heads],
            clamp,
        }
    }

    /// Single-head network from explicit neuron parameters `(a_k, b_k, c_k)`.
    pub fn from_neurons(input_dim: usize, neurons: &[(S, Vec<S>, S)], clamp: Option<S>) -> Result<Self> {
        let mut net = Self::zeros(input_dim, neurons.len(), 1, clamp);
        for (k, (a, b, c)) in neurons.iter().enumerate() {
            if b.len() != input_dim {
                return Err(Error::shape(input_dim, b.len()));
            }
            net.heads[0].a[k] = *a;
            net.heads[0].b[k * input_dim..(k + 1) * input_dim].copy_from_slice(b);
            net.heads[0].c[k] = *c;
        }
        Ok(net)
    }

    /// Random initialization: `b_k` uniform on the unit sphere, `c_k = −b_k·x_k`
    /// with `x_k ~ U[−1,1]^d` so every unit has a kink inside the input box,
    /// and `a_k ~ U(±1/√M)`.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, width: usize, heads: usize, clamp: Option<S>, rng: &mut R) -> Self {
        let mut net = Self::zeros(input_dim, width, heads, clamp);
        let sa = 1.0 / (width as f64).sqrt();
        let mut dir = vec![0.0; input_dim];
        for h in net.heads.iter_mut() {
            for k in 0..width {
                let mut norm = 0.0;
                while norm < 1e-12 {
                    dir.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                let mut c = 0.0;
                for j in 0..input_dim {
                    let b = dir[j] / norm;
                    h.b[k * input_dim + j] = S::of(b);
                    c -= b * rng.random_range(-1.0..1.0);
                }
                h.c[k] = S::of(c);
                h.a[k] = S::of(sa * rng.random_range(-1.0..1.0));
            }
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Untruncated output of `head`.
    pub fn raw(&self, x: &[S], head: usize) -> S {
        let h = &self.heads[head];
        let d = self.input_dim;
        let mut out = S::zero();
        for k in 0..self.width {
            let mut z = h.c[k];
            for j in 0..d {
                z += h.b[k * d + j] * x[j];
            }
            if z > S::zero() {
                out += h.a[k] * z;
            }
        }
        out
    }

    /// Truncated output of `head`.
    pub fn eval(&self, x: &[S], head: usize) -> S {
        let y = self.raw(x, head);
        match self.clamp {
            Some(u) => y.max(-u).min(u),
            None => y,
        }
    }

    pub fn head_path_norm(&self, head: usize) -> S {
        let h = &self.heads[head];
        let d = self.input_dim;
        (0..self.width)
            .map(|k| h.a[k].abs() * (h.b[k * d..(k + 1) * d].iter().map(|x| x.abs()).sum::<S>() + h.c[k].abs()))
            .sum()
    }

    /// `Σ_k |a_k| (‖b_k‖₁ + |c_k|)`, maximized over heads.
    pub fn path_norm(&self) -> S {
        (0..self.heads.len())
            .map(|h| self.head_path_norm(h))
            .fold(S::zero(), S::max)
    }

    /// Scale every head's output weights so its path norm is at most `budget`.
    pub fn enforce_budget(&mut self, budget: S) -> bool {
        let mut changed = false;
        for h in 0..self.heads.len() {
            let pn = self.head_path_norm(h);
            if pn > budget {
                let f = budget / pn;
                self.heads[h].a.iter_mut().for_each(|a| *a *= f);
                changed = true;
            }
        }
        changed
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        self.write_body(&mut w)
    }

    fn write_body<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.input_dim as u32)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.heads.len() as u32)?;
        match self.clamp {
            Some(u) => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(u.to64())?;
            }
            None => {
                w.write_u8(0)?;
                w.write_f64::<LittleEndian>(0.0)?;
            }
        }
        w.write_f64::<LittleEndian>(self.path_norm().to64())?;
        for h in &self.heads {
            for v in h.a.iter().chain(&h.b).chain(&h.c) {
                w.write_f64::<LittleEndian>(v.to64())?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint, re-verifying the stored path norm.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, NET_MAGIC)?;
        Self::read_body(&mut r)
    }

    fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        let input_dim = r.read_u32::<LittleEndian>()? as usize;
        let width = r.read_u32::<LittleEndian>()? as usize;
        let heads = r.read_u32::<LittleEndian>()? as usize;
        let has_clamp = r.read_u8()?;
        let clamp = r.read_f64::<LittleEndian>()?;
        let stored = r.read_f64::<LittleEndian>()?;
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect() };
        let mut raw = Vec::with_capacity(heads);
        for _ in 0..heads {
            raw.push((read(width)?, read(width * input_dim)?, read(width)?));
        }
        let pn = raw
            .iter()
            .map(|(a, b, c)| {
                (0..width)
                    .map(|k| a[k].abs() * (b[k * input_dim..(k + 1) * input_dim].iter().map(|x| x.abs()).sum::<f64>() + c[k].abs()))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        if (pn - stored).abs() > 1e-9 * stored.abs().max(1.0) {
            return Err(Error::Format(format!(
                "stored path norm {stored} does not match parameters ({pn})"
            )));
        }
        let conv = |v: Vec<f64>| v.into_iter().map(S::of).collect();
        Ok(TwoLayerNet {
            input_dim,
            width,
            heads: raw
                .into_iter()
                .map(|(a, b, c)| Head {
                    a: conv(a),
                    b: conv(b),
                    c: conv(c),
                })
                .collect(),
            clamp: (has_clamp == 1).then(|| S::of(clamp)),
        })
    }
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format("unrecognized checkpoint header".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    Ok(())
}

/// A critic of the form `Q(s, a) = Σ_i Q_i(s_i, a_i)`.
pub trait AdditiveCritic: Sync {
    fn agents(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn local_actions(&self, agent: usize) -> usize;
    fn local_value(&self, agent: usize, s_i: &[f64], a_i: usize) -> f64;

    fn local_values(&self, agent: usize, s_i: &[f64]) -> Vec<f64> {
        (0..self.local_actions(agent)).map(|a| self.local_value(agent, s_i, a)).collect()
    }

    fn total(&self, s: &[f64], a: &[usize]) -> f64 {
        let d = self.state_dim();
        (0..self.agents())
            .map(|i| self.local_value(i, &s[i * d..(i + 1) * d], a[i]))
            .sum()
    }

    /// Per-agent argmax, lowest action index on ties.
    fn igm_argmax(&self, s: &[f64]) -> Vec<usize> {
        let d = self.state_dim();
        (0..self.agents())
            .map(|i| argmax_lowest(&self.local_values(i, &s[i * d..(i + 1) * d])))
            .collect()
    }

    /// Argmax by enumerating every joint action (last agent fastest), lowest
    /// joint index on ties.
    fn joint_argmax(&self, s: &[f64]) -> Vec<usize> {
        let sizes: Vec<usize> = (0..self.agents()).map(|i| self.local_actions(i)).collect();
        let mut a = vec![0usize; sizes.len()];
        let mut best = a.clone();
        let mut best_v = f64::NEG_INFINITY;
        loop {
            let v = self.total(s, &a);
            if v > best_v {
                best_v = v;
                best.copy_from_slice(&a);
            }
            let mut i = sizes.len();
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                a[i] += 1;
                if a[i] < sizes[i] {
                    break;
                }
                a[i] = 0;
            }
        }
    }

    /// `max_a Q(s, a)`, computed agent by agent.
    fn max_total(&self, s: &[f64]) -> f64 {
        let d = self.state_dim();
        (0..self.agents())
            .map(|i| {
                self.local_values(i, &s[i * d..(i + 1) * d])
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    /// Largest per-head path norm, when the critic is a network.
    fn path_norm_max(&self) -> Option<f64> {
        None
    }
}

/// Additive critic made of one network per agent, one head per local
/// action. Local states in `[0,1]^d` enter the networks as `2 s_i − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedQ<S: Real> {
    pub nets: Vec<TwoLayerNet<S>>,
    state_dim: usize,
}

impl<S: Real> DecomposedQ<S> {
    pub fn new(nets: Vec<TwoLayerNet<S>>, state_dim: usize) -> Result<Self> {
        if nets.iter().any(|n| n.input_dim != state_dim) {
            return Err(Error::Config("network input dimension differs from state_dim".into()));
        }
        Ok(DecomposedQ { nets, state_dim })
    }

    /// All-zero critic with per-agent clamp `q_max / N`.
    pub fn zeros(spec: &GameSpec, width: usize) -> Self {
        let u = S::of(spec.q_max() / spec.agents as f64);
        DecomposedQ {
            nets: spec
                .actions
                .iter()
                .map(|&na| TwoLayerNet::zeros(spec.state_dim, width, na, Some(u)))
                .collect(),
            state_dim: spec.state_dim,
        }
    }

    pub fn random<R: Rng + ?Sized>(spec: &GameSpec, width: usize, rng: &mut R) -> Self {
        let u = S::of(spec.q_max() / spec.agents as f64);
        DecomposedQ {
            nets: spec
                .actions
                .iter()
                .map(|&na| TwoLayerNet::random(spec.state_dim, width, na, Some(u), rng))
                .collect(),
            state_dim: spec.state_dim,
        }
    }

    pub fn encode_input(&self, s_i: &[f64]) -> Vec<S> {
        s_i.iter().map(|&x| S::of(2.0 * x - 1.0)).collect()
    }

    pub fn path_norm(&self) -> S {
        self.nets.iter().map(|n| n.path_norm()).fold(S::zero(), S::max)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CRITIC_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.nets.len() as u32)?;
        w.write_u32::<LittleEndian>(self.state_dim as u32)?;
        for n in &self.nets {
            n.write_body(&mut w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, CRITIC_MAGIC)?;
        let agents = r.read_u32::<LittleEndian>()? as usize;
        let state_dim = r.read_u32::<LittleEndian>()? as usize;
        let nets = (0..agents)
            .map(|_| TwoLayerNet::read_body(&mut r))
            .collect::<Result<Vec<_>>>()?;
        DecomposedQ::new(nets, state_dim)
    }
}

impl<S: Real> AdditiveCritic for DecomposedQ<S> {
    fn agents(&self) -> usize {
        self.nets.len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn local_actions(&self, agent: usize) -> usize {
        self.nets[agent].num_heads()
    }

    fn local_value(&self, agent: usize, s_i: &[f64], a_i: usize) -> f64 {
        self.nets[agent].eval(&self.encode_input(s_i), a_i).to64()
    }

    fn local_values(&self, agent: usize, s_i: &[f64]) -> Vec<f64> {
        let x = self.encode_input(s_i);
        let net = &self.nets[agent];
        (0..net.num_heads()).map(|a| net.eval(&x, a).to64()).collect()
    }

    fn path_norm_max(&self) -> Option<f64> {
        Some(self.path_norm().to64())
    }
}

/// One regression example for the additive critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub state: Vec<f64>,
    pub action: Vec<usize>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size at the end of the cosine schedule, as a fraction of
    /// `learning_rate`.
    pub final_lr_fraction: f64,
    /// Per-head path-norm budget `B`.
    pub budget: f64,
    /// Penalty weight on `max(0, path_norm − B)²`.
    pub penalty: f64,
    pub seed: u64,
    /// Stop once the relative epoch-loss improvement falls below this
    /// value; zero disables early stopping.
    pub early_stop_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.02,
            final_lr_fraction: 0.05,
            budget: 100.0,
            penalty: 1e-2,
            seed: 0,
            early_stop_tol: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.budget > 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::Config("learning_rate and budget must be positive, penalty nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) || !(self.early_stop_tol >= 0.0) {
            return Err(Error::Config("final_lr_fraction in [0,1] and early_stop_tol >= 0 required".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Mean squared error on the training data after budget enforcement.
    pub final_loss: f64,
    /// Running mean of mini-batch losses per epoch.
    pub epoch_losses: Vec<f64>,
    /// Epochs whose loss exceeded the previous epoch's by more than 1e-9.
    pub loss_increases: usize,
    pub rescaled: bool,
}

struct Grad<S> {
    heads: Vec<Vec<Head<S>>>,
}

/// Mean squared error of the critic on `data`.
pub fn mean_squared_error(critic: &impl AdditiveCritic, data: &[Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter()
        .map(|e| {
            let r = critic.total(&e.state, &e.action) - e.target;
            r * r
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Mini-batch gradient descent on the empirical squared loss, starting
/// from `init`, with a quadratic penalty on per-head path norm above the
/// budget and exact output rescaling into the budget at the end. A head
/// whose output is truncated only receives gradient when the step moves it
/// back toward the untruncated range.
pub fn fit_least_squares<S: Real>(
    data: &[Example],
    cfg: &FitConfig,
    init: &DecomposedQ<S>,
) -> Result<(DecomposedQ<S>, FitStats)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let n_agents = init.agents();
    let d = init.state_dim;
    if let Some(bad) = data.iter().find(|e| {
        e.state.len() != n_agents * d
            || e.action.len() != n_agents
            || e.action.iter().enumerate().any(|(i, &a)| a >= init.local_actions(i))
            || !e.target.is_finite()
    }) {
        return Err(Error::Input(format!("malformed example {bad:?}")));
    }
    let inputs: Vec<Vec<S>> = data.iter().map(|e| init.encode_input(&e.state)).collect();
    let targets: Vec<S> = data.iter().map(|e| S::of(e.target)).collect();

    let mut q = init.clone();
    let mut grad = Grad {
        heads: q
            .nets
            .iter()
            .map(|n| n.heads.iter().map(|h| zero_like(h)).collect())
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches).max(1) as f64;
    let budget = S::of(cfg.budget);
    let mut stats = FitStats {
        final_loss: 0.0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        loss_increases: 0,
        rescaled: false,
    };
    let mut active = vec![true; n_agents];
    let mut raw = vec![S::zero(); n_agents];
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let progress = step as f64 / total_steps;
            let lr = cfg.learning_rate
                * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (PI * progress).cos()));
            for agent in grad.heads.iter_mut() {
                for h in agent.iter_mut() {
                    clear(h);
                }
            }
            let scale = S::of(2.0 / batch.len() as f64);
            let mut batch_loss = S::zero();
            for &j in batch {
                let e = &data[j];
                let x = &inputs[j];
                let mut total = S::zero();
                for (i, net) in q.nets.iter().enumerate() {
                    let y = net.raw(&x[i * d..(i + 1) * d], e.action[i]);
                    raw[i] = y;
                    let clamped = match net.clamp {
                        Some(u) => {
                            active[i] = y.abs() < u;
                            y.max(-u).min(u)
                        }
                        None => {
                            active[i] = true;
                            y
                        }
                    };
                    total += clamped;
                }
                let r = total - targets[j];
                batch_loss += r * r;
                let g = scale * r;
                for (i, net) in q.nets.iter().enumerate() {
                    // saturated heads still receive the step that pulls them back inside
                    if !active[i] && r * raw[i] <= S::zero() {
                        continue;
                    }
                    let xi = &x[i * d..(i + 1) * d];
                    let head = &net.heads[e.action[i]];
                    let gh = &mut grad.heads[i][e.action[i]];
                    for k in 0..net.width {
                        let mut z = head.c[k];
                        for m in 0..d {
                            z += head.b[k * d + m] * xi[m];
                        }
                        if z > S::zero() {
                            gh.a[k] += g * z;
                            let ga = g * head.a[k];
                            gh.c[k] += ga;
                            for m in 0..d {
                                gh.b[k * d + m] += ga * xi[m];
                            }
                        }
                    }
                }
            }
            let batch_loss = batch_loss.to64();
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { iteration: None, step });
            }
            epoch_loss += batch_loss;
            if cfg.penalty > 0.0 {
                for (i, net) in q.nets.iter().enumerate() {
                    for (h, head) in net.heads.iter().enumerate() {
                        let excess = net.head_path_norm(h) - budget;
                        if excess > S::zero() {
                            let w = S::of(2.0 * cfg.penalty) * excess;
                            penalty_grad(head, &mut grad.heads[i][h], d, w);
                        }
                    }
                }
            }
            let lr = S::of(lr);
            for (net, gnet) in q.nets.iter_mut().zip(&grad.heads) {
                for (head, gh) in net.heads.iter_mut().zip(gnet) {
                    axpy(&mut head.a, &gh.a, lr);
                    axpy(&mut head.b, &gh.b, lr);
                    axpy(&mut head.c, &gh.c, lr);
                    if head.a.iter().chain(&head.b).chain(&head.c).any(|v| !v.to64().is_finite()) {
                        return Err(Error::Divergence { iteration: None, step });
                    }
                }
            }
            step += 1;
        }
        let epoch_loss = epoch_loss / data.len() as f64;
        if let Some(&prev) = stats.epoch_losses.last() {
            if epoch_loss > prev + 1e-9 {
                stats.loss_increases += 1;
            }
            stats.epoch_losses.push(epoch_loss);
            if cfg.early_stop_tol > 0.0 && (prev - epoch_loss).abs() <= cfg.early_stop_tol * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        } else {
            stats.epoch_losses.push(epoch_loss);
        }
    }
    for net in q.nets.iter_mut() {
        stats.rescaled |= net.enforce_budget(budget);
    }
    stats.final_loss = mean_squared_error(&q, data);
    if !stats.final_loss.is_finite() {
        return Err(Error::Divergence { iteration: None, step });
    }
    Ok((q, stats))
}

fn zero_like<S: Real>(h: &Head<S>) -> Head<S> {
    Head {
        a: vec![S::zero(); h.a.len()],
        b: vec![S::zero(); h.b.len()],
        c: vec![S::zero(); h.c.len()],
    }
}

fn clear<S: Real>(h: &mut Head<S>) {
    h.a.iter_mut().chain(h.b.iter_mut()).chain(h.c.iter_mut()).for_each(|x| *x = S::zero());
}

fn axpy<S: Real>(p: &mut [S], g: &[S], lr: S) {
    for (x, &gx) in p.iter_mut().zip(g) {
        *x -= lr * gx;
    }
}

fn signum<S: Real>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn penalty_grad<S: Real>(head: &Head<S>, g: &mut Head<S>, d: usize, w: S) {
    for k in 0..head.a.len() {
        let bk = &head.b[k * d..(k + 1) * d];
        let l1 = bk.iter().map(|x| x.abs()).sum::<S>() + head.c[k].abs();
        let abs_a = head.a[k].abs();
        g.a[k] += w * signum(head.a[k]) * l1;
        g.c[k] += w * abs_a * signum(head.c[k]);
        for m in 0..d {
            g.b[k * d + m] += w * abs_a * signum(bk[m]);
        }
    }
}

/// One agent's slice of a joint input: a local state and a local action.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub state: Vec<f64>,
    pub action: usize,
}

/// Product sampling distribution over per-agent blocks.
pub trait SeparableSampler: Sync {
    fn agents(&self) -> usize;
    fn sample_block(&self, agent: usize, rng: &mut ChaCha8Rng) -> Block;
}

/// Uniform local states on `[0,1]^d` and per-agent action weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBlocks {
    pub state_dim: usize,
    /// Per-agent action weights; need not be normalized.
    pub action_weights: Vec<Vec<f64>>,
}

impl UniformBlocks {
    pub fn new(state_dim: usize, actions: &[usize]) -> Self {
        UniformBlocks {
            state_dim,
            action_weights: actions.iter().map(|&n| vec![1.0; n]).collect(),
        }
    }
}

impl SeparableSampler for UniformBlocks {
    fn agents(&self) -> usize {
        self.action_weights.len()
    }

    fn sample_block(&self, agent: usize, rng: &mut ChaCha8Rng) -> Block {
        let state = (0..self.state_dim).map(|_| rng.random::<f64>()).collect();
        let w = &self.action_weights[agent];
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut action = w.len() - 1;
        for (k, &wk) in w.iter().enumerate() {
            if u < wk {
                action = k;
                break;
            }
            u -= wk;
        }
        Block { state, action }
    }
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

fn mean_se(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

/// Monte-Carlo projection of a black-box function of per-agent blocks onto
/// additive functions: `Proj f = Σ_i f_i − (N−1) C` with
/// `f_i(x_i) = E[f(x_i, x_{−i})]` and `C = E[f]`. Every marginal reuses the
/// same `n_mc` joint draws.
pub struct McProjection<F> {
    f: F,
    draws: Vec<Vec<Block>>,
    pub mean: Estimate,
    evals: AtomicUsize,
    budget: Option<usize>,
}

pub fn mc_project_decomposable<F>(
    f: F,
    sampler: &impl SeparableSampler,
    n_mc: usize,
    seed: u64,
    eval_budget: Option<usize>,
) -> Result<McProjection<F>>
where
    F: Fn(&[Block]) -> f64,
{
    if n_mc < 2 {
        return Err(Error::Precondition(format!("n_mc = {n_mc}, need at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<Block>> = (0..n_mc)
        .map(|_| (0..sampler.agents()).map(|i| sampler.sample_block(i, &mut rng)).collect())
        .collect();
    let mut p = McProjection {
        f,
        draws,
        mean: Estimate {
            value: 0.0,
            std_error: 0.0,
        },
        evals: AtomicUsize::new(0),
        budget: eval_budget,
    };
    p.charge(n_mc)?;
    let vals: Vec<f64> = p.draws.iter().map(|x| (p.f)(x)).collect();
    p.mean = mean_se(&vals);
    Ok(p)
}

impl<F: Fn(&[Block]) -> f64> McProjection<F> {
    fn charge(&self, n: usize) -> Result<()> {
        let used = self.evals.fetch_add(n, Ordering::Relaxed) + n;
        match self.budget {
            Some(b) if used > b => Err(Error::BudgetExhausted(b)),
            _ => Ok(()),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn agents(&self) -> usize {
        self.draws[0].len()
    }

    /// `f_i(x_i)` and its standard error.
    pub fn component(&self, agent: usize, x_i: &Block) -> Result<Estimate> {
        self.charge(self.draws.len())?;
        let mut joint = self.draws[0].clone();
        let vals: Vec<f64> = self
            .draws
            .iter()
            .map(|d| {
                joint.clone_from_slice(d);
                joint[agent] = x_i.clone();
                (self.f)(&joint)
            })
            .collect();
        Ok(mean_se(&vals))
    }

    /// Projected value at a joint point; the standard error combines the
    /// component and mean errors as if independent.
    pub fn project(&self, x: &[Block]) -> Result<Estimate> {
        let n = self.agents();
        let mut value = -(n as f64 - 1.0) * self.mean.value;
        let mut var = ((n as f64 - 1.0) * self.mean.std_error).powi(2);
        for (i, xi) in x.iter().enumerate() {
            let e = self.component(i, xi)?;
            value += e.value;
            var += e.std_error.powi(2);
        }
        Ok(Estimate {
            value,
            std_error: var.sqrt(),
        })
    }
}

/// `α cos(⟨ω, x⟩ + φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub frequency: Vec<f64>,
    pub phase: f64,
}

/// `f(x) = offset + Σ_j α_j cos(⟨ω_j, x⟩ + φ_j)` on `[-1, 1]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMixture {
    pub dim: usize,
    pub offset: f64,
    pub terms: Vec<CosineTerm>,
}

impl FrequencyMixture {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.offset
            + self
                .terms
                .iter()
                .map(|t| t.amplitude * (dot(&t.frequency, x) + t.phase).cos())
                .sum::<f64>()
    }

    pub fn gradient_at_zero(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for t in &self.terms {
            for (gj, w) in g.iter_mut().zip(&t.frequency) {
                *gj -= t.amplitude * t.phase.sin() * w;
            }
        }
        g
    }
}

/// Targets accepted by the spectral routines.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralTarget {
    CosineMixture(FrequencyMixture),
    /// Samples on a grid; no closed-form Fourier transform available.
    Tabulated { dim: usize, values: Vec<f64> },
}

fn mixture(target: &SpectralTarget) -> Result<&FrequencyMixture> {
    match target {
        SpectralTarget::CosineMixture(m) => {
            if m.terms.iter().any(|t| t.frequency.len() != m.dim) {
                return Err(Error::Input("frequency vector length differs from dim".into()));
            }
            Ok(m)
        }
        SpectralTarget::Tabulated { .. } => Err(Error::Unsupported(
            "spectral norm needs a cosine-mixture target".into(),
        )),
    }
}

/// `γ(f) = ∫ ‖ω‖₁² |F̂(ω)| dω`, which for a cosine mixture is
/// `Σ_j |α_j| ‖ω_j‖₁²`.
pub fn spectral_norm_gamma(target: &SpectralTarget) -> Result<f64> {
    let m = mixture(target)?;
    Ok(m.terms.iter().map(|t| t.amplitude.abs() * l1(&t.frequency).powi(2)).sum())
}

/// `∫₀¹ |cos(c t + β)| dt` for `c > 0`.
pub fn abs_cos_integral(c: f64, beta: f64) -> f64 {
    let anti = |u: f64| {
        let k = ((u + 0.5 * PI) / PI).floor();
        2.0 * k + (u - k * PI).sin()
    };
    (anti(c + beta) - anti(beta)) / c
}

/// Output of [`barron_monte_carlo_net`].
#[derive(Debug, Clone)]
pub struct BarronNet<S: Real> {
    /// Average of `m` sampled ridge units.
    pub sampled: TwoLayerNet<S>,
    /// `(∇f(0)·x)₊ − (−∇f(0)·x)₊`.
    pub linear: TwoLayerNet<S>,
    /// `f(0)`.
    pub offset: S,
    pub v: f64,
    /// Fraction of rejected proposals in the `t` sampler.
    pub rejection_rate: f64,
}

impl<S: Real> BarronNet<S> {
    pub fn eval(&self, x: &[S]) -> S {
        self.offset + self.linear.raw(x, 0) + self.sampled.raw(x, 0)
    }
}

/// Width-`m` random-feature network for a cosine mixture on `[-1,1]^d`.
///
/// The remainder `f(x) − f(0) − x·∇f(0)` equals
/// `v · E[s (z ω̂·x − t)₊]` under the density proportional to
/// `|F̂(ω)| ‖ω‖₁² |cos(‖ω‖₁ t + z b(ω))|` over masses `ω`, signs `z = ±1`
/// and `t ∈ [0,1]`, with `s = −sign cos(‖ω‖₁ t + z b(ω))`. Each sampled
/// unit has `|a| = v/m`, `‖b‖₁ = 1` and `|c| ≤ 1`.
pub fn barron_monte_carlo_net<S: Real, R: Rng + ?Sized>(
    target: &SpectralTarget,
    m: usize,
    rng: &mut R,
) -> Result<BarronNet<S>> {
    if m == 0 {
        return Err(Error::Input("width must be positive".into()));
    }
    let f = mixture(target)?;
    let d = f.dim;
    // (weight, unit direction, norm, phase, z)
    let mut atoms: Vec<(f64, Vec<f64>, f64, f64, f64)> = Vec::new();
    for t in &f.terms {
        let c = l1(&t.frequency);
        if c == 0.0 || t.amplitude == 0.0 {
            continue;
        }
        let beta = t.phase + if t.amplitude < 0.0 { PI } else { 0.0 };
        let mass = 0.5 * t.amplitude.abs();
        let unit: Vec<f64> = t.frequency.iter().map(|w| w / c).collect();
        for (dir, b) in [(1.0, beta), (-1.0, -beta)] {
            let w_hat: Vec<f64> = unit.iter().map(|u| dir * u).collect();
            for z in [1.0, -1.0] {
                let weight = mass * c * c * abs_cos_integral(c, z * b);
                atoms.push((weight, w_hat.clone(), c, b, z));
            }
        }
    }
    let v: f64 = atoms.iter().map(|a| a.0).sum();
    let mut neurons = Vec::with_capacity(m);
    let mut proposals = 0usize;
    if v > 0.0 {
        for _ in 0..m {
            let mut u = rng.random::<f64>() * v;
            let mut pick = atoms.len() - 1;
            for (k, a) in atoms.iter().enumerate() {
                if u < a.0 {
                    pick = k;
                    break;
                }
                u -= a.0;
            }
            let (_, w_hat, c, b, z) = &atoms[pick];
            let t = loop {
                proposals += 1;
                let t: f64 = rng.random();
                if rng.random::<f64>() < (c * t + z * b).cos().abs() {
                    break t;
                }
            };
            let s = if (c * t + z * b).cos() > 0.0 { -1.0 } else { 1.0 };
            neurons.push((
                S::of(s * v / m as f64),
                w_hat.iter().map(|x| S::of(z * x)).collect(),
                S::of(-t),
            ));
        }
    } else {
        neurons = vec![(S::zero(), vec![S::zero(); d], S::zero()); m];
    }
    let sampled = TwoLayerNet::from_neurons(d, &neurons, None)?;
    let g: Vec<S> = f.gradient_at_zero().into_iter().map(S::of).collect();
    let neg: Vec<S> = g.iter().map(|&x| -x).collect();
    let linear = TwoLayerNet::from_neurons(d, &[(S::one(), g, S::zero()), (-S::one(), neg, S::zero())], None)?;
    Ok(BarronNet {
        sampled,
        linear,
        offset: S::of(f.eval(&vec![0.0; d])),
        v,
        rejection_rate: if proposals == 0 {
            0.0
        } else {
            1.0 - m as f64 / proposals as f64
        },
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}
