//! Brute-force ground truth on midpoint-grid discretizations of a [`Game`].
//!
//! Grid nodes are indexed row-major over the `N·d` joint coordinates (agent
//! 0 first). Q-tables are node-major: entry `(node, a)` lives at
//! `node * joint_actions + a`, with joint actions encoded as in
//! [`GameSpec::encode_action`]. Ties in row maxima go to the lowest joint
//! action index, which coincides with the per-agent lowest-index rule.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{grid_point, midpoint, Factor1D, Game, GameKind, GameSpec, MidpointWeights, ProductTerm};
use crate::scalar::{argmax_lowest, Real};

/// Default cap on stored table entries.
pub const DEFAULT_MEMORY_CAP: u128 = 1 << 28;

const QTABLE_MAGIC: &[u8; 8] = b"MAFQIQT\0";
const QTABLE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
enum Factor<S> {
    Uniform,
    Dense(Vec<S>),
    OneHot(usize),
}

#[derive(Debug, Clone)]
struct Term<S> {
    weight: S,
    factors: Vec<Factor<S>>,
}

#[derive(Debug, Clone)]
enum Transitions<S> {
    /// One mixture per `(node, joint action)` row.
    Joint(Vec<Vec<Term<S>>>),
    /// Per agent, one mixture per `(local node, local action)`; the joint
    /// row is the uniform average over agents.
    Averaged(Vec<Vec<Vec<Term<S>>>>),
}

/// Midpoint-grid discretization of a game.
#[derive(Debug, Clone)]
pub struct TabularGame<S: Real> {
    pub spec: GameSpec,
    pub resolution: usize,
    nodes: usize,
    local_nodes: usize,
    joint_actions: usize,
    gamma: S,
    rewards: Vec<S>,
    transitions: Transitions<S>,
    /// Worst deviation from one of the midpoint-rule mass of any density
    /// factor before renormalization.
    pub renormalization_error: f64,
    local_index: Vec<Vec<usize>>,
    action_index: Vec<Vec<usize>>,
}

/// Discretize with the default memory cap.
pub fn discretize<S: Real>(game: &Game, resolution: usize) -> Result<TabularGame<S>> {
    discretize_with_cap(game, resolution, DEFAULT_MEMORY_CAP)
}

pub fn discretize_with_cap<S: Real>(game: &Game, resolution: usize, cap: u128) -> Result<TabularGame<S>> {
    let spec = game.spec.clone();
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let dims = spec.joint_dim();
    let ja = spec.joint_actions();
    let nodes_big = (resolution as u128).checked_pow(dims as u32).unwrap_or(u128::MAX);
    let entries = nodes_big.saturating_mul(ja as u128);
    let averaged = spec.kind == GameKind::Decomposable && game.decomposition().is_some();
    let transition_entries = if averaged {
        (resolution as u128).pow(spec.state_dim as u32) * spec.actions.iter().sum::<usize>() as u128 * 4
    } else {
        entries.saturating_mul(2 * dims as u128 * resolution as u128)
    };
    let required = entries.max(transition_entries);
    if required > cap {
        return Err(Error::Size { required, cap });
    }
    let nodes = nodes_big as usize;
    let local_nodes = resolution.pow(spec.state_dim as u32);

    let mut local_index = vec![vec![0; nodes]; spec.agents];
    for (i, li) in local_index.iter_mut().enumerate() {
        let shift = resolution.pow(((spec.agents - 1 - i) * spec.state_dim) as u32);
        for (node, x) in li.iter_mut().enumerate() {
            *x = (node / shift) % local_nodes;
        }
    }
    let mut action_index = vec![vec![0; ja]; spec.agents];
    for k in 0..ja {
        for (i, a) in spec.decode_action(k).into_iter().enumerate() {
            action_index[i][k] = a;
        }
    }

    let rewards: Vec<S> = (0..nodes * ja)
        .into_par_iter()
        .map(|row| {
            let mut s = vec![0.0; dims];
            grid_point(row / ja, resolution, &mut s);
            S::of(game.reward(&s, &spec.decode_action(row % ja)))
        })
        .collect();
    let worst = rewards.iter().map(|r| r.to64().abs()).fold(0.0, f64::max);
    if worst > spec.r_max * (1.0 + 1e-9) {
        return Err(Error::BoundViolation {
            max_abs: worst,
            r_max: spec.r_max,
        });
    }

    let convert = |terms: Vec<ProductTerm>| -> (Vec<Term<S>>, f64) {
        let mut err = 0.0f64;
        let out = terms
            .into_iter()
            .map(|t| Term {
                weight: S::of(t.weight),
                factors: t
                    .factors
                    .iter()
                    .map(|f| {
                        if let Factor1D::Normal(tn) = f {
                            let mass: f64 =
                                (0..resolution).map(|k| tn.pdf(midpoint(k, resolution))).sum::<f64>() / resolution as f64;
                            err = err.max((mass - 1.0).abs());
                        }
                        match f.midpoint_weights(resolution) {
                            MidpointWeights::Uniform => Factor::Uniform,
                            MidpointWeights::OneHot(k) => Factor::OneHot(k),
                            MidpointWeights::Dense(w) => Factor::Dense(w.into_iter().map(S::of).collect()),
                        }
                    })
                    .collect(),
            })
            .collect();
        (out, err)
    };

    let (transitions, renorm) = if averaged {
        let mut per_agent = Vec::with_capacity(spec.agents);
        let mut renorm = 0.0f64;
        for i in 0..spec.agents {
            let na = spec.actions[i];
            let rows: Vec<(Vec<Term<S>>, f64)> = (0..local_nodes * na)
                .into_par_iter()
                .map(|row| {
                    let mut s_i = vec![0.0; spec.state_dim];
                    grid_point(row / na, resolution, &mut s_i);
                    let terms = game
                        .component_terms(i, &s_i, row % na)
                        .expect("decomposable game has kernel components");
                    convert(terms)
                })
                .collect();
            let mut table = Vec::with_capacity(rows.len());
            for (t, e) in rows {
                renorm = renorm.max(e);
                table.push(t);
            }
            per_agent.push(table);
        }
        (Transitions::Averaged(per_agent), renorm)
    } else {
        let rows: Vec<(Vec<Term<S>>, f64)> = (0..nodes * ja)
            .into_par_iter()
            .map(|row| {
                let mut s = vec![0.0; dims];
                grid_point(row / ja, resolution, &mut s);
                convert(game.kernel_terms(&s, &spec.decode_action(row % ja)))
            })
            .collect();
        let mut renorm = 0.0f64;
        let mut table = Vec::with_capacity(rows.len());
        for (t, e) in rows {
            renorm = renorm.max(e);
            table.push(t);
        }
        (Transitions::Joint(table), renorm)
    };

    Ok(TabularGame {
        gamma: S::of(spec.gamma),
        spec,
        resolution,
        nodes,
        local_nodes,
        joint_actions: ja,
        rewards,
        transitions,
        renormalization_error: renorm,
        local_index,
        action_index,
    })
}

fn contract<S: Real>(v: &[S], res: usize, factors: &[Factor<S>]) -> S {
    let stride = v.len() / res;
    if factors.len() == 1 {
        return match &factors[0] {
            Factor::OneHot(k) => v[*k],
            Factor::Uniform => v.iter().copied().sum::<S>() / S::of_usize(res),
            Factor::Dense(w) => v.iter().zip(w).map(|(&x, &w)| x * w).sum(),
        };
    }
    let rest = &factors[1..];
    match &factors[0] {
        Factor::OneHot(k) => contract(&v[k * stride..(k + 1) * stride], res, rest),
        Factor::Uniform => {
            let mut acc = S::zero();
            for k in 0..res {
                acc += contract(&v[k * stride..(k + 1) * stride], res, rest);
            }
            acc / S::of_usize(res)
        }
        Factor::Dense(w) => {
            let mut acc = S::zero();
            for (k, &wk) in w.iter().enumerate() {
                if wk != S::zero() {
                    acc += wk * contract(&v[k * stride..(k + 1) * stride], res, rest);
                }
            }
            acc
        }
    }
}

fn mixture_expectation<S: Real>(v: &[S], res: usize, terms: &[Term<S>]) -> S {
    terms.iter().map(|t| t.weight * contract(v, res, &t.factors)).sum()
}

fn expand<S: Real>(res: usize, f: &Factor<S>) -> Vec<S> {
    match f {
        Factor::Uniform => vec![S::one() / S::of_usize(res); res],
        Factor::Dense(w) => w.clone(),
        Factor::OneHot(k) => {
            let mut v = vec![S::zero(); res];
            v[*k] = S::one();
            v
        }
    }
}

fn dense_terms<S: Real>(out: &mut [S], res: usize, terms: &[Term<S>], scale: S) {
    for t in terms {
        let axes: Vec<Vec<S>> = t.factors.iter().map(|f| expand(res, f)).collect();
        for (node, slot) in out.iter_mut().enumerate() {
            let mut p = t.weight * scale;
            let mut rem = node;
            for ax in axes.iter().rev() {
                p *= ax[rem % res];
                rem /= res;
            }
            *slot += p;
        }
    }
}

impl<S: Real> TabularGame<S> {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn joint_actions(&self) -> usize {
        self.joint_actions
    }

    pub fn local_nodes(&self) -> usize {
        self.local_nodes
    }

    pub fn gamma(&self) -> S {
        self.gamma
    }

    pub fn q_max(&self) -> S {
        S::of(self.spec.q_max())
    }

    pub fn rewards(&self) -> &[S] {
        &self.rewards
    }

    /// Whether transitions are stored as a per-agent average.
    pub fn is_averaged(&self) -> bool {
        matches!(self.transitions, Transitions::Averaged(_))
    }

    /// Midpoint coordinates of a joint node.
    pub fn node_state(&self, node: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.spec.joint_dim()];
        grid_point(node, self.resolution, &mut s);
        s
    }

    /// Agent `i`'s local node index inside joint node `node`.
    pub fn local_node(&self, agent: usize, node: usize) -> usize {
        self.local_index[agent][node]
    }

    /// Agent `i`'s action inside joint action `ja`.
    pub fn local_action(&self, agent: usize, ja: usize) -> usize {
        self.action_index[agent][ja]
    }

    /// Local node containing the local state `s_i`.
    pub fn local_cell(&self, s_i: &[f64]) -> usize {
        s_i.iter()
            .fold(0, |acc, &x| acc * self.resolution + crate::game::cell_of(x, self.resolution))
    }

    pub fn zeros(&self) -> QTable<S> {
        QTable::zeros(self.nodes, self.joint_actions)
    }

    /// Table of `f(s, a)` over grid midpoints and joint actions.
    pub fn tabulate(&self, f: impl Fn(&[f64], &[usize]) -> S + Sync) -> QTable<S> {
        let ja = self.joint_actions;
        let actions: Vec<Vec<usize>> = (0..ja).map(|k| self.spec.decode_action(k)).collect();
        let values = (0..self.nodes * ja)
            .into_par_iter()
            .map(|row| {
                let s = self.node_state(row / ja);
                f(&s, &actions[row % ja])
            })
            .collect();
        QTable {
            nodes: self.nodes,
            actions: ja,
            values,
        }
    }

    /// Full next-node distribution of row `(node, ja)`.
    pub fn row_dense(&self, node: usize, ja: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.nodes];
        match &self.transitions {
            Transitions::Joint(rows) => dense_terms(&mut out, self.resolution, &rows[node * self.joint_actions + ja], S::one()),
            Transitions::Averaged(per_agent) => {
                let scale = S::one() / S::of_usize(self.spec.agents);
                for (i, table) in per_agent.iter().enumerate() {
                    let row = self.local_index[i][node] * self.spec.actions[i] + self.action_index[i][ja];
                    dense_terms(&mut out, self.resolution, &table[row], scale);
                }
            }
        }
        out
    }

    fn check_shape(&self, q: &QTable<S>) -> Result<()> {
        if q.nodes != self.nodes || q.actions != self.joint_actions {
            return Err(Error::shape(
                format!("{} x {}", self.nodes, self.joint_actions),
                format!("{} x {}", q.nodes, q.actions),
            ));
        }
        Ok(())
    }

    fn agent_tables(&self, v: &[S], per_agent: &[Vec<Vec<Term<S>>>]) -> Vec<Vec<S>> {
        per_agent
            .iter()
            .map(|table| {
                table
                    .par_iter()
                    .map(|terms| mixture_expectation(v, self.resolution, terms))
                    .collect()
            })
            .collect()
    }

    fn combine(&self, tables: &[Vec<S>], node: usize, ja: usize) -> S {
        let mut acc = S::zero();
        for (i, t) in tables.iter().enumerate() {
            acc += t[self.local_index[i][node] * self.spec.actions[i] + self.action_index[i][ja]];
        }
        acc / S::of_usize(self.spec.agents)
    }

    /// `E[v(s') | node, a]` for every row.
    pub fn expected_next(&self, v: &[S]) -> Vec<S> {
        assert_eq!(v.len(), self.nodes);
        let ja = self.joint_actions;
        match &self.transitions {
            Transitions::Joint(rows) => rows
                .par_iter()
                .map(|terms| mixture_expectation(v, self.resolution, terms))
                .collect(),
            Transitions::Averaged(per_agent) => {
                let tables = self.agent_tables(v, per_agent);
                (0..self.nodes * ja)
                    .into_par_iter()
                    .map(|row| self.combine(&tables, row / ja, row % ja))
                    .collect()
            }
        }
    }

    /// `E[v(s') | node, policy[node]]` for every node.
    pub fn expected_next_under(&self, v: &[S], policy: &[usize]) -> Vec<S> {
        let ja = self.joint_actions;
        match &self.transitions {
            Transitions::Joint(rows) => policy
                .par_iter()
                .enumerate()
                .map(|(node, &a)| mixture_expectation(v, self.resolution, &rows[node * ja + a]))
                .collect(),
            Transitions::Averaged(per_agent) => {
                let tables = self.agent_tables(v, per_agent);
                policy
                    .par_iter()
                    .enumerate()
                    .map(|(node, &a)| self.combine(&tables, node, a))
                    .collect()
            }
        }
    }

    /// Greedy backup `E[max_a' q(s', a')]` for every row.
    pub fn greedy_backup(&self, q: &QTable<S>) -> Result<Vec<S>> {
        self.check_shape(q)?;
        Ok(self.expected_next(&q.row_max()))
    }

    /// Policy backup `E[q(s', π(s'))]` for every row.
    pub fn policy_backup(&self, q: &QTable<S>, policy: &[usize]) -> Result<Vec<S>> {
        self.check_shape(q)?;
        self.check_policy(policy)?;
        let v: Vec<S> = policy.iter().enumerate().map(|(n, &a)| q.get(n, a)).collect();
        Ok(self.expected_next(&v))
    }

    fn check_policy(&self, policy: &[usize]) -> Result<()> {
        if policy.len() != self.nodes {
            return Err(Error::shape(format!("{} policy entries", self.nodes), policy.len()));
        }
        if let Some(&bad) = policy.iter().find(|&&a| a >= self.joint_actions) {
            return Err(Error::Input(format!("policy action {bad} out of range")));
        }
        Ok(())
    }

    /// `[TQ](s,a) = R(s,a) + γ E[max_a' Q(s',a')]`, unclamped.
    pub fn bellman_apply(&self, q: &QTable<S>) -> Result<QTable<S>> {
        let next = self.greedy_backup(q)?;
        let values = self
            .rewards
            .iter()
            .zip(next)
            .map(|(&r, e)| r + self.gamma * e)
            .collect();
        Ok(QTable {
            nodes: self.nodes,
            actions: self.joint_actions,
            values,
        })
    }

    fn effective_tol(&self, tol: S) -> S {
        tol.max(S::epsilon() * S::of(16.0) * self.q_max().max(S::one()))
    }

    /// Value iteration from `Q ≡ 0`; stops at the first iterate with
    /// `‖TQ − Q‖∞ ≤ tol` and returns that iterate.
    pub fn value_iteration(&self, tol: S) -> Result<ValueIteration<S>> {
        if !(tol > S::zero()) {
            return Err(Error::Input("tolerance must be positive".into()));
        }
        let tol = self.effective_tol(tol);
        let mut q = self.zeros();
        let mut k = 0;
        loop {
            let tq = self.bellman_apply(&q)?;
            let residual = tq.sup_diff(&q);
            if residual <= tol {
                return Ok(ValueIteration {
                    q,
                    iterations: k,
                    residual,
                });
            }
            q = tq;
            k += 1;
        }
    }

    /// `Q^π` for a deterministic joint policy given per node as a joint
    /// action index, solved by fixed-point iteration to `tol`.
    pub fn policy_eval_tol(&self, policy: &[usize], tol: S) -> Result<QTable<S>> {
        self.check_policy(policy)?;
        let ja = self.joint_actions;
        let g = self.gamma;
        let r_pi: Vec<S> = policy.iter().enumerate().map(|(n, &a)| self.rewards[n * ja + a]).collect();
        let mut v = r_pi.clone();
        if g > S::zero() {
            let stop = self.effective_tol(tol) * (S::one() - g) / g;
            loop {
                let next = self.expected_next_under(&v, policy);
                let nv: Vec<S> = r_pi.iter().zip(&next).map(|(&r, &e)| r + g * e).collect();
                let change = crate::scalar::sup_diff(&nv, &v);
                v = nv;
                if change <= stop {
                    break;
                }
            }
        }
        let next = self.expected_next(&v);
        let values = self.rewards.iter().zip(next).map(|(&r, e)| r + g * e).collect();
        Ok(QTable {
            nodes: self.nodes,
            actions: ja,
            values,
        })
    }

    pub fn policy_eval(&self, policy: &[usize]) -> Result<QTable<S>> {
        self.policy_eval_tol(policy, S::of(1e-10))
    }

    fn resolve_sigma(&self, sigma: &Sigma) -> Result<Vec<Vec<f64>>> {
        let spec = &self.spec;
        let sizes: Vec<usize> = spec.actions.iter().map(|&a| a * self.local_nodes).collect();
        let normalize = |w: &[f64], what: &str| -> Result<Vec<f64>> {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Input(format!("{what} weights must be finite and nonnegative")));
            }
            let t: f64 = w.iter().sum();
            if t <= 0.0 {
                return Err(Error::Input(format!("{what} weights sum to zero")));
            }
            Ok(w.iter().map(|x| x / t).collect())
        };
        match sigma {
            Sigma::Uniform => Ok(sizes.iter().map(|&n| vec![1.0 / n as f64; n]).collect()),
            Sigma::Separable(per) => {
                if per.len() != spec.agents {
                    return Err(Error::shape(format!("{} marginals", spec.agents), per.len()));
                }
                per.iter()
                    .zip(&sizes)
                    .enumerate()
                    .map(|(i, (w, &n))| {
                        if w.len() != n {
                            return Err(Error::shape(format!("{n} weights for agent {i}"), w.len()));
                        }
                        normalize(w, "marginal")
                    })
                    .collect()
            }
            Sigma::Joint(w) => {
                let ja = self.joint_actions;
                if w.len() != self.nodes * ja {
                    return Err(Error::shape(self.nodes * ja, w.len()));
                }
                let w = normalize(w, "joint")?;
                let mut marg: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                for (row, &p) in w.iter().enumerate() {
                    for (i, m) in marg.iter_mut().enumerate() {
                        m[self.x_index(i, row / ja, row % ja)] += p;
                    }
                }
                for (row, &p) in w.iter().enumerate() {
                    let prod: f64 = (0..spec.agents)
                        .map(|i| marg[i][self.x_index(i, row / ja, row % ja)])
                        .product();
                    if (prod - p).abs() > 1e-12 * (1.0 + p) {
                        return Err(Error::Precondition(
                            "sampling distribution is not a product of per-agent marginals".into(),
                        ));
                    }
                }
                Ok(marg)
            }
        }
    }

    fn x_index(&self, agent: usize, node: usize, ja: usize) -> usize {
        self.local_index[agent][node] * self.spec.actions[agent] + self.action_index[agent][ja]
    }

    /// Closed-form projection onto tables of the form `Σ_i g_i(s_i, a_i)`
    /// under a separable weighting: `Σ_i f_i − (N−1)C` with `f_i` the
    /// conditional mean given agent `i`'s pair and `C` the overall mean.
    pub fn exact_decomposable_projection(&self, q: &QTable<S>, sigma: &Sigma) -> Result<Projection<S>> {
        self.check_shape(q)?;
        let w = self.resolve_sigma(sigma)?;
        let n = self.spec.agents;
        let ja = self.joint_actions;
        let mut comps: Vec<Vec<S>> = w.iter().map(|m| vec![S::zero(); m.len()]).collect();
        let mut c = S::zero();
        let mut xs = vec![0usize; n];
        let mut ws = vec![0.0f64; n];
        for (row, &val) in q.values.iter().enumerate() {
            for i in 0..n {
                xs[i] = self.x_index(i, row / ja, row % ja);
                ws[i] = w[i][xs[i]];
            }
            for i in 0..n {
                let others: f64 = (0..n).filter(|&j| j != i).map(|j| ws[j]).product();
                comps[i][xs[i]] += S::of(others) * val;
            }
            c += S::of(ws.iter().product()) * val;
        }
        let shift = c * S::of_usize(n - 1) / S::of_usize(n);
        for comp in comps.iter_mut() {
            for x in comp.iter_mut() {
                *x -= shift;
            }
        }
        let values: Vec<S> = (0..q.values.len())
            .map(|row| (0..n).map(|i| comps[i][self.x_index(i, row / ja, row % ja)]).sum())
            .collect();
        let table = QTable {
            nodes: self.nodes,
            actions: ja,
            values,
        };
        let (l2, sup) = self.residuals(q, &table, &w);
        Ok(Projection {
            table,
            components: comps,
            mean: c,
            l2_residual: l2,
            sup_residual: sup,
        })
    }

    fn residuals(&self, q: &QTable<S>, p: &QTable<S>, w: &[Vec<f64>]) -> (S, S) {
        let ja = self.joint_actions;
        let mut l2 = S::zero();
        let mut sup = S::zero();
        for (row, (&a, &b)) in q.values.iter().zip(&p.values).enumerate() {
            let weight: f64 = (0..self.spec.agents)
                .map(|i| w[i][self.x_index(i, row / ja, row % ja)])
                .product();
            let e = a - b;
            l2 += S::of(weight) * e * e;
            sup = sup.max(e.abs());
        }
        (l2.sqrt(), sup)
    }

    /// Weighted least-squares projection onto additive tables by a
    /// minimum-norm solve of the normal equations (computed in `f64`).
    pub fn least_squares_projection(&self, q: &QTable<S>, sigma: &Sigma) -> Result<Projection<S>> {
        self.check_shape(q)?;
        let w = self.resolve_sigma(sigma)?;
        let n = self.spec.agents;
        let ja = self.joint_actions;
        let offsets: Vec<usize> = w
            .iter()
            .scan(0, |acc, m| {
                let o = *acc;
                *acc += m.len();
                Some(o)
            })
            .collect();
        let p = offsets[n - 1] + w[n - 1].len();
        let mut m = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut cols = vec![0usize; n];
        for (row, &val) in q.values.iter().enumerate() {
            let mut weight = 1.0;
            for i in 0..n {
                let x = self.x_index(i, row / ja, row % ja);
                cols[i] = offsets[i] + x;
                weight *= w[i][x];
            }
            if weight == 0.0 {
                continue;
            }
            for &ci in &cols {
                rhs[ci] += weight * val.to64();
                for &cj in &cols {
                    m[(ci, cj)] += weight;
                }
            }
        }
        let svd = m.svd(true, true);
        let eps = 1e-12 * svd.singular_values.max();
        let beta = svd.solve(&rhs, eps).map_err(|e| Error::Precondition(e.to_string()))?;
        let comps: Vec<Vec<S>> = (0..n)
            .map(|i| (0..w[i].len()).map(|x| S::of(beta[offsets[i] + x])).collect())
            .collect();
        let values: Vec<S> = (0..q.values.len())
            .map(|row| (0..n).map(|i| comps[i][self.x_index(i, row / ja, row % ja)]).sum())
            .collect();
        let table = QTable {
            nodes: self.nodes,
            actions: ja,
            values,
        };
        let mean = table
            .values
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                let weight: f64 = (0..n).map(|i| w[i][self.x_index(i, row / ja, row % ja)]).product();
                S::of(weight) * v
            })
            .sum();
        let (l2, sup) = self.residuals(q, &table, &w);
        Ok(Projection {
            table,
            components: comps,
            mean,
            l2_residual: l2,
            sup_residual: sup,
        })
    }

    /// Distance of `Tq` from the additive class under uniform weights.
    pub fn tq_decomposability_residual(&self, q: &QTable<S>) -> Result<Projection<S>> {
        let tq = self.bellman_apply(q)?;
        self.exact_decomposable_projection(&tq, &Sigma::Uniform)
    }
}

/// Output of [`TabularGame::value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueIteration<S: Real> {
    pub q: QTable<S>,
    pub iterations: usize,
    pub residual: S,
}

/// Weighting over `(node, joint action)` pairs for projections.
#[derive(Debug, Clone, PartialEq)]
pub enum Sigma {
    Uniform,
    /// Per-agent weights over `(local node, local action)`, indexed
    /// `local_node * |A_i| + a_i`.
    Separable(Vec<Vec<f64>>),
    /// Joint weights over table entries; must factor across agents.
    Joint(Vec<f64>),
}

/// Projected table with its additive components and residuals.
#[derive(Debug, Clone)]
pub struct Projection<S: Real> {
    pub table: QTable<S>,
    /// Per-agent components over `(local node, local action)`; their sum
    /// reproduces `table`.
    pub components: Vec<Vec<S>>,
    pub mean: S,
    /// `σ`-weighted L2 distance between input and projection.
    pub l2_residual: S,
    pub sup_residual: S,
}

/// Dense table over `(node, joint action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<S: Real> {
    pub nodes: usize,
    pub actions: usize,
    pub values: Vec<S>,
}

impl<S: Real> QTable<S> {
    pub fn zeros(nodes: usize, actions: usize) -> Self {
        QTable {
            nodes,
            actions,
            values: vec![S::zero(); nodes * actions],
        }
    }

    pub fn from_values(nodes: usize, actions: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != nodes * actions {
            return Err(Error::shape(nodes * actions, values.len()));
        }
        Ok(QTable { nodes, actions, values })
    }

    #[inline]
    pub fn get(&self, node: usize, a: usize) -> S {
        self.values[node * self.actions + a]
    }

    pub fn row(&self, node: usize) -> &[S] {
        &self.values[node * self.actions..(node + 1) * self.actions]
    }

    pub fn row_max(&self) -> Vec<S> {
        (0..self.nodes)
            .map(|n| self.row(n).iter().copied().fold(S::neg_infinity(), S::max))
            .collect()
    }

    /// Greedy joint action per node, lowest index on ties.
    pub fn greedy(&self) -> Vec<usize> {
        (0..self.nodes).map(|n| argmax_lowest(self.row(n))).collect()
    }

    pub fn sup_diff(&self, other: &QTable<S>) -> S {
        crate::scalar::sup_diff(&self.values, &other.values)
    }

    pub fn sup_abs(&self) -> S {
        crate::scalar::sup_abs(&self.values)
    }

    /// Mean absolute difference under uniform weights.
    pub fn mean_abs_diff(&self, other: &QTable<S>) -> S {
        let total: S = self.values.iter().zip(&other.values).map(|(&a, &b)| (a - b).abs()).sum();
        total / S::of_usize(self.values.len())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(QTABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(QTABLE_VERSION)?;
        w.write_u64::<LittleEndian>(self.nodes as u64)?;
        w.write_u64::<LittleEndian>(self.actions as u64)?;
        for v in &self.values {
            w.write_f64::<LittleEndian>(v.to64())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != QTABLE_MAGIC {
            return Err(Error::Format("not a Q-table file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != QTABLE_VERSION {
            return Err(Error::Format(format!("unsupported Q-table version {version}")));
        }
        let nodes = r.read_u64::<LittleEndian>()? as usize;
        let actions = r.read_u64::<LittleEndian>()? as usize;
        let len = nodes
            .checked_mul(actions)
            .ok_or_else(|| Error::Format("Q-table shape overflows".into()))?;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            values.push(S::of(r.read_f64::<LittleEndian>()?));
        }
        Ok(QTable { nodes, actions, values })
    }

    /// CSV with columns `node,action,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "action", "value"])?;
        for n in 0..self.nodes {
            for a in 0..self.actions {
                out.write_record([n.to_string(), a.to_string(), self.get(n, a).to64().to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
