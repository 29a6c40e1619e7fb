//! Checkers that evaluate the error-propagation, approximation and
//! generalization inequalities against measured quantities.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::approx::TwoLayerNet;
use crate::error::{Error, Result};
use crate::fqi::ConvergenceReport;
use crate::oracle::{QTable, TabularGame};
use crate::scalar::Real;

/// Numerical slack for the tabular inequalities.
pub const TABULAR_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    /// The bound is trivially true or uninformative for these inputs.
    Vacuous,
    /// A precondition of the inequality is not met.
    NotApplicable,
}

/// Outcome of one inequality check: `lhs ≤ rhs + slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub margin: f64,
    pub verdict: Verdict,
    /// Mirrors `verdict`; `None` when vacuous or not applicable.
    pub holds: Option<bool>,
    pub inputs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
}

impl BoundReport {
    pub fn evaluate(name: &str, lhs: f64, rhs: f64, slack: f64, inputs: BTreeMap<String, f64>) -> Self {
        let verdict = if lhs <= rhs + slack {
            Verdict::Holds
        } else {
            Verdict::Violated
        };
        BoundReport {
            name: name.to_string(),
            lhs,
            rhs,
            slack,
            margin: rhs - lhs,
            verdict,
            holds: Some(verdict == Verdict::Holds),
            inputs,
            estimator: None,
        }
    }

    fn with_verdict(mut self, verdict: Verdict) -> Self {
        self.verdict = verdict;
        self.holds = match verdict {
            Verdict::Holds => Some(true),
            Verdict::Violated => Some(false),
            _ => None,
        };
        self
    }

    /// `Some(true/false)` for applicable checks, `None` otherwise.
    pub fn holds(&self) -> Option<bool> {
        self.holds
    }
}

fn inputs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// One JSON document per line.
pub fn write_jsonl<W: Write>(reports: &[BoundReport], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-bound aggregate over a set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub bound: String,
    pub count: usize,
    pub applicable: usize,
    pub hold_rate: Option<f64>,
    pub worst_margin: Option<f64>,
}

pub fn summarize(reports: &[BoundReport]) -> Vec<SummaryRow> {
    let mut by_name: BTreeMap<&str, Vec<&BoundReport>> = BTreeMap::new();
    for r in reports {
        by_name.entry(&r.name).or_default().push(r);
    }
    by_name
        .into_iter()
        .map(|(name, rs)| {
            let applicable: Vec<_> = rs.iter().filter(|r| r.holds().is_some()).collect();
            let held = applicable.iter().filter(|r| r.holds() == Some(true)).count();
            SummaryRow {
                bound: name.to_string(),
                count: rs.len(),
                applicable: applicable.len(),
                hold_rate: (!applicable.is_empty()).then(|| held as f64 / applicable.len() as f64),
                worst_margin: applicable.iter().map(|r| r.margin).reduce(f64::min),
            }
        })
        .collect()
}

/// CSV with columns `bound,count,hold_rate,worst_margin`.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bound", "count", "hold_rate", "worst_margin"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([r.bound.clone(), r.count.to_string(), opt(r.hold_rate), opt(r.worst_margin)])?;
    }
    out.flush()?;
    Ok(())
}

/// `‖Q* − Q^π‖∞ ≤ 2γ/(1−γ) · ‖Q* − Q̃‖∞` for `π` greedy with respect to
/// `Q̃`, with `Q^π` obtained by policy evaluation on the grid.
pub fn check_policy_gap<S: Real>(qstar: &QTable<S>, qtilde: &QTable<S>, tg: &TabularGame<S>) -> Result<BoundReport> {
    let q_pi = tg.policy_eval(&qtilde.greedy())?;
    let gamma = tg.gamma().to64();
    let err = qstar.sup_diff(qtilde).to64();
    Ok(policy_gap_report(qstar.sup_diff(&q_pi).to64(), err, gamma))
}

fn policy_gap_report(gap: f64, err: f64, gamma: f64) -> BoundReport {
    BoundReport::evaluate(
        "policy_gap",
        gap,
        2.0 * gamma / (1.0 - gamma) * err,
        TABULAR_SLACK,
        inputs(&[("gamma", gamma), ("sup_err", err)]),
    )
}

/// Policy-gap checks for every audited iterate of a run.
pub fn policy_gap_from_report(report: &ConvergenceReport) -> Vec<BoundReport> {
    report
        .records
        .iter()
        .filter_map(|r| {
            let mut b = policy_gap_report(r.policy_gap_sup?, r.sup_err?, report.gamma);
            b.inputs.insert("k".into(), r.k as f64);
            Some(b)
        })
        .collect()
}

/// `4 γ^K R_max / (1−γ)²`.
pub fn algorithmic_term(gamma: f64, k: usize, r_max: f64) -> f64 {
    4.0 * gamma.powi(k as i32) * r_max / (1.0 - gamma).powi(2)
}

/// `ε_max / (1−η) + 4 γ^K R_max / (1−γ)²` with `η = (N+1)γ`.
pub fn cumulative_rhs(eps_max: f64, gamma: f64, agents: usize, k: usize, r_max: f64) -> f64 {
    let eta = (agents as f64 + 1.0) * gamma;
    let alg = algorithmic_term(gamma, k, r_max);
    if eps_max == 0.0 {
        return alg;
    }
    if eta >= 1.0 {
        return f64::INFINITY;
    }
    eps_max / (1.0 - eta) + alg
}

/// `‖Q* − Q̃_K‖∞ ≤ ε_max/(1−η) + 4γ^K R_max/(1−γ)²`, where `ε_max` is the
/// largest `‖Q̃_k − Proj(T Q̃_{k−1})‖∞` recorded on the audit grid.
pub fn check_cumulative_recursion(report: &ConvergenceReport) -> BoundReport {
    let gamma = report.gamma;
    let n = report.agents;
    let eta = (n as f64 + 1.0) * gamma;
    let k = report.records.len();
    let eps_max = report
        .records
        .iter()
        .filter_map(|r| r.proj_eps_sup)
        .fold(0.0, f64::max);
    let lhs = report.records.last().and_then(|r| r.sup_err);
    let mut ins = inputs(&[
        ("gamma", gamma),
        ("N", n as f64),
        ("K", k as f64),
        ("r_max", report.r_max),
        ("eps_max", eps_max),
        ("eta", eta),
    ]);
    if eta >= 1.0 {
        let mut b = BoundReport::evaluate("cumulative_recursion", lhs.unwrap_or(f64::NAN), f64::INFINITY, 0.0, ins);
        b.margin = f64::INFINITY;
        return b.with_verdict(Verdict::Vacuous);
    }
    let rhs = cumulative_rhs(eps_max, gamma, n, k, report.r_max);
    match lhs {
        Some(lhs) if report.records.iter().all(|r| r.proj_eps_sup.is_some()) => {
            let mut b = BoundReport::evaluate("cumulative_recursion", lhs, rhs, TABULAR_SLACK, ins);
            b.estimator = Some(report.eps_estimator.clone());
            b
        }
        _ => {
            ins.insert("missing_audit".into(), 1.0);
            BoundReport::evaluate("cumulative_recursion", f64::NAN, rhs, 0.0, ins).with_verdict(Verdict::NotApplicable)
        }
    }
}

/// Least-squares fit of `log y = a + b k`; returns `(b, a, R²)`.
pub fn log_linear_fit(ks: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0 && y.is_finite())
        .map(|(&k, &y)| (k, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}

/// Final-policy error against `2φγ ε_max/(1−γ)² + 4γ^{K+1} R_max/(1−γ)²`
/// with `μ` uniform on the audit grid and `ε_max = max_k ‖T Q̃_{k−1} − Q̃_k‖_σ`.
/// The inputs also carry the `φ`-free algorithmic term and a log-linear
/// fit of `‖Q* − Q̃_k‖∞` against `k` over `k ≥ 2`.
pub fn error_propagation_report(report: &ConvergenceReport, phi: f64) -> Result<BoundReport> {
    if !(phi > 0.0) {
        return Err(Error::Precondition(format!("phi = {phi} must be positive")));
    }
    let gamma = report.gamma;
    let k = report.records.len();
    let eps_max = report.eps_max();
    let alg = algorithmic_term(gamma, k + 1, report.r_max);
    let rhs = 2.0 * phi * gamma * eps_max / (1.0 - gamma).powi(2) + alg;
    let mut ins = inputs(&[
        ("gamma", gamma),
        ("K", k as f64),
        ("r_max", report.r_max),
        ("eps_max", eps_max),
        ("phi", phi),
        ("algorithmic_term", alg),
    ]);
    let (ks, errs): (Vec<f64>, Vec<f64>) = report
        .records
        .iter()
        .filter(|r| r.k >= 2)
        .filter_map(|r| Some((r.k as f64, r.sup_err?)))
        .unzip();
    if let Some((slope, _, r2)) = log_linear_fit(&ks, &errs) {
        ins.insert("decay_slope".into(), slope);
        ins.insert("decay_r2".into(), r2);
        ins.insert("log_gamma".into(), gamma.ln());
    }
    let lhs = if k == 0 { None } else { report.records.last().and_then(|r| r.l1_mu_err) };
    let mut b = match lhs {
        Some(lhs) => BoundReport::evaluate("error_propagation", lhs, rhs, TABULAR_SLACK, ins),
        None => BoundReport::evaluate("error_propagation", f64::NAN, rhs, 0.0, ins).with_verdict(Verdict::NotApplicable),
    };
    b.estimator = Some(report.eps_estimator.clone());
    Ok(b)
}

/// `2 Q √(2 log(2D) / n)`.
pub fn rademacher_bound(q_pn: f64, dim: usize, n: usize) -> f64 {
    2.0 * q_pn * (2.0 * (2.0 * dim as f64).ln() / n as f64).sqrt()
}

/// Massart's finite-class bound `max_f ‖(f(x_i))_i‖₂ √(2 log N) / n`.
pub fn massart_bound(max_l2: f64, count: usize, n: usize) -> f64 {
    max_l2 * (2.0 * (count as f64).ln()).sqrt() / n as f64
}

/// Random single-head network rescaled to path norm exactly `q_pn`.
pub fn sample_path_norm_ball<S: Real, R: Rng + ?Sized>(input_dim: usize, width: usize, q_pn: f64, rng: &mut R) -> TwoLayerNet<S> {
    let mut net = TwoLayerNet::random(input_dim, width, 1, None, rng);
    let pn = net.path_norm();
    if pn > S::zero() {
        let f = S::of(q_pn) / pn;
        net.heads[0].a.iter_mut().for_each(|a| *a *= f);
    }
    net
}

#[derive(Debug, Clone, PartialEq)]
pub struct RademacherEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Half-width of the 95% normal interval.
    pub ci_half_width: f64,
    pub bound: f64,
    pub report: BoundReport,
}

/// Monte-Carlo estimate of `(1/n) E_ξ[max_f Σ_i ξ_i f(x_i)]` over a finite
/// candidate set of single-head networks with path norm at most `q_pn`,
/// compared with the class bound `2 Q √(2 log(2D)/n)`.
pub fn empirical_rademacher<S: Real, R: Rng + ?Sized>(
    candidates: &[TwoLayerNet<S>],
    data: &[Vec<f64>],
    sign_draws: usize,
    q_pn: f64,
    rng: &mut R,
) -> Result<RademacherEstimate> {
    let n = data.len();
    if n == 0 || candidates.is_empty() {
        return Err(Error::Precondition("need at least one input and one candidate".into()));
    }
    if sign_draws < 100 {
        return Err(Error::Precondition(format!("{sign_draws} sign draws, need at least 100")));
    }
    let dim = candidates[0].input_dim();
    if data.iter().any(|x| x.len() != dim) || candidates.iter().any(|c| c.input_dim() != dim) {
        return Err(Error::Input("input dimension mismatch".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.path_norm().to64() > q_pn * (1.0 + 1e-12)) {
        return Err(Error::Precondition(format!(
            "candidate path norm {} exceeds {q_pn}",
            c.path_norm()
        )));
    }
    let outputs: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            data.iter()
                .map(|x| {
                    let xs: Vec<S> = x.iter().map(|&v| S::of(v)).collect();
                    c.eval(&xs, 0).to64()
                })
                .collect()
        })
        .collect();
    let mut sups = Vec::with_capacity(sign_draws);
    let mut xi = vec![0.0; n];
    for _ in 0..sign_draws {
        for v in xi.iter_mut() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let best = outputs
            .iter()
            .map(|o| o.iter().zip(&xi).map(|(f, s)| f * s).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        sups.push(best / n as f64);
    }
    let m = sups.len() as f64;
    let estimate = sups.iter().sum::<f64>() / m;
    let var = sups.iter().map(|s| (s - estimate).powi(2)).sum::<f64>() / (m - 1.0);
    let std_error = (var / m).sqrt();
    let bound = rademacher_bound(q_pn, dim, n);
    let mut report = BoundReport::evaluate(
        "rademacher",
        estimate,
        bound,
        0.0,
        inputs(&[
            ("Q", q_pn),
            ("D", dim as f64),
            ("n", n as f64),
            ("candidates", candidates.len() as f64),
            ("sign_draws", sign_draws as f64),
            ("std_error", std_error),
        ]),
    );
    report.estimator = Some("monte_carlo".into());
    Ok(RademacherEstimate {
        estimate,
        std_error,
        ci_half_width: 1.96 * std_error,
        bound,
        report,
    })
}

/// `4ρ(‖f‖_P+1)√(2 log(2d)/n) + B_ℓ √(2 log(2c(‖f‖_P+1)²/δ)/n)`, `c = π²/6`.
pub fn posterior_generalization_bound(path_norm: f64, n: usize, dim: usize, rho: f64, loss_bound: f64, delta: f64) -> f64 {
    let c = PI * PI / 6.0;
    let p = path_norm + 1.0;
    let n = n as f64;
    4.0 * rho * p * (2.0 * (2.0 * dim as f64).ln() / n).sqrt()
        + loss_bound * (2.0 * (2.0 * c * p * p / delta).ln() / n).sqrt()
}

/// Squared-loss generalization gap `|L(f) − L̂_n(f)|` (population proxy:
/// `fresh`) against the posterior bound.
pub fn generalization_gap_check<S: Real>(
    net: &TwoLayerNet<S>,
    train: &[(Vec<f64>, f64)],
    fresh: &[(Vec<f64>, f64)],
    loss_bound: f64,
    rho: f64,
    delta: f64,
) -> Result<BoundReport> {
    if train.is_empty() || fresh.is_empty() {
        return Err(Error::Input("train and fresh sets must be nonempty".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition("delta must lie in (0, 1)".into()));
    }
    let loss = |set: &[(Vec<f64>, f64)]| {
        set.iter()
            .map(|(x, y)| {
                let xs: Vec<S> = x.iter().map(|&v| S::of(v)).collect();
                (net.eval(&xs, 0).to64() - y).powi(2)
            })
            .sum::<f64>()
            / set.len() as f64
    };
    let (lt, lf) = (loss(train), loss(fresh));
    let pn = net.path_norm().to64();
    let rhs = posterior_generalization_bound(pn, train.len(), net.input_dim(), rho, loss_bound, delta);
    let mut b = BoundReport::evaluate(
        "posterior_generalization",
        (lf - lt).abs(),
        rhs,
        0.0,
        inputs(&[
            ("path_norm", pn),
            ("n", train.len() as f64),
            ("fresh", fresh.len() as f64),
            ("rho", rho),
            ("loss_bound", loss_bound),
            ("delta", delta),
            ("train_loss", lt),
            ("fresh_loss", lf),
        ]),
    );
    b.estimator = Some("fresh_sample".into());
    Ok(b)
}

/// Function sampled on the midpoint grid of `[0,1]^dim`, first coordinate
/// slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub dim: usize,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(dim: usize, resolution: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        let total = resolution.pow(dim as u32);
        let mut x = vec![0.0; dim];
        let values = (0..total)
            .map(|node| {
                crate::game::grid_point(node, resolution, &mut x);
                f(&x)
            })
            .collect();
        GridFunction { dim, resolution, values }
    }
}

/// `‖f‖∞^{d+2} π^{d/2} / (3 L^d d² Γ(d/2+1))`.
pub fn l2_linf_lower_bound(sup: f64, lipschitz: f64, dim: usize) -> f64 {
    let d = dim as f64;
    sup.powf(d + 2.0) * PI.powf(d / 2.0) / (3.0 * lipschitz.powf(d) * d * d * gamma_fn(d / 2.0 + 1.0))
}

/// `‖f‖₂² ≥ ‖f‖∞^{d+2} π^{d/2} / (3 L^d d² Γ(d/2+1))` on the unit box, by
/// midpoint quadrature. The check needs the ball of radius `‖f‖∞/L`
/// around the grid maximizer to stay inside the box; otherwise the verdict
/// is not-applicable. Reported as `lhs` = bound, `rhs` = `‖f‖₂²`.
pub fn lipschitz_l2_linf_check(f: &GridFunction, lipschitz: f64) -> Result<BoundReport> {
    if f.values.len() != f.resolution.pow(f.dim as u32) || f.dim == 0 {
        return Err(Error::shape(f.resolution.pow(f.dim as u32), f.values.len()));
    }
    if !(lipschitz > 0.0) {
        return Err(Error::Precondition("Lipschitz constant must be positive".into()));
    }
    let (mut arg, mut sup) = (0usize, 0.0f64);
    for (i, v) in f.values.iter().enumerate() {
        if v.abs() > sup {
            sup = v.abs();
            arg = i;
        }
    }
    let l2sq = f.values.iter().map(|v| v * v).sum::<f64>() / f.values.len() as f64;
    let mut x = vec![0.0; f.dim];
    crate::game::grid_point(arg, f.resolution, &mut x);
    let clearance = x.iter().map(|&c| c.min(1.0 - c)).fold(f64::INFINITY, f64::min);
    let bound = l2_linf_lower_bound(sup, lipschitz, f.dim);
    let ins = inputs(&[
        ("d", f.dim as f64),
        ("L", lipschitz),
        ("sup", sup),
        ("clearance", clearance),
        ("resolution", f.resolution as f64),
    ]);
    let slack = 1e-6 * bound.max(f64::MIN_POSITIVE);
    let b = BoundReport::evaluate("lipschitz_l2_linf", bound, l2sq, slack, ins);
    if sup > 0.0 && clearance < sup / lipschitz {
        return Ok(b.with_verdict(Verdict::NotApplicable));
    }
    Ok(b)
}

/// One bump of a [`BumpMixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Bump {
    /// `max(0, height − slope ‖x − center‖₂)`.
    Cone { center: Vec<f64>, height: f64, slope: f64 },
    /// `height · exp(−‖x − center‖₂² / (2 width²))`.
    Gaussian { center: Vec<f64>, height: f64, width: f64 },
}

impl Bump {
    fn eval(&self, x: &[f64]) -> f64 {
        let r2 = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        match self {
            Bump::Cone { center, height, slope } => (height - slope * r2(center).sqrt()).max(0.0),
            Bump::Gaussian { center, height, width } => height * (-r2(center) / (2.0 * width * width)).exp(),
        }
    }

    /// Lipschitz constant with respect to the Euclidean norm.
    fn lipschitz(&self) -> f64 {
        match self {
            Bump::Cone { slope, .. } => *slope,
            Bump::Gaussian { height, width, .. } => height / (width * std::f64::consts::E.sqrt()),
        }
    }
}

/// Sum of nonnegative bumps. Its Lipschitz constant is at most the sum of
/// the bump constants, and every maximizer lies in the convex hull of the
/// centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpMixture {
    pub dim: usize,
    pub bumps: Vec<Bump>,
}

impl BumpMixture {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.bumps.iter().map(|b| b.eval(x)).sum()
    }

    pub fn lipschitz(&self) -> f64 {
        self.bumps.iter().map(Bump::lipschitz).sum()
    }

    pub fn grid(&self, resolution: usize) -> GridFunction {
        GridFunction::from_fn(self.dim, resolution, |x| self.eval(x))
    }

    /// One to three bumps centered in `[0.35, 0.65]^dim` with
    /// height-to-slope ratios below `0.3`, so the ball of radius `sup/L`
    /// around any maximizer stays inside the unit box.
    pub fn random_interior<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let count = rng.random_range(1..=3);
        let bumps = (0..count)
            .map(|_| {
                let center: Vec<f64> = (0..dim).map(|_| rng.random_range(0.35..0.65)).collect();
                let height = rng.random_range(0.05..0.5);
                if rng.random::<bool>() {
                    Bump::Cone { center, height, slope: height / rng.random_range(0.05..0.3) }
                } else {
                    Bump::Gaussian { center, height, width: rng.random_range(0.03..0.18) }
                }
            })
            .collect();
        BumpMixture { dim, bumps }
    }
}

/// Settings of a teacher-student generalization trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherStudent {
    pub dim: usize,
    pub teacher_width: usize,
    pub student_width: usize,
    pub n: usize,
    pub fresh: usize,
    pub delta: f64,
    pub fit: crate::approx::FitConfig,
}

impl Default for TeacherStudent {
    fn default() -> Self {
        TeacherStudent {
            dim: 2,
            teacher_width: 4,
            student_width: 32,
            n: 512,
            fresh: 16384,
            delta: 0.1,
            fit: crate::approx::FitConfig {
                epochs: 50,
                ..Default::default()
            },
        }
    }
}

/// Fit a student network to `n` labels of a random teacher with path norm
/// one and check the posterior bound on a fresh sample. Outputs are
/// truncated at `U = 1`, labels satisfy `|y| ≤ 1`, so the squared loss is
/// bounded by `4` and is `4`-Lipschitz in the prediction.
pub fn teacher_student_trial(cfg: &TeacherStudent, seed: u64) -> Result<BoundReport> {
    use crate::approx::{fit_least_squares, DecomposedQ, Example};
    use crate::game::GameSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher: TwoLayerNet<f64> = sample_path_norm_ball(cfg.dim, cfg.teacher_width, 1.0, &mut rng);
    let mut draw = |n: usize| -> Vec<(Vec<f64>, f64)> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = teacher.raw(&x, 0);
                (x, y)
            })
            .collect()
    };
    let train = draw(cfg.n);
    let fresh = draw(cfg.fresh);
    let spec = GameSpec::new(1, cfg.dim, vec![1], 0.0, 1.0)?;
    let data: Vec<Example> = train
        .iter()
        .map(|(x, y)| Example {
            state: x.iter().map(|v| 0.5 * (v + 1.0)).collect(),
            action: vec![0],
            target: *y,
        })
        .collect();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let init = DecomposedQ::<f64>::random(&spec, cfg.student_width, &mut init_rng);
    let fit = crate::approx::FitConfig {
        seed,
        ..cfg.fit.clone()
    };
    let (student, _) = fit_least_squares(&data, &fit, &init)?;
    let mut report = generalization_gap_check(&student.nets[0], &train, &fresh, 4.0, 4.0, cfg.delta)?;
    report.inputs.insert("seed".into(), seed as f64);
    Ok(report)
}
