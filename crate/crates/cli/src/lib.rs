//! Batch front-end for multi-agent fitted Q-iteration experiments.
//!
//! Each subcommand reads one TOML experiment config, writes its artifacts
//! under a single output directory and refreshes `MANIFEST.sha256` there.

pub mod config;
pub mod error;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mafqi::analysis::{self, BoundReport, BumpMixture};
use mafqi::approx::{AdditiveCritic, DecomposedQ};
use mafqi::fqi::{derive_seed, run_mafqi, Audit, ConvergenceReport, FqiConfig, NetworkFitter};
use mafqi::game::{self, ExpectationRule, GameDocument};
use mafqi::oracle::{self, QTable, TabularGame};
use mafqi::Game;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use config::{BoundSuite, ExperimentConfig, GameSection};
use error::StageExt;
pub use error::{CliError, Failure, Stage};

const GAME_TAG: u64 = 0x67616d65;
const RADEMACHER_TAG: u64 = 0x7261646d;
const GENERALIZATION_TAG: u64 = 0x67656e65;
const LIPSCHITZ_TAG: u64 = 0x6c697073;

#[derive(Debug, Parser)]
#[command(name = "mafqi", version, about = "Multi-agent fitted Q-iteration experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a game and write game.json.
    GenGame(Common),
    /// Solve the tabular oracle and write Q*.
    Solve(Common),
    /// Run MA-FQI and the run-based bound checks.
    Run(Common),
    /// Run the configured bound suites.
    Bounds(Common),
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = "MAFQI_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "MAFQI_OUT")]
    pub out: Option<PathBuf>,
    /// Run seeds `seed, seed+1, ...` in parallel, each under `out/seed-<s>`.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenGame(c) | Command::Solve(c) | Command::Run(c) | Command::Bounds(c) => c,
        }
    }
}

/// Resolved inputs of one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Directory that relative game paths are resolved against.
    pub base: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

impl Experiment {
    fn game_section(&self) -> Result<&GameSection, CliError> {
        self.config
            .game
            .as_ref()
            .ok_or_else(|| CliError::config(Stage::Config, "missing [game] section"))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.out.join(name), bytes).stage(Stage::Output)
    }

    fn phi(&self, gamma: f64) -> f64 {
        self.config
            .analysis
            .as_ref()
            .and_then(|a| a.phi)
            .unwrap_or(1.0 / (1.0 - gamma).powi(2))
    }

    fn analysis(&self) -> config::AnalysisSection {
        self.config.analysis.clone().unwrap_or_default()
    }
}

/// Parse the command line, run it and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let common = command.common();
    let config = ExperimentConfig::load(&common.config)?;
    let seed = common.seed.or(config.seed).unwrap_or(0);
    let out = common
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let base = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    if common.jobs == 0 {
        return Err(CliError::config(Stage::Config, "--jobs must be at least 1"));
    }
    if common.jobs == 1 {
        let exp = Experiment { config, base, seed, out };
        return run_one(command, &exp);
    }
    let experiments: Vec<Experiment> = (0..common.jobs as u64)
        .map(|j| {
            let s = seed.wrapping_add(j);
            Experiment {
                config: config.clone(),
                base: base.clone(),
                seed: s,
                out: out.join(format!("seed-{s}")),
            }
        })
        .collect();
    let results: Vec<Result<(), CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = experiments
            .iter()
            .map(|exp| scope.spawn(move || run_one(command, exp)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::other(Stage::Output, "worker panicked"))))
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    manifest::write_manifest(&out).stage(Stage::Output)
}

/// Run one command for one seed and refresh the manifest.
pub fn run_one(command: &Command, exp: &Experiment) -> Result<(), CliError> {
    fs::create_dir_all(&exp.out).stage(Stage::Output)?;
    match command {
        Command::GenGame(_) => cmd_gen_game(exp),
        Command::Solve(_) => cmd_solve(exp),
        Command::Run(_) => cmd_run(exp),
        Command::Bounds(_) => cmd_bounds(exp),
    }?;
    manifest::write_manifest(&exp.out).stage(Stage::Output)
}

/// Build or load the configured game together with its provenance block.
pub fn build_game(exp: &Experiment) -> Result<GameDocument, CliError> {
    let section = exp.game_section()?;
    if let GameSection::File { path } = section {
        let path = exp.base.join(path);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::missing(Stage::Game, format!("{}: {e}", path.display())))?;
        return GameDocument::from_json(&text).stage(Stage::Game);
    }
    let spec = section.spec().expect("inline game section").stage(Stage::Game)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, 0, GAME_TAG));
    let (kind, game) = match section {
        GameSection::Decomposable { bumps, .. } => (
            "decomposable",
            game::random_decomposable(spec, *bumps, &mut rng).stage(Stage::Game)?,
        ),
        GameSection::ReverseEngineered {
            expectation_resolution,
            ..
        } => {
            let resolution = expectation_resolution
                .or(exp.config.oracle.as_ref().map(|o| o.resolution))
                .unwrap_or(16);
            let rule = ExpectationRule::MidpointGrid { resolution };
            (
                "reverse_engineered",
                game::random_reverse_engineered(spec, rule, &mut rng).stage(Stage::Game)?,
            )
        }
        GameSection::File { .. } => unreachable!(),
    };
    let mut checks = serde_json::Map::new();
    checks.insert(
        "reward_bound".into(),
        json!({ "max_abs": game.audit_reward_bound(), "r_max": game.spec.r_max, "passed": true }),
    );
    checks.insert("decomposition".into(), json!(game.decomposition().is_some()));
    if let Some(residual) = game.bellman_audit() {
        checks.insert("bellman_residual".into(), json!(residual));
    }
    let mut doc = game.to_document();
    doc.provenance.insert("generator".into(), json!(kind));
    doc.provenance.insert("seed".into(), json!(exp.seed));
    doc.provenance
        .insert("config_schema_version".into(), json!(exp.config.schema_version));
    doc.provenance.insert("checks".into(), serde_json::Value::Object(checks));
    Ok(doc)
}

fn write_game(exp: &Experiment, doc: &GameDocument) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| CliError::other(Stage::Output, e.to_string()))?;
    text.push('\n');
    exp.write("game.json", text.as_bytes())
}

pub fn cmd_gen_game(exp: &Experiment) -> Result<(), CliError> {
    let doc = build_game(exp)?;
    write_game(exp, &doc)
}

fn solve_oracle(exp: &Experiment, game: &Game) -> Result<Option<(TabularGame<f64>, QTable<f64>, serde_json::Value)>, CliError> {
    let Some(o) = &exp.config.oracle else {
        return Ok(None);
    };
    let tg = oracle::discretize::<f64>(game, o.resolution).stage(Stage::Oracle)?;
    let vi = tg.value_iteration(o.tol).stage(Stage::Oracle)?;
    let info = json!({
        "resolution": o.resolution,
        "tol": o.tol,
        "iterations": vi.iterations,
        "residual": vi.residual,
        "averaged": tg.is_averaged(),
    });
    Ok(Some((tg, vi.q, info)))
}

pub fn cmd_solve(exp: &Experiment) -> Result<(), CliError> {
    if exp.config.oracle.is_none() {
        return Err(CliError::config(Stage::Config, "solve needs an [oracle] section"));
    }
    let doc = build_game(exp)?;
    write_game(exp, &doc)?;
    let (_, q, info) = solve_oracle(exp, &doc.game)?.expect("oracle section present");
    let mut bin = Vec::new();
    q.write_binary(&mut bin).stage(Stage::Output)?;
    exp.write("qstar.bin", &bin)?;
    let mut csv = Vec::new();
    q.write_csv(&mut csv).stage(Stage::Output)?;
    exp.write("qstar.csv", &csv)?;
    exp.write("solve.json", format!("{info:#}\n").as_bytes())
}

/// Bound reports that only need a convergence report.
pub fn run_bounds(report: &ConvergenceReport, suites: &[BoundSuite], phi: f64) -> Result<Vec<BoundReport>, CliError> {
    let mut out = Vec::new();
    for suite in suites {
        match suite {
            BoundSuite::PolicyGap => out.extend(analysis::policy_gap_from_report(report)),
            BoundSuite::CumulativeRecursion => out.push(analysis::check_cumulative_recursion(report)),
            BoundSuite::ErrorPropagation => {
                out.push(analysis::error_propagation_report(report, phi).stage(Stage::Bounds)?)
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn cmd_run(exp: &Experiment) -> Result<(), CliError> {
    let mut cfg: FqiConfig = exp
        .config
        .fqi
        .clone()
        .ok_or_else(|| CliError::config(Stage::Config, "run needs an [fqi] section"))?;
    cfg.seed = exp.seed;
    let doc = build_game(exp)?;
    write_game(exp, &doc)?;
    let game = &doc.game;
    cfg.validate(&game.spec).stage(Stage::Config)?;
    let solved = solve_oracle(exp, game)?;
    let audit = solved.as_ref().map(|(tg, q, _)| Audit { tg, qstar: q });
    let mut fitter = NetworkFitter::<f64>::new(&game.spec, &cfg);
    let outcome = run_mafqi(game, &cfg, &mut fitter, audit).stage(Stage::Fqi)?;

    let mut csv = Vec::new();
    outcome.report.write_csv(&mut csv).stage(Stage::Output)?;
    exp.write("convergence.csv", &csv)?;
    let report_json = serde_json::to_string_pretty(&outcome.report).map_err(|e| CliError::other(Stage::Output, e.to_string()))?;
    exp.write("report.json", format!("{report_json}\n").as_bytes())?;
    let mut ckpt = Vec::new();
    outcome.critic.write_checkpoint(&mut ckpt).stage(Stage::Output)?;
    exp.write("critic.ckpt", &ckpt)?;
    if let Some((tg, _, info)) = &solved {
        exp.write("solve.json", format!("{info:#}\n").as_bytes())?;
        exp.write("policy.csv", &policy_csv(tg, &outcome.critic))?;
    }

    let analysis = exp.analysis();
    let suites: Vec<BoundSuite> = analysis.bounds.iter().copied().filter(|b| b.needs_run()).collect();
    let reports = run_bounds(&outcome.report, &suites, exp.phi(game.spec.gamma))?;
    let mut jsonl = Vec::new();
    analysis::write_jsonl(&reports, &mut jsonl).stage(Stage::Output)?;
    exp.write("bounds.jsonl", &jsonl)
}

/// Greedy joint action of the critic at every oracle node.
fn policy_csv(tg: &TabularGame<f64>, critic: &DecomposedQ<f64>) -> Vec<u8> {
    let spec = &tg.spec;
    let mut text = String::from("node");
    for i in 0..spec.agents {
        text.push_str(&format!(",a{i}"));
    }
    text.push('\n');
    for node in 0..tg.nodes() {
        let a = critic.igm_argmax(&tg.node_state(node));
        text.push_str(&node.to_string());
        for ai in a {
            text.push_str(&format!(",{ai}"));
        }
        text.push('\n');
    }
    text.into_bytes()
}

pub fn cmd_bounds(exp: &Experiment) -> Result<(), CliError> {
    let analysis = exp.analysis();
    let mut reports = Vec::new();
    if analysis.bounds.iter().any(|b| b.needs_run()) {
        let path = exp.out.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::missing(Stage::Bounds, format!("{}: {e}; run `mafqi run` first", path.display()))
        })?;
        let report: ConvergenceReport =
            serde_json::from_str(&text).map_err(|e| CliError::other(Stage::Bounds, format!("{}: {e}", path.display())))?;
        let suites: Vec<BoundSuite> = analysis.bounds.iter().copied().filter(|b| b.needs_run()).collect();
        reports.extend(run_bounds(&report, &suites, exp.phi(report.gamma))?);
    }
    for suite in &analysis.bounds {
        match suite {
            BoundSuite::Rademacher => reports.push(rademacher_suite(&analysis.rademacher, exp.seed)?),
            BoundSuite::Generalization => {
                reports.extend(generalization_suite(&analysis.generalization, analysis.delta, exp.seed)?)
            }
            BoundSuite::LipschitzL2Linf => reports.extend(lipschitz_suite(&analysis.lipschitz, exp.seed)?),
            _ => {}
        }
    }
    let mut jsonl = Vec::new();
    analysis::write_jsonl(&reports, &mut jsonl).stage(Stage::Output)?;
    exp.write("bounds_suite.jsonl", &jsonl)?;
    let mut csv = Vec::new();
    analysis::write_summary_csv(&analysis::summarize(&reports), &mut csv).stage(Stage::Output)?;
    exp.write("bounds_summary.csv", &csv)
}

/// Finite-candidate Rademacher estimate on uniform inputs in `[−1, 1]^D`.
pub fn rademacher_suite(cfg: &config::RademacherSuite, seed: u64) -> Result<BoundReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, RADEMACHER_TAG));
    let data: Vec<Vec<f64>> = (0..cfg.n)
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let candidates: Vec<_> = (0..cfg.candidates)
        .map(|_| analysis::sample_path_norm_ball::<f64, _>(cfg.dim, cfg.width, cfg.path_norm, &mut rng))
        .collect();
    let est = analysis::empirical_rademacher(&candidates, &data, cfg.sign_draws, cfg.path_norm, &mut rng)
        .stage(Stage::Bounds)?;
    Ok(est.report)
}

pub fn generalization_suite(cfg: &config::GeneralizationSuite, delta: f64, seed: u64) -> Result<Vec<BoundReport>, CliError> {
    let trial = cfg.trial(delta);
    (0..cfg.trials)
        .map(|t| analysis::teacher_student_trial(&trial, derive_seed(seed, t, GENERALIZATION_TAG)).stage(Stage::Bounds))
        .collect()
}

/// Random interior-maximum bump mixtures, cycling through `cfg.dims`.
pub fn lipschitz_suite(cfg: &config::LipschitzSuite, seed: u64) -> Result<Vec<BoundReport>, CliError> {
    if cfg.dims.is_empty() || cfg.dims.contains(&0) {
        return Err(CliError::config(Stage::Config, "analysis.lipschitz.dims must list positive dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, LIPSCHITZ_TAG));
    (0..cfg.functions)
        .map(|j| {
            let d = cfg.dims[j % cfg.dims.len()];
            let f = BumpMixture::random_interior(d, &mut rng);
            let res = ((cfg.grid_points as f64).powf(1.0 / d as f64).round() as usize).max(2);
            let mut r = analysis::lipschitz_l2_linf_check(&f.grid(res), f.lipschitz()).stage(Stage::Bounds)?;
            r.inputs.insert("function".into(), j as f64);
            Ok(r)
        })
        .collect()
}
