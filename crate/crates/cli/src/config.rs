//! Experiment configuration files.

use std::path::{Path, PathBuf};

use mafqi::analysis::TeacherStudent;
use mafqi::approx::FitConfig;
use mafqi::fqi::FqiConfig;
use mafqi::GameSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub game: Option<GameSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub fqi: Option<FqiConfig>,
    #[serde(default)]
    pub analysis: Option<AnalysisSection>,
}

/// Either one action count shared by every agent or one count per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Actions {
    Shared(usize),
    PerAgent(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GameSection {
    /// Random game with additive reward and averaged per-agent kernels.
    Decomposable {
        agents: usize,
        state_dim: usize,
        actions: Actions,
        gamma: f64,
        r_max: f64,
        #[serde(default = "default_bumps")]
        bumps: usize,
    },
    /// Random additive `Q*` with a coupled kernel; the reward is derived
    /// from `Q*`.
    ReverseEngineered {
        agents: usize,
        state_dim: usize,
        actions: Actions,
        gamma: f64,
        r_max: f64,
        /// Midpoint resolution of the reward's expectation; defaults to the
        /// oracle resolution so the oracle recovers `Q*` exactly.
        #[serde(default)]
        expectation_resolution: Option<usize>,
    },
    /// Game JSON written by `gen-game`, relative to the config file.
    File { path: PathBuf },
}

fn default_bumps() -> usize {
    2
}

impl GameSection {
    pub fn spec(&self) -> Option<mafqi::Result<GameSpec>> {
        let (agents, state_dim, actions, gamma, r_max) = match self {
            GameSection::Decomposable {
                agents,
                state_dim,
                actions,
                gamma,
                r_max,
                ..
            }
            | GameSection::ReverseEngineered {
                agents,
                state_dim,
                actions,
                gamma,
                r_max,
                ..
            } => (*agents, *state_dim, actions, *gamma, *r_max),
            GameSection::File { .. } => return None,
        };
        let actions = match actions {
            Actions::Shared(a) => vec![*a; agents],
            Actions::PerAgent(v) => v.clone(),
        };
        Some(GameSpec::new(agents, state_dim, actions, gamma, r_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub resolution: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSuite {
    PolicyGap,
    CumulativeRecursion,
    ErrorPropagation,
    Rademacher,
    Generalization,
    LipschitzL2Linf,
}

impl BoundSuite {
    /// Suites that read the convergence report of a previous `run`.
    pub fn needs_run(self) -> bool {
        matches!(
            self,
            BoundSuite::PolicyGap | BoundSuite::CumulativeRecursion | BoundSuite::ErrorPropagation
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_suites")]
    pub bounds: Vec<BoundSuite>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Concentrability coefficient; `1/(1−γ)²` when absent.
    #[serde(default)]
    pub phi: Option<f64>,
    #[serde(default)]
    pub rademacher: RademacherSuite,
    #[serde(default)]
    pub generalization: GeneralizationSuite,
    #[serde(default)]
    pub lipschitz: LipschitzSuite,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            bounds: default_suites(),
            delta: default_delta(),
            phi: None,
            rademacher: RademacherSuite::default(),
            generalization: GeneralizationSuite::default(),
            lipschitz: LipschitzSuite::default(),
        }
    }
}

fn default_suites() -> Vec<BoundSuite> {
    vec![
        BoundSuite::PolicyGap,
        BoundSuite::CumulativeRecursion,
        BoundSuite::ErrorPropagation,
    ]
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RademacherSuite {
    /// Path-norm radius `Q`.
    pub path_norm: f64,
    pub dim: usize,
    pub n: usize,
    pub candidates: usize,
    pub width: usize,
    pub sign_draws: usize,
}

impl Default for RademacherSuite {
    fn default() -> Self {
        RademacherSuite {
            path_norm: 4.0,
            dim: 3,
            n: 256,
            candidates: 256,
            width: 8,
            sign_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizationSuite {
    pub trials: usize,
    pub dim: usize,
    pub teacher_width: usize,
    pub student_width: usize,
    pub n: usize,
    pub fresh: usize,
    pub fit: FitConfig,
}

impl Default for GeneralizationSuite {
    fn default() -> Self {
        let t = TeacherStudent::default();
        GeneralizationSuite {
            trials: 10,
            dim: t.dim,
            teacher_width: t.teacher_width,
            student_width: t.student_width,
            n: t.n,
            fresh: t.fresh,
            fit: t.fit,
        }
    }
}

impl GeneralizationSuite {
    pub fn trial(&self, delta: f64) -> TeacherStudent {
        TeacherStudent {
            dim: self.dim,
            teacher_width: self.teacher_width,
            student_width: self.student_width,
            n: self.n,
            fresh: self.fresh,
            delta,
            fit: self.fit.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzSuite {
    pub functions: usize,
    pub dims: Vec<usize>,
    /// Grid nodes per function; the per-axis resolution is the `d`-th root.
    pub grid_points: usize,
}

impl Default for LipschitzSuite {
    fn default() -> Self {
        LipschitzSuite {
            functions: 50,
            dims: vec![1, 2],
            grid_points: 1 << 16,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(Stage::Config, e.to_string().trim_end().to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let first = inner.lines().next().unwrap_or_default();
            CliError::config(Stage::Config, format!("at `{path}`: {first}"))
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::config(
                Stage::Config,
                format!(
                    "at `schema_version`: unsupported version {}, expected {CONFIG_SCHEMA_VERSION}",
                    cfg.schema_version
                ),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
