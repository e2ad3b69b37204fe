//! JSON problem configuration: grid, factored dynamics, cost, boundaries,
//! and solver knobs. Expression strings keep the problem data readable;
//! every string is parsed and shape-checked before a solve starts.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::als::AlsOptions;
use crate::expr::{parse, ExprAst, ExprError};
use crate::grid_fd::{Grid, GridDim, GridError};
use crate::hjb::{
    BoundarySpec, BoundaryValue, FaceCondition, HjbProblem, RegionCondition, SeparatedExpr,
    Setting, Side, SolveOptions, TerminalCost,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("in {context}: {source}")]
    Expr {
        context: String,
        source: ExprError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridDimConfig {
    pub points: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub periodic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostConfig {
    /// Terms of q(x); each term lists one expression per dimension.
    pub q_terms: Vec<Vec<String>>,
    /// Control penalty matrix R (m × m).
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TerminalConfig {
    /// Per-dimension additive costs `Σ_i c_i(x_i)`.
    AdditiveCost(Vec<String>),
    /// Desirability terms directly.
    Psi(Vec<Vec<String>>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FiniteHorizonConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub terminal: TerminalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SettingConfig {
    FirstExit,
    FiniteHorizon(FiniteHorizonConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ValueConfig {
    Absorbing,
    /// Product of per-dimension expressions, in desirability space.
    Psi(Vec<String>),
    /// Constant exit cost, transformed through `exp(−c/λ)`.
    Cost(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FaceConfig {
    pub dim: usize,
    pub side: String,
    pub value: ValueConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionConfig {
    /// Inclusive node-index ranges, one per dimension.
    pub ranges: Vec<[usize; 2]>,
    pub value: ValueConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoundariesConfig {
    #[serde(default)]
    pub faces: Vec<FaceConfig>,
    #[serde(default)]
    pub regions: Vec<RegionConfig>,
}

fn default_tolerance() -> f64 {
    1e-5
}
fn default_max_rank() -> usize {
    20
}
fn default_max_sweeps() -> usize {
    200
}
fn default_stagnation() -> f64 {
    1e-3
}
fn default_initial_rank() -> usize {
    1
}
fn default_operator_tol() -> Option<f64> {
    Some(1e-9)
}
fn default_accuracy() -> u32 {
    8
}
fn default_matching_samples() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_stagnation")]
    pub stagnation: f64,
    #[serde(default)]
    pub regularization: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial_rank")]
    pub initial_rank: usize,
    #[serde(default = "default_operator_tol")]
    pub operator_tol: Option<f64>,
    #[serde(default = "default_accuracy")]
    pub accuracy_order: u32,
    #[serde(default = "default_matching_samples")]
    pub matching_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// On-disk problem description. See the repository README for the format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemConfig {
    #[serde(default)]
    pub comment: String,
    pub grid: Vec<GridDimConfig>,
    /// `dynamics[i][t][k]`: factor `k` of term `t` of the drift in state
    /// dimension `i`.
    pub dynamics: Vec<Vec<Vec<String>>>,
    /// `control[i][j][t][k]`: entry (state dim `i`, input `j`) of `G`.
    pub control: Vec<Vec<Vec<Vec<String>>>>,
    /// Noise map `B`, same shape as `control`.
    pub noise: Vec<Vec<Vec<Vec<String>>>>,
    pub cost: CostConfig,
    /// Noise covariance Σ_ε; identity when omitted.
    #[serde(default)]
    pub sigma_eps: Option<Vec<Vec<f64>>>,
    pub setting: SettingConfig,
    pub boundaries: BoundariesConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ProblemConfig {
    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| ConfigError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Uniform override of the per-dimension node count. Interior region
    /// indices are rescaled proportionally so boxes keep their coordinates.
    pub fn with_grid_points(mut self, points: usize) -> Self {
        let old: Vec<usize> = self.grid.iter().map(|g| g.points).collect();
        for g in &mut self.grid {
            g.points = points;
        }
        for region in &mut self.boundaries.regions {
            for (dim, r) in region.ranges.iter_mut().enumerate() {
                let divisor = (old[dim] - 1).max(1) as f64;
                let scale = (points - 1) as f64 / divisor;
                let lo = (r[0] as f64 * scale).round() as usize;
                let hi = (r[1] as f64 * scale).round() as usize;
                r[0] = lo.min(points - 1);
                r[1] = hi.clamp(r[0], points - 1);
            }
        }
        self
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let dims = self
            .grid
            .iter()
            .map(|g| GridDim::new(g.points, g.lower, g.upper, g.periodic))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.is_empty() {
            return Err(ConfigError::Invalid("grid needs at least one dimension".into()));
        }
        Ok(Grid::new(dims))
    }

    fn parse_expr(&self, text: &str, context: &str) -> Result<ExprAst, ConfigError> {
        parse(text).map_err(|source| ConfigError::Expr {
            context: context.to_string(),
            source,
        })
    }

    fn parse_separated(
        &self,
        terms: &[Vec<String>],
        context: &str,
    ) -> Result<SeparatedExpr, ConfigError> {
        let d = self.grid.len();
        let mut out = Vec::with_capacity(terms.len());
        for (t, term) in terms.iter().enumerate() {
            if term.len() != d {
                return Err(ConfigError::Invalid(format!(
                    "{context} term {t} has {} factors, expected {d}",
                    term.len()
                )));
            }
            let mut factors = Vec::with_capacity(d);
            for (k, text) in term.iter().enumerate() {
                factors.push(self.parse_expr(text, &format!("{context} term {t} factor {k}"))?);
            }
            out.push(factors);
        }
        Ok(SeparatedExpr { terms: out })
    }

    fn parse_value(&self, v: &ValueConfig, context: &str) -> Result<BoundaryValue, ConfigError> {
        let d = self.grid.len();
        Ok(match v {
            ValueConfig::Absorbing => BoundaryValue::Absorbing,
            ValueConfig::Cost(c) => BoundaryValue::Cost(*c),
            ValueConfig::Psi(factors) => {
                if factors.len() != d {
                    return Err(ConfigError::Invalid(format!(
                        "{context}: boundary value needs {d} factors, got {}",
                        factors.len()
                    )));
                }
                let mut parsed = Vec::with_capacity(d);
                for (k, text) in factors.iter().enumerate() {
                    parsed.push(self.parse_expr(text, &format!("{context} factor {k}"))?);
                }
                BoundaryValue::Psi(parsed)
            }
        })
    }

    fn matrix(&self, rows: &[Vec<f64>], name: &str, n: usize) -> Result<Array2<f64>, ConfigError> {
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(ConfigError::Invalid(format!("{name} must be {n}×{n}")));
        }
        Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
    }

    /// Build the in-memory problem, boundary spec, and solver options.
    pub fn build(&self) -> Result<(HjbProblem, BoundarySpec, SolveOptions), ConfigError> {
        let grid = self.grid()?;
        let d = grid.dim_count();
        if self.dynamics.len() != d {
            return Err(ConfigError::Invalid(format!(
                "dynamics lists {} components for a {d}-dimensional grid",
                self.dynamics.len()
            )));
        }
        let m = self
            .control
            .first()
            .map(|row| row.len())
            .ok_or_else(|| ConfigError::Invalid("control map is empty".into()))?;
        if m == 0 {
            return Err(ConfigError::Invalid("need at least one control input".into()));
        }
        let mut dynamics_f = Vec::with_capacity(d);
        for (i, terms) in self.dynamics.iter().enumerate() {
            dynamics_f.push(self.parse_separated(terms, &format!("dynamics[{i}]"))?);
        }
        let parse_map = |map: &Vec<Vec<Vec<Vec<String>>>>,
                         name: &str|
         -> Result<Vec<Vec<SeparatedExpr>>, ConfigError> {
            if map.len() != d {
                return Err(ConfigError::Invalid(format!(
                    "{name} lists {} rows for a {d}-dimensional grid",
                    map.len()
                )));
            }
            let mut out = Vec::with_capacity(d);
            for (i, row) in map.iter().enumerate() {
                if row.len() != m {
                    return Err(ConfigError::Invalid(format!(
                        "{name}[{i}] has {} columns, expected {m}",
                        row.len()
                    )));
                }
                let mut cols = Vec::with_capacity(m);
                for (j, terms) in row.iter().enumerate() {
                    cols.push(self.parse_separated(terms, &format!("{name}[{i}][{j}]"))?);
                }
                out.push(cols);
            }
            Ok(out)
        };
        let control_g = parse_map(&self.control, "control")?;
        let noise_b = parse_map(&self.noise, "noise")?;
        let r_matrix = self.matrix(&self.cost.r, "R", m)?;
        let sigma_eps = match &self.sigma_eps {
            Some(rows) => self.matrix(rows, "sigma_eps", m)?,
            None => Array2::eye(m),
        };
        let state_cost_q = self.parse_separated(&self.cost.q_terms, "cost.q_terms")?;
        let setting = match &self.setting {
            SettingConfig::FirstExit => Setting::FirstExit,
            SettingConfig::FiniteHorizon(fh) => {
                let terminal = match &fh.terminal {
                    TerminalConfig::AdditiveCost(costs) => {
                        if costs.len() != d {
                            return Err(ConfigError::Invalid(format!(
                                "additive terminal cost needs {d} expressions, got {}",
                                costs.len()
                            )));
                        }
                        let mut parsed = Vec::with_capacity(d);
                        for (k, text) in costs.iter().enumerate() {
                            parsed.push(self.parse_expr(text, &format!("terminal cost [{k}]"))?);
                        }
                        TerminalCost::AdditiveCost(parsed)
                    }
                    TerminalConfig::Psi(terms) => {
                        TerminalCost::Psi(self.parse_separated(terms, "terminal psi")?)
                    }
                };
                Setting::FiniteHorizon {
                    horizon: fh.horizon,
                    dt: fh.dt,
                    terminal,
                }
            }
        };

        let mut faces = Vec::with_capacity(self.boundaries.faces.len());
        for (n, f) in self.boundaries.faces.iter().enumerate() {
            let side = match f.side.as_str() {
                "lower" => Side::Lower,
                "upper" => Side::Upper,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "face {n}: side must be \"lower\" or \"upper\", got \"{other}\""
                    )))
                }
            };
            faces.push(FaceCondition {
                dim: f.dim,
                side,
                value: self.parse_value(&f.value, &format!("face {n}"))?,
            });
        }
        let mut regions = Vec::with_capacity(self.boundaries.regions.len());
        for (n, r) in self.boundaries.regions.iter().enumerate() {
            regions.push(RegionCondition {
                ranges: r.ranges.iter().map(|&[lo, hi]| (lo, hi)).collect(),
                value: self.parse_value(&r.value, &format!("region {n}"))?,
            });
        }

        let problem = HjbProblem {
            grid,
            dynamics_f,
            control_g,
            noise_b,
            sigma_eps,
            r_matrix,
            lambda: self.cost.lambda,
            state_cost_q,
            setting,
            accuracy_order: self.solver.accuracy_order,
        };
        let bc = BoundarySpec { faces, regions };
        let solve = SolveOptions {
            als: AlsOptions {
                target_tolerance: self.solver.tolerance,
                max_rank: self.solver.max_rank,
                max_sweeps: self.solver.max_sweeps,
                stagnation_threshold: self.solver.stagnation,
                regularization: self.solver.regularization,
                seed: self.solver.seed,
                initial_rank: self.solver.initial_rank,
                track_objective: true,
            },
            operator_tol: self.solver.operator_tol,
            matching_samples: self.solver.matching_samples,
            skip_matching: false,
        };
        Ok((problem, bc, solve))
    }
}
