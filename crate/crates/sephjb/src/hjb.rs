//! Discretization of the linear desirability equation.
//!
//! Problem data (drift, control/noise maps, state cost) enters in factored
//! univariate form. The operator
//!
//! ```text
//! A = fᵀ∇ + ½ Tr(∇² Σ_t) − (1/λ)·diag(q),   Σ_t = B Σ_ε Bᵀ
//! ```
//!
//! is assembled term by term from rank-one separated pieces, so its
//! separation rank is known exactly before construction. Dirichlet data on
//! axis-aligned index boxes (interior hypercubes and outer faces) is imposed
//! by projector surgery on the operator, and the resulting linear system is
//! handed to alternating least squares. The desirability feeds the value
//! function through `V = −λ·log Ψ`.

use ndarray::{Array1, Array2};
use ndarray_linalg::Inverse;
use thiserror::Error;

use crate::als::{als_reduce, als_solve, AlsError, AlsOptions, AlsReport};
use crate::expr::{ExprAst, ExprError};
use crate::grid_fd::{d_matrix, Grid, GridError, StencilSpec};
use crate::sep_tensor::{SepError, SepOperator, SepVector};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Shape(#[from] SepError),
    #[error(transparent)]
    Als(#[from] AlsError),
    #[error("matching condition violated: max relative discrepancy {max_discrepancy:.3e} (threshold {threshold:.1e})")]
    Matching {
        max_discrepancy: f64,
        threshold: f64,
    },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("state cost negative at node {node:?} (x = {coords:?}): q = {value:.6e}")]
    NegativeStateCost {
        node: Vec<usize>,
        coords: Vec<f64>,
        value: f64,
    },
    #[error("boundary specification is empty")]
    EmptyBoundary,
    #[error("boundary conditions {a} and {b} overlap with conflicting values (discrepancy {discrepancy:.3e})")]
    ConflictingRegions {
        a: String,
        b: String,
        discrepancy: f64,
    },
}

/// Sum of products of univariate factors: `Σ_t Π_i factor[t][i](x_i)`.
/// An empty term list is the zero function.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedExpr {
    pub terms: Vec<Vec<ExprAst>>,
}

impl SeparatedExpr {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    /// Constant function as a single rank-one term.
    pub fn constant(dim_count: usize, value: f64) -> Self {
        if value == 0.0 {
            return Self::zero();
        }
        let mut term = vec![ExprAst::Number(1.0); dim_count];
        term[0] = ExprAst::Number(value);
        Self { terms: vec![term] }
    }

    /// One product term; factor `i` depends on dimension `i`.
    pub fn product(factors: Vec<ExprAst>) -> Self {
        Self {
            terms: vec![factors],
        }
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.iter().zip(x.iter()).map(|(f, &xi)| f.eval(xi)).product::<f64>())
            .sum()
    }

    /// Per-term per-dimension node samples.
    fn sample_terms(&self, grid: &Grid) -> Result<Vec<Vec<Array1<f64>>>, HjbError> {
        let mut out = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            if term.len() != grid.dim_count() {
                return Err(HjbError::Invalid(format!(
                    "term has {} factors for a {}-dimensional grid",
                    term.len(),
                    grid.dim_count()
                )));
            }
            let mut per_dim = Vec::with_capacity(term.len());
            for (i, f) in term.iter().enumerate() {
                per_dim.push(crate::expr::sample(f, grid, i)?);
            }
            out.push(per_dim);
        }
        Ok(out)
    }

    /// The function as a separated grid tensor.
    pub fn sample_vector(&self, grid: &Grid) -> Result<SepVector, HjbError> {
        let sizes = grid.mode_sizes();
        let terms = self.sample_terms(grid)?;
        Ok(SepVector::from_terms(
            &sizes,
            vec![1.0; terms.len()],
            terms,
        )?)
    }
}

/// Terminal condition of a finite-horizon problem, either directly in
/// desirability or as an additively-separable cost `Σ_i c_i(x_i)` (whose
/// transform `exp(−Σc_i/λ)` stays rank one).
#[derive(Debug, Clone)]
pub enum TerminalCost {
    Psi(SeparatedExpr),
    AdditiveCost(Vec<ExprAst>),
}

#[derive(Debug, Clone)]
pub enum Setting {
    FirstExit,
    FiniteHorizon {
        horizon: f64,
        dt: f64,
        terminal: TerminalCost,
    },
}

/// Dynamics, cost, and noise data in factored univariate form.
#[derive(Debug, Clone)]
pub struct HjbProblem {
    pub grid: Grid,
    /// Drift component per state dimension.
    pub dynamics_f: Vec<SeparatedExpr>,
    /// `control_g[i][j]`: entry (state dim `i`, input `j`) of `G`.
    pub control_g: Vec<Vec<SeparatedExpr>>,
    /// Noise map `B`, same shape as `control_g`.
    pub noise_b: Vec<Vec<SeparatedExpr>>,
    /// Noise covariance `Σ_ε` (m × m, SPD).
    pub sigma_eps: Array2<f64>,
    /// Control penalty `R` (m × m, SPD).
    pub r_matrix: Array2<f64>,
    pub lambda: f64,
    pub state_cost_q: SeparatedExpr,
    pub setting: Setting,
    /// Finite-difference accuracy order for all derivative factors.
    pub accuracy_order: u32,
}

impl HjbProblem {
    pub fn dim_count(&self) -> usize {
        self.grid.dim_count()
    }

    pub fn input_count(&self) -> usize {
        self.r_matrix.nrows()
    }

    /// `G(x)` as a dense d×m matrix.
    pub fn g_at(&self, x: &[f64]) -> Array2<f64> {
        let (d, m) = (self.dim_count(), self.input_count());
        Array2::from_shape_fn((d, m), |(i, j)| self.control_g[i][j].eval(x))
    }

    /// `B(x)` as a dense d×m matrix.
    pub fn b_at(&self, x: &[f64]) -> Array2<f64> {
        let (d, m) = (self.dim_count(), self.input_count());
        Array2::from_shape_fn((d, m), |(i, j)| self.noise_b[i][j].eval(x))
    }

    /// `f(x)` as a dense vector.
    pub fn f_at(&self, x: &[f64]) -> Array1<f64> {
        Array1::from_shape_fn(self.dim_count(), |i| self.dynamics_f[i].eval(x))
    }

    /// Structural validation: shapes, SPD matrices, positivity of λ and q.
    pub fn validate(&self) -> Result<(), HjbError> {
        let d = self.dim_count();
        let m = self.input_count();
        if self.dynamics_f.len() != d {
            return Err(HjbError::Invalid(format!(
                "dynamics must list {d} components, got {}",
                self.dynamics_f.len()
            )));
        }
        for gd in self.grid.dims() {
            if gd.points < 10 {
                return Err(HjbError::Invalid(format!(
                    "solver grids need at least 10 points per dimension, got {}",
                    gd.points
                )));
            }
        }
        if self.control_g.len() != d || self.noise_b.len() != d {
            return Err(HjbError::Invalid(
                "control and noise maps must have one row per state dimension".into(),
            ));
        }
        for (name, mat) in [("control", &self.control_g), ("noise", &self.noise_b)] {
            for row in mat.iter() {
                if row.len() != m {
                    return Err(HjbError::Invalid(format!(
                        "{name} map must have {m} columns, got {}",
                        row.len()
                    )));
                }
            }
        }
        if self.r_matrix.dim() != (m, m) || self.sigma_eps.dim() != (m, m) {
            return Err(HjbError::Invalid("R and Σ_ε must be m × m".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(HjbError::Invalid(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        for (name, mat) in [("R", &self.r_matrix), ("sigma_eps", &self.sigma_eps)] {
            if !is_spd(mat) {
                return Err(HjbError::Invalid(format!("{name} must be symmetric positive definite")));
            }
        }
        if let Setting::FiniteHorizon { horizon, dt, .. } = &self.setting {
            if !(*dt > 0.0) || !(*horizon > 0.0) || dt > horizon {
                return Err(HjbError::Invalid(format!(
                    "finite horizon needs 0 < dt ≤ T, got dt = {dt}, T = {horizon}"
                )));
            }
        }
        self.check_state_cost_nonnegative()?;
        Ok(())
    }

    /// q(x) ≥ 0, checked exhaustively on grids small enough to expand and on
    /// quasi-random nodes otherwise.
    fn check_state_cost_nonnegative(&self) -> Result<(), HjbError> {
        let tol = -1e-12;
        let sizes = self.grid.mode_sizes();
        let total = sizes
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .unwrap_or(usize::MAX);
        if total <= 1 << 16 {
            let mut idx = vec![0usize; sizes.len()];
            loop {
                let coords: Vec<f64> = idx
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| self.grid.dim(i).node(k))
                    .collect();
                let v = self.state_cost_q.eval(&coords);
                if v < tol {
                    return Err(HjbError::NegativeStateCost {
                        node: idx.clone(),
                        coords,
                        value: v,
                    });
                }
                // row-major increment
                let mut carry = true;
                for i in (0..sizes.len()).rev() {
                    if carry {
                        idx[i] += 1;
                        if idx[i] == sizes[i] {
                            idx[i] = 0;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
        } else {
            for (node, coords) in halton_nodes(&self.grid, 4096) {
                let v = self.state_cost_q.eval(&coords);
                if v < tol {
                    return Err(HjbError::NegativeStateCost {
                        node,
                        coords,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

fn is_spd(m: &Array2<f64>) -> bool {
    use ndarray_linalg::{Cholesky, UPLO};
    let n = m.nrows();
    if m.ncols() != n {
        return false;
    }
    for i in 0..n {
        for j in 0..n {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-12 * m[[i, i]].abs().max(1.0) {
                return false;
            }
        }
    }
    m.cholesky(UPLO::Lower).is_ok()
}

/// Quasi-random grid nodes: Halton points mapped to the nearest node.
fn halton_nodes(grid: &Grid, count: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let d = grid.dim_count();
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let mut node = Vec::with_capacity(d);
        let mut coords = Vec::with_capacity(d);
        for i in 0..d {
            let base = PRIMES[i % PRIMES.len()];
            let u = halton(n + 1, base);
            let gd = grid.dim(i);
            let k = ((u * gd.points as f64) as usize).min(gd.points - 1);
            node.push(k);
            coords.push(gd.node(k));
        }
        out.push((node, coords));
    }
    out
}

fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Outcome of the matching-condition check `λ G R⁻¹ Gᵀ = B Σ_ε Bᵀ`.
#[derive(Debug, Clone)]
pub struct MatchingReport {
    pub max_discrepancy: f64,
    pub worst_point: Vec<f64>,
    pub samples: usize,
    pub threshold: f64,
}

impl MatchingReport {
    pub fn passed(&self) -> bool {
        self.max_discrepancy <= self.threshold
    }
}

pub const MATCHING_THRESHOLD: f64 = 1e-8;

/// Evaluate both sides of the matching condition at quasi-random grid
/// points and report the worst relative Frobenius discrepancy.
pub fn check_matching(p: &HjbProblem, sample_count: usize) -> Result<MatchingReport, HjbError> {
    let r_inv = p
        .r_matrix
        .inv()
        .map_err(|_| HjbError::Invalid("R is not invertible".into()))?;
    let mut max_discrepancy: f64 = 0.0;
    let mut worst_point = vec![0.0; p.dim_count()];
    for (_, coords) in halton_nodes(&p.grid, sample_count.max(1)) {
        let g = p.g_at(&coords);
        let b = p.b_at(&coords);
        let lhs = g.dot(&r_inv).dot(&g.t()) * p.lambda;
        let rhs = b.dot(&p.sigma_eps).dot(&b.t());
        let diff = &lhs - &rhs;
        let n_lhs = frob(&lhs);
        let n_rhs = frob(&rhs);
        let denom = n_lhs.max(n_rhs);
        let disc = if denom == 0.0 { 0.0 } else { frob(&diff) / denom };
        if disc > max_discrepancy {
            max_discrepancy = disc;
            worst_point = coords;
        }
    }
    Ok(MatchingReport {
        max_discrepancy,
        worst_point,
        samples: sample_count,
        threshold: MATCHING_THRESHOLD,
    })
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Exact separation-rank accounting of the assembled operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorRanks {
    pub state_cost: usize,
    pub advection: usize,
    pub diffusion: usize,
    pub predicted: usize,
    pub constructed: usize,
}

/// Assemble `A = fᵀ∇ + ½Tr(∇²Σ_t) − (1/λ)·diag(q)` in separated form.
///
/// The predicted separation rank (state cost `r_q`, advection `Σ_i r_{f_i}`,
/// diffusion counted termwise over the nonzero entries of `Σ_t = BΣ_εBᵀ`)
/// always equals the constructed rank; both are returned.
pub fn build_operator(p: &HjbProblem) -> Result<(SepOperator, OperatorRanks), HjbError> {
    let grid = &p.grid;
    let d = p.dim_count();
    let m = p.input_count();
    let sizes = grid.mode_sizes();
    let spec1 = StencilSpec::new(1, p.accuracy_order)?;
    let spec2 = StencilSpec::new(2, p.accuracy_order)?;
    let d1: Vec<Array2<f64>> = (0..d)
        .map(|k| d_matrix(grid, k, &spec1))
        .collect::<Result<_, _>>()?;
    let d2: Vec<Array2<f64>> = (0..d)
        .map(|k| d_matrix(grid, k, &spec2))
        .collect::<Result<_, _>>()?;

    let mut scales: Vec<f64> = Vec::new();
    let mut terms: Vec<Vec<Array2<f64>>> = Vec::new();

    // diagonal-field term with derivative matrices applied in given slots
    let mut push_term = |coef: f64, samples: &[Array1<f64>], deriv: &[(usize, &Array2<f64>)]| {
        let mats: Vec<Array2<f64>> = (0..d)
            .map(|dim| {
                let diag = Array2::from_diag(&samples[dim]);
                deriv
                    .iter()
                    .find(|(slot, _)| *slot == dim)
                    .map(|(_, dm)| diag.dot(*dm))
                    .unwrap_or(diag)
            })
            .collect();
        scales.push(coef);
        terms.push(mats);
    };

    // (i) state cost: −(1/λ)·diag(q)
    let q_terms = p.state_cost_q.sample_terms(grid)?;
    let state_cost = q_terms.len();
    for t in &q_terms {
        push_term(-1.0 / p.lambda, t, &[]);
    }

    // (ii) advection: Σ_i diag(f_i)·∇_i
    let mut advection = 0;
    for (i, f_i) in p.dynamics_f.iter().enumerate() {
        let f_terms = f_i.sample_terms(grid)?;
        advection += f_terms.len();
        for t in &f_terms {
            push_term(1.0, t, &[(i, &d1[i])]);
        }
    }

    // (iii) diffusion: ½ Σ_{k,j} diag((Σ_t)_{kj})·∇_{k,j}, with Σ_t = BΣ_εBᵀ
    // expanded termwise from the separated entries of B; zero entries of
    // Σ_ε and structurally-zero B entries drop out.
    let mut diffusion = 0;
    let b_samples: Vec<Vec<Vec<Vec<Array1<f64>>>>> = p
        .noise_b
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| e.sample_terms(grid))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    for k in 0..d {
        for j in 0..d {
            for pi in 0..m {
                for qi in 0..m {
                    let sig = p.sigma_eps[[pi, qi]];
                    if sig == 0.0 {
                        continue;
                    }
                    for tb in &b_samples[k][pi] {
                        for tc in &b_samples[j][qi] {
                            let prod: Vec<Array1<f64>> = tb
                                .iter()
                                .zip(tc.iter())
                                .map(|(a, b)| a * b)
                                .collect();
                            let derivs: Vec<(usize, &Array2<f64>)> = if k == j {
                                vec![(k, &d2[k])]
                            } else {
                                vec![(k, &d1[k]), (j, &d1[j])]
                            };
                            push_term(0.5 * sig, &prod, &derivs);
                            diffusion += 1;
                        }
                    }
                }
            }
        }
    }

    let predicted = state_cost + advection + diffusion;
    let op = SepOperator::from_terms(&sizes, scales, terms)?;
    let constructed = op.rank();
    debug_assert_eq!(predicted, constructed);
    Ok((
        op,
        OperatorRanks {
            state_cost,
            advection,
            diffusion,
            predicted,
            constructed,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

/// Dirichlet data for one outer face of the domain.
#[derive(Debug, Clone)]
pub struct FaceCondition {
    pub dim: usize,
    pub side: Side,
    pub value: BoundaryValue,
}

/// Dirichlet data on an interior index hypercube (inclusive ranges).
#[derive(Debug, Clone)]
pub struct RegionCondition {
    pub ranges: Vec<(usize, usize)>,
    pub value: BoundaryValue,
}

/// Boundary value in desirability space: zero (absorbing), a rank-one
/// product of per-dimension expressions, or a constant exit cost that is
/// transformed through `Ψ = exp(−c/λ)`.
#[derive(Debug, Clone)]
pub enum BoundaryValue {
    Absorbing,
    Psi(Vec<ExprAst>),
    Cost(f64),
}

impl BoundaryValue {
    fn psi_factors(&self, d: usize, lambda: f64) -> Option<Vec<ExprAst>> {
        match self {
            BoundaryValue::Absorbing => None,
            BoundaryValue::Psi(f) => Some(f.clone()),
            BoundaryValue::Cost(c) => {
                let mut factors = vec![ExprAst::Number(1.0); d];
                factors[0] = ExprAst::Number((-c / lambda).exp());
                Some(factors)
            }
        }
    }

    fn constant_value(&self, lambda: f64) -> Option<f64> {
        match self {
            BoundaryValue::Absorbing => Some(0.0),
            BoundaryValue::Cost(c) => Some((-c / lambda).exp()),
            BoundaryValue::Psi(factors) => {
                if factors.iter().all(|f| f.is_constant()) {
                    Some(factors.iter().map(|f| f.eval(0.0)).product())
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundarySpec {
    pub faces: Vec<FaceCondition>,
    pub regions: Vec<RegionCondition>,
}

/// Per-dimension 0/1 node masks of one imposed condition, kept so the
/// finite-horizon stepper can re-mask right-hand sides.
#[derive(Debug, Clone)]
pub enum MaskStep {
    /// Multiply by the complement mask (keeps rank).
    Keep(Vec<Array1<f64>>),
    /// `v ← v − P·v` for a rank-one indicator `P` (doubles rank).
    Subtract(Vec<Array1<f64>>),
}

/// Boundary-imposed operator, right-hand side, and rank accounting.
#[derive(Debug, Clone)]
pub struct ImposeOutcome {
    pub operator: SepOperator,
    pub rhs: SepVector,
    /// (description, operator rank before, after) per imposition step.
    pub steps: Vec<(String, usize, usize)>,
    /// `d + 2·r` rank figure for the ungrouped surgery.
    pub paper_accounting: usize,
    pub masks: Vec<MaskStep>,
}

struct NormalizedRegion {
    label: String,
    masks: Vec<Array1<f64>>,
    value_factors: Option<Vec<ExprAst>>, // None = zero
    constant: Option<f64>,
    ranges: Vec<(usize, usize)>,
}

fn face_to_ranges(grid: &Grid, dim: usize, side: Side) -> Vec<(usize, usize)> {
    (0..grid.dim_count())
        .map(|i| {
            if i == dim {
                match side {
                    Side::Lower => (0, 0),
                    Side::Upper => (grid.dim(i).points - 1, grid.dim(i).points - 1),
                }
            } else {
                (0, grid.dim(i).points - 1)
            }
        })
        .collect()
}

fn ranges_to_masks(grid: &Grid, ranges: &[(usize, usize)]) -> Vec<Array1<f64>> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| {
            Array1::from_shape_fn(grid.dim(i).points, |k| {
                if k >= lo && k <= hi {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect()
}

fn normalize_boundary(
    grid: &Grid,
    bc: &BoundarySpec,
    lambda: f64,
) -> Result<Vec<NormalizedRegion>, HjbError> {
    if bc.faces.is_empty() && bc.regions.is_empty() {
        return Err(HjbError::EmptyBoundary);
    }
    let d = grid.dim_count();
    let mut out = Vec::new();
    for (n, f) in bc.faces.iter().enumerate() {
        if f.dim >= d {
            return Err(HjbError::Invalid(format!(
                "face {n} refers to dimension {} of a {d}-dimensional grid",
                f.dim
            )));
        }
        if grid.dim(f.dim).periodic {
            return Err(HjbError::Invalid(format!(
                "face {n}: periodic dimension {} has no outer faces",
                f.dim
            )));
        }
        let ranges = face_to_ranges(grid, f.dim, f.side);
        out.push(NormalizedRegion {
            label: format!(
                "face dim {} {}",
                f.dim,
                match f.side {
                    Side::Lower => "lower",
                    Side::Upper => "upper",
                }
            ),
            masks: ranges_to_masks(grid, &ranges),
            value_factors: f.value.psi_factors(d, lambda),
            constant: f.value.constant_value(lambda),
            ranges,
        });
    }
    for (n, r) in bc.regions.iter().enumerate() {
        if r.ranges.len() != d {
            return Err(HjbError::Invalid(format!(
                "region {n} needs {d} index ranges, got {}",
                r.ranges.len()
            )));
        }
        for (i, &(lo, hi)) in r.ranges.iter().enumerate() {
            if lo > hi || hi >= grid.dim(i).points {
                return Err(HjbError::Invalid(format!(
                    "region {n}: range ({lo}, {hi}) outside dimension {i} with {} nodes",
                    grid.dim(i).points
                )));
            }
        }
        out.push(NormalizedRegion {
            label: format!("region {n}"),
            masks: ranges_to_masks(grid, &r.ranges),
            value_factors: r.value.psi_factors(d, lambda),
            constant: r.value.constant_value(lambda),
            ranges: r.ranges.clone(),
        });
    }
    check_conflicts(grid, &out)?;
    Ok(out)
}

/// Sampled agreement check on pairwise overlaps.
fn check_conflicts(grid: &Grid, regions: &[NormalizedRegion]) -> Result<(), HjbError> {
    for a in 0..regions.len() {
        for b in (a + 1)..regions.len() {
            let overlap: Vec<(usize, usize)> = regions[a]
                .ranges
                .iter()
                .zip(regions[b].ranges.iter())
                .map(|(&(alo, ahi), &(blo, bhi))| (alo.max(blo), ahi.min(bhi)))
                .collect();
            if overlap.iter().any(|&(lo, hi)| lo > hi) {
                continue;
            }
            // corners and center of the overlap box
            let mut worst: f64 = 0.0;
            let corners = 1usize << overlap.len().min(16);
            for c in 0..=corners {
                let coords: Vec<f64> = overlap
                    .iter()
                    .enumerate()
                    .map(|(i, &(lo, hi))| {
                        let k = if c == corners {
                            (lo + hi) / 2
                        } else if c & (1 << i) != 0 {
                            hi
                        } else {
                            lo
                        };
                        grid.dim(i).node(k)
                    })
                    .collect();
                let va = eval_region_value(&regions[a], &coords);
                let vb = eval_region_value(&regions[b], &coords);
                worst = worst.max((va - vb).abs());
            }
            if worst > 1e-9 {
                return Err(HjbError::ConflictingRegions {
                    a: regions[a].label.clone(),
                    b: regions[b].label.clone(),
                    discrepancy: worst,
                });
            }
        }
    }
    Ok(())
}

fn eval_region_value(r: &NormalizedRegion, coords: &[f64]) -> f64 {
    match &r.value_factors {
        None => 0.0,
        Some(f) => f.iter().zip(coords.iter()).map(|(e, &x)| e.eval(x)).product(),
    }
}

/// Replace the operator's action on each Dirichlet region with the identity
/// and accumulate the boundary values into a right-hand side.
///
/// Faces sharing a constant value are imposed together through a per-dim
/// complement mask (rank `r + 2`); every other condition costs at most
/// `2·r + 1` terms.
pub fn impose_dirichlet(
    a: &SepOperator,
    bc: &BoundarySpec,
    grid: &Grid,
    lambda: f64,
) -> Result<ImposeOutcome, HjbError> {
    let regions = normalize_boundary(grid, bc, lambda)?;
    let d = grid.dim_count();
    let sizes = grid.mode_sizes();
    let paper_accounting = d + 2 * a.rank();

    // group faces by identical constant value
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut singles: Vec<usize> = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        let is_face = r
            .ranges
            .iter()
            .filter(|&&(lo, hi)| lo == hi)
            .count()
            == 1
            && r.ranges
                .iter()
                .enumerate()
                .all(|(dd, &(lo, hi))| lo == hi || (lo == 0 && hi == sizes[dd] - 1));
        match (is_face, r.constant) {
            (true, Some(c)) => {
                if let Some(g) = groups.iter_mut().find(|(v, _)| *v == c) {
                    g.1.push(i);
                } else {
                    groups.push((c, vec![i]));
                }
            }
            _ => singles.push(i),
        }
    }

    let mut op = a.clone();
    let mut rhs = SepVector::zero(&sizes);
    let mut steps = Vec::new();
    let mut masks = Vec::new();

    for (value, members) in &groups {
        // complement mask: per dim, 0 on any grouped face node of that dim
        let mut keep: Vec<Array1<f64>> = sizes.iter().map(|&m| Array1::ones(m)).collect();
        let mut label = format!("faces value {value:.3e}:");
        for &i in members {
            let r = &regions[i];
            for (dd, &(lo, hi)) in r.ranges.iter().enumerate() {
                if lo == hi {
                    keep[dd][lo] = 0.0;
                }
            }
            label.push_str(&format!(" [{}]", r.label));
        }
        let before = op.rank();
        // op ← ⊗keep·op + (I − ⊗keep)
        let mut masked_terms = Vec::with_capacity(op.rank());
        let mut masked_scales = Vec::with_capacity(op.rank());
        for l in 0..op.rank() {
            let mats: Vec<Array2<f64>> = (0..d)
                .map(|dim| {
                    let mut mat = op.factor(dim, l).clone();
                    for (row, &k) in keep[dim].iter().enumerate() {
                        if k == 0.0 {
                            mat.row_mut(row).fill(0.0);
                        }
                    }
                    mat
                })
                .collect();
            masked_scales.push(op.scales()[l]);
            masked_terms.push(mats);
        }
        let mut new_op = SepOperator::from_terms(&sizes, masked_scales, masked_terms)?;
        let keep_diag: Vec<Array2<f64>> = keep.iter().map(Array2::from_diag).collect();
        new_op = new_op.add(&SepOperator::identity(&sizes))?;
        new_op = new_op.add(&SepOperator::from_terms(
            &sizes,
            vec![-1.0],
            vec![keep_diag],
        )?)?;
        op = new_op;

        // rhs ← ⊗keep·rhs + value·(I − ⊗keep)·1
        rhs = mask_vector(&rhs, &keep);
        if *value != 0.0 {
            let ones = SepVector::constant(&sizes, *value);
            let masked = mask_vector(&ones, &keep);
            rhs = rhs.add(&ones)?.add(&masked.scaled(-1.0))?;
        }
        masks.push(MaskStep::Keep(keep));
        steps.push((label, before, op.rank()));
    }

    for &i in &singles {
        let r = &regions[i];
        let before = op.rank();
        // op ← op − P·op + P
        let p_masked = mask_operator(&op, &r.masks)?;
        op = op.add(&p_masked.scaled(-1.0))?;
        let p_diag: Vec<Array2<f64>> = r.masks.iter().map(Array2::from_diag).collect();
        op = op.add(&SepOperator::from_terms(&sizes, vec![1.0], vec![p_diag])?)?;

        // rhs ← rhs − P·rhs + P·value
        let rhs_masked = region_mask_vector(&rhs, &r.masks);
        rhs = rhs.add(&rhs_masked.scaled(-1.0))?;
        if let Some(factors) = &r.value_factors {
            let mut cols = Vec::with_capacity(d);
            for (dim, f) in factors.iter().enumerate() {
                let samples = crate::expr::sample(f, grid, dim)?;
                cols.push(&samples * &r.masks[dim]);
            }
            rhs = rhs.add(&SepVector::from_rank_one(1.0, cols))?;
        }
        masks.push(MaskStep::Subtract(r.masks.clone()));
        steps.push((r.label.clone(), before, op.rank()));
    }

    Ok(ImposeOutcome {
        operator: op,
        rhs,
        steps,
        paper_accounting,
        masks,
    })
}

/// Multiply each factor column by a per-dimension mask (rank preserved).
fn mask_vector(v: &SepVector, mask: &[Array1<f64>]) -> SepVector {
    let mut terms = Vec::with_capacity(v.rank());
    for l in 0..v.rank() {
        let cols: Vec<Array1<f64>> = (0..v.dim_count())
            .map(|dim| &v.factor(dim).column(l).to_owned() * &mask[dim])
            .collect();
        terms.push(cols);
    }
    SepVector::from_terms(v.mode_sizes(), v.scales().to_vec(), terms).expect("same shape")
}

/// `P·v` for a rank-one diagonal indicator (rank preserved).
fn region_mask_vector(v: &SepVector, mask: &[Array1<f64>]) -> SepVector {
    mask_vector(v, mask)
}

/// `P·op`: rows outside the region are zeroed in one slot per dimension.
fn mask_operator(op: &SepOperator, mask: &[Array1<f64>]) -> Result<SepOperator, SepError> {
    let d = op.dim_count();
    let mut terms = Vec::with_capacity(op.rank());
    for l in 0..op.rank() {
        let mats: Vec<Array2<f64>> = (0..d)
            .map(|dim| {
                let mut m = op.factor(dim, l).clone();
                for (row, &k) in mask[dim].iter().enumerate() {
                    if k == 0.0 {
                        m.row_mut(row).fill(0.0);
                    }
                }
                m
            })
            .collect();
        terms.push(mats);
    }
    SepOperator::from_terms(op.mode_sizes(), op.scales().to_vec(), terms)
}

/// Apply the stored boundary masks to a vector (used by the time stepper to
/// clear rows that carry Dirichlet data).
pub fn apply_masks(v: &SepVector, masks: &[MaskStep]) -> SepVector {
    let mut out = v.clone();
    for step in masks {
        match step {
            MaskStep::Keep(keep) => out = mask_vector(&out, keep),
            MaskStep::Subtract(m) => {
                let masked = region_mask_vector(&out, m);
                out = out.add(&masked.scaled(-1.0)).expect("same shape");
            }
        }
    }
    out
}

/// Options shared by the solve entry points.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub als: AlsOptions,
    /// Relative Frobenius tolerance for pre-solve operator compression;
    /// `None` disables compression.
    pub operator_tol: Option<f64>,
    pub matching_samples: usize,
    pub skip_matching: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            als: AlsOptions::default(),
            operator_tol: Some(1e-9),
            matching_samples: 128,
            skip_matching: false,
        }
    }
}

/// Solved desirability field with provenance.
#[derive(Debug, Clone)]
pub struct DesirabilityField {
    pub psi: SepVector,
    pub grid: Grid,
    /// Floor used when taking logarithms of Ψ.
    pub eps_psi: f64,
    pub report: AlsReport,
    pub operator_ranks: OperatorRanks,
    pub impose_steps: Vec<(String, usize, usize)>,
    pub paper_accounting: usize,
    pub compressed_rank: usize,
    /// Smallest sampled grid value of Ψ (negativity diagnostic).
    pub min_sampled: f64,
}

impl DesirabilityField {
    pub fn eval(&self, x: &[f64]) -> Result<f64, SepError> {
        self.psi.eval_point(&self.grid, x)
    }
}

/// Compress a separated operator by running vector ALS on its vectorized
/// factor matrices. When no genuinely lower rank reaches the tolerance the
/// exact original is returned unchanged.
pub fn compress_operator(
    a: &SepOperator,
    tol: f64,
    max_rank: usize,
    seed: u64,
) -> Result<(SepOperator, AlsReport), HjbError> {
    let v = a.to_vector_modes();
    let opts = AlsOptions {
        target_tolerance: tol,
        max_rank: max_rank.min(a.rank().max(1)),
        max_sweeps: 400,
        seed,
        ..Default::default()
    };
    let (reduced, report) = als_reduce(&v, &opts)?;
    if matches!(report.termination, crate::als::TerminationReason::Converged)
        && reduced.rank() < a.rank()
    {
        let op = SepOperator::from_vector_modes(&reduced, a.mode_sizes())?;
        Ok((op, report))
    } else {
        Ok((a.clone(), report))
    }
}

fn estimate_range(psi: &SepVector, grid: &Grid) -> (f64, f64) {
    let total = grid
        .mode_sizes()
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .unwrap_or(usize::MAX);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    if total <= 1 << 16 {
        let dense = psi
            .to_dense(1 << 16)
            .expect("within cap");
        for &v in dense.iter() {
            min = min.min(v);
            max = max.max(v);
        }
    } else {
        for (_, coords) in halton_nodes(grid, 4096) {
            let v = psi.eval_point(grid, &coords).expect("节点 inside domain");
            min = min.min(v);
            max = max.max(v);
        }
    }
    (min, max)
}

/// Build, impose boundaries, compress, and solve the first-exit system
/// `(1/λ)qΨ = L(Ψ)` for the desirability field.
pub fn solve_first_exit(
    p: &HjbProblem,
    bc: &BoundarySpec,
    opts: &SolveOptions,
) -> Result<DesirabilityField, HjbError> {
    p.validate()?;
    if !opts.skip_matching {
        let report = check_matching(p, opts.matching_samples)?;
        if !report.passed() {
            return Err(HjbError::Matching {
                max_discrepancy: report.max_discrepancy,
                threshold: report.threshold,
            });
        }
    }
    let (a, ranks) = build_operator(p)?;
    // Compressing after imposition would perturb the exact identity rows at
    // Dirichlet nodes, whose scale is tiny next to the differential rows, so
    // compression happens first and the surgery stays exact.
    let (a, compressed_rank) = match opts.operator_tol {
        Some(tol) => {
            let (c, _) = compress_operator(&a, tol, a.rank(), opts.als.seed)?;
            let r = c.rank();
            (c, r)
        }
        None => {
            let r = a.rank();
            (a, r)
        }
    };
    let imposed = impose_dirichlet(&a, bc, &p.grid, p.lambda)?;
    solve_imposed(p, imposed, ranks, compressed_rank, opts)
}

fn solve_imposed(
    p: &HjbProblem,
    imposed: ImposeOutcome,
    ranks: OperatorRanks,
    compressed_rank: usize,
    opts: &SolveOptions,
) -> Result<DesirabilityField, HjbError> {
    let (psi, report) = als_solve(&imposed.operator, &imposed.rhs, &opts.als)?;
    let (min_sampled, max_sampled) = estimate_range(&psi, &p.grid);
    let eps_psi = (1e-12 * max_sampled.abs()).max(f64::MIN_POSITIVE);
    Ok(DesirabilityField {
        psi,
        grid: p.grid.clone(),
        eps_psi,
        report,
        operator_ranks: ranks,
        impose_steps: imposed.steps,
        paper_accounting: imposed.paper_accounting,
        compressed_rank,
        min_sampled,
    })
}

/// Backward implicit-Euler stepping of the finite-horizon equation
/// `(1/λ)qΨ − ∂Ψ/∂t = L(Ψ)`: each step solves
/// `(I − dt·(L − (1/λ)q))·Ψ_t = Ψ_{t+dt}` with boundary rows re-imposed.
/// Returns the fields at `t = T, T−dt, …` (first entry is the terminal
/// condition).
pub fn step_finite_horizon(
    p: &HjbProblem,
    bc: &BoundarySpec,
    opts: &SolveOptions,
) -> Result<Vec<DesirabilityField>, HjbError> {
    p.validate()?;
    let (horizon, dt, terminal) = match &p.setting {
        Setting::FiniteHorizon {
            horizon,
            dt,
            terminal,
        } => (*horizon, *dt, terminal),
        Setting::FirstExit => {
            return Err(HjbError::Invalid(
                "step_finite_horizon needs a finite-horizon setting".into(),
            ))
        }
    };
    if !opts.skip_matching {
        let report = check_matching(p, opts.matching_samples)?;
        if !report.passed() {
            return Err(HjbError::Matching {
                max_discrepancy: report.max_discrepancy,
                threshold: report.threshold,
            });
        }
    }
    let sizes = p.grid.mode_sizes();
    // terminal condition Ψ_T
    let mut psi = match terminal {
        TerminalCost::Psi(e) => e.sample_vector(&p.grid)?,
        TerminalCost::AdditiveCost(costs) => {
            if costs.len() != sizes.len() {
                return Err(HjbError::Invalid(
                    "additive terminal cost needs one expression per dimension".into(),
                ));
            }
            let mut cols = Vec::with_capacity(costs.len());
            for (dim, c) in costs.iter().enumerate() {
                let samples = crate::expr::sample(c, &p.grid, dim)?;
                cols.push(samples.mapv(|v| (-v / p.lambda).exp()));
            }
            SepVector::from_rank_one(1.0, cols)
        }
    };

    let (a, ranks) = build_operator(p)?;
    // step operator I − dt·A, compressed before the boundary surgery
    let step_op = SepOperator::identity(&sizes).add(&a.scaled(-dt))?;
    let (step_op, compressed_rank) = match opts.operator_tol {
        Some(tol) => {
            let (c, _) = compress_operator(&step_op, tol, step_op.rank(), opts.als.seed)?;
            let r = c.rank();
            (c, r)
        }
        None => {
            let r = step_op.rank();
            (step_op, r)
        }
    };
    let imposed = impose_dirichlet(&step_op, bc, &p.grid, p.lambda)?;
    let op = imposed.operator.clone();

    let steps = (horizon / dt).round() as usize;
    let mut fields = Vec::with_capacity(steps + 1);
    let wrap = |psi: &SepVector, report: AlsReport, p: &HjbProblem| -> DesirabilityField {
        let (min_sampled, max_sampled) = estimate_range(psi, &p.grid);
        DesirabilityField {
            psi: psi.clone(),
            grid: p.grid.clone(),
            eps_psi: (1e-12 * max_sampled.abs()).max(f64::MIN_POSITIVE),
            report,
            operator_ranks: ranks.clone(),
            impose_steps: imposed.steps.clone(),
            paper_accounting: imposed.paper_accounting,
            compressed_rank,
            min_sampled,
        }
    };
    let terminal_report = AlsReport {
        residual_history: vec![0.0],
        rank_history: vec![psi.rank()],
        enrichment_sweeps: vec![],
        sweep_wall: vec![std::time::Duration::ZERO],
        wall_time: std::time::Duration::ZERO,
        termination: crate::als::TerminationReason::Converged,
        monotonicity_violations: 0,
        rhs_norm: psi.norm(),
        relative: true,
    };
    fields.push(wrap(&psi, terminal_report, p));

    for _ in 0..steps {
        // boundary rows carry the static Dirichlet data; interior rows carry Ψ_{t+dt}
        let masked = apply_masks(&psi, &imposed.masks);
        let mut rhs = masked.add(&imposed.rhs)?;
        if rhs.rank() > opts.als.max_rank * 3 {
            let reduce_opts = AlsOptions {
                target_tolerance: (opts.operator_tol.unwrap_or(1e-9) * 0.1).max(1e-12),
                max_rank: opts.als.max_rank * 2,
                seed: opts.als.seed,
                ..Default::default()
            };
            let (r, _) = als_reduce(&rhs, &reduce_opts)?;
            rhs = r;
        }
        let (next, report) = als_solve(&op, &rhs, &opts.als)?;
        // cap the iterate rank between steps
        let reduce_opts = AlsOptions {
            target_tolerance: opts.als.target_tolerance * 0.1,
            max_rank: opts.als.max_rank,
            seed: opts.als.seed,
            ..Default::default()
        };
        let (reduced, _) = als_reduce(&next, &reduce_opts)?;
        psi = reduced;
        fields.push(wrap(&psi, report, p));
    }
    Ok(fields)
}

/// Pointwise evaluator of the value function `V = −λ·log(max(Ψ, ε_Ψ))`.
///
/// The log of a separated sum is not separated, so `V` is only exposed as
/// an evaluation map (and through dense slices), never as a [`SepVector`].
#[derive(Debug, Clone)]
pub struct ValueField {
    pub psi: SepVector,
    pub grid: Grid,
    pub lambda: f64,
    pub eps_psi: f64,
}

impl ValueField {
    pub fn eval(&self, x: &[f64]) -> Result<f64, SepError> {
        let psi = self.psi.eval_point(&self.grid, x)?;
        Ok(-self.lambda * psi.max(self.eps_psi).ln())
    }
}

/// Value-function view of a solved desirability field.
pub fn desirability_to_value(field: &DesirabilityField, lambda: f64) -> ValueField {
    ValueField {
        psi: field.psi.clone(),
        grid: field.grid.clone(),
        lambda,
        eps_psi: field.eps_psi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::grid_fd::GridDim;
    use crate::sep_tensor::DEFAULT_DENSE_CAP;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    fn grid2(m: usize, lo: f64, hi: f64) -> Grid {
        Grid::new(vec![
            GridDim::new(m, lo, hi, false).unwrap(),
            GridDim::new(m, lo, hi, false).unwrap(),
        ])
    }

    /// d-dimensional problem with G = B = I, R = I, Σε = λ·I: the matching
    /// condition holds identically.
    fn isotropic_problem(grid: Grid, lambda: f64, q: SeparatedExpr, f: Vec<SeparatedExpr>) -> HjbProblem {
        let d = grid.dim_count();
        let one = ExprAst::Number(1.0);
        let mut control = vec![vec![SeparatedExpr::zero(); d]; d];
        for i in 0..d {
            control[i][i] = SeparatedExpr::product(vec![one.clone(); d]);
        }
        HjbProblem {
            grid,
            dynamics_f: f,
            control_g: control.clone(),
            noise_b: control,
            sigma_eps: Array2::eye(d) * lambda,
            r_matrix: Array2::eye(d),
            lambda,
            state_cost_q: q,
            setting: Setting::FirstExit,
            accuracy_order: 4,
        }
    }

    #[test]
    fn matching_passes_by_construction() {
        let g = grid2(12, -1.0, 1.0);
        let p = isotropic_problem(g, 0.7, SeparatedExpr::zero(), vec![SeparatedExpr::zero(); 2]);
        let report = check_matching(&p, 64).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_discrepancy, 0.0);
    }

    #[test]
    fn matching_constant_column() {
        // G = B = [0; 1], R = I, Σε = I, λ = 1
        let g = grid2(12, -1.0, 1.0);
        let one = ExprAst::Number(1.0);
        let col = vec![
            vec![SeparatedExpr::zero()],
            vec![SeparatedExpr::product(vec![one.clone(), one.clone()])],
        ];
        let p = HjbProblem {
            grid: g,
            dynamics_f: vec![SeparatedExpr::zero(); 2],
            control_g: col.clone(),
            noise_b: col,
            sigma_eps: Array2::eye(1),
            r_matrix: Array2::eye(1),
            lambda: 1.0,
            state_cost_q: SeparatedExpr::zero(),
            setting: Setting::FirstExit,
            accuracy_order: 4,
        };
        let report = check_matching(&p, 32).unwrap();
        assert!(report.passed());
    }

    #[test]
    fn matching_detects_perturbed_r() {
        let g = grid2(12, -1.0, 1.0);
        let mut p = isotropic_problem(g, 1.0, SeparatedExpr::zero(), vec![SeparatedExpr::zero(); 2]);
        p.r_matrix[[0, 0]] *= 1.1;
        let report = check_matching(&p, 64).unwrap();
        assert!(!report.passed());
        assert!(
            (report.max_discrepancy - 0.1 / 1.1).abs() < 0.05,
            "discrepancy {}",
            report.max_discrepancy
        );
    }

    #[test]
    fn build_pure_diffusion_is_half_laplacian() {
        // f = 0, q = 0, Σ_t = I → A = ½·Σ ∂²/∂x_k²  (rank d)
        let g = grid2(12, -1.0, 1.0);
        let p = isotropic_problem(g.clone(), 1.0, SeparatedExpr::zero(), vec![SeparatedExpr::zero(); 2]);
        let (a, ranks) = build_operator(&p).unwrap();
        assert_eq!(ranks.constructed, 2);
        assert_eq!(ranks.predicted, ranks.constructed);
        let spec = StencilSpec::second(4).unwrap();
        let mut lap = crate::grid_fd::second_op(&g, 0, 0, &spec).unwrap();
        lap = lap.add(&crate::grid_fd::second_op(&g, 1, 1, &spec).unwrap()).unwrap();
        let expect = lap.to_dense(usize::MAX).unwrap() * 0.5;
        let got = a.to_dense(usize::MAX).unwrap();
        let err = (&got - &expect).iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-13);
    }

    fn pendulum_problem(n: usize, accuracy: u32) -> HjbProblem {
        // states: angle (periodic), angular velocity
        let grid = Grid::new(vec![
            GridDim::new(n, -std::f64::consts::PI, std::f64::consts::PI, true).unwrap(),
            GridDim::new(n, -11.0, 11.0, false).unwrap(),
        ]);
        let one = || ExprAst::Number(1.0);
        // f1 = x2
        let f1 = SeparatedExpr::product(vec![one(), parse("x").unwrap()]);
        // f2 = A(x1) + B(x1)·x2²  with the cart-pendulum denominators
        let denom = "(4/3 - 0.2*cos(x)^2)";
        let a_term = SeparatedExpr::product(vec![
            parse(&format!("9.8/0.5*sin(x)/{denom}")).unwrap(),
            one(),
        ]);
        let b_term = SeparatedExpr::product(vec![
            parse(&format!("-0.5*0.2*sin(2*x)/{denom}")).unwrap(),
            parse("x^2").unwrap(),
        ]);
        let f2 = SeparatedExpr {
            terms: vec![a_term.terms[0].clone(), b_term.terms[0].clone()],
        };
        // G = B = [0; g2(x1)]
        let g2 = SeparatedExpr::product(vec![
            parse(&format!("-0.2/0.5*cos(x)/{denom}")).unwrap(),
            one(),
        ]);
        let lambda = 0.02;
        let q = SeparatedExpr {
            terms: vec![
                vec![parse("0.1*x^2").unwrap(), one()],
                vec![one(), parse("0.05*x^2").unwrap()],
            ],
        };
        HjbProblem {
            grid,
            dynamics_f: vec![f1, f2],
            control_g: vec![vec![SeparatedExpr::zero()], vec![g2.clone()]],
            noise_b: vec![vec![SeparatedExpr::zero()], vec![g2]],
            sigma_eps: Array2::eye(1),
            r_matrix: Array2::eye(1) * lambda,
            lambda,
            state_cost_q: q,
            setting: Setting::FirstExit,
            accuracy_order: accuracy,
        }
    }

    #[test]
    fn pendulum_advection_rank_three() {
        let p = pendulum_problem(16, 4);
        assert!(check_matching(&p, 32).unwrap().passed());
        let (_, ranks) = build_operator(&p).unwrap();
        assert_eq!(ranks.advection, 3);
        assert_eq!(ranks.state_cost, 2);
        assert_eq!(ranks.diffusion, 1);
        assert_eq!(ranks.predicted, 6);
        assert_eq!(ranks.predicted, ranks.constructed);
    }

    #[test]
    fn impose_identity_rows_and_rhs() {
        // d=2, M=8, single interior 2×2 hypercube with value 1
        let g = grid2(8, -1.0, 1.0);
        let sizes = g.mode_sizes();
        let a = SepOperator::identity(&sizes).scaled(3.0);
        let bc = BoundarySpec {
            faces: vec![],
            regions: vec![RegionCondition {
                ranges: vec![(3, 4), (3, 4)],
                value: BoundaryValue::Psi(vec![ExprAst::Number(1.0), ExprAst::Number(1.0)]),
            }],
        };
        let out = impose_dirichlet(&a, &bc, &g, 1.0).unwrap();
        assert!(out.operator.rank() <= 2 * a.rank() + 1);
        let dense = out.operator.to_dense(usize::MAX).unwrap();
        let rhs = out.rhs.to_dense(DEFAULT_DENSE_CAP).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let row = i * 8 + j;
                let inside = (3..=4).contains(&i) && (3..=4).contains(&j);
                if inside {
                    for col in 0..64 {
                        let expect = if col == row { 1.0 } else { 0.0 };
                        assert_abs_diff_eq!(dense[[row, col]], expect, epsilon = 1e-13);
                    }
                    assert_abs_diff_eq!(rhs[IxDyn(&[i, j])], 1.0, epsilon = 1e-13);
                } else {
                    assert_abs_diff_eq!(dense[[row, row]], 3.0, epsilon = 1e-13);
                    assert_abs_diff_eq!(rhs[IxDyn(&[i, j])], 0.0, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn impose_rejects_empty_spec() {
        let g = grid2(8, -1.0, 1.0);
        let a = SepOperator::identity(&g.mode_sizes());
        let bc = BoundarySpec {
            faces: vec![],
            regions: vec![],
        };
        match impose_dirichlet(&a, &bc, &g, 1.0) {
            Err(HjbError::EmptyBoundary) => {}
            other => panic!("expected empty-boundary error, got {other:?}"),
        }
    }

    #[test]
    fn impose_rejects_conflicting_overlap() {
        let g = grid2(8, -1.0, 1.0);
        let a = SepOperator::identity(&g.mode_sizes());
        let bc = BoundarySpec {
            faces: vec![],
            regions: vec![
                RegionCondition {
                    ranges: vec![(2, 4), (2, 4)],
                    value: BoundaryValue::Psi(vec![ExprAst::Number(1.0), ExprAst::Number(1.0)]),
                },
                RegionCondition {
                    ranges: vec![(4, 6), (4, 6)],
                    value: BoundaryValue::Psi(vec![ExprAst::Number(2.0), ExprAst::Number(1.0)]),
                },
            ],
        };
        match impose_dirichlet(&a, &bc, &g, 1.0) {
            Err(HjbError::ConflictingRegions { .. }) => {}
            other => panic!("expected conflict error, got {other:?}"),
        }
    }

    fn all_faces(value: BoundaryValue) -> Vec<FaceCondition> {
        let mut faces = Vec::new();
        for dim in 0..2 {
            for side in [Side::Lower, Side::Upper] {
                faces.push(FaceCondition {
                    dim,
                    side,
                    value: value.clone(),
                });
            }
        }
        faces
    }

    #[test]
    fn constant_boundary_gives_constant_field() {
        // q = 0, f = 0, all-boundary value 1 → Ψ ≡ 1
        let g = grid2(14, -1.0, 1.0);
        let p = isotropic_problem(g, 1.0, SeparatedExpr::zero(), vec![SeparatedExpr::zero(); 2]);
        let bc = BoundarySpec {
            faces: all_faces(BoundaryValue::Psi(vec![
                ExprAst::Number(1.0),
                ExprAst::Number(1.0),
            ])),
            regions: vec![],
        };
        let opts = SolveOptions {
            als: AlsOptions {
                target_tolerance: 1e-10,
                max_rank: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let field = solve_first_exit(&p, &bc, &opts).unwrap();
        let dense = field.psi.to_dense(DEFAULT_DENSE_CAP).unwrap();
        for v in dense.iter() {
            assert!((v - 1.0).abs() < 1e-8, "Ψ entry {v}");
        }
    }

    #[test]
    fn dense_oracle_agreement_small_2d() {
        use ndarray_linalg::Solve;
        // mildly advective, well-conditioned first-exit problem
        let g = grid2(16, -1.0, 1.0);
        let q = SeparatedExpr {
            terms: vec![
                vec![parse("x^2").unwrap(), ExprAst::Number(1.0)],
                vec![ExprAst::Number(1.0), parse("x^2").unwrap()],
            ],
        };
        let f = vec![
            SeparatedExpr::product(vec![ExprAst::Number(1.0), parse("-0.5*x").unwrap()]),
            SeparatedExpr::product(vec![parse("0.5*x").unwrap(), ExprAst::Number(1.0)]),
        ];
        let p = isotropic_problem(g.clone(), 1.0, q, f);
        let bc = BoundarySpec {
            faces: all_faces(BoundaryValue::Psi(vec![
                ExprAst::Number(1.0),
                ExprAst::Number(1.0),
            ])),
            regions: vec![],
        };
        let opts = SolveOptions {
            als: AlsOptions {
                target_tolerance: 1e-9,
                max_rank: 24,
                max_sweeps: 500,
                regularization: Some(1e-14),
                ..Default::default()
            },
            operator_tol: Some(1e-11),
            ..Default::default()
        };
        let field = solve_first_exit(&p, &bc, &opts).unwrap();
        // dense path on the uncompressed imposed system
        let (a, _) = build_operator(&p).unwrap();
        let imposed = impose_dirichlet(&a, &bc, &g, p.lambda).unwrap();
        let ad = imposed.operator.to_dense(usize::MAX).unwrap();
        let bd = Array1::from_iter(
            imposed
                .rhs
                .to_dense(DEFAULT_DENSE_CAP)
                .unwrap()
                .iter()
                .cloned(),
        );
        let xd = ad.solve(&bd).unwrap();
        let fd = Array1::from_iter(field.psi.to_dense(DEFAULT_DENSE_CAP).unwrap().iter().cloned());
        let err = (&fd - &xd).dot(&(&fd - &xd)).sqrt() / xd.dot(&xd).sqrt();
        assert!(err < 1e-4, "CP vs dense solve: {err}");
        // discrete maximum-principle smoke: boundary data in [0,1]
        for v in fd.iter() {
            assert!((-0.05..=1.05).contains(v), "Ψ entry {v}");
        }
    }

    #[test]
    fn increasing_q_never_increases_psi_1d() {
        use ndarray_linalg::Solve;
        // 1D monotonicity vs dense solves
        let grid = Grid::new(vec![GridDim::new(21, -1.0, 1.0, false).unwrap()]);
        let one = ExprAst::Number(1.0);
        let control = vec![vec![SeparatedExpr::product(vec![one.clone()])]];
        let solve_dense = |q_scale: f64| -> Array1<f64> {
            let p = HjbProblem {
                grid: grid.clone(),
                dynamics_f: vec![SeparatedExpr::zero()],
                control_g: control.clone(),
                noise_b: control.clone(),
                sigma_eps: Array2::eye(1),
                r_matrix: Array2::eye(1),
                lambda: 1.0,
                state_cost_q: SeparatedExpr {
                    terms: vec![vec![parse(&format!("{q_scale}*(x^2+0.1)")).unwrap()]],
                },
                setting: Setting::FirstExit,
                accuracy_order: 4,
            };
            let (a, _) = build_operator(&p).unwrap();
            let bc = BoundarySpec {
                faces: vec![
                    FaceCondition {
                        dim: 0,
                        side: Side::Lower,
                        value: BoundaryValue::Psi(vec![ExprAst::Number(1.0)]),
                    },
                    FaceCondition {
                        dim: 0,
                        side: Side::Upper,
                        value: BoundaryValue::Psi(vec![ExprAst::Number(1.0)]),
                    },
                ],
                regions: vec![],
            };
            let imposed = impose_dirichlet(&a, &bc, &grid, 1.0).unwrap();
            let ad = imposed.operator.to_dense(usize::MAX).unwrap();
            let bd = Array1::from_iter(
                imposed
                    .rhs
                    .to_dense(DEFAULT_DENSE_CAP)
                    .unwrap()
                    .iter()
                    .cloned(),
            );
            ad.solve(&bd).unwrap()
        };
        let psi1 = solve_dense(1.0);
        let psi2 = solve_dense(2.0);
        for (a, b) in psi1.iter().zip(psi2.iter()) {
            assert!(*b <= a + 1e-10, "q increase raised Ψ: {a} -> {b}");
        }
    }

    #[test]
    fn value_transform_cases() {
        let g = grid2(12, -1.0, 1.0);
        let psi = SepVector::constant(&g.mode_sizes(), 1.0);
        let vf = ValueField {
            psi,
            grid: g.clone(),
            lambda: 2.0,
            eps_psi: 1e-300,
        };
        assert_abs_diff_eq!(vf.eval(&[0.3, -0.2]).unwrap(), 0.0, epsilon = 1e-12);

        // Ψ(x) = e^{−x²} on a 1D grid, λ = 1 → V(x) = x²
        let g1 = Grid::new(vec![GridDim::new(64, -1.0, 1.0, false).unwrap()]);
        let samples = g1.dim(0).nodes().mapv(|v| (-v * v).exp());
        let psi = SepVector::from_rank_one(1.0, vec![samples]);
        let vf = ValueField {
            psi,
            grid: g1,
            lambda: 1.0,
            eps_psi: 1e-300,
        };
        for &x in &[-0.73, -0.2, 0.0, 0.41, 0.9] {
            let v = vf.eval(&[x]).unwrap();
            assert!((v - x * x).abs() < 1e-3, "V({x}) = {v}");
        }
    }

    #[test]
    fn finite_horizon_no_evolution_limit() {
        // tiny diffusion, f = q = 0: Ψ stays at the terminal condition
        let g = grid2(12, -1.0, 1.0);
        let one = ExprAst::Number(1.0);
        let mut control = vec![vec![SeparatedExpr::zero(); 2]; 2];
        for i in 0..2 {
            control[i][i] = SeparatedExpr::product(vec![one.clone(); 2]);
        }
        let p = HjbProblem {
            grid: g.clone(),
            dynamics_f: vec![SeparatedExpr::zero(); 2],
            control_g: control.clone(),
            noise_b: control,
            sigma_eps: Array2::eye(2) * 1e-8,
            r_matrix: Array2::eye(2) * 1e8,
            lambda: 1.0,
            state_cost_q: SeparatedExpr::zero(),
            setting: Setting::FiniteHorizon {
                horizon: 0.05,
                dt: 0.01,
                terminal: TerminalCost::AdditiveCost(vec![
                    parse("x^2").unwrap(),
                    parse("x^2").unwrap(),
                ]),
            },
            accuracy_order: 4,
        };
        let bc = BoundarySpec {
            faces: all_faces(BoundaryValue::Absorbing),
            regions: vec![],
        };
        let opts = SolveOptions {
            als: AlsOptions {
                target_tolerance: 1e-10,
                max_rank: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let fields = step_finite_horizon(&p, &bc, &opts).unwrap();
        assert_eq!(fields.len(), 6);
        let first = fields.first().unwrap().psi.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let last = fields.last().unwrap().psi.to_dense(DEFAULT_DENSE_CAP).unwrap();
        // compare away from the absorbing faces
        let mut worst: f64 = 0.0;
        for i in 1..11 {
            for j in 1..11 {
                let idx = IxDyn(&[i, j]);
                worst = worst.max((first[idx.clone()] - last[idx]).abs());
            }
        }
        assert!(worst < 1e-4, "drift without dynamics: {worst}");
    }

    #[test]
    fn heat_equation_matches_crank_nicolson() {
        use ndarray_linalg::Solve;
        // 1D, f = 0, q = 0: −∂Ψ/∂t = ½σ²Ψ''; backward Euler vs a dense
        // Crank–Nicolson reference on the same spatial operator
        let grid = Grid::new(vec![GridDim::new(81, -1.0, 1.0, false).unwrap()]);
        let one = ExprAst::Number(1.0);
        let control = vec![vec![SeparatedExpr::product(vec![one.clone()])]];
        let dt = 5e-4;
        let horizon = 0.1;
        let p = HjbProblem {
            grid: grid.clone(),
            dynamics_f: vec![SeparatedExpr::zero()],
            control_g: control.clone(),
            noise_b: control,
            sigma_eps: Array2::eye(1),
            r_matrix: Array2::eye(1),
            lambda: 1.0,
            state_cost_q: SeparatedExpr::zero(),
            setting: Setting::FiniteHorizon {
                horizon,
                dt,
                terminal: TerminalCost::Psi(SeparatedExpr {
                    terms: vec![vec![parse("exp(-x^2/0.08)").unwrap()]],
                }),
            },
            accuracy_order: 8,
        };
        let bc = BoundarySpec {
            faces: vec![
                FaceCondition {
                    dim: 0,
                    side: Side::Lower,
                    value: BoundaryValue::Absorbing,
                },
                FaceCondition {
                    dim: 0,
                    side: Side::Upper,
                    value: BoundaryValue::Absorbing,
                },
            ],
            regions: vec![],
        };
        let opts = SolveOptions {
            als: AlsOptions {
                target_tolerance: 1e-12,
                max_rank: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let fields = step_finite_horizon(&p, &bc, &opts).unwrap();
        let got = fields
            .last()
            .unwrap()
            .psi
            .to_dense(DEFAULT_DENSE_CAP)
            .unwrap();

        // dense Crank–Nicolson on the same ½∂² with identity boundary rows
        let (a, _) = build_operator(&p).unwrap();
        let mut ad = a.to_dense(usize::MAX).unwrap();
        let n = 81;
        for row in [0usize, n - 1] {
            ad.row_mut(row).fill(0.0);
        }
        let mut psi = Array1::from_shape_fn(n, |k| {
            let x = grid.dim(0).node(k);
            (-x * x / 0.08f64).exp()
        });
        psi[0] = 0.0;
        psi[n - 1] = 0.0;
        let steps = (horizon / dt).round() as usize;
        let eye = Array2::<f64>::eye(n);
        let lhs = &eye - &(&ad * (dt / 2.0));
        let rhs_m = &eye + &(&ad * (dt / 2.0));
        for _ in 0..steps {
            let b = rhs_m.dot(&psi);
            psi = lhs.solve(&b).unwrap();
            psi[0] = 0.0;
            psi[n - 1] = 0.0;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            let d = got[IxDyn(&[k])] - psi[k];
            num += d * d;
            den += psi[k] * psi[k];
        }
        let err = (num / den).sqrt();
        assert!(err <= 1e-3, "backward Euler vs Crank–Nicolson: {err}");
    }

    #[test]
    fn finite_horizon_single_tiny_step() {
        let g = grid2(12, -1.0, 1.0);
        let p0 = isotropic_problem(g.clone(), 1.0, SeparatedExpr::zero(), vec![SeparatedExpr::zero(); 2]);
        let p = HjbProblem {
            setting: Setting::FiniteHorizon {
                horizon: 1e-5,
                dt: 1e-5,
                terminal: TerminalCost::AdditiveCost(vec![
                    parse("x^2").unwrap(),
                    parse("0.5*x^2").unwrap(),
                ]),
            },
            ..p0
        };
        let bc = BoundarySpec {
            faces: all_faces(BoundaryValue::Absorbing),
            regions: vec![],
        };
        let opts = SolveOptions {
            als: AlsOptions {
                target_tolerance: 1e-11,
                max_rank: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        let fields = step_finite_horizon(&p, &bc, &opts).unwrap();
        let first = fields[0].psi.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let last = fields[1].psi.to_dense(DEFAULT_DENSE_CAP).unwrap();
        // interior nodes only: the terminal condition need not satisfy the
        // absorbing boundary rows
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 1..11 {
            for j in 1..11 {
                let idx = IxDyn(&[i, j]);
                let d = first[idx.clone()] - last[idx.clone()];
                num += d * d;
                den += first[idx.clone()] * first[idx];
            }
        }
        let drift = (num / den).sqrt();
        assert!(drift < 1e-3, "O(dt) drift too large: {drift}");
    }
}
