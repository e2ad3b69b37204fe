//! Feedback policy extraction and closed-loop simulation.
//!
//! The optimal control follows the desirability gradient,
//!
//! ```text
//! u*(x) = λ R⁻¹ G(x)ᵀ ∇Ψ(x) / max(Ψ(x), ε_Ψ)
//! ```
//!
//! which equals `−R⁻¹Gᵀ∇V` through the log transform wherever `Ψ > ε_Ψ`.
//! `∇Ψ` is precomputed on the grid with the same high-order stencils as the
//! solve and interpolated off-grid, preserving spatial accuracy away from
//! boundaries. Closed-loop trajectories use Euler–Maruyama with a seeded
//! generator, so every run is replayable.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky, Inverse, UPLO};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::grid_fd::{gradient_op, Grid, GridError, StencilSpec};
use crate::hjb::{BoundarySpec, DesirabilityField, HjbError, HjbProblem};
use crate::sep_tensor::{SepError, SepVector};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Shape(#[from] SepError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error("invalid input: {0}")]
    BadInput(String),
}

/// Desirability field with precomputed gradient components and the problem
/// data needed to evaluate the feedback law.
#[derive(Debug, Clone)]
pub struct PolicyField {
    pub psi: SepVector,
    /// `grad_psi[k] = ∇_k Ψ`, one separated vector per dimension.
    pub grad_psi: Vec<SepVector>,
    pub grid: Grid,
    pub lambda: f64,
    pub eps_psi: f64,
    problem: HjbProblem,
    r_inv: Array2<f64>,
    sigma_chol: Array2<f64>,
    /// Goal boxes in coordinate space, from the interior Dirichlet regions.
    goal_boxes: Vec<Vec<(f64, f64)>>,
}

impl PolicyField {
    pub fn new(
        field: &DesirabilityField,
        problem: &HjbProblem,
        bc: &BoundarySpec,
    ) -> Result<Self, PolicyError> {
        Self::build(field.psi.clone(), field.eps_psi, &field.grid, problem, bc)
    }

    /// Assemble directly from a stored field, deriving the log floor from
    /// the field's largest sampled magnitude.
    pub fn from_psi(
        psi: SepVector,
        problem: &HjbProblem,
        bc: &BoundarySpec,
    ) -> Result<Self, PolicyError> {
        let mut max: f64 = 0.0;
        let total = problem
            .grid
            .mode_sizes()
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .unwrap_or(usize::MAX);
        if total <= 1 << 16 {
            for &v in psi.to_dense(1 << 16)?.iter() {
                max = max.max(v.abs());
            }
        } else {
            // scan the factor columns for a scale estimate
            for l in 0..psi.rank() {
                max = max.max(psi.scales()[l]);
            }
        }
        let eps = (1e-12 * max).max(f64::MIN_POSITIVE);
        Self::build(psi, eps, &problem.grid.clone(), problem, bc)
    }

    fn build(
        psi: SepVector,
        eps_psi: f64,
        grid: &Grid,
        problem: &HjbProblem,
        bc: &BoundarySpec,
    ) -> Result<Self, PolicyError> {
        let spec = StencilSpec::new(1, problem.accuracy_order)?;
        let mut grad_psi = Vec::with_capacity(grid.dim_count());
        for k in 0..grid.dim_count() {
            let g = gradient_op(grid, k, &spec)?;
            grad_psi.push(g.apply(&psi)?);
        }
        let r_inv = problem
            .r_matrix
            .inv()
            .map_err(|_| PolicyError::BadInput("R is not invertible".into()))?;
        let sigma_chol = problem
            .sigma_eps
            .cholesky(UPLO::Lower)
            .map_err(|_| PolicyError::BadInput("Σ_ε is not positive definite".into()))?;
        let goal_boxes = bc
            .regions
            .iter()
            .map(|r| {
                r.ranges
                    .iter()
                    .enumerate()
                    .map(|(i, &(lo, hi))| (grid.dim(i).node(lo), grid.dim(i).node(hi)))
                    .collect()
            })
            .collect();
        Ok(Self {
            psi,
            grad_psi,
            grid: grid.clone(),
            lambda: problem.lambda,
            eps_psi,
            problem: problem.clone(),
            r_inv,
            sigma_chol,
            goal_boxes,
        })
    }

    /// `u*(x) = λ R⁻¹ G(x)ᵀ ∇Ψ(x) / max(Ψ(x), ε_Ψ)`.
    pub fn optimal_control(&self, x: &[f64]) -> Result<Array1<f64>, PolicyError> {
        let psi = self.psi.eval_point(&self.grid, x)?;
        let mut grad = Array1::<f64>::zeros(self.grid.dim_count());
        for (k, g) in self.grad_psi.iter().enumerate() {
            grad[k] = g.eval_point(&self.grid, x)?;
        }
        let g_mat = self.problem.g_at(x);
        let u = self
            .r_inv
            .dot(&g_mat.t().dot(&grad))
            .mapv(|v| v * self.lambda / psi.max(self.eps_psi));
        Ok(u)
    }

    fn in_goal(&self, x: &[f64]) -> bool {
        self.goal_boxes.iter().any(|b| {
            b.iter()
                .zip(x.iter())
                .all(|(&(lo, hi), &xi)| xi >= lo - 1e-12 && xi <= hi + 1e-12)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    Goal,
    DomainExit,
    Horizon,
}

impl std::fmt::Display for ExitReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExitReason::Goal => write!(f, "goal"),
            ExitReason::DomainExit => write!(f, "domain-exit"),
            ExitReason::Horizon => write!(f, "horizon"),
        }
    }
}

/// Closed-loop sample path: `(t, state, control)` per step plus the exit
/// flag. Replayable from the recorded seed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub seed: u64,
    pub samples: Vec<(f64, Vec<f64>, Vec<f64>)>,
    pub exit: ExitReason,
}

/// Euler–Maruyama simulation of `dx = (f + G u*)dt + B dω` under the
/// feedback policy; stops at a goal region, the domain boundary, or `t_max`.
pub fn simulate(
    pf: &PolicyField,
    x0: &[f64],
    dt: f64,
    t_max: f64,
    seed: u64,
) -> Result<Trajectory, PolicyError> {
    if !(dt > 0.0) || !(t_max > 0.0) {
        return Err(PolicyError::BadInput(format!(
            "need dt > 0 and t_max > 0, got dt = {dt}, t_max = {t_max}"
        )));
    }
    let d = pf.grid.dim_count();
    if x0.len() != d {
        return Err(PolicyError::BadInput(format!(
            "initial state has {} entries for a {d}-dimensional problem",
            x0.len()
        )));
    }
    let m = pf.problem.input_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    wrap_periodic(&pf.grid, &mut x);
    for (i, &xi) in x.iter().enumerate() {
        let gd = pf.grid.dim(i);
        if !gd.periodic && (xi < gd.lower || xi > gd.upper) {
            return Err(PolicyError::BadInput(format!(
                "initial coordinate {xi} outside [{}, {}] in dimension {i}",
                gd.lower, gd.upper
            )));
        }
    }

    let mut samples = Vec::new();
    let mut t = 0.0;
    let sqrt_dt = dt.sqrt();
    let exit;
    loop {
        if pf.in_goal(&x) {
            let u = pf.optimal_control(&x)?;
            samples.push((t, x.clone(), u.to_vec()));
            exit = ExitReason::Goal;
            break;
        }
        if t >= t_max {
            let u = pf.optimal_control(&x)?;
            samples.push((t, x.clone(), u.to_vec()));
            exit = ExitReason::Horizon;
            break;
        }
        let u = pf.optimal_control(&x)?;
        samples.push((t, x.clone(), u.to_vec()));

        let f = pf.problem.f_at(&x);
        let g = pf.problem.g_at(&x);
        let b = pf.problem.b_at(&x);
        let xi: Array1<f64> = Array1::from_shape_fn(m, |_| rng.sample(StandardNormal));
        let noise = b.dot(&pf.sigma_chol).dot(&xi) * sqrt_dt;
        let drift = (&f + &g.dot(&u)) * dt;
        for i in 0..d {
            x[i] += drift[i] + noise[i];
        }
        t += dt;
        wrap_periodic(&pf.grid, &mut x);
        if let Some(_dim) = out_of_domain(&pf.grid, &x) {
            samples.push((t, x.clone(), vec![0.0; m]));
            exit = ExitReason::DomainExit;
            break;
        }
    }
    Ok(Trajectory {
        dt,
        seed,
        samples,
        exit,
    })
}

fn wrap_periodic(grid: &Grid, x: &mut [f64]) {
    for (i, xi) in x.iter_mut().enumerate() {
        let gd = grid.dim(i);
        if gd.periodic {
            let extent = gd.upper - gd.lower;
            *xi = (*xi - gd.lower).rem_euclid(extent) + gd.lower;
        }
    }
}

fn out_of_domain(grid: &Grid, x: &[f64]) -> Option<usize> {
    for (i, &xi) in x.iter().enumerate() {
        let gd = grid.dim(i);
        if !gd.periodic && (xi < gd.lower || xi > gd.upper) {
            return Some(i);
        }
    }
    None
}

/// Dense 2D slice of a separated field: free dimensions `(p, q)`, all other
/// coordinates pinned to the node nearest the given value. Row index runs
/// over dimension `p`, column index over `q`.
pub fn export_slice(
    field: &SepVector,
    grid: &Grid,
    fixed: &[(usize, f64)],
    free: (usize, usize),
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>), PolicyError> {
    let d = grid.dim_count();
    let (p, q) = free;
    if p == q || p >= d || q >= d {
        return Err(PolicyError::BadInput(format!(
            "free dimensions ({p}, {q}) invalid for a {d}-dimensional field"
        )));
    }
    let mut pinned: Vec<Option<usize>> = vec![None; d];
    for &(dim, coord) in fixed {
        if dim >= d {
            return Err(PolicyError::BadInput(format!(
                "fixed dimension {dim} out of range"
            )));
        }
        if dim == p || dim == q {
            return Err(PolicyError::BadInput(format!(
                "dimension {dim} is both free and fixed"
            )));
        }
        let gd = grid.dim(dim);
        if !gd.periodic {
            let tol = 1e-9 * (gd.upper - gd.lower);
            if coord < gd.lower - tol || coord > gd.upper + tol {
                return Err(PolicyError::BadInput(format!(
                    "fixed coordinate {coord} outside [{}, {}] in dimension {dim}",
                    gd.lower, gd.upper
                )));
            }
        }
        pinned[dim] = Some(gd.nearest_node(coord));
    }
    for dim in 0..d {
        if dim != p && dim != q && pinned[dim].is_none() {
            return Err(PolicyError::BadInput(format!(
                "dimension {dim} needs a fixed coordinate"
            )));
        }
    }

    // per-term coefficient from the pinned dimensions
    let rank = field.rank();
    let mut coef = Array1::<f64>::from_vec(field.scales().to_vec());
    for dim in 0..d {
        if let Some(k) = pinned[dim] {
            let f = field.factor(dim);
            for l in 0..rank {
                coef[l] *= f[[k, l]];
            }
        }
    }
    // slice = F_p · diag(coef) · F_qᵀ
    let fp = field.factor(p);
    let fq = field.factor(q);
    let mut weighted = fp.clone();
    for l in 0..rank {
        weighted.column_mut(l).mapv_inplace(|v| v * coef[l]);
    }
    let slice = weighted.dot(&fq.t());
    Ok((slice, grid.dim(p).nodes(), grid.dim(q).nodes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, ExprAst};
    use crate::grid_fd::GridDim;
    use crate::hjb::{SeparatedExpr, Setting};
    use crate::sep_tensor::DEFAULT_DENSE_CAP;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    fn empty_bc() -> BoundarySpec {
        BoundarySpec {
            faces: vec![],
            regions: vec![],
        }
    }

    fn one_d_problem(points: usize) -> HjbProblem {
        let grid = Grid::new(vec![GridDim::new(points, -1.0, 1.0, false).unwrap()]);
        let control = vec![vec![SeparatedExpr::product(vec![ExprAst::Number(1.0)])]];
        HjbProblem {
            grid,
            dynamics_f: vec![SeparatedExpr::zero()],
            control_g: control.clone(),
            noise_b: control,
            sigma_eps: Array2::eye(1),
            r_matrix: Array2::eye(1),
            lambda: 1.0,
            state_cost_q: SeparatedExpr::zero(),
            setting: Setting::FirstExit,
            accuracy_order: 8,
        }
    }

    fn field_from_psi(psi: SepVector, grid: &Grid) -> DesirabilityField {
        DesirabilityField {
            psi,
            grid: grid.clone(),
            eps_psi: 1e-300,
            report: crate::als::AlsReport {
                residual_history: vec![0.0],
                rank_history: vec![1],
                enrichment_sweeps: vec![],
                sweep_wall: vec![std::time::Duration::ZERO],
                wall_time: std::time::Duration::ZERO,
                termination: crate::als::TerminationReason::Converged,
                monotonicity_violations: 0,
                rhs_norm: 1.0,
                relative: true,
            },
            operator_ranks: crate::hjb::OperatorRanks {
                state_cost: 0,
                advection: 0,
                diffusion: 0,
                predicted: 0,
                constructed: 0,
            },
            impose_steps: vec![],
            paper_accounting: 0,
            compressed_rank: 0,
            min_sampled: 0.0,
        }
    }

    #[test]
    fn zero_gradient_means_zero_control() {
        let p = one_d_problem(32);
        let psi = SepVector::constant(&p.grid.mode_sizes(), 0.7);
        let field = field_from_psi(psi, &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        let u = pf.optimal_control(&[0.3]).unwrap();
        assert!(u[0].abs() < 1e-10, "u = {}", u[0]);
    }

    #[test]
    fn gaussian_field_gives_linear_control() {
        // Ψ = e^{−x²}, λ = G = R = 1 → u*(x) = −2x
        let p = one_d_problem(257);
        let samples = p.grid.dim(0).nodes().mapv(|v| (-v * v).exp());
        let psi = SepVector::from_rank_one(1.0, vec![samples]);
        let field = field_from_psi(psi, &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        for &x in &[-0.61, -0.23, 0.11, 0.47] {
            let u = pf.optimal_control(&[x]).unwrap();
            assert!(
                (u[0] + 2.0 * x).abs() <= 1e-3,
                "u({x}) = {} expected {}",
                u[0],
                -2.0 * x
            );
        }
    }

    #[test]
    fn control_consistent_with_value_gradient() {
        // u through Ψ agrees with −R⁻¹Gᵀ∇V at random interior points
        let p = one_d_problem(257);
        let nodes = p.grid.dim(0).nodes();
        let psi = SepVector::from_rank_one(1.0, vec![nodes.mapv(|v| (-v * v).exp())])
            .add(&SepVector::from_rank_one(
                0.5,
                vec![nodes.mapv(|v| (-(v - 0.3) * (v - 0.3) / 0.5).exp())],
            ))
            .unwrap();
        let field = field_from_psi(psi.clone(), &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        let vf = crate::hjb::ValueField {
            psi,
            grid: p.grid.clone(),
            lambda: 1.0,
            eps_psi: 1e-300,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-0.8..0.8);
            let u = pf.optimal_control(&[x]).unwrap()[0];
            // independent route through the value gradient:
            // ∇V = −λ∇Ψ/Ψ, u = −R⁻¹Gᵀ∇V  (identical analytically)
            let psi = pf.psi.eval_point(&pf.grid, &[x]).unwrap();
            let gpsi = pf.grad_psi[0].eval_point(&pf.grid, &[x]).unwrap();
            let dv = -1.0 * gpsi / psi.max(pf.eps_psi);
            let u_v = -dv;
            assert!(
                (u - u_v).abs() <= 1e-6 * u.abs().max(1.0),
                "x = {x}: {u} vs {u_v}"
            );
            // the finite-difference slope of the interpolated value function
            // is only first-order accurate between nodes; sanity band only
            let h = 1e-5;
            let fd = (vf.eval(&[x + h]).unwrap() - vf.eval(&[x - h]).unwrap()) / (2.0 * h);
            assert!(
                (u + fd).abs() <= 2e-2 * u.abs().max(1.0),
                "FD sanity at x = {x}: {u} vs {}",
                -fd
            );
        }
    }

    #[test]
    fn simulate_static_without_noise_or_drift() {
        let mut p = one_d_problem(32);
        p.noise_b = vec![vec![SeparatedExpr::zero()]];
        p.control_g = vec![vec![SeparatedExpr::zero()]];
        let psi = SepVector::constant(&p.grid.mode_sizes(), 1.0);
        let field = field_from_psi(psi, &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        let tr = simulate(&pf, &[0.25], 0.01, 0.5, 42).unwrap();
        assert_eq!(tr.exit, ExitReason::Horizon);
        for (_, x, _) in &tr.samples {
            assert_abs_diff_eq!(x[0], 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn simulate_constant_drift_is_linear() {
        let mut p = one_d_problem(32);
        p.noise_b = vec![vec![SeparatedExpr::zero()]];
        p.control_g = vec![vec![SeparatedExpr::zero()]];
        p.dynamics_f = vec![SeparatedExpr::constant(1, 0.5)];
        let psi = SepVector::constant(&p.grid.mode_sizes(), 1.0);
        let field = field_from_psi(psi, &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        let tr = simulate(&pf, &[-0.9], 0.01, 10.0, 1).unwrap();
        assert_eq!(tr.exit, ExitReason::DomainExit);
        for (t, x, _) in &tr.samples[..tr.samples.len() - 1] {
            assert_abs_diff_eq!(x[0], -0.9 + 0.5 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn simulate_replay_is_deterministic() {
        let p = one_d_problem(32);
        let psi = SepVector::constant(&p.grid.mode_sizes(), 1.0);
        let field = field_from_psi(psi, &p.grid);
        let pf = PolicyField::new(&field, &p, &empty_bc()).unwrap();
        let a = simulate(&pf, &[0.0], 0.01, 0.3, 7).unwrap();
        let b = simulate(&pf, &[0.0], 0.01, 0.3, 7).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for ((ta, xa, ua), (tb, xb, ub)) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(ta, tb);
            assert_eq!(xa, xb);
            assert_eq!(ua, ub);
        }
        // and Euler–Maruyama replay from the recorded seed reproduces states
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut x = a.samples[0].1[0];
        for step in 1..a.samples.len() {
            let (_, xs, us) = &a.samples[step - 1];
            assert_eq!(xs[0], x);
            let xi: f64 = rng.sample(StandardNormal);
            x += us[0] * 0.0 + 0.01f64.sqrt() * xi; // G = B = 1, f = 0, u from record
            let _ = us;
        }
    }

    #[test]
    fn gradient_of_constant_dimension_vanishes() {
        let grid = Grid::new(vec![
            GridDim::new(16, -1.0, 1.0, false).unwrap(),
            GridDim::new(16, -1.0, 1.0, false).unwrap(),
        ]);
        let psi = SepVector::from_rank_one(
            1.0,
            vec![Array1::ones(16), grid.dim(1).nodes().mapv(f64::sin)],
        );
        let spec = StencilSpec::first(8).unwrap();
        let g0 = gradient_op(&grid, 0, &spec).unwrap();
        assert!(g0.apply(&psi).unwrap().norm() < 1e-10);
    }

    #[test]
    fn slice_matches_pointwise_evaluation() {
        let grid = Grid::new(vec![
            GridDim::new(12, -1.0, 1.0, false).unwrap(),
            GridDim::new(10, 0.0, 2.0, false).unwrap(),
            GridDim::new(8, -3.0, 3.0, false).unwrap(),
        ]);
        let mut v = SepVector::random_rank_one(&grid.mode_sizes(), 3).scaled(2.0);
        v = v
            .add(&SepVector::random_rank_one(&grid.mode_sizes(), 4))
            .unwrap();
        let (slice, xs, ys) = export_slice(&v, &grid, &[(2, 0.1)], (0, 1)).unwrap();
        let k2 = grid.dim(2).nearest_node(0.1);
        let dense = v.to_dense(DEFAULT_DENSE_CAP).unwrap();
        for i in 0..12 {
            for j in 0..10 {
                assert_abs_diff_eq!(
                    slice[[i, j]],
                    dense[IxDyn(&[i, j, k2])],
                    epsilon = 1e-12
                );
            }
        }
        assert_eq!(xs.len(), 12);
        assert_eq!(ys.len(), 10);
    }

    #[test]
    fn slice_of_rank_one_is_outer_product() {
        let grid = Grid::new(vec![
            GridDim::new(6, -1.0, 1.0, false).unwrap(),
            GridDim::new(6, -1.0, 1.0, false).unwrap(),
        ]);
        let a = grid.dim(0).nodes().mapv(|v| 1.0 + v);
        let b = grid.dim(1).nodes().mapv(f64::cos);
        let v = SepVector::from_rank_one(2.0, vec![a.clone(), b.clone()]);
        let (slice, _, _) = export_slice(&v, &grid, &[], (0, 1)).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_abs_diff_eq!(slice[[i, j]], 2.0 * a[i] * b[j], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn slice_rejects_bad_dims() {
        let grid = Grid::new(vec![
            GridDim::new(6, -1.0, 1.0, false).unwrap(),
            GridDim::new(6, -1.0, 1.0, false).unwrap(),
        ]);
        let v = SepVector::constant(&grid.mode_sizes(), 1.0);
        assert!(export_slice(&v, &grid, &[], (0, 0)).is_err());
        assert!(export_slice(&v, &grid, &[(0, 0.0)], (0, 1)).is_err());
    }
}
