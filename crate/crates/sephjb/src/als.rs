//! Alternating least squares in separated form: rank reduction `‖F − G‖`
//! and linear-system solution `‖AF − G‖`, with stagnation-triggered rank
//! enrichment.
//!
//! Each sweep cycles the coordinate directions; for one dimension `k` the
//! factors of all terms are re-solved jointly from the normal equations
//!
//! ```text
//! M_{i,j} = Σ_{a,b} (A_k^a)ᵀ A_k^b · Π_{d≠k} ⟨A_d^a F_d^i, A_d^b F_d^j⟩
//! N_i     = Σ_{a,m} (A_k^a)ᵀ G_k^m · Π_{d≠k} ⟨A_d^a F_d^i, G_d^m⟩
//! ```
//!
//! with `δ·I` added to the assembled block system. The identity-operator
//! case collapses the blocks to a single `r×r` Gram system and is used for
//! rank reduction. When a full sweep improves the relative residual by less
//! than the stagnation threshold and the target has not been reached, a
//! random rank-one term is appended and the iteration continues.

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{FactorizeC, SolveC, UPLO};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::sep_tensor::{SepError, SepOperator, SepVector};

#[derive(Debug, Error)]
pub enum AlsError {
    #[error(transparent)]
    Shape(#[from] SepError),
    #[error("operator has rank 0")]
    ZeroOperator,
    #[error("singular block system in dimension {dim} at rank {rank} (regularization {delta:.3e})")]
    SingularBlock { dim: usize, rank: usize, delta: f64 },
    #[error("invalid ALS options: {0}")]
    BadOptions(String),
}

/// Tuning knobs for [`als_reduce`] / [`als_solve`].
#[derive(Debug, Clone)]
pub struct AlsOptions {
    /// Target relative residual ε.
    pub target_tolerance: f64,
    pub max_rank: usize,
    pub max_sweeps: usize,
    /// Relative residual improvement per full sweep below which the
    /// iteration is considered stagnated.
    pub stagnation_threshold: f64,
    /// Tikhonov term added to the block systems; `None` uses `1e-10·‖G‖²`.
    pub regularization: Option<f64>,
    pub seed: u64,
    /// Rank of the random initial iterate.
    pub initial_rank: usize,
    /// Record the regularized block objective before/after every dimension
    /// update and count violations of monotonicity.
    pub track_objective: bool,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            target_tolerance: 1e-6,
            max_rank: 20,
            max_sweeps: 200,
            stagnation_threshold: 1e-3,
            regularization: None,
            seed: 0,
            initial_rank: 1,
            track_objective: true,
        }
    }
}

impl AlsOptions {
    fn validate(&self) -> Result<(), AlsError> {
        if !(self.target_tolerance > 0.0) {
            return Err(AlsError::BadOptions("target tolerance must be > 0".into()));
        }
        if !(self.stagnation_threshold > 0.0 && self.stagnation_threshold < 1.0) {
            return Err(AlsError::BadOptions(
                "stagnation threshold must lie in (0, 1)".into(),
            ));
        }
        if self.max_rank == 0 || self.initial_rank == 0 {
            return Err(AlsError::BadOptions("ranks must be ≥ 1".into()));
        }
        if self.max_sweeps == 0 {
            return Err(AlsError::BadOptions("max sweeps must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    Converged,
    RankCapped,
    SweepCapped,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminationReason::Converged => write!(f, "converged"),
            TerminationReason::RankCapped => write!(f, "rank-capped"),
            TerminationReason::SweepCapped => write!(f, "sweep-capped"),
        }
    }
}

/// Residual, rank, and enrichment history of one ALS run.
#[derive(Debug, Clone)]
pub struct AlsReport {
    /// Relative residual after each sweep; entry 0 is the initial iterate.
    pub residual_history: Vec<f64>,
    pub rank_history: Vec<usize>,
    /// Sweep indices right before which a rank-one term was appended.
    pub enrichment_sweeps: Vec<usize>,
    /// Cumulative wall time at each residual-history entry.
    pub sweep_wall: Vec<Duration>,
    pub wall_time: Duration,
    pub termination: TerminationReason,
    /// Violations of per-update objective monotonicity (0 when healthy).
    pub monotonicity_violations: usize,
    /// ‖G‖ of the right-hand side; residuals are absolute when this is 0.
    pub rhs_norm: f64,
    pub relative: bool,
}

impl AlsReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("non-empty history")
    }
}

/// Residual `‖AF − G‖` evaluated through the inner-product expansion
/// `‖AF‖² − 2⟨AF, G⟩ + ‖G‖²`; tiny negative round-off clamps to zero.
#[derive(Debug, Clone, Copy)]
pub struct Residual {
    pub value: f64,
    /// True when the value is relative to `‖G‖`.
    pub relative: bool,
}

/// Operator data with term scales folded into the dimension-0 matrices.
struct FoldedOperator {
    /// `mats[d][a]`: dimension-`d` matrix of term `a`.
    mats: Vec<Vec<Array2<f64>>>,
    rank: usize,
}

impl FoldedOperator {
    fn from_op(op: &SepOperator) -> Self {
        let d = op.dim_count();
        let rank = op.rank();
        let mut mats: Vec<Vec<Array2<f64>>> = Vec::with_capacity(d);
        for dim in 0..d {
            let mut per_dim = Vec::with_capacity(rank);
            for a in 0..rank {
                let mut m = op.factor(dim, a).clone();
                if dim == 0 {
                    m *= op.scales()[a];
                }
                per_dim.push(m);
            }
            mats.push(per_dim);
        }
        Self { mats, rank }
    }

    fn identity(mode_sizes: &[usize]) -> Self {
        let mats = mode_sizes.iter().map(|&m| vec![Array2::eye(m)]).collect();
        Self { mats, rank: 1 }
    }
}

/// Right-hand side factors with term scales folded into dimension 0.
fn folded_rhs(g: &SepVector) -> Vec<Array2<f64>> {
    (0..g.dim_count())
        .map(|dim| {
            let mut f = g.factor(dim).clone();
            if dim == 0 {
                for (l, &s) in g.scales().iter().enumerate() {
                    f.column_mut(l).mapv_inplace(|v| v * s);
                }
            }
            f
        })
        .collect()
}

/// Shared per-dimension state of the iterate.
struct Engine<'a> {
    op: &'a FoldedOperator,
    /// Identity operators take the collapsed Gram path.
    identity: bool,
    gm: &'a [Array2<f64>],
    mode_sizes: Vec<usize>,
    r_g: usize,
    gnorm_sq: f64,
    /// `(A_k^a)ᵀ A_k^b` flattened row-major into row `a·r_A + b`; only for
    /// the general path.
    p_flat: Vec<Array2<f64>>,
    /// `(A_k^a)ᵀ g_k^m` in column `a·r_G + m`; only for the general path.
    tg: Vec<Array2<f64>>,
    // iterate
    scales: Vec<f64>,
    factors: Vec<Array2<f64>>,
    /// `A_d^a F_d` in columns `a·r_F + i`.
    zbig: Vec<Array2<f64>>,
    /// Gram `zbigᵀ·zbig` per dimension.
    w: Vec<Array2<f64>>,
    /// `zbigᵀ·gm` per dimension.
    u: Vec<Array2<f64>>,
    delta: f64,
}

impl<'a> Engine<'a> {
    fn new(
        op: &'a FoldedOperator,
        identity: bool,
        gm: &'a [Array2<f64>],
        mode_sizes: Vec<usize>,
        gnorm_sq: f64,
        init: SepVector,
        delta: f64,
    ) -> Self {
        let d = mode_sizes.len();
        let r_g = gm[0].ncols();
        let mut p_flat = Vec::new();
        let mut tg = Vec::new();
        if !identity {
            let r_a = op.rank;
            for dim in 0..d {
                let m = mode_sizes[dim];
                let mut p = Array2::<f64>::zeros((r_a * r_a, m * m));
                for a in 0..r_a {
                    for b in 0..r_a {
                        let prod = op.mats[dim][a].t().dot(&op.mats[dim][b]);
                        let flat = Array1::from_iter(prod.iter().cloned());
                        p.row_mut(a * r_a + b).assign(&flat);
                    }
                }
                p_flat.push(p);
                let mut t = Array2::<f64>::zeros((m, r_a * r_g));
                for a in 0..r_a {
                    let block = op.mats[dim][a].t().dot(&gm[dim]);
                    t.slice_mut(ndarray::s![.., a * r_g..(a + 1) * r_g])
                        .assign(&block);
                }
                tg.push(t);
            }
        }
        let scales = init.scales().to_vec();
        let factors: Vec<Array2<f64>> = (0..d).map(|i| init.factor(i).clone()).collect();
        let mut engine = Self {
            op,
            identity,
            gm,
            mode_sizes,
            r_g,
            gnorm_sq,
            p_flat,
            tg,
            scales,
            factors,
            zbig: Vec::new(),
            w: Vec::new(),
            u: Vec::new(),
            delta,
        };
        engine.refresh_all();
        engine
    }

    fn rank(&self) -> usize {
        self.scales.len()
    }

    fn refresh_all(&mut self) {
        let d = self.mode_sizes.len();
        self.zbig.clear();
        self.w.clear();
        self.u.clear();
        for dim in 0..d {
            let z = self.compute_zbig(dim);
            self.w.push(z.t().dot(&z));
            self.u.push(z.t().dot(&self.gm[dim]));
            self.zbig.push(z);
        }
    }

    fn compute_zbig(&self, dim: usize) -> Array2<f64> {
        if self.identity {
            return self.factors[dim].clone();
        }
        let r_a = self.op.rank;
        let r_f = self.rank();
        let m = self.mode_sizes[dim];
        let mut z = Array2::<f64>::zeros((m, r_a * r_f));
        for a in 0..r_a {
            let block = self.op.mats[dim][a].dot(&self.factors[dim]);
            z.slice_mut(ndarray::s![.., a * r_f..(a + 1) * r_f])
                .assign(&block);
        }
        z
    }

    fn refresh_dim(&mut self, dim: usize) {
        let z = self.compute_zbig(dim);
        self.w[dim] = z.t().dot(&z);
        self.u[dim] = z.t().dot(&self.gm[dim]);
        self.zbig[dim] = z;
    }

    /// Elementwise product of `w` over all dims except `skip` (all dims when
    /// `skip` is none).
    fn w_product(&self, skip: Option<usize>) -> Array2<f64> {
        let n = self.w[0].nrows();
        let mut out = Array2::<f64>::ones((n, n));
        for (dim, wd) in self.w.iter().enumerate() {
            if Some(dim) == skip {
                continue;
            }
            out = out * wd;
        }
        out
    }

    fn u_product(&self, skip: Option<usize>) -> Array2<f64> {
        let n = self.u[0].nrows();
        let mut out = Array2::<f64>::ones((n, self.r_g));
        for (dim, ud) in self.u.iter().enumerate() {
            if Some(dim) == skip {
                continue;
            }
            out = out * ud;
        }
        out
    }

    /// `‖AF − G‖²` from the cached Gram products, clamped at zero, together
    /// with the evaluation noise floor of the expansion. Residuals at or
    /// below the floor are indistinguishable from exact in f64.
    fn residual_sq(&self) -> (f64, f64) {
        let wfull = self.w_product(None);
        let ufull = self.u_product(None);
        let r_f = self.rank();
        let blocks = wfull.nrows() / r_f.max(1);
        let mut af_sq = 0.0;
        let mut af_g = 0.0;
        if r_f > 0 {
            let mut s_ex = Array1::<f64>::zeros(wfull.nrows());
            for a in 0..blocks {
                for i in 0..r_f {
                    s_ex[a * r_f + i] = self.scales[i];
                }
            }
            af_sq = s_ex.dot(&wfull.dot(&s_ex));
            for a in 0..blocks {
                for i in 0..r_f {
                    for m in 0..self.r_g {
                        af_g += self.scales[i] * ufull[[a * r_f + i, m]];
                    }
                }
            }
        }
        let magnitude = af_sq.abs() + 2.0 * af_g.abs() + self.gnorm_sq;
        let floor = 100.0 * f64::EPSILON * magnitude;
        ((af_sq - 2.0 * af_g + self.gnorm_sq).max(0.0), floor)
    }

    /// Regularized block objective `‖AF − G‖² + δ·Σ s_i²`.
    fn objective(&self) -> f64 {
        let ssq: f64 = self.scales.iter().map(|s| s * s).sum();
        self.residual_sq().0 + self.delta * ssq
    }

    /// Re-solve dimension `k` for all terms jointly.
    fn update_dim(&mut self, k: usize) -> Result<(), AlsError> {
        let r_f = self.rank();
        let m = self.mode_sizes[k];
        let solution: Array2<f64> = if self.identity {
            // Gram system (Π_{d≠k} FᵀF + δI) X = Π_{d≠k} (FᵀG) · G_kᵀ
            let mut gamma = self.w_product(Some(k));
            for i in 0..r_f {
                gamma[[i, i]] += self.delta;
            }
            let coef = self.u_product(Some(k)); // (r_F, r_G)
            let rhs = coef.dot(&self.gm[k].t()); // (r_F, M)
            let chol = gamma
                .factorizec(UPLO::Lower)
                .map_err(|_| AlsError::SingularBlock {
                    dim: k,
                    rank: r_f,
                    delta: self.delta,
                })?;
            let mut out = Array2::<f64>::zeros((m, r_f));
            for col in 0..m {
                let b = rhs.column(col).to_owned();
                let x = chol.solvec(&b).map_err(|_| AlsError::SingularBlock {
                    dim: k,
                    rank: r_f,
                    delta: self.delta,
                })?;
                out.row_mut(col).assign(&x);
            }
            out
        } else {
            let r_a = self.op.rank;
            let w_prod = self.w_product(Some(k));
            // reindex (a,i),(b,j) → rows (a,b), cols (i,j)
            let mut w_mat = Array2::<f64>::zeros((r_a * r_a, r_f * r_f));
            for a in 0..r_a {
                for b in 0..r_a {
                    for i in 0..r_f {
                        for j in 0..r_f {
                            w_mat[[a * r_a + b, i * r_f + j]] =
                                w_prod[[a * r_f + i, b * r_f + j]];
                        }
                    }
                }
            }
            let g_flat = self.p_flat[k].t().dot(&w_mat); // (M², r_F²)
            let n = r_f * m;
            let mut s = Array2::<f64>::zeros((n, n));
            for i in 0..r_f {
                for j in 0..r_f {
                    let col = i * r_f + j;
                    for u_ in 0..m {
                        for v in 0..m {
                            s[[i * m + u_, j * m + v]] = g_flat[[u_ * m + v, col]];
                        }
                    }
                }
            }
            for idx in 0..n {
                s[[idx, idx]] += self.delta;
            }
            // right-hand side
            let u_prod = self.u_product(Some(k)); // (r_A·r_F, r_G)
            let mut coef = Array2::<f64>::zeros((r_a * self.r_g, r_f));
            for a in 0..r_a {
                for i in 0..r_f {
                    for mm in 0..self.r_g {
                        coef[[a * self.r_g + mm, i]] = u_prod[[a * r_f + i, mm]];
                    }
                }
            }
            let n_mat = self.tg[k].dot(&coef); // (M, r_F)
            let mut rhs = Array1::<f64>::zeros(n);
            for i in 0..r_f {
                for u_ in 0..m {
                    rhs[i * m + u_] = n_mat[[u_, i]];
                }
            }
            let chol = s
                .factorizec(UPLO::Lower)
                .map_err(|_| AlsError::SingularBlock {
                    dim: k,
                    rank: r_f,
                    delta: self.delta,
                })?;
            let c = chol.solvec(&rhs).map_err(|_| AlsError::SingularBlock {
                dim: k,
                rank: r_f,
                delta: self.delta,
            })?;
            let mut out = Array2::<f64>::zeros((m, r_f));
            for i in 0..r_f {
                for u_ in 0..m {
                    out[[u_, i]] = c[i * m + u_];
                }
            }
            out
        };

        // renormalize the solved columns into scales
        for i in 0..r_f {
            let col = solution.column(i);
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                self.scales[i] = 0.0;
                let mut fc = self.factors[k].column_mut(i);
                fc.fill(0.0);
                fc[0] = 1.0;
            } else {
                self.scales[i] = norm;
                self.factors[k].column_mut(i).assign(&(&col / norm));
            }
        }
        self.refresh_dim(k);
        Ok(())
    }

    fn enrich(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        let term = SepVector::random_rank_one_with(&self.mode_sizes, rng);
        self.scales.push(scale.max(f64::MIN_POSITIVE));
        for dim in 0..self.mode_sizes.len() {
            let col = term.factor(dim).column(0).to_owned();
            let m = self.mode_sizes[dim];
            let mut grown = Array2::<f64>::zeros((m, self.rank()));
            grown
                .slice_mut(ndarray::s![.., ..self.rank() - 1])
                .assign(&self.factors[dim]);
            grown.column_mut(self.rank() - 1).assign(&col);
            self.factors[dim] = grown;
        }
        self.refresh_all();
    }

    fn iterate(&self) -> SepVector {
        SepVector::from_parts_normalized(
            self.mode_sizes.clone(),
            self.scales.clone(),
            self.factors.clone(),
        )
    }
}

fn run(
    op: &FoldedOperator,
    identity: bool,
    g: &SepVector,
    opts: &AlsOptions,
) -> Result<(SepVector, AlsReport), AlsError> {
    opts.validate()?;
    let start = Instant::now();
    let mode_sizes = g.mode_sizes().to_vec();
    let gnorm = g.norm();
    if g.rank() == 0 || gnorm == 0.0 {
        let report = AlsReport {
            residual_history: vec![0.0],
            rank_history: vec![0],
            enrichment_sweeps: vec![],
            sweep_wall: vec![start.elapsed()],
            wall_time: start.elapsed(),
            termination: TerminationReason::Converged,
            monotonicity_violations: 0,
            rhs_norm: 0.0,
            relative: false,
        };
        return Ok((SepVector::zero(&mode_sizes), report));
    }
    let gnorm_sq = gnorm * gnorm;
    let delta = opts.regularization.unwrap_or(1e-10 * gnorm_sq);
    let gm = folded_rhs(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init_rank = opts.initial_rank.min(opts.max_rank);
    let mut init = SepVector::zero(&mode_sizes);
    for _ in 0..init_rank {
        let term = SepVector::random_rank_one_with(&mode_sizes, &mut rng).scaled(gnorm);
        init = init.add(&term).expect("matching shapes");
    }

    let mut engine = Engine::new(op, identity, &gm, mode_sizes.clone(), gnorm_sq, init, delta);

    let mut residual_history = Vec::new();
    let mut rank_history = Vec::new();
    let mut enrichment_sweeps = Vec::new();
    let mut sweep_wall = Vec::new();
    let mut violations = 0usize;

    let rel = |sq: f64| sq.max(0.0).sqrt() / gnorm;
    #[allow(unused_assignments)]
    let (mut resid_sq, mut floor) = engine.residual_sq();
    let mut resid = rel(resid_sq);
    residual_history.push(resid);
    rank_history.push(engine.rank());
    sweep_wall.push(start.elapsed());

    let sweep_once = |engine: &mut Engine, violations: &mut usize| -> Result<(), AlsError> {
        for k in 0..mode_sizes.len() {
            let before = if opts.track_objective {
                Some(engine.objective())
            } else {
                None
            };
            engine.update_dim(k)?;
            if let Some(before) = before {
                let after = engine.objective();
                if after > before * (1.0 + 1e-9) + 1e-12 * gnorm_sq {
                    *violations += 1;
                }
            }
        }
        Ok(())
    };

    // Once the computed residual is noise-dominated it can no longer steer
    // the iteration, but the block updates keep contracting the true error.
    // Polish at fixed rank until the iterate itself stops moving.
    let polish = |engine: &mut Engine, violations: &mut usize| -> Result<(), AlsError> {
        for _ in 0..40 {
            let prev_scales = engine.scales.clone();
            let prev_factors = engine.factors.clone();
            sweep_once(engine, violations)?;
            let mut change: f64 = 0.0;
            for (a, b) in engine.factors.iter().zip(prev_factors.iter()) {
                let diff = a - b;
                change = change.max(diff.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            let scale_mag = prev_scales.iter().map(|s| s * s).sum::<f64>().sqrt();
            let scale_change = engine
                .scales
                .iter()
                .zip(prev_scales.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if change <= 1e-13 && scale_change <= 1e-13 * scale_mag.max(1.0) {
                break;
            }
        }
        Ok(())
    };

    let mut termination = TerminationReason::SweepCapped;
    if resid <= opts.target_tolerance {
        termination = TerminationReason::Converged;
    } else {
        for sweep in 1..=opts.max_sweeps {
            sweep_once(&mut engine, &mut violations)?;
            (resid_sq, floor) = engine.residual_sq();
            let new_resid = rel(resid_sq);
            residual_history.push(new_resid);
            rank_history.push(engine.rank());
            sweep_wall.push(start.elapsed());
            if new_resid <= opts.target_tolerance {
                if resid_sq <= floor {
                    polish(&mut engine, &mut violations)?;
                    let (sq, _) = engine.residual_sq();
                    residual_history.push(rel(sq));
                    rank_history.push(engine.rank());
                    sweep_wall.push(start.elapsed());
                }
                termination = TerminationReason::Converged;
                break;
            }
            let improvement = if resid > 0.0 {
                (resid - new_resid) / resid
            } else {
                0.0
            };
            resid = new_resid;
            if improvement < opts.stagnation_threshold {
                if resid_sq <= floor {
                    polish(&mut engine, &mut violations)?;
                    let (sq, _) = engine.residual_sq();
                    residual_history.push(rel(sq));
                    rank_history.push(engine.rank());
                    sweep_wall.push(start.elapsed());
                    termination = TerminationReason::Converged;
                    break;
                }
                if engine.rank() < opts.max_rank {
                    enrichment_sweeps.push(sweep);
                    engine.enrich(&mut rng, resid * gnorm);
                } else {
                    termination = TerminationReason::RankCapped;
                    break;
                }
            }
        }
    }

    let report = AlsReport {
        residual_history,
        rank_history,
        enrichment_sweeps,
        sweep_wall,
        wall_time: start.elapsed(),
        termination,
        monotonicity_violations: violations,
        rhs_norm: gnorm,
        relative: true,
    };
    Ok((engine.iterate(), report))
}

/// Find a low-rank approximation of `g`: minimize `‖F − G‖` subject to the
/// rank cap, via the identity-operator Gram specialization.
pub fn als_reduce(g: &SepVector, opts: &AlsOptions) -> Result<(SepVector, AlsReport), AlsError> {
    let op = FoldedOperator::identity(g.mode_sizes());
    run(&op, true, g, opts)
}

/// Solve `A F = G` approximately: minimize `‖AF − G‖` over separated `F`
/// with stagnation-triggered rank enrichment.
pub fn als_solve(
    a: &SepOperator,
    g: &SepVector,
    opts: &AlsOptions,
) -> Result<(SepVector, AlsReport), AlsError> {
    if a.mode_sizes() != g.mode_sizes() {
        return Err(SepError::ShapeMismatch {
            context: "als_solve",
            left: a.mode_sizes().to_vec(),
            right: g.mode_sizes().to_vec(),
        }
        .into());
    }
    if a.rank() == 0 {
        return Err(AlsError::ZeroOperator);
    }
    let op = FoldedOperator::from_op(a);
    run(&op, false, g, opts)
}

/// `‖AF − G‖ / ‖G‖` via the inner-product expansion, without materializing
/// the rank-`r_A·r_F` product. Falls back to the absolute residual (flagged)
/// when `‖G‖ = 0`.
pub fn residual(a: &SepOperator, f: &SepVector, g: &SepVector) -> Result<Residual, AlsError> {
    if a.mode_sizes() != f.mode_sizes() || a.mode_sizes() != g.mode_sizes() {
        return Err(SepError::ShapeMismatch {
            context: "residual",
            left: a.mode_sizes().to_vec(),
            right: f.mode_sizes().to_vec(),
        }
        .into());
    }
    let op = FoldedOperator::from_op(a);
    let gm = folded_rhs(g);
    let gnorm = g.norm();
    let engine = Engine::new(
        &op,
        false,
        &gm,
        f.mode_sizes().to_vec(),
        gnorm * gnorm,
        f.clone(),
        0.0,
    );
    let value = engine.residual_sq().0.sqrt();
    if gnorm > 0.0 {
        Ok(Residual {
            value: value / gnorm,
            relative: true,
        })
    } else {
        Ok(Residual {
            value,
            relative: false,
        })
    }
}

/// Dense-oracle residual for desk-scale verification in tests.
pub fn dense_relative_residual(
    a: &SepOperator,
    f: &SepVector,
    g: &SepVector,
    cap: usize,
) -> Result<f64, SepError> {
    let ad = a.to_dense(cap)?;
    let fd = f.to_dense(cap)?;
    let gd = g.to_dense(cap)?;
    let fv = Array1::from_iter(fd.iter().cloned());
    let gv = Array1::from_iter(gd.iter().cloned());
    let r = ad.dot(&fv) - &gv;
    let gn = gv.dot(&gv).sqrt();
    Ok(r.dot(&r).sqrt() / gn.max(f64::MIN_POSITIVE))
}

#[allow(dead_code)]
fn view_norm(v: ArrayView2<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fd::{second_op, Grid, GridDim, StencilSpec};
    use crate::sep_tensor::DEFAULT_DENSE_CAP;
    use ndarray::Array1;
    use ndarray_linalg::Solve;

    fn random_sep(mode_sizes: &[usize], rank: usize, seed: u64) -> SepVector {
        let mut v = SepVector::zero(mode_sizes);
        for l in 0..rank {
            let t = SepVector::random_rank_one(mode_sizes, seed * 1000 + l as u64)
                .scaled(1.0 + l as f64);
            v = v.add(&t).unwrap();
        }
        v
    }

    fn dense_rel_err(a: &SepVector, b: &SepVector) -> f64 {
        let da = a.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let db = b.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let diff = &da - &db;
        let nb = db.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        diff.iter().map(|v| v * v).sum::<f64>().sqrt() / nb
    }

    #[test]
    fn reduce_recovers_hidden_rank_two() {
        // rank-5 input built by duplicating the terms of a rank-2 tensor
        let shape = [8, 7, 6];
        let base = random_sep(&shape, 2, 3);
        let dup = base
            .add(&base.scaled(0.5))
            .unwrap()
            .add(&SepVector::zero(&shape))
            .unwrap();
        let g = dup.add(&base.scaled(-0.25)).unwrap(); // rank 6, truly rank 2
        assert_eq!(g.rank(), 6);
        let gn = g.norm();
        let opts = AlsOptions {
            target_tolerance: 1e-9,
            max_rank: 6,
            regularization: Some(1e-16 * gn * gn),
            ..Default::default()
        };
        let (f, report) = als_reduce(&g, &opts).unwrap();
        assert!(f.rank() <= 2, "rank {} > 2", f.rank());
        assert!(dense_rel_err(&f, &g) <= 1e-10, "err {}", dense_rel_err(&f, &g));
        assert_eq!(report.monotonicity_violations, 0);
    }

    #[test]
    fn reduce_rank_one_fixed_point() {
        let g = random_sep(&[9, 5], 1, 4);
        let gn = g.norm();
        let opts = AlsOptions {
            target_tolerance: 1e-8,
            max_rank: 3,
            regularization: Some(1e-16 * gn * gn),
            ..Default::default()
        };
        let (f, report) = als_reduce(&g, &opts).unwrap();
        assert_eq!(f.rank(), 1);
        assert!(dense_rel_err(&f, &g) < 1e-12);
        assert_eq!(report.termination, TerminationReason::Converged);
    }

    #[test]
    fn reduce_best_rank_one_matches_svd() {
        // d=2: optimal rank-1 residual equals the SVD tail
        use ndarray_linalg::SVD;
        let g = random_sep(&[8, 7], 3, 9);
        let opts = AlsOptions {
            target_tolerance: 1e-13,
            max_rank: 1,
            max_sweeps: 400,
            stagnation_threshold: 1e-7,
            ..Default::default()
        };
        let (f, _) = als_reduce(&g, &opts).unwrap();
        let dense = g.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let mat = dense.into_dimensionality::<ndarray::Ix2>().unwrap();
        let (_, sv, _) = mat.svd(false, false).unwrap();
        let best: f64 = sv.iter().skip(1).map(|s| s * s).sum::<f64>().sqrt();
        let gd = g.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let fd = f.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let resid = (&gd - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            (resid - best).abs() <= 0.05 * best,
            "als {resid} vs svd {best}"
        );
    }

    #[test]
    fn solve_with_identity_matches_reduce() {
        let shape = [6, 5, 4];
        let g = random_sep(&shape, 4, 11);
        let opts = AlsOptions {
            target_tolerance: 1e-6,
            max_rank: 4,
            seed: 42,
            ..Default::default()
        };
        let (f_r, _) = als_reduce(&g, &opts).unwrap();
        let id = SepOperator::identity(&shape);
        let (f_s, _) = als_solve(&id, &g, &opts).unwrap();
        assert!(
            dense_rel_err(&f_r, &f_s) < 1e-12,
            "paths diverged: {}",
            dense_rel_err(&f_r, &f_s)
        );
    }

    #[test]
    fn solve_manufactured_rank_one() {
        let shape = [10, 9, 8];
        let grid = Grid::new(
            shape
                .iter()
                .map(|&m| GridDim::new(m, -1.0, 1.0, false).unwrap())
                .collect(),
        );
        // A = I + 0.2·Σ ∂²/∂x_k² — symmetric, well conditioned
        let spec = StencilSpec::second(4).unwrap();
        let mut a = SepOperator::identity(&shape);
        for k in 0..3 {
            a = a.add(&second_op(&grid, k, k, &spec).unwrap().scaled(-0.2)).unwrap();
        }
        let f_star = SepVector::random_rank_one(&shape, 123).scaled(2.0);
        let g = a.apply(&f_star).unwrap();
        let gn = g.norm();
        for seed in 0..3 {
            let opts = AlsOptions {
                target_tolerance: 3e-8,
                max_rank: 4,
                seed,
                regularization: Some(1e-16 * gn * gn),
                ..Default::default()
            };
            let (f, _) = als_solve(&a, &g, &opts).unwrap();
            let err = dense_rel_err(&f, &f_star);
            assert!(err <= 1e-6, "seed {seed}: error {err}");
            let dres = dense_relative_residual(&a, &f, &g, DEFAULT_DENSE_CAP).unwrap();
            assert!(dres <= 1e-7, "seed {seed}: dense residual {dres}");
        }
    }

    #[test]
    fn solve_poisson_like_matches_dense() {
        // periodic Laplacian keeps the operator symmetric and well
        // conditioned, so the dense-solve comparison is meaningful
        let shape = [32, 32];
        let grid = Grid::new(
            shape
                .iter()
                .map(|&m| GridDim::new(m, 0.0, 1.0, true).unwrap())
                .collect(),
        );
        let spec = StencilSpec::second(4).unwrap();
        let mut a = SepOperator::identity(&shape);
        for k in 0..2 {
            a = a.add(&second_op(&grid, k, k, &spec).unwrap().scaled(-1e-3)).unwrap();
        }
        let x = grid.dim(0).nodes();
        let g = SepVector::from_rank_one(
            1.0,
            vec![
                x.mapv(|v| (std::f64::consts::TAU * v).sin()),
                grid.dim(1).nodes().mapv(|v| (std::f64::consts::TAU * v).cos() + 1.5),
            ],
        )
        .add(&SepVector::random_rank_one(&shape, 5).scaled(0.1))
        .unwrap();
        let gn = g.norm();
        let opts = AlsOptions {
            target_tolerance: 1e-8,
            max_rank: 25,
            max_sweeps: 500,
            stagnation_threshold: 3e-3,
            initial_rank: 3,
            regularization: Some(1e-14 * gn * gn),
            ..Default::default()
        };
        let (f, report) = als_solve(&a, &g, &opts).unwrap();
        assert!(
            report.final_residual() <= 1e-6,
            "residual {:e}",
            report.final_residual()
        );
        // dense oracle
        let ad = a.to_dense(usize::MAX).unwrap();
        let gd = Array1::from_iter(g.to_dense(DEFAULT_DENSE_CAP).unwrap().iter().cloned());
        let xd = ad.solve(&gd).unwrap();
        let fd = Array1::from_iter(f.to_dense(DEFAULT_DENSE_CAP).unwrap().iter().cloned());
        let err = (&fd - &xd).dot(&(&fd - &xd)).sqrt() / xd.dot(&xd).sqrt();
        assert!(err <= 1e-4, "error vs dense solve: {err}");
    }

    #[test]
    fn residual_cases() {
        let shape = [8, 8];
        let a = SepOperator::identity(&shape);
        let g = random_sep(&shape, 2, 21);
        let zero = SepVector::zero(&shape);
        let r = residual(&a, &zero, &g).unwrap();
        assert!(r.relative);
        assert!((r.value - 1.0).abs() < 1e-12);

        // absolute residual flagged when ‖G‖ = 0
        let r0 = residual(&a, &g, &zero).unwrap();
        assert!(!r0.relative);
        assert!((r0.value - g.norm()).abs() < 1e-9 * g.norm());

        // expansion matches the dense residual on random instances
        for seed in 0..5 {
            let f = random_sep(&shape, 2, 100 + seed);
            let rr = residual(&a, &f, &g).unwrap();
            let dd = dense_relative_residual(&a, &f, &g, DEFAULT_DENSE_CAP).unwrap();
            assert!((rr.value - dd).abs() < 1e-10, "seed {seed}: {} vs {dd}", rr.value);
        }
    }

    #[test]
    fn enrichment_increases_rank_without_hurting_objective() {
        let shape = [8, 7];
        let g = random_sep(&shape, 4, 31);
        let opts = AlsOptions {
            target_tolerance: 1e-12,
            max_rank: 4,
            max_sweeps: 60,
            ..Default::default()
        };
        let (_, report) = als_reduce(&g, &opts).unwrap();
        assert!(!report.enrichment_sweeps.is_empty());
        for &s in &report.enrichment_sweeps {
            // rank grows by exactly one at each enrichment
            assert_eq!(report.rank_history[s] + 1, report.rank_history[s + 1].min(4));
            // the sweep after enrichment does not end above the pre-enrichment residual
            if s + 1 < report.residual_history.len() {
                assert!(
                    report.residual_history[s + 1]
                        <= report.residual_history[s] * (1.0 + 1e-9) + 1e-12
                );
            }
        }
        assert_eq!(report.monotonicity_violations, 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let shape = [7, 6, 5];
        let g = random_sep(&shape, 3, 41);
        let opts = AlsOptions {
            target_tolerance: 1e-8,
            max_rank: 5,
            seed: 7,
            ..Default::default()
        };
        let (f1, r1) = als_reduce(&g, &opts).unwrap();
        let (f2, r2) = als_reduce(&g, &opts).unwrap();
        assert_eq!(r1.residual_history, r2.residual_history);
        assert_eq!(f1.scales(), f2.scales());
        for dim in 0..3 {
            assert_eq!(f1.factor(dim), f2.factor(dim));
        }
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let shape = [6, 6];
        let g = SepVector::zero(&shape);
        let (f, report) = als_reduce(&g, &AlsOptions::default()).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(report.termination, TerminationReason::Converged);
        assert!(!report.relative);
    }

    #[test]
    fn zero_operator_rejected() {
        let shape = [6, 6];
        let a = SepOperator::zero(&shape);
        let g = random_sep(&shape, 1, 1);
        match als_solve(&a, &g, &AlsOptions::default()) {
            Err(AlsError::ZeroOperator) => {}
            other => panic!("expected zero-operator error, got {other:?}"),
        }
    }

    #[test]
    fn bad_options_rejected() {
        let g = random_sep(&[6, 6], 1, 1);
        let mut opts = AlsOptions::default();
        opts.stagnation_threshold = 1.5;
        assert!(als_reduce(&g, &opts).is_err());
        opts.stagnation_threshold = 1e-3;
        opts.max_rank = 0;
        assert!(als_reduce(&g, &opts).is_err());
    }
}
