//! Tensor-product grids and one-dimensional finite-difference factor
//! matrices, assembled into rank-one separated derivative operators.
//!
//! Stencil coefficients come from the local Vandermonde moment system,
//! solved exactly over rationals so the weights carry no elimination error.
//! Interior rows use centered stencils; rows near a non-periodic boundary
//! fall back to shifted windows of the same accuracy order; periodic
//! dimensions wrap indices and stay circulant.

use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::sep_tensor::{SepError, SepOperator};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension {dim}: {points} points is too coarse for derivative order {derivative} at accuracy {accuracy}")]
    TooCoarse {
        dim: usize,
        points: usize,
        derivative: u32,
        accuracy: u32,
    },
    #[error("invalid grid dimension: {0}")]
    BadDimension(String),
    #[error("invalid stencil spec: {0}")]
    BadStencil(String),
    #[error(transparent)]
    Shape(#[from] SepError),
}

/// One axis of a tensor-product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDim {
    pub points: usize,
    pub lower: f64,
    pub upper: f64,
    pub periodic: bool,
}

impl GridDim {
    pub fn new(points: usize, lower: f64, upper: f64, periodic: bool) -> Result<Self, GridError> {
        if points < 2 {
            return Err(GridError::BadDimension(format!(
                "need at least 2 points, got {points}"
            )));
        }
        if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
            return Err(GridError::BadDimension(format!(
                "bounds must satisfy upper > lower, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            points,
            lower,
            upper,
            periodic,
        })
    }

    /// Node spacing. Periodic dimensions exclude the duplicate endpoint.
    pub fn spacing(&self) -> f64 {
        let extent = self.upper - self.lower;
        if self.periodic {
            extent / self.points as f64
        } else {
            extent / (self.points - 1) as f64
        }
    }

    /// Coordinate of node `k`.
    pub fn node(&self, k: usize) -> f64 {
        self.lower + k as f64 * self.spacing()
    }

    /// All node coordinates.
    pub fn nodes(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.points, |k| self.node(k))
    }

    /// Index of the node closest to `x` (periodic wrap applied).
    pub fn nearest_node(&self, x: f64) -> usize {
        let h = self.spacing();
        if self.periodic {
            let extent = self.upper - self.lower;
            let u = (x - self.lower).rem_euclid(extent);
            ((u / h).round() as usize) % self.points
        } else {
            let t = ((x - self.lower) / h).round();
            (t.max(0.0) as usize).min(self.points - 1)
        }
    }

    /// Bracketing nodes and the weight of the upper node for multilinear
    /// interpolation at `x`. Fails off-domain on non-periodic dimensions.
    pub fn interp_nodes(&self, x: f64) -> Result<(usize, usize, f64), ()> {
        let h = self.spacing();
        if self.periodic {
            let extent = self.upper - self.lower;
            let u = (x - self.lower).rem_euclid(extent);
            let t = u / h;
            let k = (t.floor() as usize).min(self.points - 1);
            let frac = t - k as f64;
            Ok((k, (k + 1) % self.points, frac))
        } else {
            let tol = 1e-9 * (self.upper - self.lower);
            if x < self.lower - tol || x > self.upper + tol {
                return Err(());
            }
            let t = ((x - self.lower) / h).clamp(0.0, (self.points - 1) as f64);
            let k = (t.floor() as usize).min(self.points - 2);
            Ok((k, k + 1, t - k as f64))
        }
    }
}

/// Tensor-product grid: one [`GridDim`] per state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<GridDim>,
}

impl Grid {
    pub fn new(dims: Vec<GridDim>) -> Self {
        assert!(!dims.is_empty(), "grid needs at least one dimension");
        Self { dims }
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, i: usize) -> &GridDim {
        &self.dims[i]
    }

    pub fn dims(&self) -> &[GridDim] {
        &self.dims
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.points).collect()
    }
}

/// Boundary handling of a finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryTreatment {
    /// Follow the grid dimension: wrap when periodic, one-sided otherwise.
    #[default]
    Auto,
    OneSided,
    PeriodicWrap,
}

/// Derivative/accuracy request for [`d_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StencilSpec {
    /// 1 or 2.
    pub derivative_order: u32,
    /// Even, between 2 and 8.
    pub accuracy_order: u32,
    pub boundary: BoundaryTreatment,
}

impl StencilSpec {
    pub fn new(derivative_order: u32, accuracy_order: u32) -> Result<Self, GridError> {
        if !(derivative_order == 1 || derivative_order == 2) {
            return Err(GridError::BadStencil(format!(
                "derivative order must be 1 or 2, got {derivative_order}"
            )));
        }
        if accuracy_order % 2 != 0 || !(2..=8).contains(&accuracy_order) {
            return Err(GridError::BadStencil(format!(
                "accuracy order must be even in 2..=8, got {accuracy_order}"
            )));
        }
        Ok(Self {
            derivative_order,
            accuracy_order,
            boundary: BoundaryTreatment::Auto,
        })
    }

    /// Default 8th-order first derivative.
    pub fn first(accuracy_order: u32) -> Result<Self, GridError> {
        Self::new(1, accuracy_order)
    }

    /// Default 8th-order second derivative.
    pub fn second(accuracy_order: u32) -> Result<Self, GridError> {
        Self::new(2, accuracy_order)
    }
}

/// Solve the Vandermonde moment system `Σ_j c_j δ_j^p = m! [p == m]` for the
/// given integer offsets, exactly over rationals. The caller divides by
/// `h^m` to land in physical units.
fn moment_weights(offsets: &[i64], m: u32) -> Vec<f64> {
    let n = offsets.len();
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|p| {
            offsets
                .iter()
                .map(|&d| {
                    let mut v = BigRational::one();
                    for _ in 0..p {
                        v *= BigRational::from(BigInt::from(d));
                    }
                    v
                })
                .collect()
        })
        .collect();
    let mut rhs: Vec<BigRational> = vec![BigRational::zero(); n];
    let mut mfact = BigRational::one();
    for k in 2..=m {
        mfact *= BigRational::from(BigInt::from(k));
    }
    rhs[m as usize] = mfact;

    // Gaussian elimination with partial (max-abs) pivoting, exact arithmetic.
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().cmp(&a[j][col].abs()))
            .expect("pivot row");
        assert!(!a[pivot][col].is_zero(), "distinct offsets required");
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..n {
            if a[row][col].is_zero() {
                continue;
            }
            let factor = &a[row][col] / &a[col][col];
            for k in col..n {
                let sub = &factor * &a[col][k];
                a[row][k] -= sub;
            }
            let sub = &factor * &rhs[col];
            rhs[row] -= sub;
        }
    }
    let mut c = vec![BigRational::zero(); n];
    for row in (0..n).rev() {
        let mut acc = rhs[row].clone();
        for k in (row + 1)..n {
            acc -= &a[row][k] * &c[k];
        }
        c[row] = acc / &a[row][row];
    }
    c.iter()
        .map(|v| v.to_f64().expect("weight fits in f64"))
        .collect()
}

/// One-dimensional derivative matrix for dimension `dim` of the grid.
///
/// Interior rows carry centered stencils of the requested accuracy; near a
/// non-periodic boundary the window shifts one-sided while keeping the full
/// accuracy order. Periodic dimensions use the centered stencil everywhere
/// with wrapped indices, producing a circulant matrix.
pub fn d_matrix(grid: &Grid, dim: usize, spec: &StencilSpec) -> Result<Array2<f64>, GridError> {
    let gd = grid.dim(dim);
    let m_pts = gd.points;
    let a = spec.accuracy_order;
    let m = spec.derivative_order;
    match spec.boundary {
        BoundaryTreatment::Auto => {}
        BoundaryTreatment::PeriodicWrap if gd.periodic => {}
        BoundaryTreatment::OneSided if !gd.periodic => {}
        other => {
            return Err(GridError::BadStencil(format!(
                "boundary treatment {other:?} incompatible with periodic={}",
                gd.periodic
            )));
        }
    }
    if m_pts < (a + 2) as usize {
        return Err(GridError::TooCoarse {
            dim,
            points: m_pts,
            derivative: m,
            accuracy: a,
        });
    }
    let h = gd.spacing();
    let hm = h.powi(m as i32);
    let mut out = Array2::<f64>::zeros((m_pts, m_pts));

    // centered window
    let w = (a / 2) as i64;
    let centered: Vec<i64> = (-w..=w).collect();
    let centered_weights = moment_weights(&centered, m);

    if gd.periodic {
        for i in 0..m_pts {
            for (j, &off) in centered.iter().enumerate() {
                let col = (i as i64 + off).rem_euclid(m_pts as i64) as usize;
                out[[i, col]] += centered_weights[j] / hm;
            }
        }
        return Ok(out);
    }

    // one-sided window size that retains order `a` without symmetry
    let n_side = (a + m) as usize;
    for i in 0..m_pts {
        let lo = i as i64 - w;
        let hi = i as i64 + w;
        if lo >= 0 && hi < m_pts as i64 {
            for (j, &off) in centered.iter().enumerate() {
                out[[i, (i as i64 + off) as usize]] += centered_weights[j] / hm;
            }
        } else {
            let start = (i as i64 - (n_side as i64 - 1) / 2)
                .clamp(0, (m_pts - n_side) as i64) as usize;
            let offsets: Vec<i64> = (0..n_side)
                .map(|k| (start + k) as i64 - i as i64)
                .collect();
            let weights = moment_weights(&offsets, m);
            for (k, wgt) in weights.iter().enumerate() {
                out[[i, start + k]] += wgt / hm;
            }
        }
    }
    Ok(out)
}

/// Rank-one separated gradient along dimension `k`: identity factors
/// everywhere except the derivative matrix in slot `k`.
pub fn gradient_op(grid: &Grid, k: usize, spec: &StencilSpec) -> Result<SepOperator, GridError> {
    let mut spec1 = *spec;
    spec1.derivative_order = 1;
    let d = d_matrix(grid, k, &spec1)?;
    let term: Vec<Array2<f64>> = (0..grid.dim_count())
        .map(|i| {
            if i == k {
                d.clone()
            } else {
                Array2::eye(grid.dim(i).points)
            }
        })
        .collect();
    Ok(SepOperator::from_terms(&grid.mode_sizes(), vec![1.0], vec![term])?)
}

/// Rank-one second-derivative operator `∂²/∂x_k ∂x_j`. The diagonal case
/// uses a dedicated second-derivative stencil; mixed entries compose two
/// first-derivative factors (still rank one).
pub fn second_op(
    grid: &Grid,
    k: usize,
    j: usize,
    spec: &StencilSpec,
) -> Result<SepOperator, GridError> {
    if k == j {
        let mut spec2 = *spec;
        spec2.derivative_order = 2;
        let d2 = d_matrix(grid, k, &spec2)?;
        let term: Vec<Array2<f64>> = (0..grid.dim_count())
            .map(|i| {
                if i == k {
                    d2.clone()
                } else {
                    Array2::eye(grid.dim(i).points)
                }
            })
            .collect();
        Ok(SepOperator::from_terms(&grid.mode_sizes(), vec![1.0], vec![term])?)
    } else {
        let gk = gradient_op(grid, k, spec)?;
        let gj = gradient_op(grid, j, spec)?;
        Ok(gk.compose(&gj)?)
    }
}

/// Rank-one diagonal operator from per-dimension sample vectors.
pub fn diag_op_from_samples(
    grid: &Grid,
    dim_samples: &[Array1<f64>],
) -> Result<SepOperator, GridError> {
    let sizes = grid.mode_sizes();
    if dim_samples.len() != sizes.len() {
        return Err(SepError::ShapeMismatch {
            context: "diag_op_from_samples dims",
            left: vec![dim_samples.len()],
            right: vec![sizes.len()],
        }
        .into());
    }
    let mut term = Vec::with_capacity(sizes.len());
    for (i, s) in dim_samples.iter().enumerate() {
        if s.len() != sizes[i] {
            return Err(SepError::ShapeMismatch {
                context: "diag_op_from_samples length",
                left: vec![s.len()],
                right: vec![sizes[i]],
            }
            .into());
        }
        term.push(Array2::from_diag(s));
    }
    Ok(SepOperator::from_terms(&sizes, vec![1.0], vec![term])?)
}
