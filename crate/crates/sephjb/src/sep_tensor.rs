//! Separated (CP-format) vectors and operators on tensor-product grids.
//!
//! A grid function in dimension `d` is stored as a sum of rank-one tensor
//! products
//!
//! ```text
//! F ≈ Σ_l s_l · F_1^l ⊗ F_2^l ⊗ … ⊗ F_d^l
//! ```
//!
//! with unit-norm per-dimension factors `F_i^l` and non-negative scales
//! `s_l`; the number of terms is the separation rank. Linear operators keep
//! one square matrix per dimension and term. Rank bookkeeping is exact:
//! addition concatenates terms, operator application multiplies ranks.
//! Dense expansions are provided as test oracles for desk-scale shapes.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid_fd::Grid;

/// Default cap on the number of entries a dense expansion may produce.
pub const DEFAULT_DENSE_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SepError {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("dense expansion of {entries} entries exceeds cap {cap}")]
    DenseCapExceeded { entries: usize, cap: usize },
    #[error("coordinate {coord} outside [{lower}, {upper}] in dimension {dim}")]
    OutOfDomain {
        dim: usize,
        coord: f64,
        lower: f64,
        upper: f64,
    },
}

fn check_same_shape(
    context: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(), SepError> {
    if a != b {
        return Err(SepError::ShapeMismatch {
            context,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// Kronecker product, row-major convention (first argument varies slowest).
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<f64>::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let v = a[[i, j]];
            if v == 0.0 {
                continue;
            }
            let mut block = out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]);
            block.scaled_add(v, b);
        }
    }
    out
}

/// Rank-`r` separated representation of a `d`-dimensional grid function.
///
/// Factors are stored one matrix per dimension, shape `(M_i, r)`, with
/// unit-norm columns; scales are non-negative with signs absorbed into the
/// first dimension's factor. Rank 0 is the exact zero tensor.
#[derive(Debug, Clone)]
pub struct SepVector {
    mode_sizes: Vec<usize>,
    scales: Vec<f64>,
    factors: Vec<Array2<f64>>,
}

impl SepVector {
    /// The zero tensor (rank 0).
    pub fn zero(mode_sizes: &[usize]) -> Self {
        let factors = mode_sizes.iter().map(|&m| Array2::zeros((m, 0))).collect();
        Self {
            mode_sizes: mode_sizes.to_vec(),
            scales: Vec::new(),
            factors,
        }
    }

    /// Constant tensor of the given value (rank 1, or rank 0 for value 0).
    pub fn constant(mode_sizes: &[usize], value: f64) -> Self {
        if value == 0.0 {
            return Self::zero(mode_sizes);
        }
        let columns = mode_sizes
            .iter()
            .map(|&m| Array1::from_elem(m, 1.0))
            .collect();
        Self::from_rank_one(value, columns)
    }

    /// Single rank-one term `scale · c_1 ⊗ … ⊗ c_d`, normalized on entry.
    pub fn from_rank_one(scale: f64, columns: Vec<Array1<f64>>) -> Self {
        let mode_sizes: Vec<usize> = columns.iter().map(|c| c.len()).collect();
        let factors = columns
            .into_iter()
            .map(|c| {
                let m = c.len();
                c.into_shape_with_order((m, 1)).expect("column reshape")
            })
            .collect();
        Self::from_parts_normalized(mode_sizes, vec![scale], factors)
    }

    /// Assemble from term-major data: `terms[l][i]` is the dimension-`i`
    /// factor of term `l`. Factors are normalized and signs canonicalized.
    pub fn from_terms(
        mode_sizes: &[usize],
        scales: Vec<f64>,
        terms: Vec<Vec<Array1<f64>>>,
    ) -> Result<Self, SepError> {
        let d = mode_sizes.len();
        let rank = terms.len();
        assert_eq!(scales.len(), rank, "one scale per term");
        let mut factors: Vec<Array2<f64>> = mode_sizes
            .iter()
            .map(|&m| Array2::zeros((m, rank)))
            .collect();
        for (l, term) in terms.iter().enumerate() {
            if term.len() != d {
                return Err(SepError::ShapeMismatch {
                    context: "from_terms factor count",
                    left: vec![term.len()],
                    right: vec![d],
                });
            }
            for (i, col) in term.iter().enumerate() {
                if col.len() != mode_sizes[i] {
                    return Err(SepError::ShapeMismatch {
                        context: "from_terms factor length",
                        left: vec![col.len()],
                        right: vec![mode_sizes[i]],
                    });
                }
                factors[i].column_mut(l).assign(col);
            }
        }
        Ok(Self::from_parts_normalized(
            mode_sizes.to_vec(),
            scales,
            factors,
        ))
    }

    /// Internal assembly that restores the invariants: unit-norm columns,
    /// scales ≥ 0 (sign pushed into the first dimension's factor). Terms
    /// whose value is exactly zero keep their slot with scale 0.
    pub(crate) fn from_parts_normalized(
        mode_sizes: Vec<usize>,
        mut scales: Vec<f64>,
        mut factors: Vec<Array2<f64>>,
    ) -> Self {
        let rank = scales.len();
        for l in 0..rank {
            let mut s = scales[l];
            for f in factors.iter_mut() {
                let mut col = f.column_mut(l);
                let n = col.dot(&col).sqrt();
                if n == 0.0 {
                    s = 0.0;
                    col.fill(0.0);
                    col[0] = 1.0;
                } else {
                    col.mapv_inplace(|v| v / n);
                    s *= n;
                }
            }
            if s < 0.0 {
                s = -s;
                factors[0].column_mut(l).mapv_inplace(|v| -v);
            }
            scales[l] = s;
        }
        Self {
            mode_sizes,
            scales,
            factors,
        }
    }

    pub fn dim_count(&self) -> usize {
        self.mode_sizes.len()
    }

    pub fn mode_sizes(&self) -> &[usize] {
        &self.mode_sizes
    }

    pub fn rank(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Factor matrix of one dimension, shape `(M_dim, rank)`.
    pub fn factor(&self, dim: usize) -> &Array2<f64> {
        &self.factors[dim]
    }

    /// Term concatenation; the result rank is exactly `self.rank + rhs.rank`.
    pub fn add(&self, rhs: &Self) -> Result<Self, SepError> {
        check_same_shape("sv_add", &self.mode_sizes, &rhs.mode_sizes)?;
        let mut scales = self.scales.clone();
        scales.extend_from_slice(&rhs.scales);
        let factors = self
            .factors
            .iter()
            .zip(rhs.factors.iter())
            .map(|(a, b)| {
                ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
                    .expect("factor concat")
            })
            .collect();
        Ok(Self {
            mode_sizes: self.mode_sizes.clone(),
            scales,
            factors,
        })
    }

    /// Multiply by a constant. Scaling by exactly 0 collapses to rank 0.
    pub fn scaled(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(&self.mode_sizes);
        }
        let mut out = self.clone();
        for s in out.scales.iter_mut() {
            *s *= c.abs();
        }
        if c < 0.0 {
            out.factors[0].mapv_inplace(|v| -v);
        }
        out
    }

    /// Full-grid Euclidean inner product computed factor-wise:
    /// `⟨a,b⟩ = Σ_{l,m} s_l s_m Π_i ⟨F_i^l, G_i^m⟩`.
    pub fn inner(&self, rhs: &Self) -> Result<f64, SepError> {
        check_same_shape("sv_inner", &self.mode_sizes, &rhs.mode_sizes)?;
        if self.rank() == 0 || rhs.rank() == 0 {
            return Ok(0.0);
        }
        let mut cross = Array2::<f64>::ones((self.rank(), rhs.rank()));
        for (a, b) in self.factors.iter().zip(rhs.factors.iter()) {
            cross = cross * a.t().dot(b);
        }
        let sa = Array1::from_vec(self.scales.clone());
        let sb = Array1::from_vec(rhs.scales.clone());
        Ok(sa.dot(&cross.dot(&sb)))
    }

    /// Euclidean norm; negative round-off under the square root clamps to 0.
    pub fn norm(&self) -> f64 {
        let sq = self.inner(self).expect("self inner product");
        sq.max(0.0).sqrt()
    }

    /// Dense expansion (row-major, dimension 0 slowest). Test oracle.
    pub fn to_dense(&self, cap: usize) -> Result<ArrayD<f64>, SepError> {
        let entries = self
            .mode_sizes
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .unwrap_or(usize::MAX);
        if entries > cap {
            return Err(SepError::DenseCapExceeded { entries, cap });
        }
        let mut out = vec![0.0; entries];
        for l in 0..self.rank() {
            let mut acc = vec![self.scales[l]];
            for f in &self.factors {
                let col = f.column(l);
                let mut next = Vec::with_capacity(acc.len() * col.len());
                for &a in &acc {
                    for &c in col.iter() {
                        next.push(a * c);
                    }
                }
                acc = next;
            }
            for (o, a) in out.iter_mut().zip(acc.iter()) {
                *o += a;
            }
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&self.mode_sizes), out).expect("dense shape"))
    }

    /// Multilinear interpolation of the represented function at `x`.
    /// Exact at grid nodes; periodic dimensions wrap.
    pub fn eval_point(&self, grid: &Grid, x: &[f64]) -> Result<f64, SepError> {
        assert_eq!(x.len(), self.dim_count(), "point dimension");
        check_same_shape("sv_eval_point", &self.mode_sizes, &grid.mode_sizes())?;
        if self.rank() == 0 {
            // still validate the coordinates
            for (i, &xi) in x.iter().enumerate() {
                grid.dim(i).interp_nodes(xi).map_err(|_| {
                    let gd = grid.dim(i);
                    SepError::OutOfDomain {
                        dim: i,
                        coord: xi,
                        lower: gd.lower,
                        upper: gd.upper,
                    }
                })?;
            }
            return Ok(0.0);
        }
        let mut prod = Array1::from_vec(self.scales.clone());
        for (i, &xi) in x.iter().enumerate() {
            let gd = grid.dim(i);
            let (k_lo, k_hi, w_hi) = gd.interp_nodes(xi).map_err(|_| SepError::OutOfDomain {
                dim: i,
                coord: xi,
                lower: gd.lower,
                upper: gd.upper,
            })?;
            let f = &self.factors[i];
            for (l, p) in prod.iter_mut().enumerate() {
                *p *= (1.0 - w_hi) * f[[k_lo, l]] + w_hi * f[[k_hi, l]];
            }
        }
        Ok(prod.sum())
    }

    /// Deterministic random rank-one tensor: unit-norm factors drawn from a
    /// seeded uniform distribution, scale 1.
    pub fn random_rank_one(mode_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_rank_one_with(mode_sizes, &mut rng)
    }

    /// Random rank-one term drawing from a caller-provided RNG.
    pub fn random_rank_one_with<R: Rng>(mode_sizes: &[usize], rng: &mut R) -> Self {
        let dist = Uniform::new(-1.0, 1.0);
        let columns = mode_sizes
            .iter()
            .map(|&m| {
                let c: Array1<f64> = Array1::from_shape_fn(m, |_| dist.sample(rng));
                let n = c.dot(&c).sqrt();
                c / n
            })
            .collect();
        Self::from_rank_one(1.0, columns)
    }
}

/// Rank-`r` separated representation of a linear operator: one `M_i × M_i`
/// matrix per dimension and term. Operator factors are not normalized.
#[derive(Debug, Clone)]
pub struct SepOperator {
    mode_sizes: Vec<usize>,
    scales: Vec<f64>,
    factors: Vec<Vec<Array2<f64>>>,
}

impl SepOperator {
    /// Rank-0 operator: maps everything to the zero tensor.
    pub fn zero(mode_sizes: &[usize]) -> Self {
        Self {
            mode_sizes: mode_sizes.to_vec(),
            scales: Vec::new(),
            factors: vec![Vec::new(); mode_sizes.len()],
        }
    }

    /// Identity operator (rank 1).
    pub fn identity(mode_sizes: &[usize]) -> Self {
        let factors = mode_sizes.iter().map(|&m| vec![Array2::eye(m)]).collect();
        Self {
            mode_sizes: mode_sizes.to_vec(),
            scales: vec![1.0],
            factors,
        }
    }

    /// Assemble from term-major data: `terms[l][i]` is the dimension-`i`
    /// matrix of term `l`.
    pub fn from_terms(
        mode_sizes: &[usize],
        scales: Vec<f64>,
        terms: Vec<Vec<Array2<f64>>>,
    ) -> Result<Self, SepError> {
        let d = mode_sizes.len();
        assert_eq!(scales.len(), terms.len(), "one scale per term");
        let mut factors: Vec<Vec<Array2<f64>>> = vec![Vec::with_capacity(terms.len()); d];
        for term in terms {
            if term.len() != d {
                return Err(SepError::ShapeMismatch {
                    context: "op_from_terms factor count",
                    left: vec![term.len()],
                    right: vec![d],
                });
            }
            for (i, m) in term.into_iter().enumerate() {
                if m.dim() != (mode_sizes[i], mode_sizes[i]) {
                    return Err(SepError::ShapeMismatch {
                        context: "op_from_terms matrix shape",
                        left: vec![m.dim().0, m.dim().1],
                        right: vec![mode_sizes[i], mode_sizes[i]],
                    });
                }
                factors[i].push(m);
            }
        }
        Ok(Self {
            mode_sizes: mode_sizes.to_vec(),
            scales,
            factors,
        })
    }

    pub fn dim_count(&self) -> usize {
        self.mode_sizes.len()
    }

    pub fn mode_sizes(&self) -> &[usize] {
        &self.mode_sizes
    }

    pub fn rank(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Factor matrix of term `l` in dimension `dim`.
    pub fn factor(&self, dim: usize, l: usize) -> &Array2<f64> {
        &self.factors[dim][l]
    }

    /// Matrix-vector product in separated form. The result has rank exactly
    /// `self.rank · f.rank` (no reduction) with factors renormalized.
    pub fn apply(&self, f: &SepVector) -> Result<SepVector, SepError> {
        check_same_shape("op_apply", &self.mode_sizes, f.mode_sizes())?;
        let r_op = self.rank();
        let r_f = f.rank();
        let rank = r_op * r_f;
        let mut scales = Vec::with_capacity(rank);
        for a in 0..r_op {
            for l in 0..r_f {
                scales.push(self.scales[a] * f.scales()[l]);
            }
        }
        let mut factors = Vec::with_capacity(self.dim_count());
        for (i, &m) in self.mode_sizes.iter().enumerate() {
            let mut out = Array2::<f64>::zeros((m, rank));
            for a in 0..r_op {
                let block = self.factors[i][a].dot(f.factor(i));
                out.slice_mut(ndarray::s![.., a * r_f..(a + 1) * r_f])
                    .assign(&block);
            }
            factors.push(out);
        }
        Ok(SepVector::from_parts_normalized(
            self.mode_sizes.clone(),
            scales,
            factors,
        ))
    }

    /// Term concatenation; rank is exactly additive.
    pub fn add(&self, rhs: &Self) -> Result<Self, SepError> {
        check_same_shape("op_add", &self.mode_sizes, &rhs.mode_sizes)?;
        let mut scales = self.scales.clone();
        scales.extend_from_slice(&rhs.scales);
        let factors = self
            .factors
            .iter()
            .zip(rhs.factors.iter())
            .map(|(a, b)| {
                let mut v = a.clone();
                v.extend(b.iter().cloned());
                v
            })
            .collect();
        Ok(Self {
            mode_sizes: self.mode_sizes.clone(),
            scales,
            factors,
        })
    }

    /// Multiply by a constant; scaling by exactly 0 collapses to rank 0.
    pub fn scaled(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(&self.mode_sizes);
        }
        let mut out = self.clone();
        for s in out.scales.iter_mut() {
            *s *= c;
        }
        out
    }

    /// Operator composition `self · rhs`; rank is exactly multiplicative.
    pub fn compose(&self, rhs: &Self) -> Result<Self, SepError> {
        check_same_shape("op_compose", &self.mode_sizes, &rhs.mode_sizes)?;
        let r_a = self.rank();
        let r_b = rhs.rank();
        let mut scales = Vec::with_capacity(r_a * r_b);
        for a in 0..r_a {
            for b in 0..r_b {
                scales.push(self.scales[a] * rhs.scales[b]);
            }
        }
        let mut factors = Vec::with_capacity(self.dim_count());
        for i in 0..self.dim_count() {
            let mut per_dim = Vec::with_capacity(r_a * r_b);
            for a in 0..r_a {
                for b in 0..r_b {
                    per_dim.push(self.factors[i][a].dot(&rhs.factors[i][b]));
                }
            }
            factors.push(per_dim);
        }
        Ok(Self {
            mode_sizes: self.mode_sizes.clone(),
            scales,
            factors,
        })
    }

    /// Dense matrix expansion `Σ_l s_l · A_1^l ⊗ … ⊗ A_d^l`. Test oracle;
    /// the cap applies to the full `(Π M_i)²` entry count.
    pub fn to_dense(&self, cap: usize) -> Result<Array2<f64>, SepError> {
        let n = self
            .mode_sizes
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .unwrap_or(usize::MAX);
        let entries = n.checked_mul(n).unwrap_or(usize::MAX);
        if entries > cap {
            return Err(SepError::DenseCapExceeded { entries, cap });
        }
        let mut out = Array2::<f64>::zeros((n, n));
        for l in 0..self.rank() {
            let mut acc = Array2::from_elem((1, 1), self.scales[l]);
            for i in 0..self.dim_count() {
                acc = kron(&acc, &self.factors[i][l]);
            }
            out += &acc;
        }
        Ok(out)
    }

    /// Reinterpret each `M_i × M_i` factor matrix as a length-`M_i²` vector
    /// (row-major). Used to run vector ALS on operators.
    pub fn to_vector_modes(&self) -> SepVector {
        let vec_sizes: Vec<usize> = self.mode_sizes.iter().map(|&m| m * m).collect();
        let rank = self.rank();
        let mut factors = Vec::with_capacity(self.dim_count());
        for (i, &m) in self.mode_sizes.iter().enumerate() {
            let mut f = Array2::<f64>::zeros((m * m, rank));
            for l in 0..rank {
                let flat = self.factors[i][l]
                    .iter()
                    .cloned()
                    .collect::<Array1<f64>>();
                f.column_mut(l).assign(&flat);
            }
            factors.push(f);
        }
        SepVector::from_parts_normalized(vec_sizes, self.scales.clone(), factors)
    }

    /// Inverse of [`to_vector_modes`]: reshape length-`M_i²` modes back into
    /// square factor matrices.
    pub fn from_vector_modes(v: &SepVector, mode_sizes: &[usize]) -> Result<Self, SepError> {
        let expect: Vec<usize> = mode_sizes.iter().map(|&m| m * m).collect();
        check_same_shape("op_from_vector_modes", v.mode_sizes(), &expect)?;
        let rank = v.rank();
        let mut factors: Vec<Vec<Array2<f64>>> = vec![Vec::with_capacity(rank); mode_sizes.len()];
        for (i, &m) in mode_sizes.iter().enumerate() {
            let f = v.factor(i);
            for l in 0..rank {
                let col = f.column(l).to_owned();
                let mat = col
                    .into_shape_with_order((m, m))
                    .expect("square reshape")
                    .to_owned();
                factors[i].push(mat * v.scales()[l].powf(1.0 / mode_sizes.len() as f64));
            }
        }
        // Distributing the scale across dimensions keeps factor magnitudes
        // comparable; fold the remainder into the stored scale of 1.
        Ok(Self {
            mode_sizes: mode_sizes.to_vec(),
            scales: vec![1.0; rank],
            factors,
        })
    }

    /// Frobenius norm of the represented operator.
    pub fn frobenius_norm(&self) -> f64 {
        self.to_vector_modes().norm()
    }
}
