//! Finite-dimensional model of a real Hilbert space.
//!
//! Vectors live in `R^n`; the inner product is `(u, v) = u^T G v` for a
//! symmetric positive definite Gram matrix `G`. Operator norms, adjoints and
//! singular values are all taken with respect to these metrics, so an
//! operator `A: (R^n, G_dom) -> (R^m, G_cod)` is handled through its
//! metric-weighted matrix `L_cod^T A L_dom^{-T}` where `G = L L^T`.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};

use crate::error::{DsmError, Result};

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of dense factorizations performed on the current thread.
///
/// Used by tests to assert that a code path performs no linear solves.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(|c| c.get())
}

fn bump_factorizations() {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
}

/// An element of the discretized space.
#[derive(Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        Self::from_dvector(DVector::from_vec(entries))
    }

    pub fn from_dvector(v: DVector<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(DsmError::InvalidArgument("state vector must have dimension >= 1".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DsmError::NonFinite("state vector".into()));
        }
        Ok(StateVector(v))
    }

    pub fn zeros(n: usize) -> Self {
        StateVector(DVector::zeros(n.max(1)))
    }

    pub fn constant(n: usize, value: f64) -> Self {
        StateVector(DVector::from_element(n.max(1), value))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_dvector(self) -> DVector<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn checked_sub(&self, other: &StateVector) -> Result<StateVector> {
        check_dim(self.dim(), other.dim())?;
        StateVector::from_dvector(&self.0 - &other.0)
    }

    pub fn checked_add(&self, other: &StateVector) -> Result<StateVector> {
        check_dim(self.dim(), other.dim())?;
        StateVector::from_dvector(&self.0 + &other.0)
    }

    pub fn scaled(&self, factor: f64) -> Result<StateVector> {
        StateVector::from_dvector(&self.0 * factor)
    }
}

impl fmt::Debug for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DsmError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Which inner product a [`GramMetric`] realizes.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    /// Standard dot product.
    Identity,
    /// `sum_i w_i u_i v_i`.
    Diagonal(Vec<f64>),
    /// `diag(mass) + stiffness * K`, with `K` the first-difference stiffness
    /// matrix (tridiagonal `[-1, 2, -1]` with `1` in the corners).
    TridiagonalH1 { mass: Vec<f64>, stiffness: f64 },
}

#[derive(Debug)]
struct MetricData {
    kind: MetricKind,
    dim: usize,
    // Materialized only for the tridiagonal kind.
    gram: Option<DMatrix<f64>>,
    chol: Option<Cholesky<f64, Dyn>>,
}

/// Inner product on `R^n` given by an SPD Gram matrix.
///
/// Cheap to clone; the factorized Gram matrix is shared.
#[derive(Debug, Clone)]
pub struct GramMetric(Arc<MetricData>);

impl PartialEq for GramMetric {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0.kind == other.0.kind && self.0.dim == other.0.dim
    }
}

impl GramMetric {
    pub fn identity(n: usize) -> Self {
        GramMetric(Arc::new(MetricData {
            kind: MetricKind::Identity,
            dim: n,
            gram: None,
            chol: None,
        }))
    }

    pub fn diagonal(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(DsmError::InvalidArgument("empty weight vector".into()));
        }
        if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(DsmError::NotPositiveDefinite(w));
        }
        let dim = weights.len();
        Ok(GramMetric(Arc::new(MetricData {
            kind: MetricKind::Diagonal(weights),
            dim,
            gram: None,
            chol: None,
        })))
    }

    /// Discrete H^1 metric on `n` uniform nodes with spacing `step`:
    /// identity plus the first-difference stiffness scaled by `1/step^2`.
    pub fn h1(n: usize, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("H1 step must be positive, got {step}")));
        }
        Self::tridiagonal_h1(vec![1.0; n], 1.0 / (step * step))
    }

    pub fn tridiagonal_h1(mass: Vec<f64>, stiffness: f64) -> Result<Self> {
        let n = mass.len();
        if n == 0 {
            return Err(DsmError::InvalidArgument("empty mass vector".into()));
        }
        if mass.iter().chain(std::iter::once(&stiffness)).any(|v| !v.is_finite()) || stiffness < 0.0 {
            return Err(DsmError::InvalidArgument("H1 metric data must be finite, stiffness >= 0".into()));
        }
        let mut g = DMatrix::from_diagonal(&DVector::from_vec(mass.clone()));
        for i in 0..n.saturating_sub(1) {
            g[(i, i)] += stiffness;
            g[(i + 1, i + 1)] += stiffness;
            g[(i, i + 1)] -= stiffness;
            g[(i + 1, i)] -= stiffness;
        }
        let min_eig = SymmetricEigen::new(g.clone()).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(DsmError::NotPositiveDefinite(min_eig));
        }
        let chol = Cholesky::new(g.clone()).ok_or(DsmError::NotPositiveDefinite(min_eig))?;
        Ok(GramMetric(Arc::new(MetricData {
            kind: MetricKind::TridiagonalH1 { mass, stiffness },
            dim: n,
            gram: Some(g),
            chol: Some(chol),
        })))
    }

    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn kind(&self) -> &MetricKind {
        &self.0.kind
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.0.kind, MetricKind::Identity)
    }

    pub fn gram_matrix(&self) -> DMatrix<f64> {
        match &self.0.kind {
            MetricKind::Identity => DMatrix::identity(self.0.dim, self.0.dim),
            MetricKind::Diagonal(w) => DMatrix::from_diagonal(&DVector::from_column_slice(w)),
            MetricKind::TridiagonalH1 { .. } => self.0.gram.clone().expect("materialized gram"),
        }
    }

    pub(crate) fn inner_raw(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match &self.0.kind {
            MetricKind::Identity => u.dot(v),
            MetricKind::Diagonal(w) => w.iter().zip(u.iter().zip(v.iter())).map(|(w, (a, b))| w * a * b).sum(),
            MetricKind::TridiagonalH1 { .. } => {
                let g = self.0.gram.as_ref().expect("materialized gram");
                u.dot(&(g * v))
            }
        }
    }

    pub(crate) fn norm_raw(&self, u: &DVector<f64>) -> f64 {
        match &self.0.kind {
            MetricKind::Identity => u.norm(),
            _ => self.inner_raw(u, u).max(0.0).sqrt(),
        }
    }

    pub fn norm(&self, u: &StateVector) -> Result<f64> {
        check_dim(self.dim(), u.dim())?;
        Ok(self.norm_raw(&u.0))
    }

    /// `L^T h`, which maps the metric norm onto the Euclidean norm.
    pub(crate) fn to_euclidean(&self, h: &DVector<f64>) -> DVector<f64> {
        match &self.0.kind {
            MetricKind::Identity => h.clone(),
            MetricKind::Diagonal(w) => DVector::from_iterator(h.len(), h.iter().zip(w).map(|(x, w)| x * w.sqrt())),
            MetricKind::TridiagonalH1 { .. } => self.chol().l().transpose() * h,
        }
    }

    /// `L^{-T} k`, inverse of [`Self::to_euclidean`].
    pub(crate) fn euclidean_to_native(&self, k: &DVector<f64>) -> DVector<f64> {
        match &self.0.kind {
            MetricKind::Identity => k.clone(),
            MetricKind::Diagonal(w) => DVector::from_iterator(k.len(), k.iter().zip(w).map(|(x, w)| x / w.sqrt())),
            MetricKind::TridiagonalH1 { .. } => self
                .chol()
                .l()
                .tr_solve_lower_triangular(k)
                .expect("Cholesky factor is nonsingular"),
        }
    }

    /// `L^T M` applied column by column.
    fn left_lt(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.0.kind {
            MetricKind::Identity => m.clone(),
            MetricKind::Diagonal(w) => {
                let mut out = m.clone();
                for (i, w) in w.iter().enumerate() {
                    out.row_mut(i).scale_mut(w.sqrt());
                }
                out
            }
            MetricKind::TridiagonalH1 { .. } => self.chol().l().transpose() * m,
        }
    }

    /// `M L^{-T}`.
    fn right_inv_lt(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.0.kind {
            MetricKind::Identity => m.clone(),
            MetricKind::Diagonal(w) => {
                let mut out = m.clone();
                for (j, w) in w.iter().enumerate() {
                    out.column_mut(j).unscale_mut(w.sqrt());
                }
                out
            }
            MetricKind::TridiagonalH1 { .. } => {
                // M L^{-T} = (L^{-1} M^T)^T
                let y = self
                    .chol()
                    .l()
                    .solve_lower_triangular(&m.transpose())
                    .expect("Cholesky factor is nonsingular");
                y.transpose()
            }
        }
    }

    /// `G^{-1} M`.
    fn gram_solve(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.0.kind {
            MetricKind::Identity => Ok(m.clone()),
            MetricKind::Diagonal(w) => {
                let mut out = m.clone();
                for (i, w) in w.iter().enumerate() {
                    if !(*w > 0.0) {
                        return Err(DsmError::NotPositiveDefinite(*w));
                    }
                    out.row_mut(i).unscale_mut(*w);
                }
                Ok(out)
            }
            MetricKind::TridiagonalH1 { .. } => Ok(self.chol().solve(m)),
        }
    }

    /// `G M`.
    fn gram_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.0.kind {
            MetricKind::Identity => m.clone(),
            MetricKind::Diagonal(w) => {
                let mut out = m.clone();
                for (i, w) in w.iter().enumerate() {
                    out.row_mut(i).scale_mut(*w);
                }
                out
            }
            MetricKind::TridiagonalH1 { .. } => self.0.gram.as_ref().expect("materialized gram") * m,
        }
    }

    fn chol(&self) -> &Cholesky<f64, Dyn> {
        self.0.chol.as_ref().expect("Cholesky factor present for tridiagonal metric")
    }
}

/// Inner product `(u, v)` in metric `m`.
pub fn inner_product(u: &StateVector, v: &StateVector, m: &GramMetric) -> Result<f64> {
    check_dim(m.dim(), u.dim())?;
    check_dim(m.dim(), v.dim())?;
    Ok(m.inner_raw(&u.0, &v.0))
}

/// Dense linear map between two metric spaces.
#[derive(Debug, Clone)]
pub struct LinearMap {
    matrix: DMatrix<f64>,
    domain: GramMetric,
    codomain: GramMetric,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>, domain: GramMetric, codomain: GramMetric) -> Result<Self> {
        check_dim(domain.dim(), matrix.ncols())?;
        check_dim(codomain.dim(), matrix.nrows())?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite("linear map".into()));
        }
        Ok(LinearMap { matrix, domain, codomain })
    }

    /// Map with identity metrics on both sides.
    pub fn euclidean(matrix: DMatrix<f64>) -> Result<Self> {
        let (r, c) = matrix.shape();
        Self::new(matrix, GramMetric::identity(c), GramMetric::identity(r))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
            return Err(DsmError::InvalidArgument("matrix rows must be nonempty and of equal length".into()));
        }
        Self::euclidean(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn identity(metric: &GramMetric) -> Self {
        let n = metric.dim();
        LinearMap {
            matrix: DMatrix::identity(n, n),
            domain: metric.clone(),
            codomain: metric.clone(),
        }
    }

    pub fn zeros(domain: &GramMetric, codomain: &GramMetric) -> Self {
        LinearMap {
            matrix: DMatrix::zeros(codomain.dim(), domain.dim()),
            domain: domain.clone(),
            codomain: codomain.clone(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn domain(&self) -> &GramMetric {
        &self.domain
    }

    pub fn codomain(&self) -> &GramMetric {
        &self.codomain
    }

    pub fn is_square(&self) -> bool {
        self.matrix.is_square()
    }

    pub fn apply(&self, h: &StateVector) -> Result<StateVector> {
        check_dim(self.matrix.ncols(), h.dim())?;
        StateVector::from_dvector(&self.matrix * &h.0)
    }

    pub(crate) fn apply_raw(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.matrix * h
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &LinearMap) -> Result<LinearMap> {
        check_dim(self.matrix.ncols(), inner.matrix.nrows())?;
        LinearMap::new(&self.matrix * &inner.matrix, inner.domain.clone(), self.codomain.clone())
    }

    pub fn checked_sub(&self, other: &LinearMap) -> Result<LinearMap> {
        check_dim(self.matrix.nrows(), other.matrix.nrows())?;
        check_dim(self.matrix.ncols(), other.matrix.ncols())?;
        LinearMap::new(&self.matrix - &other.matrix, self.domain.clone(), self.codomain.clone())
    }

    pub fn checked_add(&self, other: &LinearMap) -> Result<LinearMap> {
        check_dim(self.matrix.nrows(), other.matrix.nrows())?;
        check_dim(self.matrix.ncols(), other.matrix.ncols())?;
        LinearMap::new(&self.matrix + &other.matrix, self.domain.clone(), self.codomain.clone())
    }

    pub fn scaled(&self, factor: f64) -> Result<LinearMap> {
        LinearMap::new(&self.matrix * factor, self.domain.clone(), self.codomain.clone())
    }

    /// `self - I`; requires a square map.
    pub fn minus_identity(&self) -> Result<LinearMap> {
        self.require_square()?;
        let n = self.matrix.nrows();
        LinearMap::new(&self.matrix - DMatrix::identity(n, n), self.domain.clone(), self.codomain.clone())
    }

    fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(DsmError::NotSquare {
                rows: self.matrix.nrows(),
                cols: self.matrix.ncols(),
            });
        }
        Ok(())
    }

    /// Matrix of the map in orthonormal coordinates: `L_cod^T A L_dom^{-T}`.
    pub fn weighted_matrix(&self) -> DMatrix<f64> {
        self.domain.right_inv_lt(&self.codomain.left_lt(&self.matrix))
    }

    /// Adjoint with respect to the domain and codomain inner products:
    /// `G_dom^{-1} A^T G_cod`.
    pub fn adjoint(&self) -> Result<LinearMap> {
        let at_g = self.codomain.gram_mul(&self.matrix).transpose();
        let m = self.domain.gram_solve(&at_g)?;
        LinearMap::new(m, self.codomain.clone(), self.domain.clone())
    }

    /// Metric-induced operator norm `sup ||Ah||_cod / ||h||_dom`.
    pub fn operator_norm(&self) -> f64 {
        let w = self.weighted_matrix();
        if w.ncols() == 1 || w.nrows() == 1 {
            return w.norm();
        }
        w.singular_values().max()
    }

    /// Smallest singular value in the metric-induced norm (0 for singular maps).
    pub fn smallest_singular_value(&self) -> Result<f64> {
        self.require_square()?;
        let w = self.weighted_matrix();
        if w.nrows() == 1 {
            return Ok(w[(0, 0)].abs());
        }
        Ok(w.singular_values().min().max(0.0))
    }

    /// Smallest eigenvalue of the symmetric part of the map, i.e. the
    /// infimum of `(Ah, h) / ||h||^2` over the domain metric.
    pub fn min_symmetric_eigenvalue(&self) -> Result<f64> {
        self.require_square()?;
        check_dim(self.domain.dim(), self.codomain.dim())?;
        // With equal metrics the weighted matrix is L^T A L^{-T}, whose
        // Euclidean Rayleigh quotient equals (Ah, h)_G / (h, h)_G.
        let w = self.domain.right_inv_lt(&self.domain.left_lt(&self.matrix));
        let sym = (&w + w.transpose()) * 0.5;
        Ok(SymmetricEigen::new(sym).eigenvalues.min())
    }

    /// Factorizes `A + eps I` for repeated solves.
    pub fn factor_shifted(&self, eps: f64) -> Result<ShiftedFactorization> {
        self.require_square()?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("shift must be finite and >= 0, got {eps}")));
        }
        let n = self.matrix.nrows();
        let shifted = &self.matrix + DMatrix::identity(n, n) * eps;
        let scale = shifted.norm();
        bump_factorizations();
        let lu = shifted.clone().lu();
        let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
        if !(min_pivot > 1e-14 * scale) || scale == 0.0 {
            return Err(DsmError::SingularOperator {
                scheme: "linear solve".into(),
            });
        }
        Ok(ShiftedFactorization { lu, shift: eps })
    }

    /// Solves `(A + eps I) y = rhs` by dense LU with partial pivoting.
    pub fn solve_shifted(&self, eps: f64, rhs: &StateVector) -> Result<StateVector> {
        check_dim(self.matrix.nrows(), rhs.dim())?;
        self.factor_shifted(eps)?.solve(rhs)
    }

    /// Minimum-norm least-squares solution of `A v = rhs` in the domain
    /// metric, via the SVD of the weighted matrix. Singular values below
    /// `1e-12 * sigma_max` are treated as zero.
    ///
    /// Returns the solution and the relative residual `||Av - rhs|| / ||rhs||`.
    pub fn min_norm_solve(&self, rhs: &StateVector) -> Result<(StateVector, f64)> {
        check_dim(self.matrix.nrows(), rhs.dim())?;
        let w = self.weighted_matrix();
        let b = self.codomain.to_euclidean(&rhs.0);
        let ncols = w.ncols();
        let svd = w.svd(true, true);
        let smax = svd.singular_values.max();
        let k = if smax > 0.0 {
            svd.solve(&b, 1e-12 * smax)
                .map_err(|e| DsmError::InvalidArgument(format!("pseudo-inverse: {e}")))?
        } else {
            DVector::zeros(ncols)
        };
        let v = self.domain.euclidean_to_native(&k);
        let resid = self.codomain.norm_raw(&(&self.matrix * &v - &rhs.0));
        let bn = self.codomain.norm_raw(&rhs.0);
        let rel = if bn > 0.0 { resid / bn } else { resid };
        Ok((StateVector::from_dvector(v)?, rel))
    }
}

/// LU factorization of `A + eps I`.
pub struct ShiftedFactorization {
    lu: LU<f64, Dyn, Dyn>,
    shift: f64,
}

impl ShiftedFactorization {
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn solve(&self, rhs: &StateVector) -> Result<StateVector> {
        let y = self.solve_raw(&rhs.0)?;
        StateVector::from_dvector(y)
    }

    pub(crate) fn solve_raw(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(rhs).ok_or(DsmError::SingularOperator {
            scheme: "linear solve".into(),
        })
    }

    pub(crate) fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu.solve(rhs).ok_or(DsmError::SingularOperator {
            scheme: "linear solve".into(),
        })
    }
}

impl fmt::Debug for ShiftedFactorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShiftedFactorization").field("shift", &self.shift).finish()
    }
}

pub fn adjoint(a: &LinearMap) -> Result<LinearMap> {
    a.adjoint()
}

pub fn solve_shifted(a: &LinearMap, eps: f64, rhs: &StateVector) -> Result<StateVector> {
    a.solve_shifted(eps, rhs)
}

pub fn smallest_singular_value(a: &LinearMap) -> Result<f64> {
    a.smallest_singular_value()
}
