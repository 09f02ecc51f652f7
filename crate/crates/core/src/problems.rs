//! Concrete operator equations `F(x) = 0`.
//!
//! A [`Problem`] wraps a [`Model`] `psi` and an optional data vector `y`, so
//! that `F(x) = psi(x) - y`. Keeping the data term separate is what lets
//! [`perturb_data`] replace `y` by noisy data and [`symmetrize`] pull the
//! adjoint through both terms.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::hilbert::{GramMetric, LinearMap, StateVector};

/// Analytic constants a model can vouch for on a given ball.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsHint {
    /// Bound on `||F'(x)||` over the ball.
    pub jacobian_bound: Option<f64>,
    /// Lipschitz constant of `F'` over the ball.
    pub lipschitz: Option<f64>,
    /// Constant in `||G(x0, x) - I|| <= C ||x - x0||`.
    pub structural: Option<f64>,
    pub ball: String,
}

/// The nonlinear part `psi` of `F(x) = psi(x) - y`.
pub trait Model: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Closed-form `G(x0, x)` with `F'(x) = F'(x0) G(x0, x)`, when known.
    fn structural_factor(&self, _anchor: &DVector<f64>, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn analytic_constants(&self, _anchor: &DVector<f64>, _center: &DVector<f64>, _radius: f64) -> Option<ConstantsHint> {
        None
    }

    /// `min_s |g_u(s, x0(s))|` for integral equations.
    fn kappa_min(&self, _anchor: &DVector<f64>) -> Option<f64> {
        None
    }
}

/// An operator equation with its Jacobian, metrics and optional solution.
#[derive(Debug, Clone)]
pub struct Problem {
    name: String,
    model: Arc<dyn Model>,
    data: Option<DVector<f64>>,
    domain: GramMetric,
    codomain: GramMetric,
    known_solution: Option<StateVector>,
    noise_free_solution: Option<StateVector>,
    symmetrized: bool,
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn Model>,
        data: Option<DVector<f64>>,
        domain: GramMetric,
        codomain: GramMetric,
    ) -> Result<Self> {
        if domain.dim() != model.input_dim() {
            return Err(DsmError::DimensionMismatch {
                expected: model.input_dim(),
                got: domain.dim(),
            });
        }
        if codomain.dim() != model.output_dim() {
            return Err(DsmError::DimensionMismatch {
                expected: model.output_dim(),
                got: codomain.dim(),
            });
        }
        if let Some(y) = &data {
            if y.len() != model.output_dim() {
                return Err(DsmError::DimensionMismatch {
                    expected: model.output_dim(),
                    got: y.len(),
                });
            }
        }
        Ok(Problem {
            name: name.into(),
            model,
            data,
            domain,
            codomain,
            known_solution: None,
            noise_free_solution: None,
            symmetrized: false,
        })
    }

    pub fn with_known_solution(mut self, x: StateVector) -> Result<Self> {
        if x.dim() != self.dim() {
            return Err(DsmError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        self.known_solution = Some(x);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    pub fn is_square(&self) -> bool {
        self.model.input_dim() == self.model.output_dim()
    }

    pub fn domain_metric(&self) -> &GramMetric {
        &self.domain
    }

    pub fn codomain_metric(&self) -> &GramMetric {
        &self.codomain
    }

    pub fn data(&self) -> Option<&DVector<f64>> {
        self.data.as_ref()
    }

    pub fn known_solution(&self) -> Option<&StateVector> {
        self.known_solution.as_ref()
    }

    /// Solution used for error curves: the exact solution when the problem
    /// has one, otherwise the solution of the noise-free equation.
    pub fn error_reference(&self) -> Option<&StateVector> {
        self.known_solution.as_ref().or(self.noise_free_solution.as_ref())
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    pub(crate) fn residual_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut f = self.model.eval(x);
        if let Some(y) = &self.data {
            f -= y;
        }
        f
    }

    pub(crate) fn jacobian_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.model.jacobian(x)
    }

    pub fn residual(&self, x: &StateVector) -> Result<StateVector> {
        self.check_input(x)?;
        StateVector::from_dvector(self.residual_raw(x.as_dvector()))
            .map_err(|_| DsmError::NonFinite(format!("residual of {}", self.name)))
    }

    pub fn residual_norm(&self, x: &StateVector) -> Result<f64> {
        let f = self.residual(x)?;
        Ok(self.codomain.norm_raw(f.as_dvector()))
    }

    pub fn jacobian(&self, x: &StateVector) -> Result<LinearMap> {
        self.check_input(x)?;
        LinearMap::new(self.jacobian_raw(x.as_dvector()), self.domain.clone(), self.codomain.clone())
            .map_err(|e| match e {
                DsmError::NonFinite(_) => DsmError::NonFinite(format!("Jacobian of {}", self.name)),
                other => other,
            })
    }

    pub fn structural_factor(&self, anchor: &StateVector, x: &StateVector) -> Option<LinearMap> {
        let g = self.model.structural_factor(anchor.as_dvector(), x.as_dvector())?;
        LinearMap::new(g, self.domain.clone(), self.domain.clone()).ok()
    }

    pub fn constants_hint(&self, anchor: &StateVector, center: &StateVector, radius: f64) -> Option<ConstantsHint> {
        self.model
            .analytic_constants(anchor.as_dvector(), center.as_dvector(), radius)
    }

    pub fn kappa_min(&self, anchor: &StateVector) -> Option<f64> {
        self.model.kappa_min(anchor.as_dvector())
    }

    fn check_input(&self, x: &StateVector) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(DsmError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug)]
struct LinearModel {
    map: LinearMap,
    norm: f64,
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.map.matrix().ncols()
    }
    fn output_dim(&self) -> usize {
        self.map.matrix().nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.map.apply_raw(x)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.map.matrix().clone()
    }
    fn structural_factor(&self, anchor: &DVector<f64>, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(anchor.len(), anchor.len()))
    }
    fn analytic_constants(&self, _anchor: &DVector<f64>, _center: &DVector<f64>, _radius: f64) -> Option<ConstantsHint> {
        Some(ConstantsHint {
            jacobian_bound: Some(self.norm),
            lipschitz: Some(0.0),
            structural: Some(0.0),
            ball: "global".into(),
        })
    }
}

/// `F(x) = A (x - x_hat)` with known solution `x_hat = shift`.
pub fn make_linear_problem(matrix: LinearMap, shift: StateVector) -> Result<Problem> {
    if !matrix.is_square() {
        return Err(DsmError::NotSquare {
            rows: matrix.matrix().nrows(),
            cols: matrix.matrix().ncols(),
        });
    }
    matrix
        .factor_shifted(0.0)
        .map_err(|e| e.in_scheme("make_linear_problem"))?;
    let data = matrix.apply(&shift)?.into_dvector();
    let norm = matrix.operator_norm();
    let (dom, cod) = (matrix.domain().clone(), matrix.codomain().clone());
    let model = LinearModel { map: matrix, norm };
    Problem::new("linear", Arc::new(model), Some(data), dom, cod)?.with_known_solution(shift)
}

#[derive(Debug)]
struct PolynomialModel {
    beta: f64,
    dim: usize,
}

impl Model for PolynomialModel {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| v + self.beta * v * v)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&x.map(|v| 1.0 + 2.0 * self.beta * v))
    }
    fn structural_factor(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d0 = anchor.map(|v| 1.0 + 2.0 * self.beta * v);
        if d0.iter().any(|v| v.abs() < 1e-300) {
            return None;
        }
        let g = x.zip_map(&d0, |v, d| (1.0 + 2.0 * self.beta * v) / d);
        Some(DMatrix::from_diagonal(&g))
    }
    fn analytic_constants(&self, anchor: &DVector<f64>, center: &DVector<f64>, radius: f64) -> Option<ConstantsHint> {
        let reach = center.amax() + radius;
        let min_d0 = anchor.iter().map(|v| 1.0 + 2.0 * self.beta * v).fold(f64::INFINITY, f64::min);
        let structural = (min_d0 > 0.0).then(|| 2.0 * self.beta / min_d0);
        Some(ConstantsHint {
            jacobian_bound: Some(1.0 + 2.0 * self.beta * reach),
            lipschitz: Some(2.0 * self.beta),
            structural,
            ball: format!("radius {radius:e}"),
        })
    }
}

/// Componentwise `F(x) = x + beta x^2` on `R^dim`, solution `x_hat = 0`.
///
/// The Jacobian factors as `F'(x) = F'(x0) G` with
/// `G = diag((1 + 2 beta x) / (1 + 2 beta x0))`, so the structural constant
/// is `2 beta / min(1 + 2 beta x0)` wherever that minimum is positive.
pub fn make_polynomial_problem(beta: f64, dim: usize) -> Result<Problem> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(DsmError::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    if dim == 0 {
        return Err(DsmError::InvalidArgument("dimension must be >= 1".into()));
    }
    let metric = GramMetric::identity(dim);
    Problem::new(
        "polynomial",
        Arc::new(PolynomialModel { beta, dim }),
        Some(DVector::zeros(dim)),
        metric.clone(),
        metric,
    )?
    .with_known_solution(StateVector::zeros(dim))
}

pub type ScalarFn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Named kernels `k(t, s)` on `[0, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(t s)`
    ExpTs,
    /// `1`
    Unit,
    /// `0`
    Zero,
    /// `exp(-(t - s)^2 / (2 w^2))`
    Gaussian { width: f64 },
}

impl Kernel {
    pub fn function(self) -> ScalarFn2 {
        match self {
            Kernel::ExpTs => Arc::new(|t, s| (t * s).exp()),
            Kernel::Unit => Arc::new(|_, _| 1.0),
            Kernel::Zero => Arc::new(|_, _| 0.0),
            Kernel::Gaussian { width } => Arc::new(move |t, s| (-(t - s).powi(2) / (2.0 * width * width)).exp()),
        }
    }
}

/// Named nonlinearities `g(s, u)` with their `u`-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `u`
    Identity,
    /// `u + u^3 / 3`
    Cubic,
    /// `exp(u)`
    Exp,
}

impl Nonlinearity {
    pub fn functions(self) -> (ScalarFn2, ScalarFn2) {
        match self {
            Nonlinearity::Identity => (Arc::new(|_, u| u), Arc::new(|_, _| 1.0)),
            Nonlinearity::Cubic => (Arc::new(|_, u| u + u * u * u / 3.0), Arc::new(|_, u| 1.0 + u * u)),
            Nonlinearity::Exp => (Arc::new(|_, u: f64| u.exp()), Arc::new(|_, u: f64| u.exp())),
        }
    }
}

/// Metric used on either side of a discretized integral operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    #[default]
    Identity,
    /// Trapezoid weights, approximating the L^2(0,1) norm.
    L2,
    /// Discrete H^1: identity plus first-difference stiffness over `h^2`.
    H1,
}

impl MetricChoice {
    pub fn build(self, n: usize) -> Result<GramMetric> {
        match self {
            MetricChoice::Identity => Ok(GramMetric::identity(n)),
            MetricChoice::L2 => GramMetric::diagonal(trapezoid_weights(n)),
            MetricChoice::H1 => GramMetric::h1(n, 1.0 / (n as f64 - 1.0)),
        }
    }
}

/// Uniform nodes `s_i = i / (n - 1)` on `[0, 1]`.
pub fn uniform_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n as f64 - 1.0)).collect()
}

/// Composite trapezoid weights on [`uniform_nodes`]; they sum to one.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n as f64 - 1.0);
    (0..n)
        .map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h })
        .collect()
}

/// Discretization data for `psi(x)(t) = ∫_0^1 k(t, s) g(s, x(s)) ds`.
#[derive(Clone)]
pub struct IntegralEquationSpec {
    pub kernel: ScalarFn2,
    pub g: ScalarFn2,
    pub g_u: ScalarFn2,
    /// Right-hand side `y` at the nodes.
    pub data: Vec<f64>,
    pub nodes: usize,
    pub domain_metric: MetricChoice,
    pub codomain_metric: MetricChoice,
    /// Exact solution at the nodes, when manufactured.
    pub solution: Option<Vec<f64>>,
}

impl fmt::Debug for IntegralEquationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegralEquationSpec")
            .field("nodes", &self.nodes)
            .field("domain_metric", &self.domain_metric)
            .field("codomain_metric", &self.codomain_metric)
            .finish_non_exhaustive()
    }
}

impl IntegralEquationSpec {
    /// Manufactured instance: `y = psi(x_hat)` with `x_hat(s) = solution(s)`,
    /// so that `F(x_hat) = 0` holds exactly in the discretization.
    pub fn manufactured(
        kernel: ScalarFn2,
        g: ScalarFn2,
        g_u: ScalarFn2,
        nodes: usize,
        solution: impl Fn(f64) -> f64,
    ) -> Self {
        let s = uniform_nodes(nodes.max(2));
        let x_hat: Vec<f64> = s.iter().map(|&si| solution(si)).collect();
        let mut spec = IntegralEquationSpec {
            kernel,
            g,
            g_u,
            data: vec![0.0; nodes],
            nodes,
            domain_metric: MetricChoice::Identity,
            codomain_metric: MetricChoice::Identity,
            solution: Some(x_hat.clone()),
        };
        if nodes >= 2 {
            let q = quadrature_matrix(&spec.kernel, nodes);
            let gv = DVector::from_iterator(nodes, s.iter().zip(&x_hat).map(|(&si, &xi)| (spec.g)(si, xi)));
            spec.data = (q * gv).iter().copied().collect();
        }
        spec
    }
}

fn quadrature_matrix(kernel: &ScalarFn2, n: usize) -> DMatrix<f64> {
    let nodes = uniform_nodes(n);
    let w = trapezoid_weights(n);
    DMatrix::from_fn(n, n, |i, j| kernel(nodes[i], nodes[j]) * w[j])
}

struct IntegralModel {
    nodes: Vec<f64>,
    quad: DMatrix<f64>,
    g: ScalarFn2,
    g_u: ScalarFn2,
}

impl fmt::Debug for IntegralModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegralModel").field("nodes", &self.nodes.len()).finish()
    }
}

impl IntegralModel {
    fn g_u_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len(), self.nodes.iter().zip(x.iter()).map(|(&s, &u)| (self.g_u)(s, u)))
    }
}

impl Model for IntegralModel {
    fn input_dim(&self) -> usize {
        self.nodes.len()
    }
    fn output_dim(&self) -> usize {
        self.nodes.len()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let gv = DVector::from_iterator(x.len(), self.nodes.iter().zip(x.iter()).map(|(&s, &u)| (self.g)(s, u)));
        &self.quad * gv
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.g_u_vec(x);
        let mut j = self.quad.clone();
        for (col, dj) in d.iter().enumerate() {
            j.column_mut(col).scale_mut(*dj);
        }
        j
    }
    fn structural_factor(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let d0 = self.g_u_vec(anchor);
        if d0.iter().any(|v| v.abs() < 1e-300) {
            return None;
        }
        let d = self.g_u_vec(x);
        Some(DMatrix::from_diagonal(&d.component_div(&d0)))
    }
    fn kappa_min(&self, anchor: &DVector<f64>) -> Option<f64> {
        Some(self.g_u_vec(anchor).iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

/// Discretizes `F(x) = psi(x) - y` by the trapezoid rule on uniform nodes.
pub fn build_integral_problem(spec: &IntegralEquationSpec) -> Result<Problem> {
    let n = spec.nodes;
    if n < 3 {
        return Err(DsmError::InvalidArgument(format!("integral problem needs >= 3 nodes, got {n}")));
    }
    if spec.data.len() != n {
        return Err(DsmError::DimensionMismatch {
            expected: n,
            got: spec.data.len(),
        });
    }
    let nodes = uniform_nodes(n);
    let quad = quadrature_matrix(&spec.kernel, n);
    if quad.iter().any(|v| !v.is_finite()) {
        return Err(DsmError::NonFinite("kernel sample".into()));
    }
    for &s in &nodes {
        for k in -8..=8 {
            let u = k as f64 * 0.5;
            if !(spec.g)(s, u).is_finite() || !(spec.g_u)(s, u).is_finite() {
                return Err(DsmError::NonFinite(format!("nonlinearity sample at (s={s}, u={u})")));
            }
        }
    }
    if spec.data.iter().any(|v| !v.is_finite()) {
        return Err(DsmError::NonFinite("integral equation data".into()));
    }
    let model = IntegralModel {
        nodes,
        quad,
        g: spec.g.clone(),
        g_u: spec.g_u.clone(),
    };
    let problem = Problem::new(
        "integral",
        Arc::new(model),
        Some(DVector::from_column_slice(&spec.data)),
        spec.domain_metric.build(n)?,
        spec.codomain_metric.build(n)?,
    )?;
    match &spec.solution {
        Some(sol) => problem.with_known_solution(StateVector::new(sol.clone())?),
        None => Ok(problem),
    }
}

#[derive(Debug)]
struct SymmetrizedModel {
    inner: Arc<dyn Model>,
    adjoint: DMatrix<f64>,
    adjoint_norm: f64,
}

impl Model for SymmetrizedModel {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.adjoint.nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.adjoint * self.inner.eval(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.adjoint * self.inner.jacobian(x)
    }
    fn structural_factor(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.structural_factor(anchor, x)
    }
    fn analytic_constants(&self, anchor: &DVector<f64>, center: &DVector<f64>, radius: f64) -> Option<ConstantsHint> {
        let h = self.inner.analytic_constants(anchor, center, radius)?;
        Some(ConstantsHint {
            jacobian_bound: h.jacobian_bound.map(|v| v * self.adjoint_norm),
            lipschitz: h.lipschitz.map(|v| v * self.adjoint_norm),
            structural: h.structural,
            ball: h.ball,
        })
    }
    fn kappa_min(&self, anchor: &DVector<f64>) -> Option<f64> {
        self.inner.kappa_min(anchor)
    }
}

/// The auxiliary problem `phi(x) = F'*(x0) F(x)`, whose Jacobian at `x0` is
/// non-negative. Every solution of `F(x) = 0` solves `phi(x) = 0`.
pub fn symmetrize(p: &Problem, x0: &StateVector) -> Result<Problem> {
    let a0 = p.jacobian(x0)?;
    let adj = a0.adjoint()?;
    let adjoint_norm = adj.operator_norm();
    let adjoint = adj.matrix().clone();
    let data = p.data.as_ref().map(|y| &adjoint * y);
    let model = SymmetrizedModel {
        inner: p.model.clone(),
        adjoint,
        adjoint_norm,
    };
    Ok(Problem {
        name: format!("symmetrized({})", p.name),
        model: Arc::new(model),
        data,
        domain: p.domain.clone(),
        codomain: p.domain.clone(),
        known_solution: p.known_solution.clone(),
        noise_free_solution: p.noise_free_solution.clone(),
        symmetrized: true,
    })
}

/// Smallest eigenvalue of the symmetric part of `F'(x0)`; non-negative iff
/// `(F'(x0) h, h) >= 0` for all `h`.
pub fn nonnegativity_margin(p: &Problem, x0: &StateVector) -> Result<f64> {
    p.jacobian(x0)?.min_symmetric_eigenvalue()
}

/// Deterministic data perturbation on the sphere of radius `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub delta: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(delta: f64, seed: u64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(DsmError::InvalidArgument(format!("noise level must be >= 0, got {delta}")));
        }
        Ok(NoiseModel { delta, seed })
    }

    /// Unit vector (in `metric`) determined by the seed.
    pub fn direction(&self, metric: &GramMetric) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        loop {
            let u = DVector::from_iterator(metric.dim(), (0..metric.dim()).map(|_| StandardNormal.sample(&mut rng)));
            let n = metric.norm_raw(&u);
            if n > 0.0 {
                return u / n;
            }
        }
    }
}

/// Replaces the data `y` by `y_delta` with `||y - y_delta|| = delta`.
pub fn perturb_data(p: &Problem, nm: &NoiseModel) -> Result<Problem> {
    let y = p
        .data
        .as_ref()
        .ok_or_else(|| DsmError::UnsupportedProblem(format!("{} has no separable data term", p.name)))?;
    if nm.delta == 0.0 {
        return Ok(p.clone());
    }
    let y_delta = y + nm.direction(&p.codomain) * nm.delta;
    let mut out = p.clone();
    out.data = Some(y_delta);
    out.noise_free_solution = p.known_solution.clone().or_else(|| p.noise_free_solution.clone());
    out.known_solution = None;
    out.name = format!("{}+noise({:e})", p.name, nm.delta);
    Ok(out)
}
