//! Right-hand sides of the continuous solution schemes.
//!
//! Every scheme is a [`FlowField`] built once from a problem and an anchor
//! point `x0`. Schemes that freeze the Jacobian at `x0` capture it (and its
//! factorization) at construction and never evaluate it again.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::hilbert::{LinearMap, ShiftedFactorization, StateVector};
use crate::problems::{nonnegativity_margin, symmetrize, Problem};
use crate::schedules::{describe, validate, EpsilonSchedule};

/// Tolerance on the smallest symmetric eigenvalue of `F'(x0)` below which
/// the regularized scheme switches to the symmetrized problem.
pub const NONNEGATIVITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// `x' = -[F'(x0)]^{-1} F(x)`
    ModifiedNewton,
    /// `x' = -[F'(x)]^{-1} F(x)`
    Newton,
    /// `x' = -F(x)`
    SimpleIteration,
    /// `x' = -F'*(x) F(x)`
    Gradient,
    /// `x' = -[F'*(x) F'(x)]^{-1} F'*(x) F(x)`
    GaussNewton,
    /// `x' = -[F'(x0) + eps(t) I]^{-1} (F(x) + eps(t)(x - x0))`
    RegularizedModifiedNewton,
    /// Coupled `x' = -B F(x)`, `B' = -F'*(x) F'(x) B + F'*(x)`.
    InverseFree,
}

impl FlowKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowKind::ModifiedNewton => "modified_newton",
            FlowKind::Newton => "newton",
            FlowKind::SimpleIteration => "simple_iteration",
            FlowKind::Gradient => "gradient",
            FlowKind::GaussNewton => "gauss_newton",
            FlowKind::RegularizedModifiedNewton => "regularized_modified_newton",
            FlowKind::InverseFree => "inverse_free",
        }
    }

    pub fn is_coupled(self) -> bool {
        self == FlowKind::InverseFree
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured right-hand side.
#[derive(Clone)]
pub struct FlowField {
    kind: FlowKind,
    problem: Problem,
    anchor: StateVector,
    frozen_jacobian: Option<LinearMap>,
    frozen_factor: Option<Arc<ShiftedFactorization>>,
    schedule: Option<EpsilonSchedule>,
    b0: Option<LinearMap>,
    b0_defaulted: bool,
    notes: Vec<String>,
}

impl fmt::Debug for FlowField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlowField")
            .field("kind", &self.kind)
            .field("problem", &self.problem.name())
            .field("anchor", &self.anchor)
            .field("schedule", &self.schedule)
            .field("notes", &self.notes)
            .finish()
    }
}

impl FlowField {
    /// Flows without extra parameters: modified Newton, Newton, simple
    /// iteration, gradient and Gauss-Newton.
    pub fn new(kind: FlowKind, problem: Problem, anchor: StateVector) -> Result<Self> {
        check_anchor(&problem, &anchor)?;
        let mut flow = FlowField {
            kind,
            problem,
            anchor,
            frozen_jacobian: None,
            frozen_factor: None,
            schedule: None,
            b0: None,
            b0_defaulted: false,
            notes: Vec::new(),
        };
        match kind {
            FlowKind::ModifiedNewton => {
                let j0 = flow.problem.jacobian(&flow.anchor)?;
                let lu = j0.factor_shifted(0.0).map_err(|e| e.in_scheme("modified_newton"))?;
                flow.frozen_jacobian = Some(j0);
                flow.frozen_factor = Some(Arc::new(lu));
            }
            FlowKind::Newton | FlowKind::GaussNewton | FlowKind::SimpleIteration | FlowKind::Gradient => {}
            FlowKind::RegularizedModifiedNewton => {
                return Err(DsmError::InvalidArgument(
                    "regularized flow needs a schedule; use FlowField::regularized".into(),
                ))
            }
            FlowKind::InverseFree => {
                return Err(DsmError::InvalidArgument(
                    "inverse-free flow needs an initial operator; use FlowField::inverse_free".into(),
                ))
            }
        }
        if matches!(kind, FlowKind::Newton | FlowKind::SimpleIteration) && !flow.problem.is_square() {
            return Err(DsmError::NotSquare {
                rows: flow.problem.output_dim(),
                cols: flow.problem.dim(),
            });
        }
        Ok(flow)
    }

    /// Regularized modified Newton flow. When `F'(x0)` is not non-negative
    /// the flow runs on `phi(x) = F'*(x0) F(x)` instead, and says so in
    /// [`FlowField::notes`].
    pub fn regularized(problem: Problem, anchor: StateVector, schedule: EpsilonSchedule) -> Result<Self> {
        check_anchor(&problem, &anchor)?;
        schedule.check_params()?;
        let report = validate(&schedule);
        if let Some(bad) = report.failures().next() {
            return Err(DsmError::InvalidSchedule(format!(
                "{} fails {}",
                describe(&schedule),
                bad.name
            )));
        }
        let mut notes = Vec::new();
        let margin = if problem.is_square() && problem.domain_metric() == problem.codomain_metric() {
            Some(nonnegativity_margin(&problem, &anchor)?)
        } else {
            None
        };
        let problem = match margin {
            Some(m) if m >= -NONNEGATIVITY_TOL => problem,
            _ => {
                notes.push(match margin {
                    Some(m) => format!("symmetrized: F'(x0) has symmetric-part eigenvalue {m:e} < 0"),
                    None => "symmetrized: F'(x0) does not map the space into itself".into(),
                });
                symmetrize(&problem, &anchor)?
            }
        };
        let j0 = problem.jacobian(&anchor)?;
        Ok(FlowField {
            kind: FlowKind::RegularizedModifiedNewton,
            problem,
            anchor,
            frozen_jacobian: Some(j0),
            frozen_factor: None,
            schedule: Some(schedule),
            b0: None,
            b0_defaulted: false,
            notes,
        })
    }

    /// Inverse-free coupled flow. Without `b0` the zero operator is used,
    /// which never satisfies the convergence hypotheses.
    pub fn inverse_free(problem: Problem, anchor: StateVector, b0: Option<LinearMap>) -> Result<Self> {
        check_anchor(&problem, &anchor)?;
        let (b0, defaulted) = match b0 {
            Some(b) => {
                let (rows, cols) = b.matrix().shape();
                if rows != problem.dim() || cols != problem.output_dim() {
                    return Err(DsmError::DimensionMismatch {
                        expected: problem.dim() * problem.output_dim(),
                        got: rows * cols,
                    });
                }
                let b = LinearMap::new(
                    b.matrix().clone(),
                    problem.codomain_metric().clone(),
                    problem.domain_metric().clone(),
                )?;
                (b, false)
            }
            None => (
                LinearMap::zeros(problem.codomain_metric(), problem.domain_metric()),
                true,
            ),
        };
        let mut notes = Vec::new();
        if defaulted {
            notes.push("uncertified: B0 defaulted to zero; try an approximate inverse of F'(x0)".into());
        }
        Ok(FlowField {
            kind: FlowKind::InverseFree,
            problem,
            anchor,
            frozen_jacobian: None,
            frozen_factor: None,
            schedule: None,
            b0: Some(b0),
            b0_defaulted: defaulted,
            notes,
        })
    }

    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    /// The problem the flow actually runs on (symmetrized if needed).
    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn anchor(&self) -> &StateVector {
        &self.anchor
    }

    pub fn frozen_jacobian(&self) -> Option<&LinearMap> {
        self.frozen_jacobian.as_ref()
    }

    pub fn schedule(&self) -> Option<&EpsilonSchedule> {
        self.schedule.as_ref()
    }

    pub fn b0(&self) -> Option<&LinearMap> {
        self.b0.as_ref()
    }

    pub fn b0_defaulted(&self) -> bool {
        self.b0_defaulted
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn epsilon(&self, t: f64) -> Option<f64> {
        self.schedule.map(|s| s.value(t))
    }

    /// Evaluates the right-hand side of a non-coupled flow.
    pub fn rhs(&self, x: &StateVector, t: f64) -> Result<StateVector> {
        if x.dim() != self.problem.dim() {
            return Err(DsmError::DimensionMismatch {
                expected: self.problem.dim(),
                got: x.dim(),
            });
        }
        StateVector::from_dvector(self.rhs_raw(x.as_dvector(), t)?)
            .map_err(|_| DsmError::NonFinite(format!("{} right-hand side", self.kind)))
    }

    pub(crate) fn rhs_raw(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let p = &self.problem;
        match self.kind {
            FlowKind::ModifiedNewton => {
                let lu = self.frozen_factor.as_ref().expect("factor captured at construction");
                let d = lu.solve_raw(&p.residual_raw(x)).map_err(|e| e.in_scheme("modified_newton"))?;
                Ok(-d)
            }
            FlowKind::Newton => {
                let j = self.jacobian_at(x)?;
                let lu = j.factor_shifted(0.0).map_err(|e| e.in_scheme("newton"))?;
                Ok(-lu.solve_raw(&p.residual_raw(x)).map_err(|e| e.in_scheme("newton"))?)
            }
            FlowKind::SimpleIteration => Ok(-p.residual_raw(x)),
            FlowKind::Gradient => {
                let adj = self.jacobian_at(x)?.adjoint()?;
                Ok(-adj.apply_raw(&p.residual_raw(x)))
            }
            FlowKind::GaussNewton => {
                let j = self.jacobian_at(x)?;
                let adj = j.adjoint()?;
                let normal = adj.compose(&j)?;
                let lu = normal.factor_shifted(0.0).map_err(|e| e.in_scheme("gauss_newton"))?;
                let g = adj.apply_raw(&p.residual_raw(x));
                Ok(-lu.solve_raw(&g).map_err(|e| e.in_scheme("gauss_newton"))?)
            }
            FlowKind::RegularizedModifiedNewton => {
                let eps = self.epsilon(t).expect("schedule present");
                let j0 = self.frozen_jacobian.as_ref().expect("frozen Jacobian");
                let lu = j0
                    .factor_shifted(eps)
                    .map_err(|e| e.in_scheme("regularized_modified_newton"))?;
                let rhs = p.residual_raw(x) + (x - self.anchor.as_dvector()) * eps;
                Ok(-lu
                    .solve_raw(&rhs)
                    .map_err(|e| e.in_scheme("regularized_modified_newton"))?)
            }
            FlowKind::InverseFree => Err(DsmError::InvalidArgument(
                "inverse-free flow has a coupled state; use rhs_inverse_free".into(),
            )),
        }
    }

    /// Derivative of the coupled state `(x, B)`. Performs no linear solves.
    pub fn coupled_rhs(&self, s: &CoupledState) -> Result<CoupledState> {
        if self.kind != FlowKind::InverseFree {
            return Err(DsmError::InvalidArgument(format!("{} is not a coupled flow", self.kind)));
        }
        self.check_coupled(s)?;
        let (dx, db) = self.coupled_rhs_raw(s.x.as_dvector(), s.b.matrix())?;
        Ok(CoupledState {
            x: StateVector::from_dvector(dx)?,
            b: LinearMap::new(db, s.b.domain().clone(), s.b.codomain().clone())?,
        })
    }

    pub(crate) fn coupled_rhs_raw(&self, x: &DVector<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = &self.problem;
        let j = self.jacobian_at(x)?;
        let adj = j.adjoint()?;
        let dx = -(b * p.residual_raw(x));
        let db = adj.matrix() - adj.matrix() * (j.matrix() * b);
        Ok((dx, db))
    }

    fn check_coupled(&self, s: &CoupledState) -> Result<()> {
        if s.x.dim() != self.problem.dim() {
            return Err(DsmError::DimensionMismatch {
                expected: self.problem.dim(),
                got: s.x.dim(),
            });
        }
        let (rows, cols) = s.b.matrix().shape();
        if rows != self.problem.dim() || cols != self.problem.output_dim() {
            return Err(DsmError::DimensionMismatch {
                expected: self.problem.dim() * self.problem.output_dim(),
                got: rows * cols,
            });
        }
        Ok(())
    }

    fn jacobian_at(&self, x: &DVector<f64>) -> Result<LinearMap> {
        LinearMap::new(
            self.problem.jacobian_raw(x),
            self.problem.domain_metric().clone(),
            self.problem.codomain_metric().clone(),
        )
    }
}

fn check_anchor(problem: &Problem, anchor: &StateVector) -> Result<()> {
    if anchor.dim() != problem.dim() {
        return Err(DsmError::DimensionMismatch {
            expected: problem.dim(),
            got: anchor.dim(),
        });
    }
    Ok(())
}

/// State `(x, B)` of the inverse-free flow; `B` maps the codomain of `F`
/// back to its domain.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub x: StateVector,
    pub b: LinearMap,
}

impl CoupledState {
    pub fn new(x: StateVector, b: LinearMap) -> Self {
        CoupledState { x, b }
    }

    /// `||F'(x) B - I||`.
    pub fn inverse_defect(&self, problem: &Problem) -> Result<f64> {
        let j = problem.jacobian(&self.x)?;
        Ok(j.compose(&self.b)?.minus_identity()?.operator_norm())
    }
}

/// `diag(1 / F'(x0)_ii)`: a cheap starting operator for the inverse-free flow.
pub fn approximate_inverse_diagonal(problem: &Problem, x0: &StateVector) -> Result<LinearMap> {
    let j = problem.jacobian(x0)?;
    if !j.is_square() {
        return Err(DsmError::NotSquare {
            rows: j.matrix().nrows(),
            cols: j.matrix().ncols(),
        });
    }
    let d = j.matrix().diagonal();
    if d.iter().any(|v| v.abs() < 1e-300) {
        return Err(DsmError::SingularOperator {
            scheme: "approximate_inverse_diagonal".into(),
        });
    }
    LinearMap::new(
        DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
        problem.codomain_metric().clone(),
        problem.domain_metric().clone(),
    )
}

pub fn modified_newton_rhs(x: &StateVector, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::ModifiedNewton)?;
    f.rhs(x, 0.0)
}

pub fn newton_rhs(x: &StateVector, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::Newton)?;
    f.rhs(x, 0.0)
}

pub fn simple_iteration_rhs(x: &StateVector, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::SimpleIteration)?;
    f.rhs(x, 0.0)
}

pub fn gradient_rhs(x: &StateVector, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::Gradient)?;
    f.rhs(x, 0.0)
}

pub fn gauss_newton_rhs(x: &StateVector, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::GaussNewton)?;
    f.rhs(x, 0.0)
}

pub fn regularized_rhs(x: &StateVector, t: f64, f: &FlowField) -> Result<StateVector> {
    expect_kind(f, FlowKind::RegularizedModifiedNewton)?;
    f.rhs(x, t)
}

pub fn inverse_free_rhs(s: &CoupledState, f: &FlowField) -> Result<CoupledState> {
    f.coupled_rhs(s)
}

fn expect_kind(f: &FlowField, kind: FlowKind) -> Result<()> {
    if f.kind != kind {
        return Err(DsmError::InvalidArgument(format!("expected a {kind} flow, got {}", f.kind)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{factorization_count, inner_product, GramMetric};
    use crate::problems::{
        build_integral_problem, make_linear_problem, make_polynomial_problem, IntegralEquationSpec, Kernel, MetricChoice,
        Model, Nonlinearity,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    fn scalar_linear(a: f64, shift: f64) -> Problem {
        make_linear_problem(LinearMap::from_rows(&[vec![a]]).unwrap(), sv(&[shift])).unwrap()
    }

    #[derive(Debug)]
    struct SquareMinusOne;

    impl Model for SquareMinusOne {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
            x.map(|v| v * v - 1.0)
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0 * x[0])
        }
    }

    #[derive(Debug)]
    struct HalfSquare;

    impl Model for HalfSquare {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
            x.map(|v| 0.5 * v * v)
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, x[0])
        }
    }

    fn custom(model: impl Model + 'static) -> Problem {
        let m = GramMetric::identity(1);
        Problem::new("custom", Arc::new(model), None, m.clone(), m).unwrap()
    }

    #[test]
    fn modified_newton_examples() {
        let f = FlowField::new(FlowKind::ModifiedNewton, scalar_linear(1.0, 0.0), sv(&[1.0])).unwrap();
        assert_eq!(modified_newton_rhs(&sv(&[1.0]), &f).unwrap().as_slice(), &[-1.0]);
        assert_eq!(modified_newton_rhs(&sv(&[0.0]), &f).unwrap().as_slice(), &[0.0]);

        let f = FlowField::new(FlowKind::ModifiedNewton, scalar_linear(2.0, 3.0), sv(&[0.0])).unwrap();
        assert!((modified_newton_rhs(&sv(&[0.0]), &f).unwrap().as_slice()[0] - 3.0).abs() < 1e-15);
        assert_eq!(modified_newton_rhs(&sv(&[3.0]), &f).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn modified_newton_reuses_factorization() {
        let p = make_polynomial_problem(1.0, 3).unwrap();
        let f = FlowField::new(FlowKind::ModifiedNewton, p, sv(&[0.1, 0.2, 0.3])).unwrap();
        let before = factorization_count();
        for k in 0..10 {
            f.rhs(&StateVector::constant(3, 0.01 * k as f64), 0.0).unwrap();
        }
        assert_eq!(factorization_count(), before);
    }

    #[test]
    fn modified_newton_singular_anchor() {
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let err = FlowField::new(FlowKind::ModifiedNewton, p, sv(&[-0.5])).unwrap_err();
        assert_eq!(
            err,
            DsmError::SingularOperator {
                scheme: "modified_newton".into()
            }
        );
    }

    #[test]
    fn newton_examples() {
        let f = FlowField::new(FlowKind::Newton, custom(SquareMinusOne), sv(&[2.0])).unwrap();
        assert!((newton_rhs(&sv(&[2.0]), &f).unwrap().as_slice()[0] + 0.75).abs() < 1e-15);
        assert_eq!(newton_rhs(&sv(&[1.0]), &f).unwrap().as_slice(), &[0.0]);
        assert!(matches!(
            newton_rhs(&sv(&[0.0]), &f),
            Err(DsmError::SingularOperator { scheme }) if scheme == "newton"
        ));

        let a = LinearMap::from_rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]).unwrap();
        let p = make_linear_problem(a, sv(&[1.0, -1.0])).unwrap();
        let mn = FlowField::new(FlowKind::ModifiedNewton, p.clone(), sv(&[0.0, 0.0])).unwrap();
        let nw = FlowField::new(FlowKind::Newton, p, sv(&[0.0, 0.0])).unwrap();
        let x = sv(&[0.3, 0.7]);
        let d = mn.rhs(&x, 0.0).unwrap().checked_sub(&nw.rhs(&x, 0.0).unwrap()).unwrap();
        assert!(d.euclidean_norm() < 1e-14);
    }

    #[test]
    fn simple_and_gradient_examples() {
        let f = FlowField::new(FlowKind::SimpleIteration, scalar_linear(1.0, 0.0), sv(&[2.0])).unwrap();
        assert_eq!(simple_iteration_rhs(&sv(&[2.0]), &f).unwrap().as_slice(), &[-2.0]);
        let f = FlowField::new(FlowKind::Gradient, scalar_linear(3.0, 0.0), sv(&[1.0])).unwrap();
        assert!((gradient_rhs(&sv(&[1.0]), &f).unwrap().as_slice()[0] + 9.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_uses_metric_adjoint() {
        // F(x) = 2x from weight 4 to weight 1: F'* = 1/2, so -F'* F(1) = -1.
        let a = LinearMap::new(
            DMatrix::from_element(1, 1, 2.0),
            GramMetric::diagonal(vec![4.0]).unwrap(),
            GramMetric::diagonal(vec![1.0]).unwrap(),
        )
        .unwrap();
        let p = make_linear_problem(a, sv(&[0.0])).unwrap();
        let f = FlowField::new(FlowKind::Gradient, p, sv(&[1.0])).unwrap();
        assert!((f.rhs(&sv(&[1.0]), 0.0).unwrap().as_slice()[0] + 1.0).abs() < 1e-14);
    }

    fn square_problems() -> Vec<(Problem, StateVector, f64)> {
        let a = LinearMap::from_rows(&[vec![3.0, 1.0, 0.0], vec![-1.0, 2.0, 0.5], vec![0.2, 0.0, 1.5]]).unwrap();
        let (g, g_u) = Nonlinearity::Cubic.functions();
        let mut spec_h1 = IntegralEquationSpec::manufactured(Kernel::Gaussian { width: 0.1 }.function(), g, g_u, 9, |s| s);
        spec_h1.domain_metric = MetricChoice::H1;
        spec_h1.codomain_metric = MetricChoice::L2;
        vec![
            (make_linear_problem(a, sv(&[1.0, 2.0, 3.0])).unwrap(), StateVector::zeros(3), 1.0),
            (make_polynomial_problem(1.0, 4).unwrap(), StateVector::constant(4, 0.1), 0.2),
            (build_integral_problem(&spec_h1).unwrap(), StateVector::constant(9, 0.5), 0.3),
        ]
    }

    #[test]
    fn gauss_newton_matches_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (p, center, radius) in square_problems() {
            let nw = FlowField::new(FlowKind::Newton, p.clone(), center.clone()).unwrap();
            let gn = FlowField::new(FlowKind::GaussNewton, p.clone(), center.clone()).unwrap();
            for _ in 0..20 {
                let x = StateVector::from_dvector(
                    center.as_dvector() + DVector::from_fn(p.dim(), |_, _| rng.random_range(-radius..radius)),
                )
                .unwrap();
                let a = newton_rhs(&x, &nw).unwrap();
                let b = gauss_newton_rhs(&x, &gn).unwrap();
                let rel = a.checked_sub(&b).unwrap().euclidean_norm() / a.euclidean_norm().max(1e-300);
                assert!(rel <= 1e-10, "{}: {rel:e}", p.name());
            }
        }
    }

    #[test]
    fn equilibria_at_solutions() {
        for (p, center, _) in square_problems() {
            let xhat = p.known_solution().unwrap().clone();
            for kind in [
                FlowKind::ModifiedNewton,
                FlowKind::Newton,
                FlowKind::SimpleIteration,
                FlowKind::Gradient,
                FlowKind::GaussNewton,
            ] {
                let f = FlowField::new(kind, p.clone(), center.clone()).unwrap();
                let scale = 1.0 + p.jacobian(&xhat).unwrap().operator_norm();
                assert!(f.rhs(&xhat, 0.0).unwrap().euclidean_norm() <= 1e-10 * scale, "{kind} on {}", p.name());
            }
            let b0 = approximate_inverse_diagonal(&p, &center).unwrap();
            let f = FlowField::inverse_free(p.clone(), center.clone(), Some(b0.clone())).unwrap();
            let d = f.coupled_rhs(&CoupledState::new(xhat.clone(), b0)).unwrap();
            assert!(d.x.euclidean_norm() <= 1e-10);
        }
    }

    #[test]
    fn dissipation_and_step_bound_in_certified_ball() {
        // x + x^2 from x0 = 0.1: m1 = 1/1.2, M2 = 2, ball radius 1/(2 M2 m1) = 0.3.
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let x0 = sv(&[0.1]);
        let f = FlowField::new(FlowKind::ModifiedNewton, p.clone(), x0).unwrap();
        let m1 = 1.0 / 1.2;
        let r = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = p.codomain_metric();
        for _ in 0..100 {
            let h = sv(&[0.1 + rng.random_range(-r..r)]);
            let fh = p.residual(&h).unwrap();
            let phi = f.rhs(&h, 0.0).unwrap();
            let jphi = p.jacobian(&h).unwrap().apply(&phi).unwrap();
            let q = inner_product(&jphi, &fh, m).unwrap();
            let fn2 = inner_product(&fh, &fh, m).unwrap();
            assert!(q <= -0.5 * fn2 + 1e-15, "h={h:?}: {q} > {}", -0.5 * fn2);
            assert!(phi.euclidean_norm() <= m1 * fh.euclidean_norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn inverse_free_examples() {
        let p = scalar_linear(1.0, 0.0);
        let b = |v: f64| LinearMap::from_rows(&[vec![v]]).unwrap();
        let f = FlowField::inverse_free(p.clone(), sv(&[1.0]), Some(b(0.5))).unwrap();
        let d = inverse_free_rhs(&CoupledState::new(sv(&[1.0]), b(0.5)), &f).unwrap();
        assert_eq!(d.x.as_slice(), &[-0.5]);
        assert_eq!(d.b.matrix()[(0, 0)], 0.5);

        let d = inverse_free_rhs(&CoupledState::new(sv(&[1.0]), b(1.0)), &f).unwrap();
        assert_eq!(d.b.matrix()[(0, 0)], 0.0);

        let d = inverse_free_rhs(&CoupledState::new(sv(&[0.0]), b(7.0)), &f).unwrap();
        assert_eq!(d.x.as_slice(), &[0.0]);

        let f = FlowField::inverse_free(p, sv(&[1.0]), None).unwrap();
        assert!(f.b0_defaulted());
        assert_eq!(f.b0().unwrap().matrix()[(0, 0)], 0.0);
        assert!(f.notes()[0].contains("uncertified"));
    }

    #[test]
    fn inverse_free_fixed_point_and_no_solves() {
        let a = LinearMap::from_rows(&[vec![2.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let inv = LinearMap::from_rows(&[vec![0.5, -0.125], vec![0.0, 0.25]]).unwrap();
        let p = make_linear_problem(a, sv(&[1.0, 1.0])).unwrap();
        let f = FlowField::inverse_free(p.clone(), sv(&[0.0, 0.0]), Some(inv.clone())).unwrap();
        let before = factorization_count();
        let d = f.coupled_rhs(&CoupledState::new(sv(&[0.3, -0.2]), inv)).unwrap();
        assert!(d.b.matrix().norm() < 1e-15);
        let poly = make_polynomial_problem(1.0, 5).unwrap();
        let x0 = StateVector::constant(5, 0.2);
        let g = FlowField::inverse_free(poly, x0.clone(), None).unwrap();
        for _ in 0..5 {
            g.coupled_rhs(&CoupledState::new(x0.clone(), g.b0().unwrap().clone())).unwrap();
        }
        assert_eq!(factorization_count(), before);
    }

    #[test]
    fn regularized_examples() {
        let s = EpsilonSchedule::exponential(1.0, 0.5).unwrap();
        let f = FlowField::regularized(custom(HalfSquare), sv(&[1.0]), s).unwrap();
        // eps(t) = 1 at t = 0.
        assert!((regularized_rhs(&sv(&[1.0]), 0.0, &f).unwrap().as_slice()[0] + 0.25).abs() < 1e-15);

        let p = make_polynomial_problem(1.0, 1).unwrap();
        let f = FlowField::regularized(p, sv(&[0.0]), s).unwrap();
        assert_eq!(f.rhs(&sv(&[0.0]), 3.0).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn regularized_approaches_modified_newton() {
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let x0 = sv(&[0.01]);
        // eps(t) = 1e-8 at t = 0.
        let s = EpsilonSchedule::exponential(1e-8, 0.1).unwrap();
        let reg = FlowField::regularized(p.clone(), x0.clone(), s).unwrap();
        let mn = FlowField::new(FlowKind::ModifiedNewton, p, x0).unwrap();
        for x in [0.01, 0.05, -0.02, 0.2] {
            let a = reg.rhs(&sv(&[x]), 0.0).unwrap().as_slice()[0];
            let b = mn.rhs(&sv(&[x]), 0.0).unwrap().as_slice()[0];
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn regularized_symmetrizes_negative_jacobian() {
        let p = scalar_linear(-1.0, 0.0);
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let f = FlowField::regularized(p, sv(&[1.0]), s).unwrap();
        assert!(f.problem().is_symmetrized());
        assert!(f.notes()[0].starts_with("symmetrized"));
        assert_eq!(f.frozen_jacobian().unwrap().matrix()[(0, 0)], 1.0);

        let p = make_polynomial_problem(1.0, 1).unwrap();
        let f = FlowField::regularized(p, sv(&[0.01]), s).unwrap();
        assert!(!f.problem().is_symmetrized() && f.notes().is_empty());
    }

    #[test]
    fn regularized_rejects_invalid_schedule() {
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let s = EpsilonSchedule::exponential(1.0, 2.0).unwrap();
        assert!(matches!(
            FlowField::regularized(p, sv(&[0.01]), s),
            Err(DsmError::InvalidSchedule(_))
        ));
    }

    #[test]
    fn kind_constructors_are_checked() {
        let p = scalar_linear(1.0, 0.0);
        assert!(FlowField::new(FlowKind::InverseFree, p.clone(), sv(&[1.0])).is_err());
        assert!(FlowField::new(FlowKind::RegularizedModifiedNewton, p.clone(), sv(&[1.0])).is_err());
        assert!(FlowField::new(FlowKind::ModifiedNewton, p.clone(), sv(&[1.0, 2.0])).is_err());
        let f = FlowField::new(FlowKind::Newton, p, sv(&[1.0])).unwrap();
        assert!(modified_newton_rhs(&sv(&[1.0]), &f).is_err());
    }
}
