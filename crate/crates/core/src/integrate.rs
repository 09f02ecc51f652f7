//! Time integration of flows with trajectory recording.
//!
//! Plain and coupled flows share one stepper: the coupled state `(x, B)` is
//! flattened into a single vector `[x; vec(B)]` (column-major).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::check::fmt_num;
use crate::error::{DsmError, Result};
use crate::flows::{CoupledState, FlowField, FlowKind};
use crate::hilbert::{LinearMap, StateVector};

/// Smallest admissible adaptive step, relative to `max(1, |t|)`.
const MIN_STEP: f64 = 1e-14;
const DEFAULT_MAX_STEPS: usize = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed { h: f64 },
    Rk45Adaptive { abs_tol: f64, rel_tol: f64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Rk45Adaptive {
            abs_tol: 1e-10,
            rel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallExit {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCriteria {
    /// Stop once `||F(x)||` is at or below this value.
    #[serde(default)]
    pub residual_below: Option<f64>,
    /// Stop at the first step that leaves the ball.
    #[serde(default)]
    pub ball_exit: Option<BallExit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub method: Method,
    pub t_max: f64,
    pub record_every: f64,
    #[serde(default)]
    pub stop_when: StopCriteria,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl IntegratorConfig {
    pub fn adaptive(t_max: f64, record_every: f64) -> Self {
        IntegratorConfig {
            method: Method::default(),
            t_max,
            record_every,
            stop_when: StopCriteria::default(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn rk4(h: f64, t_max: f64, record_every: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4Fixed { h },
            ..Self::adaptive(t_max, record_every)
        }
    }

    pub fn residual_below(mut self, tol: f64) -> Self {
        self.stop_when.residual_below = Some(tol);
        self
    }

    pub fn ball_exit(mut self, center: &StateVector, radius: f64) -> Self {
        self.stop_when.ball_exit = Some(BallExit {
            center: center.as_slice().to_vec(),
            radius,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DsmError::InvalidIntegrator(msg));
        match self.method {
            Method::Rk4Fixed { h } if !(h > 0.0 && h.is_finite()) => return bad(format!("step must be > 0, got {h}")),
            Method::Rk45Adaptive { abs_tol, rel_tol } if !(abs_tol > 0.0 && rel_tol > 0.0) => {
                return bad(format!("tolerances must be > 0, got abs {abs_tol}, rel {rel_tol}"))
            }
            _ => {}
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max must be > 0, got {}", self.t_max));
        }
        if !(self.record_every > 0.0 && self.record_every.is_finite()) {
            return bad(format!("record_every must be > 0, got {}", self.record_every));
        }
        if let Some(tol) = self.stop_when.residual_below {
            if !(tol >= 0.0) {
                return bad(format!("residual_below must be >= 0, got {tol}"));
            }
        }
        if let Some(b) = &self.stop_when.ball_exit {
            if !(b.radius > 0.0) {
                return bad(format!("ball radius must be > 0, got {}", b.radius));
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Converged { residual: f64 },
    Horizon,
    /// Carries the first sample outside the ball.
    BallExit { t: f64, distance: f64 },
    StepFailure { t: f64, message: String },
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::Converged { .. } => "converged",
            StopReason::Horizon => "horizon",
            StopReason::BallExit { .. } => "ball_exit",
            StopReason::StepFailure { .. } => "step_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: StateVector,
    pub res_norm: f64,
    pub err_norm: Option<f64>,
    pub eps: Option<f64>,
    pub b_norm: Option<f64>,
    pub w_norm: Option<f64>,
    pub bound_res: Option<f64>,
    pub bound_err: Option<f64>,
}

/// Recordable scalar columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    ResNorm,
    ErrNorm,
    Eps,
    BNorm,
    WNorm,
    BoundRes,
    BoundErr,
}

impl Column {
    pub const ALL: [Column; 7] = [
        Column::ResNorm,
        Column::ErrNorm,
        Column::Eps,
        Column::BNorm,
        Column::WNorm,
        Column::BoundRes,
        Column::BoundErr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::ResNorm => "res_norm",
            Column::ErrNorm => "err_norm",
            Column::Eps => "eps",
            Column::BNorm => "b_norm",
            Column::WNorm => "w_norm",
            Column::BoundRes => "bound_res",
            Column::BoundErr => "bound_err",
        }
    }
}

impl Sample {
    pub fn get(&self, c: Column) -> Option<f64> {
        match c {
            Column::ResNorm => Some(self.res_norm),
            Column::ErrNorm => self.err_norm,
            Column::Eps => self.eps,
            Column::BNorm => self.b_norm,
            Column::WNorm => self.w_norm,
            Column::BoundRes => self.bound_res,
            Column::BoundErr => self.bound_err,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub flow: FlowKind,
    pub samples: Vec<Sample>,
    pub stop_reason: StopReason,
    pub step_count: usize,
    /// `B` at the last sample, for coupled flows.
    pub final_operator: Option<DMatrix<f64>>,
}

pub const CSV_HEADER: &str = "t,res_norm,err_norm,eps,b_norm,w_norm,bound_res,bound_err";

impl Trajectory {
    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// `(t, value)` pairs of a column, skipping samples where it is absent.
    pub fn column(&self, c: Column) -> Vec<(f64, f64)> {
        self.samples.iter().filter_map(|s| s.get(c).map(|v| (s.t, v))).collect()
    }

    pub fn has_column(&self, c: Column) -> bool {
        self.samples.iter().any(|s| s.get(c).is_some())
    }

    /// One row per sample, 17 significant digits, empty cells for absent columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.samples.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&csv_num(s.t));
            for c in Column::ALL {
                out.push(',');
                if let Some(v) = s.get(c) {
                    out.push_str(&csv_num(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let last = self.last();
        let mut s = String::new();
        let _ = write!(
            s,
            "flow: {}\nstop_reason: {}\nsteps: {}\nsamples: {}\nt_final: {}\nres_norm_final: {}",
            self.flow,
            self.stop_reason.label(),
            self.step_count,
            self.samples.len(),
            fmt_num(last.t),
            fmt_num(last.res_norm)
        );
        if let Some(e) = last.err_norm {
            let _ = write!(s, "\nerr_norm_final: {}", fmt_num(e));
        }
        s
    }
}

pub fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        fmt_num(v)
    }
}

/// The ODE as seen by the stepper.
struct System<'a> {
    flow: &'a FlowField,
    /// Output dimension when coupled; `B` is `n x m`.
    coupled: Option<usize>,
}

impl System<'_> {
    fn n(&self) -> usize {
        self.flow.problem().dim()
    }

    fn split(&self, y: &DVector<f64>) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let n = self.n();
        let x = y.rows(0, n).into_owned();
        let b = self
            .coupled
            .map(|m| DMatrix::from_column_slice(n, m, &y.as_slice()[n..]));
        (x, b)
    }

    fn deriv(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self.coupled {
            None => self.flow.rhs_raw(y, t),
            Some(_) => {
                let (x, b) = self.split(y);
                let (dx, db) = self.flow.coupled_rhs_raw(&x, b.as_ref().expect("coupled"))?;
                let mut out = DVector::zeros(y.len());
                out.rows_mut(0, dx.len()).copy_from(&dx);
                out.rows_mut(dx.len(), db.len()).copy_from_slice(db.as_slice());
                Ok(out)
            }
        }
    }

    fn residual_norm(&self, y: &DVector<f64>) -> f64 {
        let p = self.flow.problem();
        let x = y.rows(0, self.n()).into_owned();
        p.codomain_metric().norm_raw(&p.residual_raw(&x))
    }

    fn distance(&self, y: &DVector<f64>, center: &DVector<f64>) -> f64 {
        let x = y.rows(0, self.n()).into_owned();
        self.flow.problem().domain_metric().norm_raw(&(x - center))
    }

    fn observe(&self, t: f64, y: &DVector<f64>) -> Result<Sample> {
        let p = self.flow.problem();
        let (x, b) = self.split(y);
        let x_sv = StateVector::from_dvector(x.clone())
            .map_err(|_| DsmError::NonFinite(format!("state at t={t}")))?;
        let res_norm = p.codomain_metric().norm_raw(&p.residual_raw(&x));
        let err_norm = p
            .error_reference()
            .map(|xh| p.domain_metric().norm_raw(&(&x - xh.as_dvector())));
        let (b_norm, w_norm) = match b {
            Some(b) => {
                let bm = LinearMap::new(b, p.codomain_metric().clone(), p.domain_metric().clone())?;
                let w = if p.is_square() {
                    let j = LinearMap::new(p.jacobian_raw(&x), p.domain_metric().clone(), p.codomain_metric().clone())?;
                    Some(j.compose(&bm)?.minus_identity()?.operator_norm())
                } else {
                    None
                };
                (Some(bm.operator_norm()), w)
            }
            None => (None, None),
        };
        let sample = Sample {
            t,
            x: x_sv,
            res_norm,
            err_norm,
            eps: self.flow.epsilon(t),
            b_norm,
            w_norm,
            bound_res: None,
            bound_err: None,
        };
        let finite = [Some(res_norm), err_norm, b_norm, w_norm]
            .iter()
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err(DsmError::NonFinite(format!("recorded norm at t={t}")));
        }
        Ok(sample)
    }
}

/// Integrates a plain flow from `x0`. Coupled flows start from their stored `B0`.
pub fn integrate_flow(f: &FlowField, x0: &StateVector, cfg: &IntegratorConfig) -> Result<Trajectory> {
    if f.kind().is_coupled() {
        let b0 = f.b0().expect("coupled flow carries B0").clone();
        return integrate_coupled(f, &CoupledState::new(x0.clone(), b0), cfg);
    }
    check_dim(f.problem().dim(), x0.dim())?;
    let sys = System { flow: f, coupled: None };
    run(&sys, x0.as_dvector().clone(), cfg)
}

pub fn integrate_coupled(f: &FlowField, s0: &CoupledState, cfg: &IntegratorConfig) -> Result<Trajectory> {
    if !f.kind().is_coupled() {
        return Err(DsmError::InvalidArgument(format!("{} is not a coupled flow", f.kind())));
    }
    let p = f.problem();
    check_dim(p.dim(), s0.x.dim())?;
    let (rows, cols) = s0.b.matrix().shape();
    if rows != p.dim() || cols != p.output_dim() {
        return Err(DsmError::DimensionMismatch {
            expected: p.dim() * p.output_dim(),
            got: rows * cols,
        });
    }
    let mut y = DVector::zeros(p.dim() + rows * cols);
    y.rows_mut(0, p.dim()).copy_from(s0.x.as_dvector());
    y.rows_mut(p.dim(), rows * cols).copy_from_slice(s0.b.matrix().as_slice());
    let sys = System {
        flow: f,
        coupled: Some(cols),
    };
    run(&sys, y, cfg)
}

/// Trajectory holding only the sample at `t = 0`, for a zero-length horizon.
pub fn initial_only(f: &FlowField, x0: &StateVector) -> Result<Trajectory> {
    if f.kind().is_coupled() {
        return Err(DsmError::InvalidArgument(format!("{} needs an operator state", f.kind())));
    }
    check_dim(f.problem().dim(), x0.dim())?;
    let sys = System { flow: f, coupled: None };
    let y = x0.as_dvector().clone();
    Ok(finish(&sys, vec![sys.observe(0.0, &y)?], StopReason::Horizon, 0, &y))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DsmError::DimensionMismatch { expected, got });
    }
    Ok(())
}

enum Check {
    Continue,
    Stop(StopReason),
}

fn stop_check(sys: &System, y: &DVector<f64>, cfg: &IntegratorConfig, t: f64, center: Option<&DVector<f64>>) -> Check {
    if let (Some(b), Some(c)) = (&cfg.stop_when.ball_exit, center) {
        let d = sys.distance(y, c);
        if d > b.radius {
            return Check::Stop(StopReason::BallExit { t, distance: d });
        }
    }
    if let Some(tol) = cfg.stop_when.residual_below {
        let r = sys.residual_norm(y);
        if r <= tol {
            return Check::Stop(StopReason::Converged { residual: r });
        }
    }
    Check::Continue
}

fn run(sys: &System, y0: DVector<f64>, cfg: &IntegratorConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let center = match &cfg.stop_when.ball_exit {
        Some(b) => {
            check_dim(sys.n(), b.center.len())?;
            Some(DVector::from_column_slice(&b.center))
        }
        None => None,
    };
    let mut samples = vec![sys.observe(0.0, &y0)?];
    let mut y = y0;
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut record_index = 1usize;

    if let Check::Stop(reason) = stop_check(sys, &y, cfg, 0.0, center.as_ref()) {
        return Ok(finish(sys, samples, reason, 0, &y));
    }

    let mut stepper = Stepper::new(cfg.method, sys, &y)?;
    let reason = loop {
        let next_record = (record_index as f64 * cfg.record_every).min(cfg.t_max);
        if steps >= cfg.max_steps {
            break StopReason::StepFailure {
                t,
                message: format!("step limit {} reached", cfg.max_steps),
            };
        }
        let (t_new, y_new) = match stepper.step(sys, t, &y, next_record)? {
            StepOutcome::Accepted(t_new, y_new) => (t_new, y_new),
            StepOutcome::Failed(message) => break StopReason::StepFailure { t, message },
        };
        steps += 1;
        t = t_new;
        y = y_new;
        let at_record = t >= next_record;
        if at_record {
            t = next_record;
            record_index += 1;
        }
        if let Check::Stop(reason) = stop_check(sys, &y, cfg, t, center.as_ref()) {
            samples.push(sys.observe(t, &y)?);
            break reason;
        }
        if at_record {
            samples.push(sys.observe(t, &y)?);
            if t >= cfg.t_max {
                break StopReason::Horizon;
            }
        }
    };
    Ok(finish(sys, samples, reason, steps, &y))
}

fn finish(sys: &System, samples: Vec<Sample>, reason: StopReason, steps: usize, y: &DVector<f64>) -> Trajectory {
    Trajectory {
        flow: sys.flow.kind(),
        samples,
        stop_reason: reason,
        step_count: steps,
        final_operator: sys.split(y).1,
    }
}

enum StepOutcome {
    Accepted(f64, DVector<f64>),
    Failed(String),
}

enum Stepper {
    Rk4 { h: f64 },
    Dopri { abs: f64, rel: f64, h: f64 },
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

impl Stepper {
    fn new(method: Method, sys: &System, y0: &DVector<f64>) -> Result<Self> {
        Ok(match method {
            Method::Rk4Fixed { h } => Stepper::Rk4 { h },
            Method::Rk45Adaptive { abs_tol, rel_tol } => {
                let f0 = sys.deriv(0.0, y0)?;
                let scale = |v: &DVector<f64>| {
                    let s: f64 = v
                        .iter()
                        .zip(y0.iter())
                        .map(|(vi, yi)| (vi / (abs_tol + rel_tol * yi.abs())).powi(2))
                        .sum();
                    (s / v.len() as f64).sqrt()
                };
                let (d0, d1) = (scale(y0), scale(&f0));
                let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
                Stepper::Dopri {
                    abs: abs_tol,
                    rel: rel_tol,
                    h: h.min(1.0),
                }
            }
        })
    }

    fn step(&mut self, sys: &System, t: f64, y: &DVector<f64>, t_stop: f64) -> Result<StepOutcome> {
        match self {
            Stepper::Rk4 { h } => {
                let mut dt = *h;
                // Land exactly on record times.
                if t + dt >= t_stop - 1e-12 * t_stop.abs().max(1.0) {
                    dt = t_stop - t;
                }
                let y_new = rk4_step(sys, t, y, dt)?;
                if y_new.iter().any(|v| !v.is_finite()) {
                    return Ok(StepOutcome::Failed(format!("non-finite state after step at t={t}")));
                }
                let t_new = if dt == t_stop - t { t_stop } else { t + dt };
                Ok(StepOutcome::Accepted(t_new, y_new))
            }
            Stepper::Dopri { abs, rel, h } => loop {
                let clamp = t + *h >= t_stop - 1e-12 * t_stop.abs().max(1.0);
                let dt = if clamp { t_stop - t } else { *h };
                if dt < MIN_STEP * t.abs().max(1.0) && !clamp {
                    return Ok(StepOutcome::Failed(format!("step size {dt:e} underflow at t={t}")));
                }
                let (y_new, err) = dopri_step(sys, t, y, dt, *abs, *rel)?;
                let ok = err.is_finite() && y_new.iter().all(|v| v.is_finite());
                let factor = if ok {
                    if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    }
                } else {
                    0.2
                };
                if ok && err <= 1.0 {
                    // A clamped step must not shrink the controller's proposal.
                    let proposal = if clamp { h.max(dt) } else { dt };
                    *h = proposal * factor;
                    let t_new = if clamp { t_stop } else { t + dt };
                    return Ok(StepOutcome::Accepted(t_new, y_new));
                }
                *h = dt * factor;
                if *h < MIN_STEP * t.abs().max(1.0) {
                    return Ok(StepOutcome::Failed(format!("step size {:e} underflow at t={t}", *h)));
                }
            },
        }
    }
}

fn rk4_step(sys: &System, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let k1 = sys.deriv(t, y)?;
    let k2 = sys.deriv(t + h / 2.0, &(y + &k1 * (h / 2.0)))?;
    let k3 = sys.deriv(t + h / 2.0, &(y + &k2 * (h / 2.0)))?;
    let k4 = sys.deriv(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn dopri_step(sys: &System, t: f64, y: &DVector<f64>, h: f64, abs: f64, rel: f64) -> Result<(DVector<f64>, f64)> {
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    for i in 0..7 {
        let mut yi = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if A[i][j] != 0.0 {
                yi.axpy(h * A[i][j], kj, 1.0);
            }
        }
        k.push(sys.deriv(t + C[i] * h, &yi)?);
    }
    let mut y5 = y.clone();
    let mut e = DVector::zeros(y.len());
    for i in 0..7 {
        if B5[i] != 0.0 {
            y5.axpy(h * B5[i], &k[i], 1.0);
        }
        let d = B5[i] - B4[i];
        if d != 0.0 {
            e.axpy(h * d, &k[i], 1.0);
        }
    }
    let s: f64 = e
        .iter()
        .zip(y.iter().zip(y5.iter()))
        .map(|(ei, (a, b))| (ei / (abs + rel * a.abs().max(b.abs()))).powi(2))
        .sum();
    Ok((y5, (s / y.len() as f64).sqrt()))
}

const ORACLE_BASE_STEPS: usize = 10_000;
const ORACLE_MAX_DOUBLINGS: usize = 6;
const ORACLE_AGREEMENT: f64 = 1e-10;

/// High-resolution fixed-step RK4 solution at `t_end`: starts from
/// `h = 1e-4 t_end` and halves until two successive runs agree to `1e-10`.
/// Intended for tests.
pub fn reference_oracle(f: &FlowField, x0: &StateVector, t_end: f64) -> Result<StateVector> {
    check_dim(f.problem().dim(), x0.dim())?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(DsmError::Oracle(format!("t_end must be finite and >= 0, got {t_end}")));
    }
    let (sys, y0) = if f.kind().is_coupled() {
        let b0 = f.b0().expect("coupled flow carries B0");
        let m = b0.matrix().ncols();
        let mut y = DVector::zeros(x0.dim() + b0.matrix().len());
        y.rows_mut(0, x0.dim()).copy_from(x0.as_dvector());
        y.rows_mut(x0.dim(), b0.matrix().len()).copy_from_slice(b0.matrix().as_slice());
        (System { flow: f, coupled: Some(m) }, y)
    } else {
        (System { flow: f, coupled: None }, x0.as_dvector().clone())
    };
    if t_end == 0.0 {
        return Ok(x0.clone());
    }
    let solve = |steps: usize| -> Result<DVector<f64>> {
        let h = t_end / steps as f64;
        let mut y = y0.clone();
        for k in 0..steps {
            y = rk4_step(&sys, k as f64 * h, &y, h)?;
        }
        Ok(y.rows(0, x0.dim()).into_owned())
    };
    let mut steps = ORACLE_BASE_STEPS;
    let mut prev = solve(steps)?;
    for _ in 0..ORACLE_MAX_DOUBLINGS {
        steps *= 2;
        let next = solve(steps)?;
        let diff = (&next - &prev).amax();
        if diff <= ORACLE_AGREEMENT * next.amax().max(1.0) {
            return StateVector::from_dvector(next).map_err(|e| DsmError::Oracle(e.to_string()));
        }
        prev = next;
    }
    Err(DsmError::Oracle(format!(
        "no agreement to {ORACLE_AGREEMENT:e} after {ORACLE_MAX_DOUBLINGS} halvings"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_linear_problem, make_polynomial_problem};
    use crate::schedules::EpsilonSchedule;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    fn identity_flow(kind: FlowKind) -> FlowField {
        let p = make_linear_problem(LinearMap::from_rows(&[vec![1.0]]).unwrap(), sv(&[0.0])).unwrap();
        FlowField::new(kind, p, sv(&[1.0])).unwrap()
    }

    #[test]
    fn rk4_exponential_decay() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let tr = integrate_flow(&f, &sv(&[1.0]), &IntegratorConfig::rk4(0.01, 5.0, 0.5)).unwrap();
        assert_eq!(tr.stop_reason, StopReason::Horizon);
        assert_eq!(tr.samples.len(), 11);
        assert_eq!(tr.last().t, 5.0);
        assert!((tr.last().x.as_slice()[0] - (-5f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn adaptive_exponential_decay() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let tr = integrate_flow(&f, &sv(&[1.0]), &IntegratorConfig::adaptive(10.0, 0.1)).unwrap();
        let worst = tr
            .samples
            .iter()
            .map(|s| (s.x.as_slice()[0] - (-s.t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst:e}");
        let times = tr.times();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(times[0], 0.0);
        assert_eq!(tr.first().x.as_slice(), &[1.0]);
    }

    #[test]
    fn rk4_order() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let err = |h: f64| {
            let tr = integrate_flow(&f, &sv(&[1.0]), &IntegratorConfig::rk4(h, 2.0, 1.0)).unwrap();
            (tr.last().x.as_slice()[0] - (-2f64).exp()).abs()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn starting_at_solution_converges_immediately() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let cfg = IntegratorConfig::adaptive(5.0, 0.5).residual_below(1e-12);
        let tr = integrate_flow(&f, &sv(&[0.0]), &cfg).unwrap();
        assert_eq!(tr.samples.len(), 1);
        assert_eq!(tr.stop_reason, StopReason::Converged { residual: 0.0 });
    }

    #[test]
    fn residual_stop_on_linear_problem() {
        let a = LinearMap::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let p = make_linear_problem(a, sv(&[1.0, -1.0])).unwrap();
        let f = FlowField::new(FlowKind::ModifiedNewton, p, sv(&[0.0, 0.0])).unwrap();
        let cfg = IntegratorConfig::adaptive(100.0, 1.0).residual_below(1e-12);
        let tr = integrate_flow(&f, &sv(&[0.0, 0.0]), &cfg).unwrap();
        assert!(matches!(tr.stop_reason, StopReason::Converged { .. }));
        assert!(tr.last().t < 100.0 && tr.last().res_norm <= 1e-12);
    }

    #[test]
    fn ball_exit_records_first_outside_sample() {
        // x' = x from 1 leaves the unit ball around 1 at t = ln 2.
        let f = identity_flow(FlowKind::SimpleIteration);
        let p = make_linear_problem(LinearMap::from_rows(&[vec![-1.0]]).unwrap(), sv(&[0.0])).unwrap();
        let f2 = FlowField::new(FlowKind::SimpleIteration, p, sv(&[1.0])).unwrap();
        let cfg = IntegratorConfig::rk4(0.01, 5.0, 1.0).ball_exit(&sv(&[1.0]), 1.0);
        let tr = integrate_flow(&f2, &sv(&[1.0]), &cfg).unwrap();
        match tr.stop_reason {
            StopReason::BallExit { t, distance } => {
                assert!(distance > 1.0 && (t - 2f64.ln()).abs() < 0.011);
                assert_eq!(tr.last().t, t);
            }
            ref other => panic!("unexpected {other:?}"),
        }
        let tr = integrate_flow(&f, &sv(&[1.0]), &cfg).unwrap();
        assert_eq!(tr.stop_reason, StopReason::Horizon);
    }

    #[test]
    fn coupled_scalar_closed_form() {
        let p = make_linear_problem(LinearMap::from_rows(&[vec![1.0]]).unwrap(), sv(&[0.0])).unwrap();
        let b0 = LinearMap::from_rows(&[vec![0.5]]).unwrap();
        let f = FlowField::inverse_free(p, sv(&[1.0]), Some(b0)).unwrap();
        let tr = integrate_flow(&f, &sv(&[1.0]), &IntegratorConfig::adaptive(8.0, 0.25)).unwrap();
        assert_eq!(tr.first().w_norm, Some(0.5));
        for s in &tr.samples {
            let b = 1.0 - 0.5 * (-s.t).exp();
            let x = (-s.t - 0.5 * (-s.t).exp() + 0.5).exp();
            assert!((s.b_norm.unwrap() - b).abs() < 1e-8);
            assert!((s.x.as_slice()[0] - x).abs() < 1e-8);
            assert!((s.w_norm.unwrap() - 0.5 * (-s.t).exp()).abs() < 1e-8);
        }
        let bt = tr.final_operator.as_ref().unwrap()[(0, 0)];
        assert!((bt - (1.0 - 0.5 * (-8f64).exp())).abs() < 1e-8);
    }

    #[test]
    fn coupled_fixed_point_keeps_operator() {
        let a = LinearMap::from_rows(&[vec![2.0, 0.0], vec![1.0, 4.0]]).unwrap();
        let inv = LinearMap::from_rows(&[vec![0.5, 0.0], vec![-0.125, 0.25]]).unwrap();
        let p = make_linear_problem(a, sv(&[1.0, 1.0])).unwrap();
        let f = FlowField::inverse_free(p, sv(&[0.0, 0.0]), Some(inv.clone())).unwrap();
        let tr = integrate_coupled(&f, &CoupledState::new(sv(&[0.0, 0.0]), inv.clone()), &IntegratorConfig::adaptive(3.0, 1.0)).unwrap();
        assert!((tr.final_operator.unwrap() - inv.matrix()).amax() < 1e-14);
    }

    #[test]
    fn regularized_flow_records_eps_and_matches_oracle() {
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let f = FlowField::regularized(p, sv(&[0.01]), s).unwrap();
        let tr = integrate_flow(&f, &sv(&[0.01]), &IntegratorConfig::adaptive(10.0, 1.0)).unwrap();
        assert!(tr.samples.iter().all(|s| s.eps.is_some() && s.err_norm.is_some()));
        let oracle = reference_oracle(&f, &sv(&[0.01]), 10.0).unwrap();
        assert!((oracle.as_slice()[0] - tr.last().x.as_slice()[0]).abs() < 1e-6);
    }

    #[test]
    fn oracle_examples() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let x = reference_oracle(&f, &sv(&[1.0]), 1.0).unwrap();
        assert!((x.as_slice()[0] - (-1f64).exp()).abs() < 1e-10);
        let x = reference_oracle(&f, &sv(&[0.0]), 3.0).unwrap();
        assert_eq!(x.as_slice(), &[0.0]);

        let p = make_polynomial_problem(1.0, 2).unwrap();
        let f = FlowField::new(FlowKind::ModifiedNewton, p, sv(&[0.1, -0.05])).unwrap();
        let tr = integrate_flow(&f, &sv(&[0.1, -0.05]), &IntegratorConfig::adaptive(4.0, 1.0)).unwrap();
        let x = reference_oracle(&f, &sv(&[0.1, -0.05]), 4.0).unwrap();
        assert!(x.checked_sub(&tr.last().x).unwrap().euclidean_norm() < 1e-6);
    }

    #[test]
    fn csv_layout() {
        let f = identity_flow(FlowKind::ModifiedNewton);
        let tr = integrate_flow(&f, &sv(&[1.0]), &IntegratorConfig::rk4(0.1, 1.0, 0.5)).unwrap();
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0.0000000000000000e0,1.0000000000000000e0,1.0000000000000000e0,,,,,");
        assert_eq!(lines[2].split(',').count(), 8);
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::rk4(0.0, 1.0, 0.1).validate().is_err());
        assert!(IntegratorConfig::adaptive(-1.0, 0.1).validate().is_err());
        assert!(IntegratorConfig::adaptive(1.0, 0.0).validate().is_err());
        let mut c = IntegratorConfig::adaptive(1.0, 0.1);
        c.method = Method::Rk45Adaptive { abs_tol: 0.0, rel_tol: 1e-8 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn newton_singularity_propagates() {
        let p = make_polynomial_problem(1.0, 1).unwrap();
        let f = FlowField::new(FlowKind::Newton, p, sv(&[-0.5])).unwrap();
        let err = integrate_flow(&f, &sv(&[-0.5]), &IntegratorConfig::rk4(0.1, 1.0, 0.5)).unwrap_err();
        assert!(matches!(err, DsmError::SingularOperator { .. }));
    }
}
