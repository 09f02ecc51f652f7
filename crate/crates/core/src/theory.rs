//! Constant estimation, hypothesis certificates and runtime bound checks.
//!
//! A [`Certificate`] evaluates every hypothesis of a convergence result for
//! a concrete problem and anchor point, and carries the constants the
//! result promises. [`check_bounds`] then compares a recorded trajectory
//! against those promises.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::check::{fmt_num, num, Condition, Relation};
use crate::error::{DsmError, Result};
use crate::flows::{FlowField, FlowKind, NONNEGATIVITY_TOL};
use crate::hilbert::{GramMetric, LinearMap, StateVector};
use crate::integrate::{Column, Trajectory};
use crate::problems::{symmetrize, Problem};
use crate::schedules::{
    check_source_inequality, check_source_inequality_noisy, feasibility_exponential, floor_lipschitz, rho_value, schedule_conditions,
    stopping_time, EpsilonSchedule,
};

/// Observed/bound ratios up to this value are attributed to integration error.
pub const BOUND_TOLERANCE: f64 = 1.0 + 1e-6;
/// Below this `min |g_u(s, x0(s))|` no certificate is issued for integral equations.
pub const KAPPA_FLOOR: f64 = 1e-8;
/// Two growth rates closer than this use the resonant (linear-in-t) defect bound.
pub const RESONANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Supplied in closed form by the problem.
    Analytic,
    /// Maximum or minimum over sample points; a one-sided estimate.
    Sampled,
    /// Exact linear algebra at a single point.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    #[serde(with = "num")]
    pub value: f64,
    pub source: Provenance,
    /// Sampled value, kept as a consistency check when `value` is analytic.
    #[serde(with = "num::opt", default)]
    pub sampled: Option<f64>,
}

impl Constant {
    fn sampled(v: f64) -> Self {
        Constant {
            value: v,
            source: Provenance::Sampled,
            sampled: Some(v),
        }
    }

    fn prefer_analytic(sampled: f64, analytic: Option<f64>) -> Self {
        match analytic {
            Some(a) => Constant {
                value: a,
                source: Provenance::Analytic,
                sampled: Some(sampled),
            },
            None => Constant::sampled(sampled),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    #[serde(with = "num")]
    pub radius: f64,
}

/// Constants entering the hypotheses, estimated on a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// `sup ||F'(x)||`
    pub jacobian_bound: Constant,
    /// Lipschitz constant of `F'`.
    pub lipschitz: Constant,
    /// `||[F'(x0)]^{-1}||`; absent when `F'(x0)` is singular.
    #[serde(with = "num::opt", default)]
    pub anchor_inverse_norm: Option<f64>,
    /// `inf sigma_min(F'(x))^2`, so that `||[F'(x)]^{-1}||^2 <= 1 / value`.
    pub inverse_bound: Constant,
    /// `sup ||G(x0, x) - I|| / ||x - x0||` with `F'(x) = F'(x0) G(x0, x)`.
    pub structural: Option<Constant>,
    #[serde(with = "num::opt", default)]
    pub kappa_min: Option<f64>,
    /// Norm of the minimum-norm `v` with `F'(x0) v = x_hat - x0`.
    #[serde(with = "num::opt", default)]
    pub source_norm: Option<f64>,
    /// Relative residual of that solve.
    #[serde(with = "num::opt", default)]
    pub source_residual: Option<f64>,
    pub anchor: Vec<f64>,
    pub ball: Ball,
    pub samples: usize,
    pub seed: u64,
    pub notes: Vec<String>,
}

fn primes(count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    let mut k = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= k).all(|&p| !k.is_multiple_of(p)) {
            out.push(k);
        }
        k += 1;
    }
    out
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut scale = inv;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// `count` points in the closed ball `||x - center||_metric <= radius`: the
/// center itself followed by a randomly shifted Halton sequence mapped
/// radially from the cube onto the ball.
pub fn ball_points(metric: &GramMetric, center: &DVector<f64>, radius: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let n = center.len();
    let bases = primes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(count);
    out.push(center.clone());
    for k in 1..count as u64 {
        let z = DVector::from_iterator(
            n,
            bases
                .iter()
                .zip(&shift)
                .map(|(&b, &s)| 2.0 * (radical_inverse(k, b) + s).fract() - 1.0),
        );
        let l2 = z.norm();
        let e = if l2 > 0.0 { &z * (radius * z.amax() / l2) } else { z };
        out.push(center + metric.euclidean_to_native(&e));
    }
    out
}

/// [`estimate_constants_anchored`] with the anchor at the ball center.
pub fn estimate_constants(p: &Problem, center: &StateVector, radius: f64, samples: usize, seed: u64) -> Result<ConstantEstimates> {
    estimate_constants_anchored(p, center, center, radius, samples, seed)
}

/// Estimates the hypothesis constants on the ball `U(radius, center)`;
/// quantities tied to the anchor (`||[F'(x0)]^{-1}||`, the structural
/// factor, the source element) use `anchor`.
pub fn estimate_constants_anchored(
    p: &Problem,
    anchor: &StateVector,
    center: &StateVector,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<ConstantEstimates> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(DsmError::InvalidArgument(format!("estimation radius must be > 0, got {radius}")));
    }
    if samples < 2 {
        return Err(DsmError::InvalidArgument(format!("need >= 2 samples, got {samples}")));
    }
    let dom = p.domain_metric();
    let points = ball_points(dom, center.as_dvector(), radius, samples, seed);
    let mut jacobians = Vec::with_capacity(points.len());
    for x in &points {
        jacobians.push(p.jacobian(&StateVector::from_dvector(x.clone())?)?);
    }
    let mut notes = Vec::new();

    let m1_sampled = jacobians.iter().map(LinearMap::operator_norm).fold(0.0, f64::max);
    let mut m2_sampled: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dom.norm_raw(&(&points[i] - &points[j]));
            if d > 0.0 {
                let diff = jacobians[i].checked_sub(&jacobians[j])?.operator_norm();
                m2_sampled = m2_sampled.max(diff / d);
            }
        }
    }
    let inverse_sampled = if p.is_square() {
        let mut c = f64::INFINITY;
        for j in &jacobians {
            let s = j.smallest_singular_value()?;
            c = c.min(s * s);
        }
        c
    } else {
        0.0
    };

    let j0 = p.jacobian(anchor)?;
    let anchor_inverse_norm = if p.is_square() {
        let s = j0.smallest_singular_value()?;
        if s > 1e-14 * j0.operator_norm() {
            Some(1.0 / s)
        } else {
            notes.push("F'(x0) is singular".into());
            None
        }
    } else {
        None
    };

    let lu = match anchor_inverse_norm {
        Some(_) => j0.factor_shifted(0.0).ok(),
        None => None,
    };
    let mut structural_sampled: Option<f64> = Some(0.0);
    for (x, j) in points.iter().zip(&jacobians) {
        let d = dom.norm_raw(&(x - anchor.as_dvector()));
        if d <= 1e-14 * (1.0 + anchor.euclidean_norm()) {
            continue;
        }
        let xs = StateVector::from_dvector(x.clone())?;
        let g = match p.structural_factor(anchor, &xs) {
            Some(g) => Some(g),
            None => match &lu {
                Some(lu) => Some(LinearMap::new(lu.solve_matrix(j.matrix())?, dom.clone(), dom.clone())?),
                None => None,
            },
        };
        match g {
            Some(g) => {
                let ratio = g.minus_identity()?.operator_norm() / d;
                structural_sampled = structural_sampled.map(|s| s.max(ratio));
            }
            None => {
                structural_sampled = None;
                break;
            }
        }
    }
    if structural_sampled.is_none() {
        notes.push("structural constant skipped: F'(x0) singular".into());
    }

    let hint = p.constants_hint(anchor, center, radius).unwrap_or_default();
    let structural = match (structural_sampled, hint.structural) {
        (Some(s), a) => Some(Constant::prefer_analytic(s, a)),
        (None, Some(a)) => Some(Constant {
            value: a,
            source: Provenance::Analytic,
            sampled: None,
        }),
        (None, None) => None,
    };

    let (source_norm, source_residual) = match p.error_reference() {
        Some(xh) if p.dim() == p.output_dim() => {
            let rhs = xh.checked_sub(anchor)?;
            let (v, rel) = j0.min_norm_solve(&rhs)?;
            if rel > 1e-6 {
                notes.push(format!("x_hat - x0 is not in the range of F'(x0) (relative residual {rel:e})"));
            }
            (Some(dom.norm(&v)?), Some(rel))
        }
        _ => (None, None),
    };

    Ok(ConstantEstimates {
        jacobian_bound: Constant::prefer_analytic(m1_sampled, hint.jacobian_bound),
        lipschitz: Constant::prefer_analytic(m2_sampled, hint.lipschitz),
        anchor_inverse_norm,
        inverse_bound: Constant::sampled(inverse_sampled),
        structural,
        kappa_min: p.kappa_min(anchor),
        source_norm,
        source_residual,
        anchor: anchor.as_slice().to_vec(),
        ball: Ball {
            center: center.as_slice().to_vec(),
            radius,
        },
        samples,
        seed,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Sampled dissipation hypotheses for a generic flow.
    GenericFlow,
    ModifiedNewton,
    InverseFree,
    Regularized,
    /// Regularized flow on noisy data, stopped at the noise-dependent time.
    NoisyData,
}

impl Theorem {
    pub fn name(self) -> &'static str {
        match self {
            Theorem::GenericFlow => "generic_flow",
            Theorem::ModifiedNewton => "modified_newton",
            Theorem::InverseFree => "inverse_free",
            Theorem::Regularized => "regularized",
            Theorem::NoisyData => "noisy_data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Every condition holds but the guarantee is vacuous or only sampled.
    Degenerate,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Degenerate => "degenerate",
        }
    }

    pub fn certified(self) -> bool {
        self != Verdict::Fail
    }
}

/// Which a-posteriori bound on `||F'(x(t)) B(t) - I||` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectForm {
    /// Equal rates: `(M2 ||F(x0)|| sigma^2 t + ||W(0)||) e^{-c t}`.
    Resonant,
    /// `(M2 ||F(x0)|| sigma^2 / |c - gamma| + ||W(0)||) e^{-min(gamma, c) t}`.
    Distinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub name: String,
    #[serde(with = "num")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub theorem: Theorem,
    pub verdict: Verdict,
    /// Whether trajectory bounds are claimed (false: informational only).
    pub bounds_asserted: bool,
    #[serde(with = "num")]
    pub residual_at_anchor: f64,
    pub anchor: Vec<f64>,
    pub constants: ConstantEstimates,
    pub derived: Vec<Derived>,
    pub conditions: Vec<Condition>,
    pub schedule: Option<EpsilonSchedule>,
    pub defect_form: Option<DefectForm>,
    pub notes: Vec<String>,
}

impl Certificate {
    pub fn derived(&self, name: &str) -> Option<f64> {
        self.derived.iter().find(|d| d.name == name).map(|d| d.value)
    }

    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn failing(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.pass && !c.vacuous)
    }

    pub fn certified(&self) -> bool {
        self.verdict.certified()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "theorem: {}", self.theorem.name());
        let _ = writeln!(s, "verdict: {}", self.verdict.name());
        let _ = writeln!(s, "bounds: {}", if self.bounds_asserted && self.certified() { "asserted" } else { "informational" });
        let _ = writeln!(s, "anchor: {}", fmt_vec(&self.anchor));
        let _ = writeln!(s, "residual_at_anchor: {}", fmt_num(self.residual_at_anchor));
        if let Some(sch) = &self.schedule {
            let _ = writeln!(s, "schedule: {}", crate::schedules::describe(sch));
        }
        let c = &self.constants;
        let _ = writeln!(
            s,
            "estimate_ball: radius {} around {} ({} samples, seed {})",
            fmt_num(c.ball.radius),
            fmt_vec(&c.ball.center),
            c.samples,
            c.seed
        );
        write_constant(&mut s, "jacobian_bound", &c.jacobian_bound);
        write_constant(&mut s, "lipschitz", &c.lipschitz);
        write_optional(&mut s, "anchor_inverse_norm", c.anchor_inverse_norm);
        write_constant(&mut s, "inverse_bound", &c.inverse_bound);
        match &c.structural {
            Some(k) => write_constant(&mut s, "structural", k),
            None => {
                let _ = writeln!(s, "structural: unavailable");
            }
        }
        write_optional(&mut s, "kappa_min", c.kappa_min);
        write_optional(&mut s, "source_norm", c.source_norm);
        for d in &self.derived {
            let _ = writeln!(s, "{}: {}", d.name, fmt_num(d.value));
        }
        if let Some(form) = self.defect_form {
            let _ = writeln!(s, "defect_form: {}", match form {
                DefectForm::Resonant => "resonant",
                DefectForm::Distinct => "distinct",
            });
        }
        for cond in &self.conditions {
            let _ = writeln!(s, "{cond}");
        }
        for n in c.notes.iter().chain(&self.notes) {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn fmt_vec(v: &[f64]) -> String {
    if v.len() <= 4 {
        format!("[{}]", v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", "))
    } else {
        format!("[{}, ... ({} entries)]", fmt_num(v[0]), v.len())
    }
}

fn write_constant(s: &mut String, name: &str, c: &Constant) {
    let src = match c.source {
        Provenance::Analytic => "analytic",
        Provenance::Sampled => "sampled",
        Provenance::Computed => "computed",
    };
    match (c.source, c.sampled) {
        (Provenance::Analytic, Some(sv)) => {
            let _ = writeln!(s, "{name}: {} ({src}; sampled {})", fmt_num(c.value), fmt_num(sv));
        }
        _ => {
            let _ = writeln!(s, "{name}: {} ({src})", fmt_num(c.value));
        }
    }
}

fn write_optional(s: &mut String, name: &str, v: Option<f64>) {
    match v {
        Some(v) => {
            let _ = writeln!(s, "{name}: {}", fmt_num(v));
        }
        None => {
            let _ = writeln!(s, "{name}: unavailable");
        }
    }
}

struct Draft {
    theorem: Theorem,
    derived: Vec<Derived>,
    conditions: Vec<Condition>,
    notes: Vec<String>,
    degenerate: bool,
    bounds_asserted: bool,
    schedule: Option<EpsilonSchedule>,
    defect_form: Option<DefectForm>,
}

impl Draft {
    fn new(theorem: Theorem) -> Self {
        Draft {
            theorem,
            derived: Vec::new(),
            conditions: Vec::new(),
            notes: Vec::new(),
            degenerate: false,
            bounds_asserted: true,
            schedule: None,
            defect_form: None,
        }
    }

    fn derive(&mut self, name: &str, value: f64) {
        self.derived.push(Derived {
            name: name.into(),
            value,
        });
    }

    fn finish(self, est: ConstantEstimates, f0: f64, anchor: &StateVector) -> Certificate {
        let failed = self.conditions.iter().any(|c| !c.pass && !c.vacuous);
        let vacuous = self.conditions.iter().any(|c| c.vacuous);
        let verdict = if failed {
            Verdict::Fail
        } else if self.degenerate || vacuous {
            Verdict::Degenerate
        } else {
            Verdict::Pass
        };
        let mut notes = self.notes;
        if verdict == Verdict::Fail {
            notes.push("uncertified; bounds informational".into());
        }
        Certificate {
            theorem: self.theorem,
            verdict,
            bounds_asserted: self.bounds_asserted,
            residual_at_anchor: f0,
            anchor: anchor.as_slice().to_vec(),
            constants: est,
            derived: self.derived,
            conditions: self.conditions,
            schedule: self.schedule,
            defect_form: self.defect_form,
            notes,
        }
    }
}

const LIPSCHITZ_DEGENERATE_NOTE: &str = "lipschitz-degenerate: Jacobian is constant on the ball, radius formally infinite";

/// Hypotheses of the convergence result for `x' = -[F'(x0)]^{-1} F(x)`.
/// `est` should be computed on the validity ball `U(1/(2 M2 m1), x0)`.
pub fn certify_modified_newton(p: &Problem, x0: &StateVector, est: &ConstantEstimates) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let mut d = Draft::new(Theorem::ModifiedNewton);
    let Some(m1) = est.anchor_inverse_norm else {
        d.conditions
            .push(Condition::new("anchor_jacobian_invertible", 0.0, Relation::Gt, 0.0));
        d.notes.push("singular operator: F'(x0) is not invertible".into());
        return Ok(d.finish(est.clone(), f0, x0));
    };
    d.conditions
        .push(Condition::new("anchor_jacobian_invertible", 1.0 / m1, Relation::Gt, 0.0));
    let m2 = est.lipschitz.value;
    let (_, degenerate) = floor_lipschitz(m2);
    let validity_radius = if degenerate { f64::INFINITY } else { 1.0 / (2.0 * m2 * m1) };
    let trajectory_radius = 2.0 * m1 * f0;
    d.conditions.push(Condition::new(
        "newton_smallness",
        4.0 * m2 * m1 * m1 * f0,
        Relation::Le,
        1.0,
    ));
    d.conditions.push(Condition::new(
        "radius_consistency",
        trajectory_radius,
        Relation::Le,
        validity_radius,
    ));
    if degenerate {
        d.degenerate = true;
        d.notes.push(LIPSCHITZ_DEGENERATE_NOTE.into());
    }
    d.derive("validity_radius", validity_radius);
    d.derive("trajectory_radius", trajectory_radius);
    d.derive("decay_rate", 0.5);
    d.derive("step_bound", m1);
    d.derive("error_coefficient", 2.0 * m1 * f0);
    Ok(d.finish(est.clone(), f0, x0))
}

/// Hypotheses of the convergence result for the inverse-free coupled flow.
/// `est` should be computed on `U(R, x0)`.
pub fn certify_inverse_free(p: &Problem, x0: &StateVector, b0: &LinearMap, est: &ConstantEstimates) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let mut d = Draft::new(Theorem::InverseFree);
    let j0 = p.jacobian(x0)?;
    let w0 = j0.compose(b0)?.minus_identity()?.operator_norm();
    let b0_norm = b0.operator_norm();
    let gamma = (1.0 - w0) / 2.0;
    let m1 = est.jacobian_bound.value;
    let m2 = est.lipschitz.value;
    let c = est.inverse_bound.value;
    let sigma = if c > 0.0 { m1 / c + b0_norm } else { f64::INFINITY };
    let (_, degenerate) = floor_lipschitz(m2);
    let radius = if degenerate {
        f64::INFINITY
    } else {
        gamma * c / (2.0 * m1 * m2 * sigma * sigma)
    };
    let smallness = (2.0 * m1 * m2 * sigma.powi(3) * f0 / c).sqrt();

    d.conditions.push(Condition::new("initial_defect", gamma, Relation::Gt, 0.0));
    d.conditions.push(Condition::new("inverse_bound_positive", c, Relation::Gt, 0.0));
    d.conditions.push(Condition::new(
        "coupled_smallness",
        if smallness.is_nan() { f64::INFINITY } else { smallness },
        Relation::Le,
        gamma,
    ));
    if let Some(xh) = p.error_reference() {
        let dist = p.domain_metric().norm(&xh.checked_sub(x0)?)?;
        d.conditions.push(Condition::new("solution_in_ball", dist, Relation::Le, radius));
    }
    if gamma <= 0.0 {
        d.notes.push("B0 too far from [F'(x0)]^{-1}".into());
    }
    if degenerate {
        d.degenerate = true;
        d.notes.push(LIPSCHITZ_DEGENERATE_NOTE.into());
    }
    let form = if (c - gamma).abs() < RESONANCE_TOL {
        DefectForm::Resonant
    } else {
        DefectForm::Distinct
    };
    d.defect_form = Some(form);
    let growth = m2 * f0 * sigma * sigma;
    d.derive("defect_margin", gamma);
    d.derive("operator_scale", sigma);
    d.derive("ball_radius", radius);
    d.derive("decay_rate", gamma);
    d.derive("initial_defect", w0);
    d.derive("initial_operator_norm", b0_norm);
    d.derive("error_coefficient", sigma * f0 / gamma);
    match form {
        DefectForm::Resonant => {
            d.derive("defect_growth", growth);
            d.derive("defect_rate", c);
        }
        DefectForm::Distinct => {
            let coefficient = if growth == 0.0 { w0 } else { growth / (c - gamma).abs() + w0 };
            d.derive("defect_coefficient", coefficient);
            d.derive("defect_rate", gamma.min(c));
        }
    }
    Ok(d.finish(est.clone(), f0, x0))
}

fn regularized_draft(
    theorem: Theorem,
    p: &Problem,
    x0: &StateVector,
    s: &EpsilonSchedule,
    est: &ConstantEstimates,
    noisy: bool,
) -> Result<(Draft, f64)> {
    let mut d = Draft::new(theorem);
    d.schedule = Some(*s);
    d.conditions.extend(schedule_conditions(s));
    let m2 = est.lipschitz.value;
    let (_, degenerate) = floor_lipschitz(m2);
    let cg = est.structural.map(|c| c.value);
    d.conditions.push(Condition::new(
        "structural_constant_finite",
        cg.unwrap_or(f64::INFINITY),
        Relation::Lt,
        f64::INFINITY,
    ));
    let cg = cg.unwrap_or(f64::INFINITY);

    let margin = if p.is_square() && p.domain_metric() == p.codomain_metric() {
        p.jacobian(x0)?.min_symmetric_eigenvalue()?
    } else {
        f64::NEG_INFINITY
    };
    d.conditions
        .push(Condition::new("nonnegativity", margin, Relation::Ge, -NONNEGATIVITY_TOL));

    let eps0 = s.initial();
    let rate0 = s.initial_rate();
    let rho = rho_value(eps0, rate0, m2, cg);
    if let Some(xh) = p.error_reference() {
        let dist = p.domain_metric().norm(&xh.checked_sub(x0)?)?;
        d.conditions.push(Condition::new("anchor_within_radius", dist, Relation::Lt, rho));
    }
    match est.source_norm {
        Some(v) => {
            let cond = if noisy {
                check_source_inequality_noisy(s, m2, cg, v)
            } else {
                check_source_inequality(s, m2, cg, v)
            };
            d.conditions.push(cond);
            if s.is_exponential() {
                if let EpsilonSchedule::Exponential { a, b } = *s {
                    let f = feasibility_exponential(a, b, m2, cg, v);
                    d.derive("feasibility_slack", f.slack);
                }
            }
        }
        None => {
            d.conditions
                .push(Condition::new("source_norm_available", 0.0, Relation::Gt, 0.0));
            d.notes
                .push("no reference solution and no source norm bound; supply one in the configuration".into());
        }
    }
    if let Some(k) = est.kappa_min {
        d.conditions.push(Condition::new("kappa_min", k, Relation::Ge, KAPPA_FLOOR));
    }
    if degenerate {
        d.degenerate = true;
        d.notes
            .push("lipschitz-degenerate: regularized bound formally vacuous, flow still runs".into());
    }
    if p.is_symmetrized() {
        d.notes.push("symmetrized: certificate refers to phi(x) = F'*(x0) F(x)".into());
    }
    if !s.is_exponential() {
        d.notes.push("rational schedule: beyond the exponential family".into());
    }
    let contraction = m2 * (eps0 - rate0) / (eps0 * (m2 + cg * eps0));
    d.derive("confinement_radius", rho);
    d.derive("bound_coefficient", rho / eps0);
    d.derive("contraction_constant", contraction);
    d.derive("eps0", eps0);
    d.derive("initial_rate", rate0);
    Ok((d, rho))
}

/// Hypotheses of the convergence result for the regularized flow on `p`
/// (which should already be the symmetrized problem if `F'(x0)` is not
/// non-negative). `est` should be computed on `U(rho, x_hat)`.
pub fn certify_regularized(p: &Problem, x0: &StateVector, s: &EpsilonSchedule, est: &ConstantEstimates) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let (d, _) = regularized_draft(Theorem::Regularized, p, x0, s, est, false)?;
    Ok(d.finish(est.clone(), f0, x0))
}

/// Noisy-data variant: the stronger source inequality, the stopping time
/// `eps(tau)^2 ||v|| = delta`, and the error bound at that time.
pub fn certify_noise(
    p: &Problem,
    x0: &StateVector,
    s: &EpsilonSchedule,
    est: &ConstantEstimates,
    delta: f64,
) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let (mut d, rho) = regularized_draft(Theorem::NoisyData, p, x0, s, est, true)?;
    d.conditions.push(Condition::new("noise_level_positive", delta, Relation::Gt, 0.0));
    let v = est.source_norm.unwrap_or(0.0);
    d.conditions.push(Condition::new("source_norm_positive", v, Relation::Gt, 0.0));
    if delta > 0.0 && v > 0.0 {
        let st = stopping_time(s, delta, v)?;
        let bound = rho * delta.sqrt() / (s.initial() * v.sqrt());
        d.derive("noise_level", delta);
        d.derive("stopping_time", st.tau);
        d.derive("noisy_error_bound", bound);
        if st.noise_dominates {
            d.notes.push("noise dominates: stopping at t = 0".into());
        }
        let exact = check_source_inequality(s, est.lipschitz.value, est.structural.map_or(f64::INFINITY, |c| c.value), v);
        let noisy = d.condition("source_inequality_noisy").cloned();
        if let Some(noisy) = noisy {
            d.derive("exact_source_slack", exact.slack);
            if exact.rhs > 0.0 {
                d.derive("noisy_to_exact_rhs_ratio", noisy.rhs / exact.rhs);
            }
        }
    }
    Ok(d.finish(est.clone(), f0, x0))
}

impl Draft {
    fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Sampled dissipation constants of a generic flow on the estimate ball:
/// `c1 = min -(F'(h) Phi(h), F(h)) / ||F(h)||^2` and
/// `c2 = max ||Phi(h)|| / ||F(h)||`. A finite sample cannot prove the
/// hypotheses, so the verdict is at best degenerate and no bound is asserted.
pub fn certify_generic_flow(flow: &FlowField, est: &ConstantEstimates) -> Result<Certificate> {
    if flow.kind().is_coupled() {
        return Err(DsmError::InvalidArgument("generic certificate needs a plain flow".into()));
    }
    let p = flow.problem();
    let x0 = flow.anchor();
    let f0 = p.residual_norm(x0)?;
    let center = DVector::from_column_slice(&est.ball.center);
    let points = ball_points(p.domain_metric(), &center, est.ball.radius, est.samples, est.seed);
    let (mut c1, mut c2) = (f64::INFINITY, 0.0f64);
    let cod = p.codomain_metric();
    for x in points {
        let h = StateVector::from_dvector(x)?;
        let f = p.residual(&h)?;
        let fn2 = cod.inner_raw(f.as_dvector(), f.as_dvector());
        if fn2 <= 1e-28 {
            continue;
        }
        let phi = match flow.rhs(&h, 0.0) {
            Ok(v) => v,
            Err(DsmError::SingularOperator { .. }) => {
                c1 = f64::NEG_INFINITY;
                continue;
            }
            Err(e) => return Err(e),
        };
        let jphi = p.jacobian(&h)?.apply(&phi)?;
        c1 = c1.min(-cod.inner_raw(jphi.as_dvector(), f.as_dvector()) / fn2);
        c2 = c2.max(p.domain_metric().norm_raw(phi.as_dvector()) / fn2.sqrt());
    }
    let mut d = Draft::new(Theorem::GenericFlow);
    d.bounds_asserted = false;
    d.degenerate = true;
    if !c1.is_finite() && c1 > 0.0 {
        c1 = 0.0;
    }
    let radius = c2 * f0 / c1;
    d.conditions.push(Condition::new("dissipation", c1, Relation::Gt, 0.0));
    d.conditions.push(Condition::new("step_bound_finite", c2, Relation::Lt, f64::INFINITY));
    d.conditions.push(Condition::new(
        "radius_consistency",
        if radius.is_nan() { f64::INFINITY } else { radius },
        Relation::Le,
        est.ball.radius,
    ));
    d.notes.push(format!("{}: hypotheses sampled, not proven; bounds informational", flow.kind()));
    d.derive("decay_rate", c1);
    d.derive("step_bound", c2);
    d.derive("trajectory_radius", radius);
    Ok(d.finish(est.clone(), f0, x0))
}

/// User-supplied ratio function `c(r) = c2/c1` of the radius: checks
/// `c(r) ||F(x0)|| <= r`.
pub fn check_ratio_radius(ratio: impl Fn(f64) -> f64, residual_at_anchor: f64, radius: f64) -> Condition {
    Condition::new("ratio_radius", ratio(radius) * residual_at_anchor, Relation::Le, radius)
}

/// Options for the certificate drivers that choose their own estimation ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Bound on `||v||` when the solution is unknown.
    #[serde(with = "num::opt", default)]
    pub source_norm: Option<f64>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            samples: 24,
            seed: 0,
            source_norm: None,
        }
    }
}

/// Estimates on a ball whose radius is itself a function of the constants:
/// estimate, recompute the radius, re-estimate, twice.
fn ball_fixed_point(
    initial: f64,
    estimate: impl Fn(f64) -> Result<ConstantEstimates>,
    radius_of: impl Fn(&ConstantEstimates) -> f64,
) -> Result<(ConstantEstimates, Vec<String>)> {
    let mut radius = initial;
    let mut est = estimate(radius)?;
    let mut history = vec![radius];
    for _ in 0..2 {
        let next = radius_of(&est);
        if !(next.is_finite() && next > 0.0) {
            break;
        }
        radius = next;
        est = estimate(radius)?;
        history.push(radius);
    }
    let mut notes = vec![format!(
        "estimation radii: {}",
        history.iter().map(|r| fmt_num(*r)).collect::<Vec<_>>().join(", ")
    )];
    let last = radius_of(&est);
    if last.is_finite() && last > 0.0 && history.len() > 1 && (last - radius).abs() > 1e-3 * radius {
        notes.push(format!("certificate ball unstable: radius {} after re-estimation", fmt_num(last)));
    }
    Ok((est, notes))
}

fn with_source(mut est: ConstantEstimates, opts: &CertifyOptions) -> ConstantEstimates {
    if est.source_norm.is_none() {
        est.source_norm = opts.source_norm;
    }
    est
}

fn initial_radius(scale: f64) -> f64 {
    if scale.is_finite() && scale > 1e-2 {
        scale
    } else {
        1e-2
    }
}

pub fn certify_modified_newton_auto(p: &Problem, x0: &StateVector, opts: &CertifyOptions) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let sigma = p.jacobian(x0)?.smallest_singular_value()?;
    let r0 = initial_radius(2.0 * f0 / sigma);
    let (est, notes) = ball_fixed_point(
        r0,
        |r| estimate_constants(p, x0, r, opts.samples, opts.seed),
        |e| match e.anchor_inverse_norm {
            Some(m1) => 1.0 / (2.0 * e.lipschitz.value * m1),
            None => f64::NAN,
        },
    )?;
    let mut cert = certify_modified_newton(p, x0, &with_source(est, opts))?;
    cert.notes.extend(notes);
    Ok(cert)
}

pub fn certify_inverse_free_auto(p: &Problem, x0: &StateVector, b0: &LinearMap, opts: &CertifyOptions) -> Result<Certificate> {
    let f0 = p.residual_norm(x0)?;
    let r0 = initial_radius(2.0 * f0 * (1.0 + b0.operator_norm()));
    let (est, notes) = ball_fixed_point(
        r0,
        |r| estimate_constants(p, x0, r, opts.samples, opts.seed),
        |e| {
            let cert = certify_inverse_free(p, x0, b0, e);
            cert.ok().and_then(|c| c.derived("ball_radius")).unwrap_or(f64::NAN)
        },
    )?;
    let mut cert = certify_inverse_free(p, x0, b0, &with_source(est, opts))?;
    cert.notes.extend(notes);
    Ok(cert)
}

/// Switches to the symmetrized problem when `F'(x0)` is not non-negative,
/// mirroring [`FlowField::regularized`].
pub fn regularized_problem(p: &Problem, x0: &StateVector) -> Result<(Problem, Option<String>)> {
    let margin = if p.is_square() && p.domain_metric() == p.codomain_metric() {
        Some(p.jacobian(x0)?.min_symmetric_eigenvalue()?)
    } else {
        None
    };
    match margin {
        Some(m) if m >= -NONNEGATIVITY_TOL => Ok((p.clone(), None)),
        _ => Ok((
            symmetrize(p, x0)?,
            Some(match margin {
                Some(m) => format!("symmetrized: F'(x0) has symmetric-part eigenvalue {m:e} < 0"),
                None => "symmetrized: F'(x0) does not map the space into itself".into(),
            }),
        )),
    }
}

fn regularized_estimates(
    p: &Problem,
    x0: &StateVector,
    s: &EpsilonSchedule,
    opts: &CertifyOptions,
) -> Result<(ConstantEstimates, Vec<String>)> {
    let center = p.error_reference().cloned().unwrap_or_else(|| x0.clone());
    let dist = p.domain_metric().norm(&center.checked_sub(x0)?)?;
    let r0 = initial_radius(2.0 * dist);
    let (est, notes) = ball_fixed_point(
        r0,
        |r| estimate_constants_anchored(p, x0, &center, r, opts.samples, opts.seed),
        |e| {
            let cg = e.structural.map_or(f64::INFINITY, |c| c.value);
            rho_value(s.initial(), s.initial_rate(), e.lipschitz.value, cg)
        },
    )?;
    Ok((with_source(est, opts), notes))
}

pub fn certify_regularized_auto(p: &Problem, x0: &StateVector, s: &EpsilonSchedule, opts: &CertifyOptions) -> Result<Certificate> {
    let (q, sym_note) = regularized_problem(p, x0)?;
    let (est, notes) = regularized_estimates(&q, x0, s, opts)?;
    let mut cert = certify_regularized(&q, x0, s, &est)?;
    cert.notes.extend(sym_note);
    cert.notes.extend(notes);
    Ok(cert)
}

pub fn certify_noise_auto(
    p: &Problem,
    x0: &StateVector,
    s: &EpsilonSchedule,
    delta: f64,
    opts: &CertifyOptions,
) -> Result<Certificate> {
    let (q, sym_note) = regularized_problem(p, x0)?;
    let (est, notes) = regularized_estimates(&q, x0, s, opts)?;
    let mut cert = certify_noise(&q, x0, s, &est, delta)?;
    cert.notes.extend(sym_note);
    cert.notes.extend(notes);
    Ok(cert)
}

pub fn certify_generic_auto(flow: &FlowField, opts: &CertifyOptions) -> Result<Certificate> {
    let p = flow.problem();
    let x0 = flow.anchor();
    let f0 = p.residual_norm(x0)?;
    let scale = match p.jacobian(x0)?.smallest_singular_value() {
        Ok(s) if s > 0.0 => 2.0 * f0 / s,
        _ => 1.0,
    };
    let (est, notes) = ball_fixed_point(
        initial_radius(scale),
        |r| estimate_constants(p, x0, r, opts.samples, opts.seed),
        |e| {
            certify_generic_flow(flow, e)
                .ok()
                .and_then(|c| c.derived("trajectory_radius"))
                .unwrap_or(f64::NAN)
        },
    )?;
    let mut cert = certify_generic_flow(flow, &with_source(est, opts))?;
    cert.notes.extend(notes);
    Ok(cert)
}

/// Certificate matching a constructed flow.
pub fn certify_flow(flow: &FlowField, opts: &CertifyOptions) -> Result<Certificate> {
    let p = flow.problem();
    let x0 = flow.anchor();
    let mut cert = match flow.kind() {
        FlowKind::ModifiedNewton => certify_modified_newton_auto(p, x0, opts)?,
        FlowKind::InverseFree => certify_inverse_free_auto(p, x0, flow.b0().expect("coupled flow carries B0"), opts)?,
        FlowKind::RegularizedModifiedNewton => {
            let s = flow.schedule().expect("regularized flow carries a schedule");
            let (est, notes) = regularized_estimates(p, x0, s, opts)?;
            let mut c = certify_regularized(p, x0, s, &est)?;
            c.notes.extend(notes);
            c
        }
        FlowKind::Newton | FlowKind::SimpleIteration | FlowKind::Gradient | FlowKind::GaussNewton => {
            certify_generic_auto(flow, opts)?
        }
    };
    for n in flow.notes() {
        if !cert.notes.contains(n) {
            cert.notes.push(n.clone());
        }
    }
    Ok(cert)
}

const SIMPSON_MAX_DEPTH: u32 = 50;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(DsmError::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth >= SIMPSON_MAX_DEPTH {
        return Err(DsmError::Quadrature(format!("no convergence on [{a}, {b}] at depth {depth}")));
    }
    Ok(adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth + 1)? + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth + 1)?)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    // Start from four panels so a symmetric integrand cannot fool the first test.
    let q = (b - a) / 4.0;
    let mut total = 0.0;
    for k in 0..4 {
        let (lo, hi) = (a + k as f64 * q, if k == 3 { b } else { a + (k + 1) as f64 * q });
        let (flo, fhi, fmid) = (f(lo), f(hi), f(0.5 * (lo + hi)));
        let panel = simpson(lo, hi, flo, fmid, fhi);
        total += adaptive(f, lo, hi, flo, fmid, fhi, panel, tol / 4.0, 0)?;
    }
    Ok(total)
}

pub const GRONWALL_TOL: f64 = 1e-10;

/// Bound on `||V(t)||` for `V' = -A(t) V + G(t)` with `(A h, h) >= zeta ||h||^2`:
/// `e^{-Z(t)} [ int_0^t ||G(s)|| e^{Z(s)} ds + ||V(0)|| ]`, `Z(t) = int_0^t zeta`.
pub fn gronwall_bound(zeta: impl Fn(f64) -> f64, g_norm: impl Fn(f64) -> f64, v0_norm: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(DsmError::InvalidArgument(format!("time must be finite and >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(v0_norm);
    }
    let zeta_ref: &dyn Fn(f64) -> f64 = &zeta;
    let z_t = adaptive_simpson(zeta_ref, 0.0, t, GRONWALL_TOL)?;
    let failure = std::cell::RefCell::new(None);
    let integrand = |s: f64| -> f64 {
        // Integrate zeta over [s, t] directly to avoid exp overflow.
        match adaptive_simpson(zeta_ref, s, t, GRONWALL_TOL) {
            Ok(tail) => g_norm(s) * (-tail).exp(),
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let forced = adaptive_simpson(&integrand, 0.0, t, GRONWALL_TOL);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(forced? + v0_norm * (-z_t).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub checked: usize,
    /// Largest observed/bound ratio.
    #[serde(with = "num")]
    pub max_ratio: f64,
    /// Sample time of the largest ratio.
    #[serde(with = "num")]
    pub worst_t: f64,
    pub violations: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    /// Violations count against the run.
    pub asserted: bool,
    pub checks: Vec<BoundCheck>,
    pub notes: Vec<String>,
}

impl BoundReport {
    pub fn violated(&self) -> bool {
        self.asserted && self.checks.iter().any(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "theorem: {}", self.theorem.name());
        let _ = writeln!(s, "status: {}", if self.asserted { "asserted" } else { "informational" });
        let _ = writeln!(s, "violated: {}", self.violated());
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{}: max_ratio={} at t={} checked={} violations={} [{}]",
                c.name,
                fmt_num(c.max_ratio),
                fmt_num(c.worst_t),
                c.checked,
                c.violations,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

type Envelope = Box<dyn Fn(f64) -> f64>;

/// Time-dependent bounds promised by a certificate.
struct Envelopes {
    residual: Option<(&'static str, Envelope)>,
    error: Option<(&'static str, Envelope)>,
    defect: Option<(&'static str, Envelope)>,
    operator: Option<(&'static str, Envelope)>,
    /// `(name, center, radius)`
    balls: Vec<(&'static str, Vec<f64>, f64)>,
    /// Error bound at the final sample only.
    terminal_error: Option<(&'static str, f64)>,
}

fn envelopes(cert: &Certificate) -> Envelopes {
    let f0 = cert.residual_at_anchor;
    let get = |n: &str| cert.derived(n).unwrap_or(f64::NAN);
    let mut e = Envelopes {
        residual: None,
        error: None,
        defect: None,
        operator: None,
        balls: Vec::new(),
        terminal_error: None,
    };
    match cert.theorem {
        Theorem::ModifiedNewton | Theorem::GenericFlow => {
            if cert.condition("anchor_jacobian_invertible").is_some_and(|c| !c.pass) {
                return e;
            }
            let rate = get("decay_rate");
            let radius = get("trajectory_radius");
            let coefficient = if cert.theorem == Theorem::ModifiedNewton {
                get("error_coefficient")
            } else {
                radius
            };
            e.residual = Some(("residual_envelope", Box::new(move |t| f0 * (-rate * t).exp())));
            e.error = Some(("error_envelope", Box::new(move |t| coefficient * (-rate * t).exp())));
            e.balls.push(("trajectory_ball", cert.anchor.clone(), radius));
            if cert.theorem == Theorem::ModifiedNewton {
                e.balls.push(("validity_ball", cert.anchor.clone(), get("validity_radius")));
            }
        }
        Theorem::InverseFree => {
            let gamma = get("decay_rate");
            let coefficient = get("error_coefficient");
            e.residual = Some(("residual_envelope", Box::new(move |t| f0 * (-gamma * t).exp())));
            e.error = Some(("error_envelope", Box::new(move |t| coefficient * (-gamma * t).exp())));
            let w0 = get("initial_defect");
            let rate = get("defect_rate");
            match cert.defect_form {
                Some(DefectForm::Resonant) => {
                    let growth = get("defect_growth");
                    e.defect = Some(("defect_envelope", Box::new(move |t| (growth * t + w0) * (-rate * t).exp())));
                }
                _ => {
                    let coefficient = get("defect_coefficient");
                    e.defect = Some(("defect_envelope", Box::new(move |t| coefficient * (-rate * t).exp())));
                }
            }
            let m1 = cert.constants.jacobian_bound.value;
            let c = cert.constants.inverse_bound.value;
            let b0 = get("initial_operator_norm");
            e.operator = Some((
                "operator_bound",
                Box::new(move |t| gronwall_bound(|_| c, |_| m1, b0, t).unwrap_or(f64::NAN)),
            ));
            e.balls.push(("coupled_ball", cert.anchor.clone(), get("ball_radius")));
        }
        Theorem::Regularized => {
            let coefficient = get("bound_coefficient");
            if let Some(s) = cert.schedule {
                e.error = Some(("regularized_error_envelope", Box::new(move |t| coefficient * s.value(t))));
            }
            // The confinement ball is centered at the solution.
        }
        Theorem::NoisyData => {
            if let Some(b) = cert.derived("noisy_error_bound") {
                e.terminal_error = Some(("noisy_error_bound", b));
            }
        }
    }
    e
}

struct Tally {
    name: String,
    checked: usize,
    max_ratio: f64,
    worst_t: f64,
    violations: usize,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally {
            name: name.into(),
            checked: 0,
            max_ratio: 0.0,
            worst_t: 0.0,
            violations: 0,
        }
    }

    fn add(&mut self, t: f64, observed: f64, bound: f64) {
        let ratio = if observed == 0.0 {
            0.0
        } else if bound > 0.0 {
            observed / bound
        } else {
            f64::INFINITY
        };
        let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
        self.checked += 1;
        if ratio > self.max_ratio || self.checked == 1 {
            self.max_ratio = self.max_ratio.max(ratio);
            if ratio >= self.max_ratio {
                self.worst_t = t;
            }
        }
        if ratio > BOUND_TOLERANCE {
            self.violations += 1;
        }
    }

    fn finish(self) -> BoundCheck {
        BoundCheck {
            pass: self.violations == 0,
            name: self.name,
            checked: self.checked,
            max_ratio: self.max_ratio,
            worst_t: self.worst_t,
            violations: self.violations,
        }
    }
}

/// Writes the residual and error bounds of `cert` into the trajectory's
/// `bound_res` / `bound_err` columns.
pub fn annotate_bounds(traj: &mut Trajectory, cert: &Certificate) {
    let env = envelopes(cert);
    let last = traj.samples.len().saturating_sub(1);
    for (i, s) in traj.samples.iter_mut().enumerate() {
        s.bound_res = env.residual.as_ref().map(|(_, f)| f(s.t));
        s.bound_err = env.error.as_ref().map(|(_, f)| f(s.t));
        if let Some((_, b)) = env.terminal_error {
            s.bound_err = (i == last).then_some(b);
        }
    }
}

/// Evaluates every bound of `cert` at every sample of `traj`.
pub fn check_bounds(traj: &Trajectory, cert: &Certificate, problem: &Problem) -> BoundReport {
    let env = envelopes(cert);
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    let asserted = cert.certified() && cert.bounds_asserted;
    if !asserted {
        notes.push("uncertified; bounds informational".into());
    }

    if let Some((name, f)) = &env.residual {
        let mut t = Tally::new(name);
        for s in &traj.samples {
            t.add(s.t, s.res_norm, f(s.t));
        }
        checks.push(t.finish());
    }
    let error_column = traj.has_column(Column::ErrNorm);
    for (name, f) in env.error.iter() {
        if !error_column {
            notes.push(format!("{name} skipped: no reference solution"));
            continue;
        }
        let mut t = Tally::new(name);
        for s in &traj.samples {
            if let Some(e) = s.err_norm {
                t.add(s.t, e, f(s.t));
            }
        }
        checks.push(t.finish());
    }
    if let Some((name, b)) = env.terminal_error {
        match traj.last().err_norm {
            Some(e) => {
                let mut t = Tally::new(name);
                t.add(traj.last().t, e, b);
                checks.push(t.finish());
            }
            None => notes.push(format!("{name} skipped: no reference solution")),
        }
    }
    let operator_checks = [(env.defect.as_ref(), Column::WNorm), (env.operator.as_ref(), Column::BNorm)];
    for (name, column, f) in operator_checks
        .into_iter()
        .filter_map(|(e, c)| e.map(|(n, f)| (n, c, f)))
    {
        if !traj.has_column(column) {
            notes.push(format!("{name} skipped: column {} absent", column.name()));
            continue;
        }
        let mut t = Tally::new(name);
        for s in &traj.samples {
            if let Some(v) = s.get(column) {
                t.add(s.t, v, f(s.t));
            }
        }
        checks.push(t.finish());
    }
    let dom = problem.domain_metric();
    for (name, center, radius) in &env.balls {
        if center.len() != problem.dim() || radius.is_nan() {
            continue;
        }
        let c = DVector::from_column_slice(center);
        let mut t = Tally::new(name);
        for s in &traj.samples {
            t.add(s.t, dom.norm_raw(&(s.x.as_dvector() - &c)), *radius);
        }
        checks.push(t.finish());
    }
    if cert.theorem == Theorem::Regularized {
        if let (Some(xh), Some(rho)) = (problem.error_reference(), cert.derived("confinement_radius")) {
            let mut t = Tally::new("confinement_ball");
            for s in &traj.samples {
                t.add(s.t, dom.norm_raw(&(s.x.as_dvector() - xh.as_dvector())), rho);
            }
            checks.push(t.finish());
        }
    }
    BoundReport {
        theorem: cert.theorem,
        asserted,
        checks,
        notes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `lambda` in `value ~ C e^{-lambda t}`.
    pub rate: f64,
    pub amplitude: f64,
    /// RMS residual of the log-linear fit.
    pub rms: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
}

/// Least-squares fit of `log(value)` against `t` over the final half of
/// the samples, skipping non-positive values.
pub fn fit_decay(traj: &Trajectory, column: Column) -> Result<DecayFit> {
    let data = traj.column(column);
    let tail = &data[data.len() / 2..];
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(DsmError::InvalidArgument(format!(
            "decay fit of {} needs >= 5 positive samples, got {}",
            column.name(),
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let rms = (pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(DecayFit {
        rate: -slope + 0.0,
        amplitude: intercept.exp(),
        rms,
        t_start: pts[0].0,
        t_end: pts[pts.len() - 1].0,
        samples: pts.len(),
    })
}
