//! Regularization schedules `eps(t)` and the inequalities that constrain them.

use serde::{Deserialize, Serialize};

use crate::check::{Condition, Relation};
use crate::error::{DsmError, Result};

/// Lipschitz constants below this are floored; conditions that divide by
/// the constant are then flagged as vacuous.
pub const LIPSCHITZ_FLOOR: f64 = 1e-14;

/// Returns the floored Lipschitz constant and whether flooring happened.
pub fn floor_lipschitz(m2: f64) -> (f64, bool) {
    if m2 < LIPSCHITZ_FLOOR {
        (LIPSCHITZ_FLOOR, true)
    } else {
        (m2, false)
    }
}

/// Positive, decreasing regularization parameter `eps(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// `a exp(-b t)`
    Exponential { a: f64, b: f64 },
    /// `a / (1 + t)^p`
    Rational { a: f64, p: f64 },
}

impl EpsilonSchedule {
    pub fn exponential(a: f64, b: f64) -> Result<Self> {
        let s = EpsilonSchedule::Exponential { a, b };
        s.check_params()?;
        Ok(s)
    }

    pub fn rational(a: f64, p: f64) -> Result<Self> {
        let s = EpsilonSchedule::Rational { a, p };
        s.check_params()?;
        Ok(s)
    }

    pub fn check_params(&self) -> Result<()> {
        let (a, rate) = match *self {
            EpsilonSchedule::Exponential { a, b } => (a, b),
            EpsilonSchedule::Rational { a, p } => (a, p),
        };
        if !(a > 0.0 && a.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(DsmError::InvalidSchedule(format!(
                "schedule parameters must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            EpsilonSchedule::Exponential { a, b } => a * (-b * t).exp(),
            EpsilonSchedule::Rational { a, p } => a / (1.0 + t).powf(p),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            EpsilonSchedule::Exponential { a, b } => -a * b * (-b * t).exp(),
            EpsilonSchedule::Rational { a, p } => -a * p / (1.0 + t).powf(p + 1.0),
        }
    }

    /// `eps'(t) / eps(t)`, evaluated in closed form.
    pub fn log_rate(&self, t: f64) -> f64 {
        match *self {
            EpsilonSchedule::Exponential { b, .. } => -b,
            EpsilonSchedule::Rational { p, .. } => -p / (1.0 + t),
        }
    }

    pub fn initial(&self) -> f64 {
        self.value(0.0)
    }

    /// `|eps'(0)|`
    pub fn initial_rate(&self) -> f64 {
        self.derivative(0.0).abs()
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self, EpsilonSchedule::Exponential { .. })
    }

    /// Time at which `eps` has fallen to `fraction * eps(0)`.
    fn time_to_fraction(&self, fraction: f64) -> f64 {
        match *self {
            EpsilonSchedule::Exponential { b, .. } => -fraction.ln() / b,
            EpsilonSchedule::Rational { p, .. } => fraction.powf(-1.0 / p) - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub name: String,
    pub pass: bool,
    /// Sample time at which the property failed.
    pub witness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub checks: Vec<ScheduleCheck>,
    /// Rational schedules go beyond the exponential family the feasibility
    /// test is stated for.
    pub beyond_exponential: bool,
}

impl ValidityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ScheduleCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

const VALIDATION_SAMPLES: usize = 100;

/// Checks positivity and strict decrease, monotonicity of `eps'/eps`, and
/// `eps(0) > |eps'(0)|` on 100 sample times spanning the decay of `eps`
/// down to `1e-12 eps(0)`.
pub fn validate(s: &EpsilonSchedule) -> ValidityReport {
    let horizon = s.time_to_fraction(1e-12);
    let times: Vec<f64> = (0..VALIDATION_SAMPLES)
        .map(|k| {
            let u = k as f64 / (VALIDATION_SAMPLES - 1) as f64;
            horizon * u * u
        })
        .collect();

    let mut decreasing = None;
    let mut rate_monotone = None;
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let (e0, e1) = (s.value(t0), s.value(t1));
        if decreasing.is_none() && !(e0 > 0.0 && e1 > 0.0 && e1 < e0) {
            decreasing = Some(t1);
        }
        let (r0, r1) = (s.log_rate(t0), s.log_rate(t1));
        if rate_monotone.is_none() && r1 < r0 - 1e-12 * r0.abs() {
            rate_monotone = Some(t1);
        }
    }
    let limit_ok = s.value(horizon) <= 1e-12 * s.initial() * (1.0 + 1e-9);
    if decreasing.is_none() && !limit_ok {
        decreasing = Some(horizon);
    }
    let initial_ok = s.initial() > s.initial_rate();

    ValidityReport {
        checks: vec![
            ScheduleCheck {
                name: "positive_decreasing_to_zero".into(),
                pass: decreasing.is_none(),
                witness: decreasing,
            },
            ScheduleCheck {
                name: "rate_ratio_nondecreasing".into(),
                pass: rate_monotone.is_none(),
                witness: rate_monotone,
            },
            ScheduleCheck {
                name: "eps0_exceeds_initial_rate".into(),
                pass: initial_ok,
                witness: (!initial_ok).then_some(0.0),
            },
        ],
        beyond_exponential: !s.is_exponential(),
    }
}

/// The validity predicates as numeric conditions on the same sample grid
/// as [`validate`].
pub fn schedule_conditions(s: &EpsilonSchedule) -> Vec<Condition> {
    let horizon = s.time_to_fraction(1e-12);
    let times: Vec<f64> = (0..VALIDATION_SAMPLES)
        .map(|k| {
            let u = k as f64 / (VALIDATION_SAMPLES - 1) as f64;
            horizon * u * u
        })
        .collect();
    let min_value = times.iter().map(|&t| s.value(t)).fold(f64::INFINITY, f64::min);
    let max_increment = times
        .windows(2)
        .map(|w| s.value(w[1]) - s.value(w[0]))
        .fold(f64::NEG_INFINITY, f64::max);
    let min_rate_change = times
        .windows(2)
        .map(|w| {
            let (r0, r1) = (s.log_rate(w[0]), s.log_rate(w[1]));
            r1 - r0 + 1e-12 * r0.abs()
        })
        .fold(f64::INFINITY, f64::min);
    vec![
        Condition::new("schedule_positive", min_value, Relation::Gt, 0.0),
        Condition::new("schedule_decreasing", max_increment, Relation::Lt, 0.0),
        Condition::new("schedule_rate_ratio_nondecreasing", min_rate_change, Relation::Ge, 0.0),
        Condition::new("schedule_initial_dominance", s.initial(), Relation::Gt, s.initial_rate()),
    ]
}

/// `(eps0 - |eps'(0)|) / (M2 + CG eps0)` from raw values.
pub fn rho_value(eps0: f64, initial_rate: f64, m2: f64, cg: f64) -> f64 {
    (eps0 - initial_rate) / (m2 + cg * eps0)
}

/// Radius of the ball around the solution in which the regularized flow is
/// confined.
pub fn rho(s: &EpsilonSchedule, m2: f64, cg: f64) -> Result<f64> {
    let report = validate(s);
    if let Some(bad) = report.failures().next() {
        return Err(DsmError::InvalidSchedule(format!("{} fails {}", describe(s), bad.name)));
    }
    let value = rho_value(s.initial(), s.initial_rate(), m2, cg);
    if !(value > 0.0) {
        return Err(DsmError::InvalidSchedule(format!("non-positive radius {value:e}")));
    }
    Ok(value)
}

pub fn describe(s: &EpsilonSchedule) -> String {
    match *s {
        EpsilonSchedule::Exponential { a, b } => format!("{a}*exp(-{b}*t)"),
        EpsilonSchedule::Rational { a, p } => format!("{a}/(1+t)^{p}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `sqrt(2 ||v|| M2)`, which must be below one.
    pub root_term: f64,
    pub root_ok: bool,
    /// `b + a CG sqrt(2 ||v|| / M2)`
    pub lhs: f64,
    /// `1 - sqrt(2 ||v|| M2)`
    pub rhs: f64,
    pub slack: f64,
    pub feasible: bool,
    /// The Lipschitz constant was floored: the inequality is formally
    /// satisfiable for any schedule and says nothing.
    pub degenerate: bool,
}

/// Sufficient condition on `a e^{-bt}` for the source-condition inequality.
pub fn feasibility_exponential(a: f64, b: f64, m2: f64, cg: f64, v_norm: f64) -> FeasibilityReport {
    let (m2, degenerate) = floor_lipschitz(m2);
    let root_term = (2.0 * v_norm * m2).sqrt();
    let lhs = b + a * cg * (2.0 * v_norm / m2).sqrt();
    let rhs = 1.0 - root_term;
    FeasibilityReport {
        root_term,
        root_ok: root_term < 1.0,
        lhs,
        rhs,
        slack: rhs - lhs,
        feasible: root_term < 1.0 && lhs <= rhs,
        degenerate,
    }
}

/// `eps0 - |eps'(0)| >= [M2 + CG eps0] eps0 sqrt(2 ||v|| / M2)`.
pub fn check_source_inequality(s: &EpsilonSchedule, m2: f64, cg: f64, v_norm: f64) -> Condition {
    source_inequality("source_inequality", s, m2, cg, (2.0 * v_norm).sqrt())
}

/// Noisy-data variant with `2 sqrt(||v|| / M2)` in place of `sqrt(2 ||v|| / M2)`.
pub fn check_source_inequality_noisy(s: &EpsilonSchedule, m2: f64, cg: f64, v_norm: f64) -> Condition {
    source_inequality("source_inequality_noisy", s, m2, cg, 2.0 * v_norm.sqrt())
}

fn source_inequality(name: &str, s: &EpsilonSchedule, m2: f64, cg: f64, numerator: f64) -> Condition {
    let (m2, degenerate) = floor_lipschitz(m2);
    let eps0 = s.initial();
    let lhs = eps0 - s.initial_rate();
    let rhs = if numerator == 0.0 {
        0.0
    } else {
        (m2 + cg * eps0) * eps0 * numerator / m2.sqrt()
    };
    Condition::new(name, lhs, Relation::Ge, rhs).vacuous(degenerate && numerator != 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingTime {
    pub tau: f64,
    /// `sqrt(delta / ||v||) >= eps(0)`: stop at once.
    pub noise_dominates: bool,
}

/// Time `tau` with `eps(tau) = sqrt(delta / ||v||)`, solved in closed form.
pub fn stopping_time(s: &EpsilonSchedule, delta: f64, v_norm: f64) -> Result<StoppingTime> {
    if !(delta > 0.0 && v_norm > 0.0) {
        return Err(DsmError::InvalidArgument(format!(
            "stopping time needs delta > 0 and ||v|| > 0 (got {delta:e}, {v_norm:e})"
        )));
    }
    let target = (delta / v_norm).sqrt();
    if target >= s.initial() {
        return Ok(StoppingTime {
            tau: 0.0,
            noise_dominates: true,
        });
    }
    let tau = match *s {
        EpsilonSchedule::Exponential { a, b } => (a / target).ln() / b,
        EpsilonSchedule::Rational { a, p } => (a / target).powf(1.0 / p) - 1.0,
    };
    Ok(StoppingTime {
        tau,
        noise_dominates: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const POLY_M2: f64 = 2.0;
    const POLY_CG: f64 = 2.0 / 1.02;
    const POLY_V: f64 = 0.01 / 1.02;

    #[test]
    fn validate_examples() {
        assert!(validate(&EpsilonSchedule::exponential(1.0, 0.5).unwrap()).passed());
        let r = validate(&EpsilonSchedule::exponential(1.0, 2.0).unwrap());
        assert!(!r.passed());
        let bad: Vec<_> = r.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(bad, ["eps0_exceeds_initial_rate"]);
        let r = validate(&EpsilonSchedule::rational(1.0, 0.5).unwrap());
        assert!(r.passed() && r.beyond_exponential);
    }

    #[test]
    fn schedule_conditions_agree_with_validate() {
        for s in [
            EpsilonSchedule::exponential(1.0, 0.5).unwrap(),
            EpsilonSchedule::exponential(1.0, 2.0).unwrap(),
            EpsilonSchedule::rational(1.0, 0.5).unwrap(),
            EpsilonSchedule::rational(1.0, 3.0).unwrap(),
        ] {
            let all = schedule_conditions(&s).iter().all(|c| c.pass);
            assert_eq!(all, validate(&s).passed(), "{s:?}");
        }
        let c = schedule_conditions(&EpsilonSchedule::exponential(1.0, 2.0).unwrap());
        let failing: Vec<_> = c.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        assert_eq!(failing, ["schedule_initial_dominance"]);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(EpsilonSchedule::exponential(1.0, 0.0).is_err());
        assert!(EpsilonSchedule::rational(-1.0, 1.0).is_err());
    }

    #[test]
    fn feasibility_examples() {
        // sqrt(2 * 0.5) = 1: boundary, infeasible.
        let r = feasibility_exponential(0.1, 0.1, 1.0, 0.0, 0.5);
        assert!(!r.root_ok && !r.feasible);

        let r = feasibility_exponential(1.0, 0.1, POLY_M2, POLY_CG, POLY_V);
        assert!(r.feasible);
        let root = (2.0 * POLY_V * POLY_M2).sqrt();
        assert!((r.rhs - (1.0 - root)).abs() < 1e-15);
        assert!((r.lhs - (0.1 + POLY_CG * (2.0 * POLY_V / POLY_M2).sqrt())).abs() < 1e-15);
        assert!((r.lhs - 0.294).abs() < 1e-3 && (r.rhs - 0.802).abs() < 1e-3);

        let r = feasibility_exponential(1e-9, 1e-9, 0.5, 3.0, 0.2);
        assert!(r.feasible);

        let r = feasibility_exponential(1.0, 0.1, 0.0, 0.0, 0.1);
        assert!(r.degenerate);
    }

    #[test]
    fn source_inequality_examples() {
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let c = check_source_inequality(&s, POLY_M2, POLY_CG, 0.0);
        assert!(c.pass && c.rhs == 0.0);

        let c = check_source_inequality(&s, POLY_M2, POLY_CG, POLY_V);
        assert!((c.lhs - 0.9).abs() < 1e-15);
        let expect = (POLY_M2 + POLY_CG) * (2.0 * POLY_V / POLY_M2).sqrt();
        assert!((c.rhs - expect).abs() < 1e-15);
        assert!((c.rhs - 0.392).abs() < 1e-3 && c.pass);

        let c2 = check_source_inequality(&s, POLY_M2, POLY_CG, 2.0 * POLY_V);
        assert!((c2.rhs / c.rhs - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn degenerate_lipschitz_is_vacuous() {
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let c = check_source_inequality(&s, 0.0, 1.0, 0.1);
        assert!(!c.pass && c.vacuous);
        let c = check_source_inequality(&s, 0.0, 0.0, 0.0);
        assert!(c.pass && !c.vacuous);
    }

    #[test]
    fn rho_examples() {
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let r = rho(&s, POLY_M2, POLY_CG).unwrap();
        assert!((r - 0.9 / (2.0 + POLY_CG)).abs() < 1e-15);
        assert!((r - 0.2272).abs() < 1e-4);

        let near = rho(&EpsilonSchedule::exponential(1.0, 0.999999).unwrap(), 1.0, 1.0).unwrap();
        assert!(near < 1e-6);
        assert_eq!(rho_value(1.0, 0.0, 1.0, 0.0), 1.0);

        assert!(rho(&EpsilonSchedule::exponential(1.0, 2.0).unwrap(), 1.0, 1.0).is_err());
    }

    #[test]
    fn stopping_time_examples() {
        let s = EpsilonSchedule::exponential(1.0, 0.1).unwrap();
        let v = 0.0098;
        let st = stopping_time(&s, 1e-4, v).unwrap();
        assert!(!st.noise_dominates);
        let target = (1e-4f64 / v).sqrt();
        assert!((target - 0.10102).abs() < 1e-5);
        assert!((st.tau - (-target.ln() / 0.1)).abs() < 1e-12);
        assert!((st.tau - 22.925).abs() < 1e-2);

        let st = stopping_time(&s, v, v).unwrap();
        assert_eq!(st.tau, 0.0);
        assert!(st.noise_dominates);

        let half = stopping_time(&s, 0.5e-4, v).unwrap();
        let full = stopping_time(&s, 1e-4, v).unwrap();
        assert!((s.value(half.tau) / s.value(full.tau) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((half.tau - full.tau - 2f64.sqrt().ln() / 0.1).abs() < 1e-10);

        assert!(stopping_time(&s, 0.0, 1.0).is_err());
    }

    #[test]
    fn rational_stopping_time() {
        let s = EpsilonSchedule::rational(2.0, 0.7).unwrap();
        let st = stopping_time(&s, 1e-3, 0.3).unwrap();
        let e = s.value(st.tau);
        assert!((e * e * 0.3 - 1e-3).abs() <= 1e-12 * 1e-3);
    }

    fn schedule_strategy() -> impl Strategy<Value = EpsilonSchedule> {
        prop_oneof![
            (0.05f64..5.0, 0.01f64..3.0).prop_map(|(a, b)| EpsilonSchedule::exponential(a, b).unwrap()),
            (0.05f64..5.0, 0.05f64..3.0).prop_map(|(a, p)| EpsilonSchedule::rational(a, p).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn stopping_time_hits_target(s in schedule_strategy(), delta in 1e-8f64..1e-2, v in 1e-3f64..10.0) {
            let st = stopping_time(&s, delta, v).unwrap();
            if st.tau > 0.0 {
                let e = s.value(st.tau);
                prop_assert!((e * e * v - delta).abs() <= 1e-12 * delta);
            }
        }

        #[test]
        fn source_inequality_matches_feasibility(a in 0.01f64..2.0, b in 0.01f64..0.99,
                                            m2 in 0.01f64..5.0, cg in 0.0f64..5.0, v in 0.0f64..0.5) {
            let s = EpsilonSchedule::exponential(a, b).unwrap();
            let c = check_source_inequality(&s, m2, cg, v);
            let f = feasibility_exponential(a, b, m2, cg, v);
            // Equivalent up to rounding; skip the knife edge.
            if c.slack.abs() > 1e-12 * c.lhs.abs().max(1.0) {
                prop_assert_eq!(c.pass, f.feasible);
            }
        }

        #[test]
        fn rho_formula_and_monotonicity(a in 0.01f64..2.0, b in 0.01f64..0.99, m2 in 0.01f64..5.0,
                                        cg in 0.0f64..5.0, dcg in 0.01f64..1.0) {
            let s = EpsilonSchedule::exponential(a, b).unwrap();
            let r = rho(&s, m2, cg).unwrap();
            let back = r * (m2 + cg * s.initial());
            prop_assert!((back - (s.initial() - s.initial_rate())).abs() <= 1e-12 * back.abs().max(1e-300));
            prop_assert!(rho(&s, m2, cg + dcg).unwrap() < r);
        }

        #[test]
        fn noisy_inequality_implies_exact(s in schedule_strategy(), m2 in 0.01f64..5.0,
                                          cg in 0.0f64..5.0, v in 0.0f64..0.5) {
            let d = check_source_inequality_noisy(&s, m2, cg, v);
            let e = check_source_inequality(&s, m2, cg, v);
            if d.pass {
                prop_assert!(e.pass);
            }
            prop_assert!(d.rhs >= e.rhs);
        }

        #[test]
        fn valid_exponential_schedules(a in 0.01f64..5.0, b in 0.01f64..0.99) {
            // eps(0) > |eps'(0)| reads a > a b.
            let s = EpsilonSchedule::exponential(a, b).unwrap();
            prop_assert!(validate(&s).passed());
        }
    }
}
