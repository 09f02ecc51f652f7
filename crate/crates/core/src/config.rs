//! JSON run configuration for the command-line driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DsmError, Result};
use crate::flows::{approximate_inverse_diagonal, FlowKind};
use crate::hilbert::{LinearMap, StateVector};
use crate::integrate::IntegratorConfig;
use crate::problems::{
    build_integral_problem, make_linear_problem, make_polynomial_problem, IntegralEquationSpec, Kernel, MetricChoice,
    Nonlinearity, Problem,
};
use crate::schedules::EpsilonSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub flow: FlowSpec,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// Merge patches applied to this configuration, one run each.
    #[serde(default)]
    pub sweep: Option<Vec<Value>>,
    #[serde(default)]
    pub certificate: CertificateSpec,
    /// Seeds constant sampling and, unless overridden there, the noise.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `F(x) = A (x - solution)`
    Linear { matrix: Vec<Vec<f64>>, solution: Vec<f64> },
    /// Componentwise `x + beta x^2` with solution zero.
    Polynomial {
        beta: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    /// Manufactured first-kind integral equation on `[0, 1]`.
    Integral {
        kernel: Kernel,
        nonlinearity: Nonlinearity,
        nodes: usize,
        #[serde(default)]
        domain_metric: MetricChoice,
        #[serde(default)]
        codomain_metric: MetricChoice,
        solution: SolutionShape,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionShape {
    /// `x(s) = s`
    Linear,
    Zero,
    Constant(f64),
    /// `x(s) = sin(pi s)`
    Sine,
}

impl SolutionShape {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            SolutionShape::Linear => s,
            SolutionShape::Zero => 0.0,
            SolutionShape::Constant(c) => c,
            SolutionShape::Sine => (std::f64::consts::PI * s).sin(),
        }
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        match self {
            ProblemSpec::Linear { matrix, solution } => {
                make_linear_problem(LinearMap::from_rows(matrix)?, StateVector::new(solution.clone())?)
            }
            ProblemSpec::Polynomial { beta, dim } => make_polynomial_problem(*beta, *dim),
            ProblemSpec::Integral {
                kernel,
                nonlinearity,
                nodes,
                domain_metric,
                codomain_metric,
                solution,
            } => {
                let (g, g_u) = nonlinearity.functions();
                let shape = *solution;
                let mut spec = IntegralEquationSpec::manufactured(kernel.function(), g, g_u, *nodes, move |s| shape.eval(s));
                spec.domain_metric = *domain_metric;
                spec.codomain_metric = *codomain_metric;
                build_integral_problem(&spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub x0: InitialPoint,
    /// Initial operator for the inverse-free flow; zero when absent.
    #[serde(default)]
    pub b0: Option<OperatorSpec>,
    #[serde(default)]
    pub schedule: Option<EpsilonSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialPoint {
    Vector(Vec<f64>),
    Shaped(ShapedPoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapedPoint {
    /// Every component equal.
    Constant(f64),
    /// The known solution shifted by a constant in every component.
    SolutionOffset(f64),
}

impl InitialPoint {
    pub fn build(&self, p: &Problem) -> Result<StateVector> {
        let x = match self {
            InitialPoint::Vector(v) => StateVector::new(v.clone())?,
            InitialPoint::Shaped(ShapedPoint::Constant(c)) => StateVector::constant(p.dim(), *c),
            InitialPoint::Shaped(ShapedPoint::SolutionOffset(c)) => {
                let xh = p
                    .known_solution()
                    .ok_or_else(|| DsmError::Config("flow.x0: solution_offset needs a known solution".into()))?;
                xh.checked_add(&StateVector::constant(p.dim(), *c))?
            }
        };
        if x.dim() != p.dim() {
            return Err(DsmError::Config(format!(
                "flow.x0: expected {} components, got {}",
                p.dim(),
                x.dim()
            )));
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Zero,
    Identity,
    /// Inverse of the diagonal of `F'(x0)`.
    DiagonalInverse,
    /// `[F'(x0)]^{-1}` itself.
    ExactInverse,
    ScaledIdentity(f64),
    Matrix(Vec<Vec<f64>>),
}

impl OperatorSpec {
    pub fn build(&self, p: &Problem, x0: &StateVector) -> Result<LinearMap> {
        let dom = p.domain_metric().clone();
        let cod = p.codomain_metric().clone();
        match self {
            OperatorSpec::Zero => Ok(LinearMap::zeros(&cod, &dom)),
            OperatorSpec::Identity => identity_between(p),
            OperatorSpec::ScaledIdentity(s) => identity_between(p)?.scaled(*s),
            OperatorSpec::DiagonalInverse => approximate_inverse_diagonal(p, x0),
            OperatorSpec::ExactInverse => {
                let j = p.jacobian(x0)?;
                let lu = j.factor_shifted(0.0).map_err(|e| e.in_scheme("exact_inverse"))?;
                let n = p.dim();
                LinearMap::new(lu.solve_matrix(&nalgebra::DMatrix::identity(n, n))?, cod, dom)
            }
            OperatorSpec::Matrix(rows) => {
                let m = LinearMap::from_rows(rows)?;
                LinearMap::new(m.matrix().clone(), cod, dom)
            }
        }
    }
}

fn identity_between(p: &Problem) -> Result<LinearMap> {
    if !p.is_square() {
        return Err(DsmError::Config("flow.b0: identity needs a square problem".into()));
    }
    let n = p.dim();
    LinearMap::new(
        nalgebra::DMatrix::identity(n, n),
        p.codomain_metric().clone(),
        p.domain_metric().clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Report,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Report]
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

impl OutputSpec {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub delta: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Bound on the source element norm when no solution is known.
    #[serde(default)]
    pub source_norm: Option<f64>,
}

fn default_samples() -> usize {
    24
}

impl Default for CertificateSpec {
    fn default() -> Self {
        CertificateSpec {
            samples: default_samples(),
            source_norm: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates; the error names the offending field and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            DsmError::Config(format!("{path}: {inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            DsmError::Config(msg) => DsmError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks that can fail without building anything.
    pub fn validate(&self) -> Result<()> {
        if self.flow.kind == FlowKind::RegularizedModifiedNewton && self.flow.schedule.is_none() {
            return Err(DsmError::Config("flow.schedule: required for the regularized flow".into()));
        }
        if self.flow.b0.is_some() && self.flow.kind != FlowKind::InverseFree {
            return Err(DsmError::Config(format!("flow.b0: only used by the inverse-free flow, not {}", self.flow.kind)));
        }
        if let Some(n) = &self.noise {
            if !(n.delta >= 0.0 && n.delta.is_finite()) {
                return Err(DsmError::Config(format!("noise.delta: must be finite and >= 0, got {}", n.delta)));
            }
        }
        if self.certificate.samples < 2 {
            return Err(DsmError::Config("certificate.samples: need at least 2".into()));
        }
        self.integrator
            .validate()
            .map_err(|e| DsmError::Config(format!("integrator: {e}")))
    }

    /// `--seed` replaces both the sampling seed and the noise seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(n) = &mut self.noise {
            n.seed = Some(seed);
        }
    }

    pub fn noise_seed(&self) -> Option<u64> {
        self.noise.map(|n| n.seed.unwrap_or(self.seed))
    }

    /// One configuration per sweep entry, each the base with the entry
    /// merged in (objects merge recursively, `null` deletes a key).
    pub fn expand_sweep(&self) -> Result<Vec<RunConfig>> {
        let entries = match &self.sweep {
            Some(e) if !e.is_empty() => e,
            _ => return Err(DsmError::Config("sweep: need a non-empty list of overrides".into())),
        };
        let mut base = serde_json::to_value(self).map_err(|e| DsmError::Config(e.to_string()))?;
        if let Value::Object(m) = &mut base {
            m.remove("sweep");
        }
        entries
            .iter()
            .enumerate()
            .map(|(k, patch)| {
                let mut v = base.clone();
                merge_patch(&mut v, patch);
                let text = v.to_string();
                RunConfig::from_json(&text).map_err(|e| match e {
                    DsmError::Config(msg) => DsmError::Config(format!("sweep[{k}]: {msg}")),
                    other => other,
                })
            })
            .collect()
    }
}

fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().expect("object");
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "problem": {"name": "polynomial", "beta": 1.0},
        "flow": {"kind": "regularized_modified_newton", "x0": [0.01],
                 "schedule": {"kind": "exponential", "a": 1.0, "b": 0.1}},
        "integrator": {"t_max": 60.0, "record_every": 0.5}
    }"#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_json(BASE).unwrap();
        assert_eq!(c.flow.kind, FlowKind::RegularizedModifiedNewton);
        assert_eq!(c.outputs, OutputSpec::default());
        assert_eq!(c.certificate.samples, 24);
        let p = c.problem.build().unwrap();
        assert_eq!(c.flow.x0.build(&p).unwrap().as_slice(), &[0.01]);
    }

    #[test]
    fn unknown_names_are_rejected_with_path() {
        let bad = BASE.replace("polynomial", "quartic");
        let err = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("problem") && err.contains("quartic"), "{err}");
        let bad = BASE.replace("\"beta\"", "\"betta\"");
        let err = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("betta"), "{err}");
        let bad = BASE.replace("regularized_modified_newton", "warp");
        assert!(RunConfig::from_json(&bad).unwrap_err().to_string().contains("flow.kind"));
        let err = RunConfig::from_json("{\n\"problem\": 3}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_schedule_is_a_config_error() {
        let bad = BASE.replace(r#""schedule": {"kind": "exponential", "a": 1.0, "b": 0.1}"#, r#""b0": null"#);
        let err = RunConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("flow.schedule"), "{err}");
    }

    #[test]
    fn shaped_points_and_operators() {
        let c = RunConfig::from_json(
            r#"{"problem": {"name": "linear", "matrix": [[2, 0], [0, 4]], "solution": [1, 1]},
                "flow": {"kind": "inverse_free", "x0": {"solution_offset": 0.5}, "b0": "exact_inverse"},
                "integrator": {"t_max": 1, "record_every": 0.5}}"#,
        )
        .unwrap();
        let p = c.problem.build().unwrap();
        let x0 = c.flow.x0.build(&p).unwrap();
        assert_eq!(x0.as_slice(), &[1.5, 1.5]);
        let b = c.flow.b0.unwrap().build(&p, &x0).unwrap();
        assert!((b.matrix()[(0, 0)] - 0.5).abs() < 1e-15 && (b.matrix()[(1, 1)] - 0.25).abs() < 1e-15);
        let s = OperatorSpec::ScaledIdentity(0.5).build(&p, &x0).unwrap();
        assert_eq!(s.matrix()[(1, 1)], 0.5);
    }

    #[test]
    fn sweep_expansion() {
        let text = BASE.replace(
            r#""integrator""#,
            r#""noise": {"delta": 0.01, "seed": 3},
               "sweep": [{"noise": {"delta": 0.001}}, {"noise": {"delta": 0.0001}, "seed": 9}],
               "integrator""#,
        );
        let c = RunConfig::from_json(&text).unwrap();
        let runs = c.expand_sweep().unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].noise.unwrap().delta, 0.001);
        assert_eq!(runs[0].noise_seed(), Some(3));
        assert_eq!(runs[1].seed, 9);
        assert!(runs.iter().all(|r| r.sweep.is_none()));

        let empty = BASE.replace(r#""integrator""#, r#""sweep": [], "integrator""#);
        assert!(RunConfig::from_json(&empty).unwrap().expand_sweep().is_err());
        assert!(RunConfig::from_json(BASE).unwrap().expand_sweep().is_err());
        let bad = BASE.replace(r#""integrator""#, r#""sweep": [{"noise": {"delta": -1}}], "integrator""#);
        let err = RunConfig::from_json(&bad).unwrap().expand_sweep().unwrap_err().to_string();
        assert!(err.contains("sweep[0]") && err.contains("noise.delta"), "{err}");
    }

    #[test]
    fn seed_override_reaches_noise() {
        let mut c = RunConfig::from_json(&BASE.replace(r#""integrator""#, r#""noise": {"delta": 0.01}, "integrator""#)).unwrap();
        assert_eq!(c.noise_seed(), Some(0));
        c.set_seed(11);
        assert_eq!((c.seed, c.noise_seed()), (11, Some(11)));
    }

    #[test]
    fn integral_problem_builds() {
        let c = RunConfig::from_json(
            r#"{"problem": {"name": "integral", "kernel": "exp_ts", "nonlinearity": "cubic", "nodes": 9,
                            "domain_metric": "h1", "codomain_metric": "l2", "solution": "linear"},
                "flow": {"kind": "modified_newton", "x0": {"constant": 0.5}},
                "integrator": {"method": {"kind": "rk4_fixed", "h": 0.01}, "t_max": 1, "record_every": 0.5}}"#,
        )
        .unwrap();
        let p = c.problem.build().unwrap();
        assert_eq!(p.dim(), 9);
        assert!(p.residual_norm(p.known_solution().unwrap()).unwrap() <= 1e-12);
    }
}
