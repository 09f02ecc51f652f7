//! Orchestration behind the `solve`, `check` and `sweep` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{Format, RunConfig};
use crate::error::{DsmError, Result};
use crate::flows::{FlowField, FlowKind};
use crate::hilbert::{LinearMap, StateVector};
use crate::integrate::{csv_num, initial_only, integrate_flow, Trajectory};
use crate::problems::{perturb_data, NoiseModel, Problem};
use crate::theory::{
    annotate_bounds, certify_generic_auto, certify_inverse_free_auto, certify_modified_newton_auto, certify_noise_auto,
    certify_regularized_auto, check_bounds, regularized_problem, BoundReport, Certificate, CertifyOptions, Verdict,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_UNCERTIFIED: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_BOUND_VIOLATED: i32 = 4;

/// Problem and starting point after data perturbation.
pub struct Setup {
    pub problem: Problem,
    pub x0: StateVector,
    pub b0: Option<LinearMap>,
    /// Noise level in the norm the certificate sees.
    pub delta: Option<f64>,
    pub notes: Vec<String>,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    let clean = cfg.problem.build()?;
    let x0 = cfg.flow.x0.build(&clean)?;
    let mut notes = Vec::new();
    let (problem, delta) = match (cfg.noise, cfg.noise_seed()) {
        (Some(n), Some(seed)) => {
            let p = perturb_data(&clean, &NoiseModel::new(n.delta, seed)?)?;
            let mut delta = n.delta;
            if cfg.flow.kind == FlowKind::RegularizedModifiedNewton {
                let (q, _) = regularized_problem(&p, &x0)?;
                if q.is_symmetrized() {
                    // The symmetrized data error is the adjoint image of the original one.
                    delta *= p.jacobian(&x0)?.operator_norm();
                    notes.push(format!("noise level scaled to {} for the symmetrized problem", csv_num(delta)));
                }
            }
            (p, Some(delta))
        }
        _ => (clean, None),
    };
    let b0 = match &cfg.flow.b0 {
        Some(spec) => Some(spec.build(&problem, &x0)?),
        None => None,
    };
    Ok(Setup {
        problem,
        x0,
        b0,
        delta,
        notes,
    })
}

fn options(cfg: &RunConfig) -> CertifyOptions {
    CertifyOptions {
        samples: cfg.certificate.samples,
        seed: cfg.seed,
        source_norm: cfg.certificate.source_norm,
    }
}

/// Certificate for the configured flow, computed without integrating.
pub fn certify(cfg: &RunConfig, s: &Setup) -> Result<Certificate> {
    let opts = options(cfg);
    let mut cert = match cfg.flow.kind {
        FlowKind::ModifiedNewton => certify_modified_newton_auto(&s.problem, &s.x0, &opts)?,
        FlowKind::InverseFree => {
            let b0 = match &s.b0 {
                Some(b) => b.clone(),
                None => LinearMap::zeros(s.problem.codomain_metric(), s.problem.domain_metric()),
            };
            let mut c = certify_inverse_free_auto(&s.problem, &s.x0, &b0, &opts)?;
            if s.b0.is_none() {
                c.notes.push("B0 defaulted to zero".into());
            }
            c
        }
        FlowKind::RegularizedModifiedNewton => {
            let sch = cfg.flow.schedule.as_ref().expect("validated config carries a schedule");
            match s.delta {
                Some(d) => certify_noise_auto(&s.problem, &s.x0, sch, d, &opts)?,
                None => certify_regularized_auto(&s.problem, &s.x0, sch, &opts)?,
            }
        }
        FlowKind::Newton | FlowKind::SimpleIteration | FlowKind::Gradient | FlowKind::GaussNewton => {
            let flow = FlowField::new(cfg.flow.kind, s.problem.clone(), s.x0.clone())?;
            certify_generic_auto(&flow, &opts)?
        }
    };
    cert.notes.extend(s.notes.iter().cloned());
    Ok(cert)
}

pub fn check_exit_code(cert: &Certificate) -> i32 {
    match cert.verdict {
        Verdict::Pass => EXIT_OK,
        Verdict::Fail => EXIT_UNCERTIFIED,
        Verdict::Degenerate => EXIT_DEGENERATE,
    }
}

pub struct RunOutcome {
    pub certificate: Certificate,
    pub trajectory: Option<Trajectory>,
    pub bounds: Option<BoundReport>,
    /// Why the flow could not be run at all.
    pub refused: Option<String>,
    pub delta: Option<f64>,
}

impl RunOutcome {
    pub fn violated(&self) -> bool {
        self.bounds.as_ref().is_some_and(BoundReport::violated)
    }

    pub fn exit_code(&self) -> i32 {
        if !self.certificate.certified() {
            EXIT_UNCERTIFIED
        } else if self.violated() {
            EXIT_BOUND_VIOLATED
        } else {
            EXIT_OK
        }
    }

    pub fn stopping_time(&self) -> Option<f64> {
        self.certificate.derived("stopping_time")
    }
}

fn build_flow(cfg: &RunConfig, s: &Setup) -> Result<FlowField> {
    let p = s.problem.clone();
    let x0 = s.x0.clone();
    match cfg.flow.kind {
        FlowKind::RegularizedModifiedNewton => {
            let sch = cfg.flow.schedule.expect("validated config carries a schedule");
            FlowField::regularized(p, x0, sch)
        }
        FlowKind::InverseFree => FlowField::inverse_free(p, x0, s.b0.clone()),
        kind => FlowField::new(kind, p, x0),
    }
}

/// Certifies, integrates and checks bounds. An uncertified configuration
/// still runs; it is refused only when the flow itself cannot be built.
pub fn solve(cfg: &RunConfig) -> Result<RunOutcome> {
    let s = setup(cfg)?;
    let cert = certify(cfg, &s)?;
    let flow = match build_flow(cfg, &s) {
        Ok(f) => f,
        Err(e) if !cert.certified() => {
            return Ok(RunOutcome {
                certificate: cert,
                trajectory: None,
                bounds: None,
                refused: Some(format!("run refused: {e}")),
                delta: s.delta,
            })
        }
        Err(e) => return Err(e),
    };
    let mut icfg = cfg.integrator.clone();
    let tau = cert.derived("stopping_time").filter(|t| t.is_finite());
    let mut traj = match tau {
        Some(0.0) => initial_only(&flow, &s.x0)?,
        Some(t) => {
            icfg.t_max = t;
            integrate_flow(&flow, &s.x0, &icfg)?
        }
        None => integrate_flow(&flow, &s.x0, &icfg)?,
    };
    annotate_bounds(&mut traj, &cert);
    let bounds = check_bounds(&traj, &cert, flow.problem());
    Ok(RunOutcome {
        certificate: cert,
        trajectory: Some(traj),
        bounds: Some(bounds),
        refused: None,
        delta: s.delta,
    })
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| DsmError::Io(e.to_string()))
}

fn write_file(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| DsmError::Io(format!("{}: {e}", path.display())))?;
    written.push(path);
    Ok(())
}

/// Writes the trajectory CSV and the certificate and bound reports.
pub fn write_outputs(out: &RunOutcome, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| DsmError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        if let Some(t) = &out.trajectory {
            write_file(dir.join("trajectory.csv"), &t.to_csv(), &mut written)?;
        }
    }
    if formats.contains(&Format::Report) {
        let mut cert = out.certificate.to_text();
        if let Some(r) = &out.refused {
            let _ = writeln!(cert, "note: {r}");
        }
        write_file(dir.join("certificate.txt"), &cert, &mut written)?;
        if let (Some(b), Some(t)) = (&out.bounds, &out.trajectory) {
            let mut text = b.to_text();
            let _ = writeln!(text, "stop_reason: {}", t.stop_reason.label());
            let _ = writeln!(text, "{}", t.summary().trim_end());
            write_file(dir.join("bounds.txt"), &text, &mut written)?;
        }
    }
    if formats.contains(&Format::Json) {
        write_file(dir.join("certificate.json"), &json(&out.certificate)?, &mut written)?;
        if let Some(b) = &out.bounds {
            write_file(dir.join("bounds.json"), &json(b)?, &mut written)?;
        }
    }
    Ok(written)
}

pub const SWEEP_HEADER: &str = "delta,tau,err_at_tau,bound_c4,certified,violated";

fn opt_num(v: Option<f64>) -> String {
    v.map(csv_num).unwrap_or_default()
}

pub fn sweep_row(out: &RunOutcome) -> String {
    let err = out.trajectory.as_ref().and_then(|t| t.last().err_norm);
    format!(
        "{},{},{},{},{},{}",
        opt_num(out.delta),
        opt_num(out.stopping_time()),
        opt_num(err),
        opt_num(out.certificate.derived("noisy_error_bound")),
        out.certificate.certified(),
        out.violated()
    )
}

pub struct SweepOutcome {
    pub runs: Vec<Result<RunOutcome>>,
    pub summary: String,
}

impl SweepOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.runs.iter().any(|r| r.is_err()) {
            EXIT_ERROR
        } else if self.runs.iter().flatten().any(|r| r.certificate.certified() && r.violated()) {
            EXIT_BOUND_VIOLATED
        } else {
            EXIT_OK
        }
    }
}

/// Runs every sweep entry in parallel, each writing into `dir/run_NNN`,
/// then writes `dir/sweep_summary.csv`.
pub fn sweep(cfg: &RunConfig, dir: &Path) -> Result<SweepOutcome> {
    let configs = cfg.expand_sweep()?;
    let runs: Vec<Result<RunOutcome>> = configs
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let out = solve(c)?;
            write_outputs(&out, &dir.join(format!("run_{k:03}")), &c.outputs.formats)?;
            Ok(out)
        })
        .collect();
    let mut summary = String::from(SWEEP_HEADER);
    summary.push('\n');
    for r in &runs {
        match r {
            Ok(out) => summary.push_str(&sweep_row(out)),
            Err(_) => summary.push_str(",,,,false,false"),
        }
        summary.push('\n');
    }
    fs::create_dir_all(dir).map_err(|e| DsmError::Io(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("sweep_summary.csv"), &summary).map_err(|e| DsmError::Io(e.to_string()))?;
    Ok(SweepOutcome { runs, summary })
}
