//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use symabs::certificates::{
    self, FalsifierDomain, KLBound, LyapunovVerdict, MultiplierVerdict, Sampling, FEASIBILITY_TOL,
};
use symabs::hierarchy::{cosimulate, pair_initial, HierarchyError, PairedRun};
use symabs::planner::{self, LatticeGraph, Plan, PlanError, RefinedPlan};
use symabs::systems::{sample_disturbance, InputSet, Signal};
use symabs::{Aabb, LatticePoint, Vector};

use crate::config::{AbstractInput, Experiment};
use crate::{CliError, Outcome};

/// Half-width of the sampling boxes used by the falsifiers.
pub const FALSIFIER_RADIUS: f64 = 5.0;
/// Slack on the comparison envelope check.
pub const ENVELOPE_TOL: f64 = 1e-9;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

fn box_json(b: &Aabb) -> Value {
    json!({ "lo": b.lo(), "hi": b.hi() })
}

fn input_set_json(s: &InputSet) -> Value {
    match s {
        InputSet::Box(b) => box_json(b),
        InputSet::Unbounded(_) => Value::Null,
    }
}

pub fn verify_certificate(exp: &Experiment) -> Result<Outcome, CliError> {
    let report = certificates::check_matrix_inequality(&exp.iqc, &exp.certificate, FEASIBILITY_TOL)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sampling = Sampling {
        seed: exp.seed,
        ..Sampling::default()
    };
    let n = exp.iqc.state_dim();
    let multiplier = if exp.iqc.le() == 0 {
        "not-applicable".to_string()
    } else {
        let domain = Aabb::symmetric(exp.iqc.lp(), FALSIFIER_RADIUS).expect("finite radius");
        match certificates::check_multiplier(&exp.iqc.p, &exp.certificate.m, &domain, (0.0, exp.horizon), sampling)
            .map_err(|e| CliError::Config(e.to_string()))?
        {
            MultiplierVerdict::Pass { .. } => "pass".into(),
            MultiplierVerdict::Counterexample(_) => "counterexample".into(),
        }
    };
    let domain = FalsifierDomain {
        states: Aabb::symmetric(n, FALSIFIER_RADIUS).expect("finite radius"),
        time: (0.0, exp.horizon),
        inputs: Aabb::symmetric(exp.iqc.input_dim(), FALSIFIER_RADIUS).expect("finite radius"),
    };
    let lyapunov = match certificates::falsify_cgps_lyapunov(
        &exp.system,
        &exp.abstraction,
        &exp.interface,
        &exp.certificate,
        &domain,
        sampling,
    )
    .map_err(|e| CliError::Config(e.to_string()))?
    {
        LyapunovVerdict::Pass { .. } => "pass",
        LyapunovVerdict::Counterexample(_) => "counterexample",
    };
    let passed = report.feasible && multiplier != "counterexample" && lyapunov == "pass";
    let summary = json!({
        "command": "verify-certificate",
        "config": exp.name,
        "feasible": report.feasible,
        "max_eigenvalue": report.max_eigenvalue,
        "schur_max_eigenvalue": report.schur_max_eigenvalue,
        "alpha": exp.certificate.alpha,
        "multiplier": multiplier,
        "lyapunov": lyapunov,
        "samples": sampling.samples,
        "seed": exp.seed,
        "passed": passed,
    });
    write_json(&exp.output_dir, "verify-certificate.json", &summary)?;
    Ok(Outcome {
        summary,
        passed,
        failure_code: 3,
    })
}

pub fn bounds(exp: &Experiment) -> Result<Outcome, CliError> {
    let cert = &exp.certificate;
    let d = cert.derived();
    let w_bar = exp.w_bar();
    let verification = |e: certificates::CertError| CliError::Verification(e.to_string());
    let eta_max = certificates::eta_bound(cert, &exp.iqc.c, exp.epsilon, w_bar).map_err(verification)?;
    let eps_tilde = certificates::disturbance_bound(cert, &exp.iqc.c, exp.epsilon).map_err(verification)?;
    let spec = certificates::admissible_input_map(&exp.input_set, cert, exp.eta, w_bar).map_err(verification)?;
    let configured_inside = match (&exp.input_map, &spec.shrunk) {
        (InputSet::Box(cfg), InputSet::Box(adm)) => cfg.is_inside(adm),
        (_, InputSet::Unbounded(_)) => true,
        (InputSet::Unbounded(_), InputSet::Box(_)) => false,
    };
    let gains = cert.gains();
    let summary = json!({
        "command": "bounds",
        "config": exp.name,
        "epsilon": exp.epsilon,
        "eta": exp.eta,
        "eta_max": eta_max,
        "eps_tilde": eps_tilde,
        "disturbance_sup": w_bar,
        "disturbance_within_radius": w_bar < eps_tilde,
        "eta_condition": certificates::theorem2_eta_condition(&gains, 1.0, exp.epsilon, exp.eta, w_bar),
        "alpha": cert.alpha,
        "lambda_min": d.lambda_min,
        "lambda_max": d.lambda_max,
        "k1": d.k1,
        "k2": d.k2,
        "margin": spec.margin,
        "input_map": input_set_json(&spec.shrunk),
        "configured_input_map": input_set_json(&exp.input_map),
        "configured_input_map_admissible": configured_inside,
        "passed": true,
    });
    write_json(&exp.output_dir, "bounds.json", &summary)?;
    Ok(Outcome {
        summary,
        passed: true,
        failure_code: 3,
    })
}

/// Statistics of one paired run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub max_err: f64,
    pub admissible: bool,
    pub max_interface_deviation: f64,
    pub max_input: f64,
    pub envelope_ok: bool,
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn passed(&self, epsilon: f64) -> bool {
        self.failure.is_none() && self.admissible && self.max_err <= epsilon
    }
}

/// The abstract input of the experiment and the lattice point it starts at.
pub struct AbstractDrive {
    pub signal: Signal,
    pub start: LatticePoint,
    pub horizon: f64,
    pub plan: Option<(LatticeGraph, Plan, RefinedPlan)>,
}

fn plan_error(e: PlanError) -> CliError {
    match e {
        PlanError::InvalidWorkspace(_) => CliError::Config(e.to_string()),
        PlanError::EmptyTarget(_)
        | PlanError::Disconnected(_)
        | PlanError::StartNotInGraph(_)
        | PlanError::InvalidPlan(_) => CliError::Verification(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

pub fn abstract_drive(exp: &Experiment) -> Result<AbstractDrive, CliError> {
    let m = exp.iqc.input_dim();
    let start = pair_initial(&exp.abstraction, &exp.x0).map_err(|e| CliError::Config(e.to_string()))?;
    let simple = |signal| AbstractDrive {
        signal,
        start: start.clone(),
        horizon: exp.horizon,
        plan: None,
    };
    Ok(match &exp.abstract_input {
        AbstractInput::Zero => simple(Signal::zero(m)),
        AbstractInput::Constant { value } => simple(Signal::Constant(Vector::from_column_slice(value))),
        AbstractInput::LinearFeedback { gain } => {
            let g = *gain;
            simple(Signal::feedback(move |_, x| x * g))
        }
        AbstractInput::Plan => {
            let ws = exp
                .workspace
                .as_ref()
                .ok_or_else(|| CliError::Config("plan inputs need a workspace".into()))?;
            let q = exp.abstraction.quantizer();
            let graph = planner::build_grid(ws, q).map_err(plan_error)?;
            let plan = planner::plan_recurrence(&graph, &start).map_err(plan_error)?;
            planner::validate_plan(&plan, ws, q).map_err(plan_error)?;
            let refined = planner::waypoints_to_input(&plan, &exp.abstraction, &exp.input_map, &exp.refinement)
                .map_err(plan_error)?;
            AbstractDrive {
                signal: refined.signal.clone(),
                start,
                horizon: refined.horizon,
                plan: Some((graph, plan, refined)),
            }
        }
    })
}

fn trial(
    exp: &Experiment,
    drive: &AbstractDrive,
    index: usize,
    seed: u64,
) -> Result<(TrialRecord, Option<PairedRun>), CliError> {
    let span = (0.0, drive.horizon);
    let w = sample_disturbance(&exp.disturbance, seed, exp.hold, span)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let result = cosimulate(
        &exp.system,
        &exp.abstraction,
        &exp.interface,
        &exp.x0,
        &drive.start,
        &drive.signal,
        &w,
        span,
        exp.dt,
    );
    match result {
        Ok(run) => {
            let kl = KLBound::new(&exp.certificate, exp.eta, exp.w_bar());
            let delta0 = run.companion_errors()[0];
            let envelope_ok = run
                .times
                .iter()
                .zip(run.companion_errors())
                .all(|(t, e)| e <= kl.envelope(delta0, *t) + ENVELOPE_TOL);
            let max_input = run.u.iter().map(|u| u.amax()).fold(0.0, f64::max);
            let record = TrialRecord {
                trial: index,
                seed,
                max_err: run.max_output_error(),
                admissible: true,
                max_interface_deviation: run.max_interface_deviation(),
                max_input,
                envelope_ok,
                failure: None,
            };
            Ok((record, Some(run)))
        }
        Err(e) => {
            let admissible = !matches!(e, HierarchyError::AdmissibilityViolation { .. });
            Ok((
                TrialRecord {
                    trial: index,
                    seed,
                    max_err: f64::INFINITY,
                    admissible,
                    max_interface_deviation: f64::NAN,
                    max_input: f64::NAN,
                    envelope_ok: false,
                    failure: Some(e.to_string()),
                },
                None,
            ))
        }
    }
}

fn run_csv(run: &PairedRun) -> Vec<u8> {
    let mut buf = Vec::new();
    run.write_csv(&mut buf).expect("in-memory write");
    buf
}

fn records_csv(records: &[TrialRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "trial,seed,max_err,admissible,max_interface_deviation,max_input,envelope_ok,failure"
    )
    .expect("in-memory write");
    for r in records {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{}",
            r.trial,
            r.seed,
            r.max_err,
            r.admissible,
            r.max_interface_deviation,
            r.max_input,
            r.envelope_ok,
            r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";")
        )
        .expect("in-memory write");
    }
    buf
}

fn interface_bound(exp: &Experiment) -> f64 {
    certificates::interface_margin(&exp.certificate, exp.eta, exp.w_bar())
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn run_summary(command: &str, exp: &Experiment, drive: &AbstractDrive, records: &[TrialRecord]) -> (Value, bool) {
    let max_err = records.iter().map(|r| r.max_err).fold(0.0, f64::max);
    let admissible = records.iter().all(|r| r.admissible);
    let failures = records.iter().filter(|r| !r.passed(exp.epsilon)).count();
    let passed = failures == 0;
    let summary = json!({
        "command": command,
        "config": exp.name,
        "max_err": finite_or_null(max_err),
        "eps": exp.epsilon,
        "eta": exp.eta,
        "admissible": admissible,
        "trials": records.len(),
        "seed": exp.seed,
        "no_trials": records.is_empty(),
        "failures": failures,
        "passed": passed,
        "envelope_ok": records.iter().all(|r| r.envelope_ok),
        "max_interface_deviation": finite_or_null(
            records.iter().map(|r| r.max_interface_deviation).fold(0.0, f64::max)
        ),
        "interface_bound": interface_bound(exp),
        "max_input": finite_or_null(records.iter().map(|r| r.max_input).fold(0.0, f64::max)),
        "horizon": drive.horizon,
        "dt": exp.dt,
        "disturbance_sup": exp.w_bar(),
    });
    (summary, passed)
}

pub fn simulate(exp: &Experiment) -> Result<Outcome, CliError> {
    let drive = abstract_drive(exp)?;
    let (record, run) = trial(exp, &drive, 0, exp.seed)?;
    if let Some(run) = &run {
        write_file(&exp.output_dir, "trajectory.csv", &run_csv(run))?;
    }
    let (mut summary, passed) = run_summary("simulate", exp, &drive, std::slice::from_ref(&record));
    summary["failure"] = json!(record.failure);
    write_json(&exp.output_dir, "simulate.json", &summary)?;
    Ok(Outcome {
        summary,
        passed,
        failure_code: 4,
    })
}

/// Runs `exp.realizations` trials with seeds `seed + i` in parallel; results
/// are collected in trial order. Only the first trial's trace is kept.
pub fn monte_carlo(exp: &Experiment, drive: &AbstractDrive) -> Result<(Vec<TrialRecord>, Option<Vec<u8>>), CliError> {
    let results: Vec<Result<(TrialRecord, Option<Vec<u8>>), CliError>> = (0..exp.realizations)
        .into_par_iter()
        .map(|i| {
            let (record, run) = trial(exp, drive, i, exp.seed.wrapping_add(i as u64))?;
            let csv = if i == 0 { run.as_ref().map(run_csv) } else { None };
            Ok((record, csv))
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut first = None;
    for r in results {
        let (record, csv) = r?;
        if record.trial == 0 {
            first = csv;
        }
        records.push(record);
    }
    Ok((records, first))
}

pub fn montecarlo(exp: &Experiment) -> Result<Outcome, CliError> {
    let drive = abstract_drive(exp)?;
    let (records, first) = monte_carlo(exp, &drive)?;
    write_file(&exp.output_dir, "montecarlo.csv", &records_csv(&records))?;
    if let Some(csv) = first {
        write_file(&exp.output_dir, "trajectory_0.csv", &csv)?;
    }
    let (summary, passed) = run_summary("montecarlo", exp, &drive, &records);
    write_json(&exp.output_dir, "montecarlo.json", &summary)?;
    Ok(Outcome {
        summary,
        passed,
        failure_code: 4,
    })
}

pub fn plan(exp: &Experiment) -> Result<Outcome, CliError> {
    if exp.workspace.is_none() {
        return Err(CliError::Config("the plan command needs a workspace".into()));
    }
    let exp = Experiment {
        abstract_input: AbstractInput::Plan,
        ..exp.clone()
    };
    let drive = abstract_drive(&exp)?;
    let (graph, plan, refined) = drive.plan.as_ref().expect("plan inputs produce a plan");
    let q = exp.abstraction.quantizer();

    let mut buf = Vec::new();
    plan.write_csv(q, &mut buf).expect("in-memory write");
    write_file(&exp.output_dir, "plan.csv", &buf)?;
    let mut buf = Vec::new();
    refined.write_schedule_csv(&mut buf).expect("in-memory write");
    write_file(&exp.output_dir, "schedule.csv", &buf)?;
    let mut buf = Vec::new();
    refined.run.continuous.write_csv(&mut buf).expect("in-memory write");
    write_file(&exp.output_dir, "abstract.csv", &buf)?;

    let (records, first) = monte_carlo(&exp, &drive)?;
    write_file(&exp.output_dir, "montecarlo.csv", &records_csv(&records))?;
    if let Some(csv) = first {
        write_file(&exp.output_dir, "trajectory_0.csv", &csv)?;
    }
    let (mut summary, passed) = run_summary("plan", &exp, &drive, &records);
    summary["plan"] = json!({
        "vertices": graph.vertices.len(),
        "prefix_len": plan.prefix.len(),
        "cycle_len": plan.cycle.len(),
        "order": plan.order,
        "valid": true,
        "tube_max": refined.max_tube_distance(),
    });
    write_json(&exp.output_dir, "plan.json", &summary)?;
    Ok(Outcome {
        summary,
        passed,
        failure_code: 4,
    })
}
