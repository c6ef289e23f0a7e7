//! The control interface and paired co-simulation of a concrete system with
//! its abstraction.
//!
//! The pair runs on one augmented RK4 state `(x_1, x_hat_2)`; at every stage
//! the abstract input `v` is evaluated on `x_hat_2`, the quantized state
//! `x_2 = Q(x_hat_2)` is formed, and the interface produces the concrete
//! input `u = u_v(t, v, x_1, x_2)`. Input admissibility is a hard monitor: an
//! interface output outside `U` aborts the run.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Aabb;
use crate::lattice::{LatticeError, LatticePoint};
use crate::numkernel::{self, Matrix, NumError, Vector};
use crate::systems::{
    sample_disturbance, AbstractSystem, ConcreteSystem, Signal, SystemError, DEFAULT_HOLD,
    MEMBERSHIP_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HierarchyError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("interface input {u:?} at t = {t} leaves the input set")]
    AdmissibilityViolation { t: f64, u: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl From<NumError> for HierarchyError {
    fn from(e: NumError) -> Self {
        HierarchyError::System(e.into())
    }
}

impl From<LatticeError> for HierarchyError {
    fn from(e: LatticeError) -> Self {
        HierarchyError::System(e.into())
    }
}

type InterfaceFn = Arc<dyn Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync>;

/// `u = u_v(t, v, x_1, x_2)`.
#[derive(Clone)]
pub enum ControlInterface {
    /// `u = v + gain (x_1 - x_2)`.
    Affine { gain: Matrix },
    Custom(InterfaceFn),
}

impl std::fmt::Debug for ControlInterface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlInterface::Affine { gain } => f.debug_struct("Affine").field("gain", gain).finish(),
            ControlInterface::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl ControlInterface {
    pub fn affine(gain: Matrix) -> Self {
        ControlInterface::Affine { gain }
    }

    /// `u = v`.
    pub fn pass_through(m: usize, n: usize) -> Self {
        ControlInterface::Affine {
            gain: Matrix::zeros(m, n),
        }
    }

    pub fn apply(&self, t: f64, v: &Vector, x1: &Vector, x2: &Vector) -> Vector {
        match self {
            ControlInterface::Affine { gain } => v + gain * (x1 - x2),
            ControlInterface::Custom(f) => f(t, v, x1, x2),
        }
    }
}

/// Initial abstract state `Q(x_1(0))`.
pub fn pair_initial(abs: &AbstractSystem, x1_0: &Vector) -> Result<LatticePoint, HierarchyError> {
    Ok(abs.quantizer().quantize(x1_0)?)
}

/// Sampled paired run.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub times: Vec<f64>,
    pub x1: Vec<Vector>,
    pub x_hat: Vec<Vector>,
    pub x2: Vec<Vector>,
    pub y1: Vec<Vector>,
    pub y2: Vec<Vector>,
    pub u: Vec<Vector>,
    pub v: Vec<Vector>,
}

impl PairedRun {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `||y_1(t) - y_2(t)||` per sample.
    pub fn output_errors(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y2).map(|(a, b)| (a - b).norm()).collect()
    }

    pub fn max_output_error(&self) -> f64 {
        self.output_errors().into_iter().fold(0.0, f64::max)
    }

    /// `||x_1(t) - x_2(t)||` per sample.
    pub fn state_errors(&self) -> Vec<f64> {
        self.x1.iter().zip(&self.x2).map(|(a, b)| (a - b).norm()).collect()
    }

    /// `||x_1(t) - x_hat_2(t)||` per sample.
    pub fn companion_errors(&self) -> Vec<f64> {
        self.x1.iter().zip(&self.x_hat).map(|(a, b)| (a - b).norm()).collect()
    }

    /// `max_t ||u(t) - v(t)||`.
    pub fn max_interface_deviation(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// CSV with header
    /// `t,x1_1..,xhat2_1..,x2_1..,y1_1..,y2_1..,err,u_1..,v_1..`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let dims = |s: &[Vector]| s.first().map_or(0, |x| x.len());
        let (n, l, m, k) = (dims(&self.x1), dims(&self.y1), dims(&self.u), dims(&self.v));
        let mut header = vec!["t".to_string()];
        for (name, d) in [("x1", n), ("xhat2", n), ("x2", n), ("y1", l), ("y2", l)] {
            header.extend((1..=d).map(|i| format!("{name}_{i}")));
        }
        header.push("err".into());
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend((1..=k).map(|i| format!("v_{i}")));
        writeln!(out, "{}", header.join(","))?;
        let errs = self.output_errors();
        for i in 0..self.len() {
            write!(out, "{}", self.times[i])?;
            for s in [&self.x1[i], &self.x_hat[i], &self.x2[i], &self.y1[i], &self.y2[i]] {
                for v in s.iter() {
                    write!(out, ",{v}")?;
                }
            }
            write!(out, ",{}", errs[i])?;
            for s in [&self.u[i], &self.v[i]] {
                for v in s.iter() {
                    write!(out, ",{v}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

struct Stage {
    u: Vector,
    v: Vector,
    x2: Vector,
    dx: Vector,
}

#[allow(clippy::too_many_arguments)]
fn stage(
    sys: &ConcreteSystem,
    abs: &AbstractSystem,
    interface: &ControlInterface,
    v_sig: &Signal,
    w_sig: &Signal,
    t: f64,
    z: &Vector,
    x2: &Vector,
    n: usize,
) -> Result<Stage, HierarchyError> {
    let x1 = z.rows(0, n).into_owned();
    let xh = z.rows(n, n).into_owned();
    let v = v_sig.eval(t, &xh);
    if !abs.admits(t, &v) {
        return Err(SystemError::InputMapViolation {
            t,
            v: v.as_slice().to_vec(),
        }
        .into());
    }
    let x2 = x2.clone();
    let u = interface.apply(t, &v, &x1, &x2);
    if !sys.input_set().contains(&u, MEMBERSHIP_TOL) {
        return Err(HierarchyError::AdmissibilityViolation {
            t,
            u: u.as_slice().to_vec(),
        });
    }
    let w = w_sig.eval(t, &x1);
    if !sys.disturbance_set().contains(&w, MEMBERSHIP_TOL) {
        return Err(SystemError::DisturbanceViolation {
            t,
            w: w.as_slice().to_vec(),
        }
        .into());
    }
    let d1 = sys.eval(t, &x1, &u, &w);
    let d2 = abs.eval(t, &xh, &v);
    let dx = Vector::from_iterator(2 * n, d1.iter().chain(d2.iter()).copied());
    Ok(Stage { u, v, x2, dx })
}

/// Resolution of located cell switches, relative to the step.
pub const SWITCH_TOL: f64 = 1e-12;

/// Co-simulates the pair from `x_1(0) = x1_0` and the lattice point `x2_0`.
/// Feedback abstract inputs receive `x_hat_2`, feedback disturbances `x_1`.
#[allow(clippy::too_many_arguments)]
pub fn cosimulate(
    sys: &ConcreteSystem,
    abs: &AbstractSystem,
    interface: &ControlInterface,
    x1_0: &Vector,
    x2_0: &LatticePoint,
    v: &Signal,
    w: &Signal,
    t_span: (f64, f64),
    dt: f64,
) -> Result<PairedRun, HierarchyError> {
    let n = sys.state_dim();
    if x1_0.len() != n || x2_0.dim() != n || abs.quantizer().dim() != n {
        return Err(HierarchyError::DimensionMismatch(format!(
            "state dimension {n}, x1(0) has length {}, x2(0) has dimension {}",
            x1_0.len(),
            x2_0.dim()
        )));
    }
    let q = abs.quantizer();
    let mut x2 = q.coordinates(x2_0);
    let mut z = Vector::from_iterator(2 * n, x1_0.iter().chain(x2.iter()).copied());
    let times = numkernel::time_grid(t_span.0, t_span.1, dt)?;
    numkernel::check_state(&z, times[0])?;
    let cell = |z: &Vector| q.quantize_coords(&z.rows(n, n).into_owned());

    let mut run = PairedRun {
        times: Vec::with_capacity(times.len()),
        x1: Vec::with_capacity(times.len()),
        x_hat: Vec::with_capacity(times.len()),
        x2: Vec::with_capacity(times.len()),
        y1: Vec::with_capacity(times.len()),
        y2: Vec::with_capacity(times.len()),
        u: Vec::with_capacity(times.len()),
        v: Vec::with_capacity(times.len()),
    };
    let record = |run: &mut PairedRun, t: f64, z: &Vector, x2: &Vector| -> Result<(), HierarchyError> {
        let s = stage(sys, abs, interface, v, w, t, z, x2, n)?;
        run.y1.push(sys.output().apply(&z.rows(0, n).into_owned()));
        run.y2.push(abs.output().apply(&s.x2));
        run.times.push(t);
        run.x1.push(z.rows(0, n).into_owned());
        run.x_hat.push(z.rows(n, n).into_owned());
        run.x2.push(s.x2);
        run.u.push(s.u);
        run.v.push(s.v);
        Ok(())
    };
    record(&mut run, times[0], &z, &x2)?;

    // x2 is held within a step; a change of cell is located by bisection,
    // samples on both sides of the switch are recorded and integration
    // restarts there.
    for win in times.windows(2) {
        let mut t = win[0];
        while t < win[1] {
            let h = win[1] - t;
            let held = x2.clone();
            let mut field = |s: f64, y: &Vector| -> Result<Vector, HierarchyError> {
                Ok(stage(sys, abs, interface, v, w, s, y, &held, n)?.dx)
            };
            let next = numkernel::rk4_step(&mut field, t, &z, h)?;
            let next_cell = cell(&next)?;
            if next_cell == x2 {
                z = next;
                t = win[1];
                continue;
            }
            let (mut lo, mut hi) = (0.0, h);
            let mut hi_state = next;
            let mut lo_state = z.clone();
            while hi - lo > SWITCH_TOL * h.max(1.0) {
                let mid = 0.5 * (lo + hi);
                let zm = numkernel::rk4_step(&mut field, t, &z, mid)?;
                if cell(&zm)? == x2 {
                    lo = mid;
                    lo_state = zm;
                } else {
                    hi = mid;
                    hi_state = zm;
                }
            }
            if lo > 0.0 {
                record(&mut run, t + lo, &lo_state, &x2)?;
            }
            x2 = cell(&hi_state)?;
            z = hi_state;
            if hi >= h {
                t = win[1];
            } else {
                t += hi;
                numkernel::check_state(&z, t)?;
                record(&mut run, t, &z, &x2)?;
            }
        }
        numkernel::check_state(&z, win[1])?;
        record(&mut run, win[1], &z, &x2)?;
    }
    Ok(run)
}

/// Largest output error of a run against the target precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Closeness {
    pub max_err: f64,
    pub worst_time: f64,
    pub within: bool,
}

pub fn check_closeness(run: &PairedRun, epsilon: f64) -> Closeness {
    let (worst_time, max_err) = run
        .times
        .iter()
        .zip(run.output_errors())
        .fold((run.times.first().copied().unwrap_or(0.0), 0.0), |acc, (t, e)| {
            if e > acc.1 {
                (*t, e)
            } else {
                acc
            }
        });
    Closeness {
        max_err,
        worst_time,
        within: max_err <= epsilon,
    }
}

/// Trials for robust simulation checks: every initial state is paired with
/// every abstract input and every disturbance seed.
#[derive(Debug, Clone)]
pub struct TrialBudget {
    pub initial_states: Vec<Vector>,
    pub inputs: Vec<Signal>,
    pub seeds: Vec<u64>,
    pub hold: f64,
    pub t_span: (f64, f64),
    pub dt: f64,
}

impl TrialBudget {
    pub const DEFAULT_STATES: usize = 10;
    pub const DEFAULT_INPUTS: usize = 5;
    pub const DEFAULT_SEEDS: usize = 20;

    /// 10 initial states drawn from `states`, 5 constant abstract inputs (the
    /// first is zero, the rest drawn from `inputs`), 20 consecutive seeds.
    pub fn sampled(states: &Aabb, inputs: &Aabb, seed: u64, t_span: (f64, f64), dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial_states = (0..Self::DEFAULT_STATES).map(|_| states.sample(&mut rng)).collect();
        let mut signals = vec![Signal::zero(inputs.dim())];
        signals.extend((1..Self::DEFAULT_INPUTS).map(|_| Signal::Constant(inputs.sample(&mut rng))));
        Self {
            initial_states,
            inputs: signals,
            seeds: (0..Self::DEFAULT_SEEDS as u64).map(|i| seed.wrapping_add(i)).collect(),
            hold: DEFAULT_HOLD,
            t_span,
            dt,
        }
    }

    pub fn trials(&self) -> usize {
        self.initial_states.len() * self.inputs.len() * self.seeds.len()
    }

    /// `(state, input, seed)` indices of trial `k`.
    pub fn trial(&self, k: usize) -> (usize, usize, usize) {
        let per_state = self.inputs.len() * self.seeds.len();
        (k / per_state, (k % per_state) / self.seeds.len(), k % self.seeds.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub max_err: f64,
    /// Set when the run aborted.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RobustVerdict {
    Pass,
    /// A trial exceeded the precision or aborted while the disturbance
    /// hypothesis held.
    Counterexample(TrialOutcome),
    /// A trial failed but `sup ||w||` was not below the disturbance radius,
    /// so the guarantee did not apply.
    HypothesisNotMet(TrialOutcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustReport {
    pub verdict: RobustVerdict,
    pub trials: Vec<TrialOutcome>,
    pub max_err: f64,
    pub disturbance_hypothesis: bool,
}

impl RobustReport {
    pub fn passed(&self) -> bool {
        self.verdict == RobustVerdict::Pass
    }
}

/// Runs every trial of `budget` in parallel and reports the first failure in
/// trial order. The disturbance hypothesis is `max ||w|| < eps_tilde` over
/// the disturbance set.
pub fn check_robust_simulation(
    sys: &ConcreteSystem,
    abs: &AbstractSystem,
    interface: &ControlInterface,
    epsilon: f64,
    eps_tilde: f64,
    budget: &TrialBudget,
) -> RobustReport {
    let w_set = sys.disturbance_set();
    let hypothesis = w_set.max_norm() < eps_tilde;
    let trials: Vec<TrialOutcome> = (0..budget.trials())
        .into_par_iter()
        .map(|k| {
            let (si, vi, wi) = budget.trial(k);
            let seed = budget.seeds[wi];
            let x1_0 = &budget.initial_states[si];
            let result = pair_initial(abs, x1_0).and_then(|x2_0| {
                let w = sample_disturbance(w_set, seed, budget.hold, budget.t_span)?;
                cosimulate(
                    sys,
                    abs,
                    interface,
                    x1_0,
                    &x2_0,
                    &budget.inputs[vi],
                    &w,
                    budget.t_span,
                    budget.dt,
                )
            });
            match result {
                Ok(run) => TrialOutcome {
                    index: k,
                    seed,
                    max_err: run.max_output_error(),
                    failure: None,
                },
                Err(e) => TrialOutcome {
                    index: k,
                    seed,
                    max_err: f64::INFINITY,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let max_err = trials.iter().map(|t| t.max_err).fold(0.0, f64::max);
    let verdict = match trials
        .iter()
        .find(|t| t.failure.is_some() || !(t.max_err <= epsilon))
    {
        None => RobustVerdict::Pass,
        Some(t) if hypothesis => RobustVerdict::Counterexample(t.clone()),
        Some(t) => RobustVerdict::HypothesisNotMet(t.clone()),
    };
    RobustReport {
        verdict,
        trials,
        max_err,
        disturbance_hypothesis: hypothesis,
    }
}
